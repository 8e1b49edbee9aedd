"""Conversion network: frozen front-end, content prior, posterior encoder,
speaker flow, F0 encoder, source-filter decoder, speaker encoder and a
multi-scale waveform discriminator.

Internal tensors follow the ``(batch, channels, frames)`` convention.  The
waveform-level methods on :class:`VoiceConversionModel` are the public
per-utterance API and return numpy-backed domain types.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .audio import (LOG_FLOOR, AudioError, F0Contour, MelConfig, Waveform, mel_filterbank,
                    num_frames)
from .config import RunConfig
from .flows import WN, SpeakerFlow
from .gaussian import GaussianSequence

SIGMA_FLOOR = 1e-4
MIN_SPEAKER_SECONDS = 0.5
SUBMODULES = ("frontend", "content", "posterior", "flow", "f0_encoder", "decoder",
              "speaker_encoder", "discriminator")


class ModelError(ValueError):
    pass


def positive(raw):
    return F.softplus(raw) + SIGMA_FLOOR


# --------------------------------------------------------------------------
# spectral transforms


class Spectral(nn.Module):
    """Torch twin of :mod:`pairvc.audio` spectra on the same framing grid."""

    def __init__(self, cfg: MelConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        n_fft, win = cfg.n_fft, cfg.win_length
        w = torch.zeros(n_fft, dtype=torch.float64)
        off = (n_fft - win) // 2
        w[off:off + win] = 0.5 - 0.5 * torch.cos(2 * math.pi * torch.arange(win, dtype=torch.float64) / win)
        self.register_buffer("window", w.float(), persistent=False)
        self.register_buffer("fbank", torch.from_numpy(mel_filterbank(cfg)).float(), persistent=False)

    def n_frames(self, n_samples: int) -> int:
        return num_frames(n_samples, self.cfg.hop_length)

    def magnitude(self, wav):
        """``wav (B, N)`` to ``|STFT| (B, n_fft//2+1, T)``."""
        n = wav.shape[-1]
        if n < self.cfg.win_length:
            raise AudioError("input too short")
        hop, n_fft = self.cfg.hop_length, self.cfg.n_fft
        t = self.n_frames(n)
        left = n_fft // 2
        right = (t - 1) * hop + n_fft - left - n
        x = F.pad(wav, (left, right))
        frames = x.unfold(-1, n_fft, hop)[:, :t]
        spec = torch.fft.rfft(frames * self.window.to(wav.dtype), dim=-1)
        mag = torch.sqrt(spec.real ** 2 + spec.imag ** 2 + 1e-14)
        return mag.transpose(1, 2)

    def log_mel(self, wav):
        mel = torch.matmul(self.fbank.to(wav.dtype), self.magnitude(wav))
        return torch.log(torch.clamp(mel, min=LOG_FLOOR))

    def log_linear(self, wav):
        return torch.log(torch.clamp(self.magnitude(wav), min=LOG_FLOOR))


# --------------------------------------------------------------------------
# submodules


class Frontend(nn.Module):
    """Frozen content front-end: mean-normalised log-mel, +-context frame
    stacking and a fixed seeded random projection."""

    def __init__(self, cfg: RunConfig):
        super().__init__()
        a, m = cfg.audio, cfg.model
        self.spectral = Spectral(MelConfig(a.sample_rate, m.frontend_n_fft, m.frontend_n_fft,
                                           a.hop_length, m.frontend_mels, a.f_min, a.f_max))
        self.context = m.frontend_context
        in_dim = m.frontend_mels * (2 * self.context + 1)
        gen = torch.Generator().manual_seed(m.frontend_seed)
        proj = torch.randn(m.frontend_dim, in_dim, generator=gen) / math.sqrt(in_dim)
        self.projection = nn.Parameter(proj, requires_grad=False)

    def forward(self, wav):
        mel = self.spectral.log_mel(wav)
        mel = mel - mel.mean(dim=-1, keepdim=True)
        c = self.context
        padded = F.pad(mel, (c, c), mode="replicate")
        t = mel.shape[-1]
        stacked = torch.cat([padded[..., i:i + t] for i in range(2 * c + 1)], dim=1)
        return torch.einsum("od,bdt->bot", self.projection.to(wav.dtype), stacked)


class ResConvStack(nn.Module):
    def __init__(self, channels: int, n_layers: int, kernel_size: int = 5, dilate: bool = False):
        super().__init__()
        self.convs = nn.ModuleList()
        for i in range(n_layers):
            d = 2 ** i if dilate else 1
            self.convs.append(nn.Conv1d(channels, channels, kernel_size, dilation=d,
                                        padding=d * (kernel_size - 1) // 2))

    def forward(self, x):
        for conv in self.convs:
            x = x + conv(F.leaky_relu(x, 0.1))
        return x


class ContentExtractor(nn.Module):
    def __init__(self, in_dim: int, hidden: int, latent: int, n_layers: int):
        super().__init__()
        self.pre = nn.Conv1d(in_dim, hidden, 1)
        self.body = ResConvStack(hidden, n_layers)
        self.proj = nn.Conv1d(hidden, 2 * latent, 1)

    def forward(self, feats):
        mu, raw = self.proj(self.body(self.pre(feats))).chunk(2, dim=1)
        return mu, positive(raw)


class PosteriorEncoder(nn.Module):
    def __init__(self, in_dim: int, hidden: int, latent: int, n_layers: int, cond_dim: int):
        super().__init__()
        self.pre = nn.Conv1d(in_dim, hidden, 1)
        self.enc = WN(hidden, 5, n_layers, cond_dim)
        self.proj = nn.Conv1d(hidden, 2 * latent, 1)

    def forward(self, spec, g, eps=None):
        # spec arrives in log-magnitude units; rescale to O(1)
        h = self.pre((spec + 5.0) / 4.0)
        mu, raw = self.proj(self.enc(h, g)).chunk(2, dim=1)
        sigma = positive(raw)
        if eps is None:
            eps = torch.randn_like(mu)
        return mu, sigma, mu + sigma * eps


class PitchFeatures(NamedTuple):
    embedding: torch.Tensor  # (B, P, T)
    f0: torch.Tensor         # (B, T) Hz, 0 where unvoiced


class F0Encoder(nn.Module):
    """Per-frame pitch embedding; unvoiced frames share one learned vector."""

    def __init__(self, dim: int):
        super().__init__()
        self.voiced = nn.Sequential(nn.Linear(1, dim), nn.LeakyReLU(0.1), nn.Linear(dim, dim))
        self.unvoiced = nn.Parameter(torch.randn(dim) * 0.1)

    def forward(self, f0):
        voiced = (f0 > 0).unsqueeze(-1)
        lf0 = torch.log(torch.where(f0 > 0, f0, torch.ones_like(f0)))
        x = ((lf0 - math.log(150.0)) / 0.5).unsqueeze(-1)
        emb = torch.where(voiced, self.voiced(x), self.unvoiced.to(f0.dtype).expand(*f0.shape, -1))
        return PitchFeatures(emb.transpose(1, 2), f0)


def upsample_frames(x, hop: int):
    """Linear interpolation with frame ``i`` pinned to sample ``i * hop``."""
    t = x.shape[-1]
    shape = x.shape
    x = x.reshape(-1, 1, t)
    # hold the last frame for the trailing hop
    x = torch.cat([x, x[..., -1:]], dim=-1)
    y = F.interpolate(x, size=t * hop + 1, mode="linear", align_corners=True)[..., :-1]
    return y.reshape(*shape[:-1], t * hop)


def _fill_unvoiced(f0):
    """Hold the previous voiced value (or the first voiced one) across gaps."""
    out = f0.clone()
    for b in range(f0.shape[0]):
        row = out[b]
        voiced = torch.nonzero(row > 0).flatten()
        if voiced.numel() == 0:
            row.fill_(100.0)
            continue
        idx = torch.zeros_like(row, dtype=torch.long)
        idx[voiced] = voiced
        idx = torch.cummax(idx, dim=0).values
        idx[: voiced[0]] = voiced[0]
        out[b] = row[idx]
    return out


class SourceFilterDecoder(nn.Module):
    """Frame-rate network predicting harmonic and noise-band amplitudes that
    drive a harmonic-plus-noise synthesiser excited at the given F0."""

    def __init__(self, latent: int, f0_dim: int, cond_dim: int, hidden: int, n_layers: int,
                 n_harmonics: int, n_bands: int, sample_rate: int, hop: int):
        super().__init__()
        self.sample_rate = sample_rate
        self.hop = hop
        self.n_harmonics = n_harmonics
        self.pre = nn.Conv1d(latent + f0_dim, hidden, 1)
        self.cond = nn.Linear(cond_dim, hidden) if cond_dim else None
        self.body = ResConvStack(hidden, n_layers, kernel_size=3, dilate=True)
        self.harm = nn.Conv1d(hidden, n_harmonics, 1)
        self.noise = nn.Conv1d(hidden, n_bands, 1)
        for head in (self.harm, self.noise):
            nn.init.normal_(head.weight, 0.0, 0.01)
            nn.init.constant_(head.bias, -3.0)
        self.noise_fft = 2 * hop
        n_bins = self.noise_fft // 2 + 1
        centers = torch.linspace(0, n_bins - 1, n_bands)
        bins = torch.arange(n_bins, dtype=torch.float32)
        interp = torch.clamp(1 - torch.abs(bins[:, None] - centers[None, :]) / (centers[1] - centers[0]), min=0)
        self.register_buffer("band_interp", interp, persistent=False)
        self.register_buffer("noise_window", torch.hann_window(self.noise_fft), persistent=False)

    @staticmethod
    def _amp(raw, scale: float):
        # exponentiated sigmoid, smooth and bounded
        return scale * torch.sigmoid(raw) ** math.log(10.0) + 1e-7

    def amplitudes(self, z, pitch: PitchFeatures, g=None):
        h = self.pre(torch.cat([z, pitch.embedding], dim=1))
        if self.cond is not None and g is not None:
            h = h + self.cond(g).unsqueeze(-1)
        h = F.leaky_relu(self.body(h), 0.1)
        return self._amp(self.harm(h), 0.5), self._amp(self.noise(h), 0.5)

    def forward(self, z, pitch: PitchFeatures, g=None, noise=None):
        harm_amp, band_amp = self.amplitudes(z, pitch, g)
        b, t = pitch.f0.shape
        n = t * self.hop
        nyq = self.sample_rate / 2

        with torch.no_grad():
            f0_s = upsample_frames(_fill_unvoiced(pitch.f0.double()), self.hop)
            # accumulate phase in double, wrap, then go back to working precision
            phase = torch.remainder(torch.cumsum(f0_s / self.sample_rate, dim=-1), 1.0).to(z.dtype)
            k = torch.arange(1, self.n_harmonics + 1, dtype=z.dtype, device=z.device)
            sines = torch.sin((2 * math.pi) * phase.unsqueeze(1) * k[None, :, None])
            sines = sines * (k[None, :, None] * f0_s.to(z.dtype).unsqueeze(1) < nyq)
            vmask = upsample_frames((pitch.f0 > 0).to(z.dtype), self.hop)
            # linear amplitude interpolation, evaluated frame by frame
            sines = sines.reshape(b, self.n_harmonics, t, self.hop)
            w = torch.arange(self.hop, dtype=z.dtype, device=z.device) / self.hop
        nxt = torch.cat([harm_amp[..., 1:], harm_amp[..., -1:]], dim=-1)
        cur_sum = torch.einsum("bkt,bkth->bth", harm_amp, sines)
        nxt_sum = torch.einsum("bkt,bkth->bth", nxt, sines)
        harmonic = (cur_sum * (1 - w) + nxt_sum * w).reshape(b, n) * vmask

        if noise is None:
            gen = torch.Generator().manual_seed(0)
            noise = torch.randn(b, n, generator=gen, dtype=z.dtype)
        spec = torch.stft(noise, self.noise_fft, self.hop, window=self.noise_window.to(z.dtype),
                          center=True, return_complex=True)
        env = torch.einsum("fk,bkt->bft", self.band_interp.to(z.dtype), band_amp)
        env = F.pad(env, (0, spec.shape[-1] - t), mode="replicate")
        shaped = torch.istft(spec * env, self.noise_fft, self.hop, window=self.noise_window.to(z.dtype),
                             center=True, length=n)
        return torch.clamp(harmonic + shaped, -1.0, 1.0)


class SpeakerEncoder(nn.Module):
    def __init__(self, n_mels: int, hidden: int, dim: int):
        super().__init__()
        self.convs = nn.ModuleList([nn.Conv1d(n_mels, hidden, 3, padding=1),
                                    nn.Conv1d(hidden, hidden, 3, padding=1),
                                    nn.Conv1d(hidden, hidden, 3, padding=1)])
        self.proj = nn.Linear(hidden, dim)

    def forward(self, mel):
        x = (mel + 5.0) / 4.0
        for conv in self.convs:
            x = F.leaky_relu(conv(x), 0.1)
        e = self.proj(x.mean(dim=-1))
        return e / torch.sqrt((e ** 2).sum(dim=-1, keepdim=True) + 1e-12)


class ScaleDiscriminator(nn.Module):
    def __init__(self, c: int):
        super().__init__()
        self.convs = nn.ModuleList([
            nn.Conv1d(1, c, 15, 2, padding=7),
            nn.Conv1d(c, 2 * c, 21, 4, groups=4, padding=10),
            nn.Conv1d(2 * c, 4 * c, 21, 4, groups=8, padding=10),
            nn.Conv1d(4 * c, 4 * c, 5, 1, padding=2),
        ])
        self.post = nn.Conv1d(4 * c, 1, 3, 1, padding=1)

    def forward(self, x):
        fmaps = []
        for conv in self.convs:
            x = F.leaky_relu(conv(x), 0.1)
            fmaps.append(x)
        x = self.post(x)
        fmaps.append(x)
        return x.flatten(1), fmaps


class MultiScaleDiscriminator(nn.Module):
    def __init__(self, channels: int, n_scales: int = 2):
        super().__init__()
        self.discs = nn.ModuleList(ScaleDiscriminator(channels) for _ in range(n_scales))
        self.pool = nn.AvgPool1d(4, 2, padding=2)

    def forward(self, wav):
        """``wav (B, N)`` to per-scale scores and feature maps."""
        x = wav.unsqueeze(1)
        scores, fmaps = [], []
        for i, d in enumerate(self.discs):
            if i:
                x = self.pool(x)
            s, f = d(x)
            scores.append(s)
            fmaps.append(f)
        return scores, fmaps


# --------------------------------------------------------------------------


@dataclass
class ConversionOutput:
    wav: torch.Tensor
    prior_mu: torch.Tensor
    prior_sigma: torch.Tensor
    post_mu: torch.Tensor
    post_sigma: torch.Tensor
    z: torch.Tensor
    z_p: torch.Tensor
    logdet: torch.Tensor
    spk: torch.Tensor


class VoiceConversionModel(nn.Module):
    def __init__(self, cfg: RunConfig):
        super().__init__()
        self.cfg = cfg
        a, m = cfg.audio, cfg.model
        self.mel_cfg = a.mel
        self.spectral = Spectral(a.mel)
        post_in = a.n_fft // 2 + 1 if m.posterior_input == "linear" else a.n_mels
        self.frontend = Frontend(cfg)
        self.content = ContentExtractor(m.frontend_dim, m.content_hidden, m.latent_dim, m.content_layers)
        self.posterior = PosteriorEncoder(post_in, m.posterior_hidden, m.latent_dim, m.posterior_layers,
                                          m.speaker_dim)
        self.flow = SpeakerFlow(m.latent_dim, m.flow_hidden, m.flow_layers, 5, m.flow_wn_layers,
                                m.speaker_dim, m.flow_mean_only)
        self.f0_encoder = F0Encoder(m.f0_dim)
        self.decoder = SourceFilterDecoder(m.latent_dim, m.f0_dim,
                                           m.speaker_dim if m.decoder_uses_speaker else 0,
                                           m.decoder_hidden, m.decoder_layers, m.n_harmonics,
                                           m.n_noise_bands, a.sample_rate, a.hop_length)
        self.speaker_encoder = SpeakerEncoder(a.n_mels, m.speaker_hidden, m.speaker_dim)
        self.discriminator = MultiScaleDiscriminator(m.disc_channels, m.disc_scales)

    def submodule(self, name: str) -> nn.Module:
        if name not in SUBMODULES:
            raise ModelError(f"unknown submodule {name!r}")
        return getattr(self, name)

    def generator_parameters(self):
        for name in SUBMODULES:
            if name != "discriminator":
                yield from (p for p in self.submodule(name).parameters() if p.requires_grad)

    # tensor-level ---------------------------------------------------------

    def posterior_input(self, wav):
        if self.cfg.model.posterior_input == "linear":
            return self.spectral.log_linear(wav)
        return self.spectral.log_mel(wav)

    def prior(self, feats):
        return self.content(feats)

    def align_f0(self, f0, n_frames: int):
        """Nearest-neighbour resample ``f0 (B, T')`` onto ``n_frames`` when off by <= 2."""
        t = f0.shape[-1]
        if t == n_frames:
            return f0
        if abs(t - n_frames) > 2:
            raise ModelError(f"F0 has {t} frames, latent has {n_frames}")
        idx = torch.clamp(torch.round(torch.arange(n_frames) * (t / n_frames)).long(), max=t - 1)
        return f0[..., idx]

    def convert_latent(self, z, f0, g, noise=None):
        pitch = self.f0_encoder(self.align_f0(f0, z.shape[-1]))
        return self.decoder(z, pitch, g if self.cfg.model.decoder_uses_speaker else None, noise)

    def train_forward(self, src_feats, tgt_spec, tgt_mel, tgt_f0, eps=None, noise=None) -> ConversionOutput:
        """Training path: prior from source features, posterior/speaker/F0 from target."""
        prior_mu, prior_sigma = self.content(src_feats)
        g = self.speaker_encoder(tgt_mel)
        post_mu, post_sigma, z = self.posterior(tgt_spec, g, eps)
        z_p, logdet = self.flow(z, g)
        wav = self.convert_latent(z, tgt_f0, g, noise)
        return ConversionOutput(wav, prior_mu, prior_sigma, post_mu, post_sigma, z, z_p, logdet, g)

    # waveform-level -------------------------------------------------------

    @staticmethod
    def _wav_tensor(wav: Waveform):
        return torch.tensor(np.asarray(wav.samples), dtype=torch.float32).unsqueeze(0)

    def _check_rate(self, wav: Waveform):
        if wav.sample_rate != self.cfg.audio.sample_rate:
            raise ModelError(f"expected {self.cfg.audio.sample_rate} Hz audio, got {wav.sample_rate}")

    @torch.no_grad()
    def frontend_features(self, wav: Waveform) -> np.ndarray:
        """Content features ``(T, frontend_dim)``."""
        self._check_rate(wav)
        return self.frontend(self._wav_tensor(wav))[0].T.double().numpy()

    @torch.no_grad()
    def extract_content(self, feats: np.ndarray) -> GaussianSequence:
        x = torch.as_tensor(feats.T[None], dtype=torch.float32)
        mu, sigma = self.content(x)
        return GaussianSequence(mu[0].T.double().numpy(), sigma[0].T.double().numpy())

    @torch.no_grad()
    def encode_posterior(self, wav: Waveform, spk: np.ndarray, eps: np.ndarray | None = None):
        self._check_rate(wav)
        spec = self.posterior_input(self._wav_tensor(wav))
        e = None if eps is None else torch.as_tensor(eps.T[None], dtype=torch.float32)
        mu, sigma, z = self.posterior(spec, torch.as_tensor(spk[None], dtype=torch.float32), e)
        return GaussianSequence(mu[0].T.double().numpy(), sigma[0].T.double().numpy()), z[0].T.double().numpy()

    @torch.no_grad()
    def flow_forward(self, z: np.ndarray, spk: np.ndarray):
        out, logdet = self.flow(torch.as_tensor(z.T[None], dtype=torch.float32),
                                torch.as_tensor(spk[None], dtype=torch.float32))
        return out[0].T.double().numpy(), float(logdet[0])

    @torch.no_grad()
    def flow_inverse(self, z_p: np.ndarray, spk: np.ndarray) -> np.ndarray:
        out = self.flow.inverse(torch.as_tensor(z_p.T[None], dtype=torch.float32),
                                torch.as_tensor(spk[None], dtype=torch.float32))
        return out[0].T.double().numpy()

    @torch.no_grad()
    def encode_f0(self, f0: F0Contour, n_frames: int | None = None) -> np.ndarray:
        x = torch.as_tensor(f0.values[None], dtype=torch.float32)
        if n_frames is not None:
            x = self.align_f0(x, n_frames)
        return self.f0_encoder(x).embedding[0].T.double().numpy()

    @torch.no_grad()
    def decode_audio(self, z: np.ndarray, f0: F0Contour, spk: np.ndarray) -> Waveform:
        zt = torch.as_tensor(z.T[None], dtype=torch.float32)
        f0t = torch.as_tensor(f0.values[None], dtype=torch.float32)
        g = torch.as_tensor(spk[None], dtype=torch.float32)
        wav = self.convert_latent(zt, f0t, g)
        return Waveform(wav[0].double().numpy(), self.cfg.audio.sample_rate)

    @torch.no_grad()
    def speaker_embed(self, wav: Waveform) -> np.ndarray:
        self._check_rate(wav)
        if wav.duration < MIN_SPEAKER_SECONDS:
            raise ModelError(f"speaker embedding needs >= {MIN_SPEAKER_SECONDS} s of audio")
        mel = self.spectral.log_mel(self._wav_tensor(wav))
        return self.speaker_encoder(mel)[0].double().numpy()

    @torch.no_grad()
    def discriminate(self, wav: Waveform):
        scores, fmaps = self.discriminator(self._wav_tensor(wav))
        return [s[0].numpy() for s in scores], [[f[0].numpy() for f in fm] for fm in fmaps]
