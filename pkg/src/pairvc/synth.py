"""Miniature multi-speaker flow TTS that emits content-locked utterance pairs.

One call to :meth:`PairSynthesizer.generate_pair` encodes the text once,
predicts durations under a randomly chosen speaker token, samples a single
prior latent ``z_p`` and then runs the speaker-conditioned inverse flow and
decoder once per speaker.  Both waveforms therefore share content, duration
and prosody and differ only through speaker conditioning.

The learned parts (text encoder, duration predictor, projector, flow) are
randomly initialised from a seed; the decoder is a procedural
source-filter synthesiser whose timbre comes from a per-speaker voice
table.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from importlib import resources

import numpy as np
import torch
from scipy import signal
from torch import nn

from .audio import Waveform
from .config import AudioSection, SynthSection
from .flows import SpeakerFlow
from .gaussian import GaussianSequence


class SynthError(ValueError):
    pass


def load_vocabulary() -> list[str]:
    data = json.loads(resources.files("pairvc").joinpath("data/vocab.json").read_text())
    return list(data["symbols"])


VOCAB = load_vocabulary()
SYMBOL_TO_ID = {s: i for i, s in enumerate(VOCAB)}


@dataclass(frozen=True)
class TextInput:
    tokens: tuple[int, ...]

    def __post_init__(self):
        tokens = tuple(int(t) for t in self.tokens)
        if not tokens:
            raise SynthError("text input must be non-empty")
        bad = [t for t in tokens if not 0 <= t < len(VOCAB)]
        if bad:
            raise SynthError(f"token ids out of vocabulary: {bad}")
        object.__setattr__(self, "tokens", tokens)

    @classmethod
    def from_symbols(cls, text: str) -> "TextInput":
        try:
            return cls(tuple(SYMBOL_TO_ID[s] for s in text.split()))
        except KeyError as exc:
            raise SynthError(f"unknown symbol {exc.args[0]!r}") from None

    def __len__(self):
        return len(self.tokens)


@dataclass(frozen=True)
class Voice:
    f0: float
    formant_scale: float
    tilt: float
    breath: float


@dataclass(frozen=True, eq=False)
class SpeakerId:
    id: int
    embedding: np.ndarray
    voice: Voice

    def __eq__(self, other):
        return isinstance(other, SpeakerId) and self.id == other.id

    def __hash__(self):
        return hash(self.id)


class SpeakerTable:
    """Fixed table of synthetic speakers drawn from a seed."""

    def __init__(self, n_speakers: int, dim: int, seed: int,
                 f0_range=(90.0, 240.0), formant_range=(0.9, 1.12)):
        rng = np.random.default_rng(seed)
        self.speakers = []
        log_lo, log_hi = np.log(f0_range[0]), np.log(f0_range[1])
        for i in range(n_speakers):
            emb = rng.standard_normal(dim)
            voice = Voice(f0=float(np.exp(rng.uniform(log_lo, log_hi))),
                          formant_scale=float(rng.uniform(*formant_range)),
                          tilt=float(rng.uniform(0.6, 1.6)),
                          breath=float(rng.uniform(0.02, 0.12)))
            self.speakers.append(SpeakerId(i, emb / np.linalg.norm(emb), voice))

    def __len__(self):
        return len(self.speakers)

    def __getitem__(self, i) -> SpeakerId:
        if not 0 <= i < len(self.speakers):
            raise SynthError(f"speaker id {i} outside table of {len(self.speakers)}")
        return self.speakers[i]


@dataclass(frozen=True, eq=False)
class LatentPlan:
    h_text: np.ndarray      # (n_tokens, hidden)
    durations: np.ndarray   # (n_tokens,)
    prior: GaussianSequence  # expanded (frames, latent_dim)
    z_p: np.ndarray         # (frames, latent_dim)
    noise_w: np.ndarray     # (n_tokens, w_dim)
    g_choice: int

    def __post_init__(self):
        if int(self.durations.sum()) != self.prior.n_frames or self.z_p.shape != self.prior.mu.shape:
            raise SynthError("latent plan frame counts disagree")

    @property
    def n_frames(self) -> int:
        return self.z_p.shape[0]


@dataclass(frozen=True, eq=False)
class SyntheticPair:
    source: Waveform
    target: Waveform
    plan: LatentPlan
    src_speaker: SpeakerId
    tgt_speaker: SpeakerId
    text: TextInput
    seed: int


# --------------------------------------------------------------------------
# learned parts


class _TextEncoder(nn.Module):
    def __init__(self, vocab: int, hidden: int, kernel: int):
        super().__init__()
        self.emb = nn.Embedding(vocab, hidden)
        nn.init.normal_(self.emb.weight, 0.0, 1.0)
        self.convs = nn.ModuleList(nn.Conv1d(hidden, hidden, kernel, padding=kernel // 2) for _ in range(2))

    def forward(self, tokens):
        x = self.emb(tokens).transpose(1, 2)
        for conv in self.convs:
            x = x + 0.5 * torch.tanh(conv(x))
        return x


class _DurationPredictor(nn.Module):
    def __init__(self, hidden: int, speaker_dim: int, w_dim: int, base_frames: float = 6.0):
        super().__init__()
        self.base = math.log(base_frames)
        self.cond = nn.Linear(speaker_dim, hidden)
        self.noise = nn.Conv1d(w_dim, hidden, 1)
        self.conv = nn.Conv1d(hidden, hidden, 3, padding=1)
        self.proj = nn.Conv1d(hidden, 1, 1)

    def forward(self, h, g, w):
        x = h + self.cond(g).unsqueeze(-1) + 0.3 * self.noise(w)
        x = torch.tanh(self.conv(x))
        return self.base + 0.4 * torch.tanh(3.0 * self.proj(x)[:, 0])


class _Projector(nn.Module):
    def __init__(self, hidden: int, latent: int):
        super().__init__()
        self.proj = nn.Conv1d(hidden, 2 * latent, 1)

    def forward(self, h):
        mu, raw = self.proj(h).chunk(2, dim=1)
        sigma = nn.functional.softplus(raw - 0.5) + 1e-4
        return 1.5 * mu, sigma


# --------------------------------------------------------------------------
# procedural decoder

_FORMANTS = np.array([500.0, 1500.0, 2600.0])
_BANDWIDTHS = np.array([90.0, 130.0, 220.0])


def _frame_params(z: np.ndarray, voice: Voice):
    """Per-frame F0, voicing, formants and gain from latents ``(T, D)``."""
    t = np.tanh(z)
    f0 = voice.f0 * np.exp(0.12 * t[:, 0])
    voiced = z[:, 1] < 1.3
    formants = _FORMANTS[None, :] * voice.formant_scale * np.exp(np.stack(
        [0.5 * t[:, 2], 0.45 * t[:, 3], 0.3 * t[:, 4]], axis=1))
    amps = np.stack([np.ones(len(z)), 0.6 * np.exp(0.6 * t[:, 6]), 0.35 * np.exp(0.6 * t[:, 7])], axis=1)
    gain = 0.12 * np.exp(0.35 * t[:, 5])
    return f0, voiced, formants, amps, gain


def _envelope(freqs, formants, amps, tilt):
    """Spectral envelope evaluated at ``freqs`` (T, K) for each frame."""
    f = freqs[..., None]
    peaks = amps[:, None, :] / (1.0 + ((f - formants[:, None, :]) / _BANDWIDTHS) ** 2)
    return peaks.sum(-1) * (1.0 + freqs / 400.0) ** (-tilt)


def _interp_frames(values: np.ndarray, hop: int, n: int) -> np.ndarray:
    centers = np.arange(values.shape[0]) * hop
    grid = np.arange(n)
    if values.ndim == 1:
        return np.interp(grid, centers, values)
    return np.stack([np.interp(grid, centers, v) for v in values.T], axis=1)


def procedural_decode(z: np.ndarray, voice: Voice, sample_rate: int, hop: int,
                      noise_seed: int = 0) -> np.ndarray:
    frames = z.shape[0]
    n = frames * hop
    nyq = sample_rate / 2
    f0, voiced, formants, amps, gain = _frame_params(z, voice)

    k_max = int(nyq // (voice.f0 * math.exp(-0.12))) + 1
    k = np.arange(1, k_max + 1)
    harm_freqs = f0[:, None] * k[None, :]
    harm = _envelope(harm_freqs, formants, amps, voice.tilt) * (harm_freqs < nyq * 0.95)
    harm *= (gain / np.sqrt(0.5 * np.sum(harm ** 2, axis=1) + 1e-12))[:, None]

    vmask = _interp_frames(voiced.astype(np.float64), hop, n)
    f0_s = _interp_frames(f0, hop, n)
    phase = 2 * np.pi * np.cumsum(f0_s / sample_rate)
    amp_s = _interp_frames(harm, hop, n)
    amp_s *= (k[None, :] * f0_s[:, None] < nyq * 0.95)
    voiced_part = vmask * np.einsum("nk,nk->n", amp_s, np.sin(phase[:, None] * k[None, :]))

    # shaped noise: frication on unvoiced frames, breath on voiced ones
    rng = np.random.default_rng(noise_seed)
    white = rng.standard_normal(n)
    nper = 2 * hop
    _, _, spec = signal.stft(white, nperseg=nper, noverlap=nper - hop, boundary="zeros", padded=True)
    bins = np.linspace(0, nyq, spec.shape[0])
    idx = np.minimum(np.arange(spec.shape[1]), frames - 1)
    env = _envelope(np.broadcast_to(bins, (frames, bins.size)), formants * 1.6, amps, voice.tilt * 0.5)
    env /= np.sqrt(np.mean(env ** 2, axis=1, keepdims=True)) + 1e-12
    level = np.where(voiced, voice.breath, 1.0) * gain
    spec = spec * (env * level[:, None])[idx].T
    _, noise = signal.istft(spec, nperseg=nper, noverlap=nper - hop, boundary=True)
    noise = noise[:n]
    if noise.size < n:
        noise = np.pad(noise, (0, n - noise.size))
    return np.clip(voiced_part + noise, -1.0, 1.0)


# --------------------------------------------------------------------------


class PairSynthesizer:
    """Generator of shared-latent source/target utterance pairs."""

    def __init__(self, audio: AudioSection, cfg: SynthSection, speakers: SpeakerTable | None = None,
                 language_seed: int | None = None):
        self.audio = audio
        self.cfg = cfg
        self.speakers = speakers or SpeakerTable(cfg.n_speakers, cfg.speaker_dim, cfg.speaker_seed)
        torch_gen = torch.Generator().manual_seed(cfg.model_seed)
        with torch.random.fork_rng():
            torch.manual_seed(cfg.model_seed)
            self.text_encoder = _TextEncoder(len(VOCAB), cfg.text_hidden, cfg.context_kernel)
            self.duration_predictor = _DurationPredictor(cfg.text_hidden, cfg.speaker_dim, cfg.w_dim)
            self.projector = _Projector(cfg.text_hidden, cfg.latent_dim)
            self.flow = SpeakerFlow(cfg.latent_dim, cfg.text_hidden, cfg.flow_layers, kernel_size=3,
                                    n_layers=2, cond_dim=cfg.speaker_dim)
            if language_seed is not None:
                torch.manual_seed(language_seed)
                nn.init.normal_(self.text_encoder.emb.weight, 0.0, 1.0)
        if cfg.flow_strength > 0:
            self.flow.perturb_(torch_gen, cfg.flow_strength)
        for m in (self.text_encoder, self.duration_predictor, self.projector, self.flow):
            m.eval()
            m.requires_grad_(False)

    @classmethod
    def real_corpus(cls, audio: AudioSection, cfg: SynthSection) -> "PairSynthesizer":
        """Out-of-domain generator: unseen speakers with a wider voice range."""
        table = SpeakerTable(cfg.n_speakers, cfg.speaker_dim, cfg.real_speaker_seed,
                             f0_range=(80.0, 300.0), formant_range=(0.85, 1.2))
        return cls(audio, cfg, table, language_seed=cfg.real_language_seed)

    # building blocks ---------------------------------------------------

    def encode_text(self, text: TextInput) -> np.ndarray:
        tokens = torch.tensor([text.tokens], dtype=torch.long)
        return self.text_encoder(tokens)[0].T.numpy().astype(np.float64)

    @staticmethod
    def sample_speaker_token(src: SpeakerId, tgt: SpeakerId, rng: np.random.Generator) -> SpeakerId:
        # order-free draw: swapping src/tgt under one seed picks the same speaker
        first, second = sorted((src, tgt), key=lambda s: s.id)
        return first if rng.random() < 0.5 else second

    def predict_duration(self, h_text: np.ndarray, g: SpeakerId, w: np.ndarray) -> np.ndarray:
        h = torch.as_tensor(h_text.T[None], dtype=torch.float32)
        gv = torch.as_tensor(g.embedding[None], dtype=torch.float32)
        wv = torch.as_tensor(w.T[None], dtype=torch.float32)
        logd = self.duration_predictor(h, gv, wv)[0].numpy()
        return np.maximum(1, np.round(np.exp(logd))).astype(np.int64)

    def project(self, h_text: np.ndarray):
        mu, sigma = self.projector(torch.as_tensor(h_text.T[None], dtype=torch.float32))
        return mu[0].T.numpy().astype(np.float64), sigma[0].T.numpy().astype(np.float64)

    def inverse_flow(self, z_p: np.ndarray, speaker: SpeakerId) -> np.ndarray:
        z = torch.as_tensor(z_p.T[None], dtype=torch.float32)
        g = torch.as_tensor(speaker.embedding[None], dtype=torch.float32)
        return self.flow.inverse(z, g)[0].T.numpy().astype(np.float64)

    def forward_flow(self, z: np.ndarray, speaker: SpeakerId) -> np.ndarray:
        x = torch.as_tensor(z.T[None], dtype=torch.float32)
        g = torch.as_tensor(speaker.embedding[None], dtype=torch.float32)
        return self.flow(x, g)[0][0].T.numpy().astype(np.float64)

    def decode(self, z: np.ndarray, speaker: SpeakerId) -> Waveform:
        if z.shape[0] < 1:
            raise SynthError("decode needs at least one frame")
        audio = procedural_decode(z, speaker.voice, self.audio.sample_rate, self.audio.hop_length)
        return Waveform(audio, self.audio.sample_rate)

    # ---------------------------------------------------------------------

    def random_text(self, rng: np.random.Generator) -> TextInput:
        n = int(rng.integers(self.cfg.min_tokens, self.cfg.max_tokens + 1))
        return TextInput(tuple(int(t) for t in rng.integers(0, len(VOCAB), n)))

    def plan(self, text: TextInput, src: SpeakerId, tgt: SpeakerId, seed: int) -> LatentPlan:
        rng = np.random.default_rng(seed)
        h = self.encode_text(text)
        g = self.sample_speaker_token(src, tgt, rng)
        w = rng.standard_normal((len(text), self.cfg.w_dim))
        durations = self.predict_duration(h, g, w)
        mu, sigma = self.project(h)
        expanded = length_regulate(mu, sigma, durations)
        eps = rng.standard_normal(expanded.mu.shape)
        z_p = sample_latent(expanded, eps)
        return LatentPlan(h, durations, expanded, z_p, w, g.id)

    def generate_pair(self, text: TextInput, src: SpeakerId, tgt: SpeakerId, seed: int) -> SyntheticPair:
        plan = self.plan(text, src, tgt, seed)
        source = self.decode(self.inverse_flow(plan.z_p, src), src)
        target = self.decode(self.inverse_flow(plan.z_p, tgt), tgt)
        return SyntheticPair(source, target, plan, src, tgt, text, seed)

    def random_pair(self, seed: int) -> SyntheticPair:
        """Random text and an ordered pair of distinct speakers, all drawn from ``seed``."""
        if len(self.speakers) < 2:
            raise SynthError("need at least two speakers to form a pair")
        rng = np.random.default_rng([seed, 0x5EED])
        text = self.random_text(rng)
        i, j = rng.choice(len(self.speakers), 2, replace=False)
        return self.generate_pair(text, self.speakers[int(i)], self.speakers[int(j)], seed)

    def random_utterance(self, seed: int) -> tuple[Waveform, SpeakerId]:
        rng = np.random.default_rng([seed, 0x5EED])
        text = self.random_text(rng)
        spk = self.speakers[int(rng.integers(len(self.speakers)))]
        return self.generate_utterance(text, spk, seed), spk

    def generate_utterance(self, text: TextInput, speaker: SpeakerId, seed: int) -> Waveform:
        plan = self.plan(text, speaker, speaker, seed)
        return self.decode(self.inverse_flow(plan.z_p, speaker), speaker)


def length_regulate(mu: np.ndarray, sigma: np.ndarray, durations) -> GaussianSequence:
    """Repeat token ``i`` ``durations[i]`` times; zero durations drop the token."""
    durations = np.asarray(durations)
    if not (len(mu) == len(sigma) == len(durations)):
        raise SynthError("mu, sigma and durations must have equal length")
    if np.any(durations < 0):
        raise SynthError("durations must be non-negative")
    reps = durations.astype(np.int64)
    return GaussianSequence(np.repeat(mu, reps, axis=0), np.repeat(sigma, reps, axis=0))


def sample_latent(seq: GaussianSequence, eps: np.ndarray) -> np.ndarray:
    if eps.shape != seq.mu.shape:
        raise SynthError(f"eps shape {eps.shape} does not match {seq.mu.shape}")
    return seq.mu + seq.sigma * eps
