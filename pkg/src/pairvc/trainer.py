"""Two-phase training.

Phase 1 trains on synthetic pairs: the prior comes from the *source*
utterance, posterior, speaker embedding and F0 from the *target*, and the
mel loss is measured against the target (``L_cv``).  Phase 2 fine-tunes on
unlabeled audio by self-reconstruction (``L_rec``) with the front-end and
content extractor frozen.

Batch composition and every random draw depend only on ``(seed, phase,
step)``, so an interrupted run resumed from a checkpoint produces the same
parameters as an uninterrupted one.
"""

from __future__ import annotations

import hashlib
import io
import json
import logging
import time
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch

from .audio import Waveform, extract_f0, read_wav
from .config import RunConfig
from .losses import LossError, adv_losses, feature_matching, flow_kl_loss, mel_l1, total_losses
from .manifest import Manifest
from .model import SUBMODULES, VoiceConversionModel

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT = 1


class TrainingError(RuntimeError):
    pass


class FrozenParameterDrift(TrainingError):
    pass


class TrainingDiverged(TrainingError):
    pass


class CheckpointMismatch(TrainingError):
    pass


# --------------------------------------------------------------------------
# checkpoints


def submodule_hash(module: torch.nn.Module) -> str:
    h = hashlib.sha256()
    for name, tensor in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(tensor.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def save_checkpoint(path, model: VoiceConversionModel, phase: int, step: int, extra: dict | None = None):
    state = {
        "format": CHECKPOINT_FORMAT,
        "config_hash": model.cfg.model_hash(),
        "config": model.cfg.model_dump(),
        "phase": phase,
        "step": step,
        "params": {name: model.submodule(name).state_dict() for name in SUBMODULES},
    }
    if extra:
        state.update(extra)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    buf = io.BytesIO()
    torch.save(state, buf)
    path.write_bytes(buf.getvalue())
    return path


def read_checkpoint(path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise TrainingError(f"checkpoint not found: {path}")
    return torch.load(path, map_location="cpu", weights_only=False)


def load_checkpoint(path, cfg: RunConfig | None = None, force: bool = False):
    """Build a model from a checkpoint, refusing on config-hash mismatch unless forced."""
    state = read_checkpoint(path)
    if cfg is None:
        cfg = RunConfig.model_validate(state["config"])
    if state["config_hash"] != cfg.model_hash() and not force:
        raise CheckpointMismatch(
            f"config hash mismatch: checkpoint {state['config_hash']} vs config {cfg.model_hash()}")
    model = VoiceConversionModel(cfg)
    for name in SUBMODULES:
        model.submodule(name).load_state_dict(state["params"][name])
    model.eval()
    return model, state


# --------------------------------------------------------------------------
# data


@dataclass
class _Item:
    src_wav: np.ndarray
    tgt_wav: np.ndarray
    src_feats: np.ndarray  # (D, T) frozen front-end features of the full source
    tgt_f0: np.ndarray     # (T,)
    speaker: int | None
    paired: bool


class _Dataset:
    def __init__(self, items: list[_Item], cfg: RunConfig):
        if not items:
            raise TrainingError("dataset empty")
        self.items = items
        self.cfg = cfg

    def __len__(self):
        return len(self.items)


def _pad_to(x: np.ndarray, n: int) -> np.ndarray:
    return x if x.size >= n else np.pad(x, (0, n - x.size))


def _prepare(model: VoiceConversionModel, cfg: RunConfig, src: Waveform, tgt: Waveform, speaker):
    seg = cfg.train.segment_frames * cfg.audio.hop_length
    if len(src) != len(tgt):
        raise TrainingError("paired utterances must have equal length")
    s = Waveform(_pad_to(src.samples, seg), src.sample_rate)
    t = s if tgt is src else Waveform(_pad_to(tgt.samples, seg), tgt.sample_rate)
    feats = model.frontend_features(s).T.astype(np.float32)
    f0 = extract_f0(t, cfg.audio.f0).values.astype(np.float32)
    return _Item(s.samples.astype(np.float32), t.samples.astype(np.float32), feats, f0, speaker,
                 paired=tgt is not src)


def pair_dataset(model, cfg: RunConfig, pairs) -> _Dataset:
    """``pairs``: iterable of ``(source Waveform, target Waveform, target speaker or None)``."""
    items = []
    for src, tgt, spk in pairs:
        items.append(_prepare(model, cfg, src, tgt, spk))
    return _Dataset(items, cfg)


def real_dataset(model, cfg: RunConfig, waves) -> _Dataset:
    """Phase-2 data: bare waveforms only."""
    return _Dataset([_prepare(model, cfg, w, w, None) for w in waves], cfg)


def manifest_pairs(manifest: Manifest):
    pairs = manifest.pairs()
    for src, tgt in pairs:
        if src.speaker_id is not None and src.speaker_id == tgt.speaker_id:
            raise TrainingError(f"pair {src.pair_id}: source and target speakers must differ")
        yield read_wav(manifest.resolve(src)), read_wav(manifest.resolve(tgt)), tgt.speaker_id


def manifest_real(manifest: Manifest):
    # only waveforms leave this function: no transcripts, no speaker labels
    for rec in manifest.by_role("real"):
        yield read_wav(manifest.resolve(rec))


# --------------------------------------------------------------------------


@dataclass
class StepRecord:
    step: int
    losses: dict
    wall_ms: float
    grad_norm: float

    def to_json(self) -> str:
        return json.dumps(asdict(self))


def _speaker_aux(emb, labels):
    """In-batch centroid softmax over speaker labels (GE2E-style)."""
    labels = torch.as_tensor(labels)
    uniq = torch.unique(labels)
    if uniq.numel() < 2:
        return emb.sum() * 0.0
    cents = torch.stack([emb[labels == u].mean(0) for u in uniq])
    cents = cents / cents.norm(dim=-1, keepdim=True)
    logits = 10.0 * emb @ cents.T
    target = torch.stack([(uniq == l).nonzero()[0, 0] for l in labels])
    return torch.nn.functional.cross_entropy(logits, target)


class Trainer:
    def __init__(self, model: VoiceConversionModel, cfg: RunConfig, phase: int, dataset: _Dataset,
                 reconstruction_control: bool = False):
        """``reconstruction_control`` lets phase 1 run on self-pairs (source is target), i.e. the
        reconstruction-only ablation used by the leakage comparison."""
        if phase not in (1, 2):
            raise TrainingError(f"phase must be 1 or 2, got {phase}")
        self.model = model
        self.cfg = cfg
        self.phase = phase
        self.data = dataset
        ph = cfg.train.phase1 if phase == 1 else cfg.train.phase2
        self.phase_cfg = ph
        self.freeze = tuple(sorted(ph.freeze))
        if phase == 1 and not reconstruction_control:
            for it in dataset.items:
                if not it.paired:
                    raise TrainingError("phase 1 needs paired data with distinct source and target")
        for name in SUBMODULES:
            model.submodule(name).requires_grad_(name not in self.freeze)
        model.frontend.projection.requires_grad_(False)
        model.train()
        t = cfg.train
        self.opt_g = torch.optim.AdamW(list(model.generator_parameters()), ph.lr_g, betas=t.betas, eps=t.eps)
        self.opt_d = torch.optim.AdamW(model.discriminator.parameters(), ph.lr_d, betas=t.betas, eps=t.eps)
        self.sched_g = torch.optim.lr_scheduler.ExponentialLR(self.opt_g, t.lr_decay)
        self.sched_d = torch.optim.lr_scheduler.ExponentialLR(self.opt_d, t.lr_decay)
        self.step = 0
        self.frozen_hashes = self.hash_frozen()

    # -- freezing ----------------------------------------------------------

    def hash_frozen(self) -> dict:
        return {name: submodule_hash(self.model.submodule(name)) for name in self.freeze}

    def check_frozen(self):
        now = self.hash_frozen()
        drifted = [n for n in self.freeze if now[n] != self.frozen_hashes[n]]
        if drifted:
            raise FrozenParameterDrift(f"frozen parameters changed: {drifted}")

    # -- batches -----------------------------------------------------------

    def batch(self, step: int):
        cfg = self.cfg
        rng = np.random.default_rng([cfg.seed, self.phase, step])
        seg_f = cfg.train.segment_frames
        hop = cfg.audio.hop_length
        idx = rng.integers(0, len(self.data), cfg.train.batch_size)
        src, tgt, feats, f0, spk = [], [], [], [], []
        for i in idx:
            it = self.data.items[i]
            total = it.src_feats.shape[1]
            off = int(rng.integers(0, total - seg_f + 1))
            sl = slice(off * hop, (off + seg_f) * hop)
            src.append(_pad_to(it.src_wav[sl], seg_f * hop))
            tgt.append(_pad_to(it.tgt_wav[sl], seg_f * hop))
            feats.append(it.src_feats[:, off:off + seg_f])
            f0.append(it.tgt_f0[off:off + seg_f])
            spk.append(-1 if it.speaker is None else it.speaker)
        return (torch.from_numpy(np.stack(tgt)), torch.from_numpy(np.stack(feats)),
                torch.from_numpy(np.stack(f0)), spk)

    # -- one update --------------------------------------------------------

    def generator_losses(self, out, real_fmaps, tgt_mel, speakers=None):
        """Generator terms; ``real_fmaps`` come from the discriminator pass of this step."""
        m = self.model
        fake_scores, fake_fmaps = m.discriminator(out.wav)
        adv_g = sum(torch.mean((f - 1) ** 2) for f in fake_scores)
        fm = feature_matching(real_fmaps, fake_fmaps)
        rec = mel_l1(m.spectral.log_mel(out.wav).transpose(1, 2), tgt_mel.transpose(1, 2))
        kl = flow_kl_loss(out.z_p, out.post_sigma, out.logdet, out.prior_mu, out.prior_sigma)
        extras = {}
        if self.cfg.loss.speaker_aux > 0 and speakers is not None and min(speakers) >= 0:
            extras["speaker_aux"] = self.cfg.loss.speaker_aux * _speaker_aux(out.spk, speakers)
        return {"kl": kl, "rec_or_cv": rec, "adv_g": adv_g, "fm": fm}, extras

    def generator_objective(self, tgt_wav, src_feats, tgt_f0, eps, noise):
        """Weighted generator loss for fixed inputs (used for gradient checks)."""
        m = self.model
        tgt_mel = m.spectral.log_mel(tgt_wav)
        out = m.train_forward(src_feats, m.posterior_input(tgt_wav), tgt_mel, tgt_f0, eps, noise)
        with torch.no_grad():
            _, real_fmaps = m.discriminator(tgt_wav)
        parts, extras = self.generator_losses(out, real_fmaps, tgt_mel)
        parts["adv_d"] = torch.zeros(())
        total_g, _, _ = total_losses(parts, self.cfg.loss, self.phase, extras)
        return total_g

    def step_noise(self, step: int, batch: int, frames: int, samples: int):
        seed = int(np.random.default_rng([self.cfg.seed, self.phase, step, 1]).integers(2 ** 62))
        gen = torch.Generator().manual_seed(seed)
        eps = torch.randn(batch, self.cfg.model.latent_dim, frames, generator=gen)
        noise = torch.randn(batch, samples, generator=gen)
        return eps, noise

    def train_step(self) -> StepRecord:
        t0 = time.perf_counter()
        step = self.step + 1
        m = self.model
        tgt_wav, src_feats, tgt_f0, spk = self.batch(step)
        eps, noise = self.step_noise(step, *src_feats.shape[::2], tgt_wav.shape[-1])
        tgt_spec = m.posterior_input(tgt_wav)
        tgt_mel = m.spectral.log_mel(tgt_wav)
        out = m.train_forward(src_feats, tgt_spec, tgt_mel, tgt_f0, eps, noise)

        # discriminator first, on a detached fake
        b = tgt_wav.shape[0]
        scores, fmaps = m.discriminator(torch.cat([tgt_wav, out.wav.detach()]))
        real_scores, fake_scores = [s[:b] for s in scores], [s[b:] for s in scores]
        real_fmaps = [[f[:b].detach() for f in scale] for scale in fmaps]
        loss_d, _ = adv_losses(real_scores, fake_scores)
        if not torch.isfinite(loss_d):
            raise TrainingDiverged(f"step {step}: non-finite loss term 'adv_d'")
        if "discriminator" not in self.freeze:
            self.opt_d.zero_grad(set_to_none=True)
            loss_d.backward()
            self.opt_d.step()

        # the generator pass only needs input gradients through the discriminator
        m.discriminator.requires_grad_(False)
        try:
            parts, extras = self.generator_losses(out, real_fmaps, tgt_mel, spk)
        finally:
            m.discriminator.requires_grad_("discriminator" not in self.freeze)
        parts["adv_d"] = loss_d.detach()
        try:
            total_g, _, record = total_losses(parts, self.cfg.loss, self.phase, extras)
        except LossError as exc:
            raise TrainingDiverged(f"step {step}: {exc}") from exc
        self.opt_g.zero_grad(set_to_none=True)
        total_g.backward()
        params = [p for g in self.opt_g.param_groups for p in g["params"] if p.grad is not None]
        grad_norm = float(torch.linalg.vector_norm(torch.stack([p.grad.norm() for p in params]))) if params else 0.0
        if not np.isfinite(grad_norm):
            raise TrainingDiverged(f"step {step}: non-finite gradient norm")
        self.opt_g.step()
        self.sched_g.step()
        self.sched_d.step()
        self.step = step
        if step % self.cfg.train.freeze_check_every == 0:
            self.check_frozen()
        return StepRecord(step, record.as_dict(), (time.perf_counter() - t0) * 1e3, grad_norm)

    # -- persistence -------------------------------------------------------

    def save(self, path):
        return save_checkpoint(path, self.model, self.phase, self.step, {
            "optim": {"g": self.opt_g.state_dict(), "d": self.opt_d.state_dict(),
                      "sched_g": self.sched_g.state_dict(), "sched_d": self.sched_d.state_dict()},
            "frozen_hashes": self.frozen_hashes,
        })

    def restore(self, state: dict):
        if state.get("phase") != self.phase or "optim" not in state:
            raise TrainingError("resume checkpoint is not a training checkpoint of this phase")
        for name in SUBMODULES:
            self.model.submodule(name).load_state_dict(state["params"][name])
        self.opt_g.load_state_dict(state["optim"]["g"])
        self.opt_d.load_state_dict(state["optim"]["d"])
        self.sched_g.load_state_dict(state["optim"]["sched_g"])
        self.sched_d.load_state_dict(state["optim"]["sched_d"])
        self.step = int(state["step"])
        self.frozen_hashes = self.hash_frozen()
        if state.get("frozen_hashes") and any(state["frozen_hashes"].get(k) != v
                                              for k, v in self.frozen_hashes.items()):
            raise FrozenParameterDrift("resume checkpoint disagrees with its recorded frozen hashes")


def run(cfg: RunConfig, phase: int, manifest: Manifest | None, out_dir, init=None, resume=None,
        dataset: _Dataset | None = None, steps: int | None = None, force: bool = False):
    """Train one phase and return the path of the final checkpoint.

    Checkpoints ``ckpt_XXXXXX.pt`` are written at step 0, every
    ``checkpoint_every`` steps and at the end; ``final.pt`` mirrors the last
    one.  StepRecords go to ``train_log.jsonl``.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if phase == 2 and init is None and resume is None:
        raise TrainingError("phase 2 needs a phase-1 checkpoint (--init)")
    if init is not None:
        model, state = load_checkpoint(init, cfg, force=force)
        if phase == 2 and state["phase"] != 1 and resume is None:
            raise TrainingError(f"{init} is not a phase-1 checkpoint")
    else:
        torch.manual_seed(cfg.seed)
        model = VoiceConversionModel(cfg)

    if dataset is None:
        if manifest is None or len(manifest) == 0:
            raise TrainingError("dataset empty")
        dataset = (pair_dataset(model, cfg, manifest_pairs(manifest)) if phase == 1
                   else real_dataset(model, cfg, manifest_real(manifest)))
    trainer = Trainer(model, cfg, phase, dataset)
    log_mode = "w"
    if resume is not None:
        trainer.restore(read_checkpoint(resume))
        log_mode = "a"
    total = steps if steps is not None else trainer.phase_cfg.steps
    every = cfg.train.checkpoint_every
    logger.info("phase %d: %d steps, loss weights %s", phase, total, cfg.loss.model_dump())

    last = trainer.save(out_dir / f"ckpt_{trainer.step:06d}.pt")
    with open(out_dir / "train_log.jsonl", log_mode) as log:
        if log_mode == "w":
            log.write(json.dumps({"loss_weights": cfg.loss.model_dump(), "phase": phase}) + "\n")
        while trainer.step < total:
            rec = trainer.train_step()
            if rec.step % cfg.train.log_every == 0 or rec.step == total:
                log.write(rec.to_json() + "\n")
                log.flush()
            if rec.step % every == 0 or rec.step == total:
                trainer.check_frozen()
                last = trainer.save(out_dir / f"ckpt_{rec.step:06d}.pt")
    trainer.check_frozen()
    final = out_dir / "final.pt"
    final.write_bytes(Path(last).read_bytes())
    return final
