"""Run configuration: one TOML file per run, schema-validated, unknown keys rejected."""

from __future__ import annotations

import hashlib
import json
import os
from pathlib import Path
from typing import Literal

import tomli
import tomli_w
from pydantic import BaseModel, ConfigDict, ValidationError, model_validator

from .audio import F0Config, MelConfig

CONFIG_ENV = "PAIRVC_CONFIG"


class ConfigError(Exception):
    pass


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class AudioSection(_Section):
    sample_rate: int = 16000
    n_fft: int = 1024
    win_length: int = 1024
    hop_length: int = 256
    n_mels: int = 80
    f_min: float = 0.0
    f_max: float | None = None
    f0_min: float = 60.0
    f0_max: float = 500.0
    f0_frame_length: int = 1024
    voicing_threshold: float = 0.8
    min_rms: float = 1e-4

    @property
    def mel(self) -> MelConfig:
        return MelConfig(self.sample_rate, self.n_fft, self.win_length, self.hop_length,
                         self.n_mels, self.f_min, self.f_max)

    @property
    def f0(self) -> F0Config:
        return F0Config(self.sample_rate, self.hop_length, self.f0_frame_length, self.f0_min,
                        self.f0_max, self.voicing_threshold, self.min_rms)


class SynthSection(_Section):
    n_speakers: int = 8
    speaker_dim: int = 16
    text_hidden: int = 32
    latent_dim: int = 8
    w_dim: int = 4
    context_kernel: int = 3  # 1 disables cross-token context in the text encoder
    min_tokens: int = 16
    max_tokens: int = 22
    model_seed: int = 1234
    speaker_seed: int = 99
    # speakers of the held-out "real" corpus come from a disjoint table
    real_speaker_seed: int = 7777
    real_language_seed: int | None = None
    flow_layers: int = 2
    flow_strength: float = 0.3


class ModelSection(_Section):
    frontend_dim: int = 64
    frontend_mels: int = 32
    frontend_n_fft: int = 512
    frontend_context: int = 3
    frontend_seed: int = 2024
    content_hidden: int = 64
    content_layers: int = 3
    latent_dim: int = 16
    posterior_input: Literal["linear", "mel"] = "linear"
    posterior_hidden: int = 64
    posterior_layers: int = 3
    flow_layers: int = 4
    flow_hidden: int = 32
    flow_wn_layers: int = 2
    flow_mean_only: bool = False
    speaker_dim: int = 32
    speaker_hidden: int = 64
    f0_dim: int = 16
    decoder_hidden: int = 64
    decoder_layers: int = 3
    n_harmonics: int = 48
    n_noise_bands: int = 16
    decoder_uses_speaker: bool = True
    disc_channels: int = 16
    disc_scales: int = 2


class LossSection(_Section):
    mel: float = 45.0
    kl: float = 1.0
    adv: float = 1.0
    fm: float = 1.0
    speaker_aux: float = 0.0


class PhaseSection(_Section):
    steps: int
    lr_g: float = 2e-4
    lr_d: float = 2e-4
    freeze: list[str]


_SUBMODULES = {"frontend", "content", "posterior", "flow", "f0_encoder", "decoder",
               "speaker_encoder", "discriminator"}


class TrainSection(_Section):
    batch_size: int = 8
    segment_frames: int = 62
    betas: tuple[float, float] = (0.8, 0.99)
    eps: float = 1e-9
    lr_decay: float = 0.999875
    checkpoint_every: int = 1000
    log_every: int = 1
    freeze_check_every: int = 100
    phase1: PhaseSection = PhaseSection(steps=5000, freeze=["frontend"])
    phase2: PhaseSection = PhaseSection(steps=2000, freeze=["frontend", "content"])

    @model_validator(mode="after")
    def _freeze_contract(self):
        for name, ph, required in (("phase1", self.phase1, {"frontend"}),
                                   ("phase2", self.phase2, {"frontend", "content"})):
            unknown = set(ph.freeze) - _SUBMODULES
            if unknown:
                raise ValueError(f"{name}.freeze: unknown submodules {sorted(unknown)}")
            missing = required - set(ph.freeze)
            if missing:
                raise ValueError(f"{name}.freeze must contain {sorted(missing)}")
        return self


class RunConfig(_Section):
    seed: int = 0
    audio: AudioSection = AudioSection()
    synth: SynthSection = SynthSection()
    model: ModelSection = ModelSection()
    loss: LossSection = LossSection()
    train: TrainSection = TrainSection()

    def model_hash(self) -> str:
        """Hash of everything that shapes checkpoint contents."""
        blob = json.dumps({"audio": self.audio.model_dump(), "model": self.model.model_dump()},
                          sort_keys=True)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def to_toml(self) -> str:
        return tomli_w.dumps(self.model_dump(exclude_none=True))

    def with_overrides(self, **sections) -> "RunConfig":
        data = self.model_dump()
        for key, value in sections.items():
            if isinstance(value, dict):
                data[key] = _merge(data[key], value)
            else:
                data[key] = value
        return RunConfig.model_validate(data)


def _merge(base: dict, upd: dict) -> dict:
    out = dict(base)
    for k, v in upd.items():
        out[k] = _merge(out[k], v) if isinstance(v, dict) and isinstance(out.get(k), dict) else v
    return out


def load_config(path=None) -> RunConfig:
    if path is None:
        path = os.environ.get(CONFIG_ENV)
    if path is None:
        return RunConfig()
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config not found: {path}")
    try:
        data = tomli.loads(path.read_text())
        return RunConfig.model_validate(data)
    except (tomli.TOMLDecodeError, ValidationError) as exc:
        raise ConfigError(f"invalid config {path}: {exc}".replace("\n", "; ")) from exc


def write_snapshot(config: RunConfig, out_dir) -> Path:
    out = Path(out_dir) / "resolved_config.toml"
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(config.to_toml())
    return out
