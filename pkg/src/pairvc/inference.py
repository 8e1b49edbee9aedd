"""Any-to-any conversion with a trained model.

Content comes from the source utterance, speaker identity from the
reference, and the source pitch contour is moved to the reference's
log-median before decoding.  Speaker labels and transcripts are never read.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Literal

import numpy as np

from .audio import AudioError, F0Contour, Waveform, extract_f0, read_wav, shift_f0, write_wav
from .manifest import ManifestError, read_manifest
from .model import VoiceConversionModel

logger = logging.getLogger(__name__)

EpsPolicy = Literal["zero", "sample"]


@dataclass
class Conversion:
    audio: Waveform
    source_f0: F0Contour
    target_f0: F0Contour  # contour fed to the decoder
    shifted: bool


def shifted_pitch(source_f0: F0Contour, reference_f0: F0Contour) -> tuple[F0Contour, bool]:
    """Source contour re-centred on the reference; falls back gracefully on silence."""
    if source_f0.n_voiced == 0:
        logger.warning("source has no voiced frames; decoding with the unvoiced pitch embedding")
        return source_f0, False
    if reference_f0.n_voiced == 0:
        logger.warning("reference has no voiced frames; keeping source pitch unchanged")
        return source_f0, False
    return shift_f0(source_f0, reference_f0), True


def convert(model: VoiceConversionModel, source: Waveform, reference: Waveform,
            eps_policy: EpsPolicy = "zero", seed: int = 0) -> Conversion:
    if eps_policy not in ("zero", "sample"):
        raise ValueError(f"unknown eps policy {eps_policy!r}")
    cfg = model.cfg
    model.eval()
    spk = model.speaker_embed(reference)  # checks reference length
    prior = model.extract_content(model.frontend_features(source))
    if eps_policy == "zero":
        z_p = prior.mu
    else:
        eps = np.random.default_rng(seed).standard_normal(prior.mu.shape)
        z_p = prior.mu + prior.sigma * eps
    z = model.flow_inverse(z_p, spk)

    f0_cfg = cfg.audio.f0
    src_f0 = extract_f0(source, f0_cfg)
    ref_f0 = extract_f0(reference, f0_cfg)
    f0, shifted = shifted_pitch(src_f0, ref_f0)
    audio = model.decode_audio(z, f0, spk)
    return Conversion(audio, src_f0, f0, shifted)


def batch_convert(model: VoiceConversionModel, manifest_path, out_dir, eps_policy: EpsPolicy = "zero",
                  seed: int = 0) -> dict:
    """Convert every ``(source, reference)`` pair of a manifest.

    Pairs are the manifest's ``src``/``tgt`` rows sharing a ``pair_id``; the
    ``tgt`` row supplies the reference audio.  Output goes to
    ``{pair_id}_cv.wav`` and one line per row to ``conversions.jsonl``.
    A failing row is logged and skipped.  Returns a summary dict.
    """
    manifest = read_manifest(manifest_path)  # unreadable -> fatal
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    pairs = manifest.pairs()
    if not pairs:
        logger.warning("manifest %s has no conversion pairs", manifest_path)
    done, failed = [], []
    with open(out_dir / "conversions.jsonl", "w") as log:
        for src, ref in pairs:
            row_id = src.pair_id
            try:
                result = convert(model, read_wav(manifest.resolve(src)), read_wav(manifest.resolve(ref)),
                                 eps_policy, seed)
                out = out_dir / f"{row_id}_cv.wav"
                write_wav(out, result.audio)
            except (AudioError, ManifestError, ValueError, OSError) as exc:
                logger.error("row %s skipped: %s", row_id, exc)
                failed.append(row_id)
                continue
            log.write(json.dumps({"id": row_id, "source": str(manifest.resolve(src)),
                                  "reference": str(manifest.resolve(ref)), "output": out.name,
                                  "shifted": result.shifted}) + "\n")
            done.append(row_id)
    return {"converted": done, "failed": failed, "out_dir": str(out_dir)}
