"""Objective metrics: pitch correlation, speaker similarity, clustering
probes for speaker leakage, frame alignment and score aggregation."""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from sklearn.cluster import KMeans
from sklearn.metrics import adjusted_rand_score, normalized_mutual_info_score, silhouette_score

from .audio import F0Contour, Waveform

logger = logging.getLogger(__name__)

MIN_JOINT_VOICED = 10

Embedder = Callable[[Waveform], np.ndarray]


class EvalError(ValueError):
    pass


# --------------------------------------------------------------------------
# pitch


def _resample_linear(values: np.ndarray, n: int) -> np.ndarray:
    if values.size == n:
        return values.astype(float)
    src = np.linspace(0.0, 1.0, values.size)
    return np.interp(np.linspace(0.0, 1.0, n), src, values.astype(float))


def f0_pcc(a: F0Contour, b: F0Contour) -> float:
    """Pearson correlation over jointly voiced frames.

    The shorter contour is linearly resampled to the longer one; values and
    voicing flags are resampled separately and a frame counts as voiced when
    its interpolated flag is at least 0.5.
    """
    n = max(len(a.values), len(b.values))
    va, vb = _resample_linear(a.values, n), _resample_linear(b.values, n)
    ma = _resample_linear(a.voiced.astype(float), n) >= 0.5
    mb = _resample_linear(b.voiced.astype(float), n) >= 0.5
    joint = ma & mb
    if joint.sum() < MIN_JOINT_VOICED:
        raise EvalError("insufficient voiced overlap")
    x, y = va[joint], vb[joint]
    x, y = x - x.mean(), y - y.mean()
    denom = math.sqrt(float(x @ x) * float(y @ y))
    if denom == 0.0:
        raise EvalError("constant contour: correlation undefined")
    return float(np.clip((x @ y) / denom, -1.0, 1.0))


# --------------------------------------------------------------------------
# speaker similarity


def _unit(v) -> np.ndarray:
    v = np.asarray(v, dtype=float).ravel()
    norm = np.linalg.norm(v)
    if norm == 0.0:
        raise EvalError("zero-norm embedding")
    return v / norm


def speaker_cosine(a: Waveform, b: Waveform, embedder: Embedder) -> float:
    for w in (a, b):
        if w.duration < 0.5:
            raise EvalError("speaker similarity needs >= 0.5 s of audio")
    return float(np.clip(_unit(embedder(a)) @ _unit(embedder(b)), -1.0, 1.0))


# --------------------------------------------------------------------------
# leakage probes


def clustering_probes(embeddings: Sequence, labels: Sequence, k: int | None = None,
                      seed: int = 0) -> tuple[float, float, float]:
    """k-means (10 seeded restarts) on utterance vectors; returns ``(ari, nmi, silhouette)``."""
    x = np.asarray(embeddings, dtype=float)
    labels = np.asarray(labels)
    if x.ndim != 2 or x.shape[0] != labels.shape[0]:
        raise EvalError("embeddings must be (items, dim) with one label per item")
    uniq, counts = np.unique(labels, return_counts=True)
    if uniq.size < 2 or counts.min() < 2:
        raise EvalError("need at least two speakers with two items each")
    k = uniq.size if k is None else k
    if k != uniq.size:
        raise EvalError(f"k={k} must equal the number of distinct speakers ({uniq.size})")
    if np.unique(x, axis=0).shape[0] < 2:
        raise EvalError("degenerate embeddings: fewer than two distinct points, silhouette undefined")
    pred = KMeans(n_clusters=k, n_init=10, random_state=seed).fit_predict(x)
    if np.unique(pred).size < 2:
        raise EvalError("degenerate clustering: a single cluster, silhouette undefined")
    ari = adjusted_rand_score(labels, pred)
    nmi = normalized_mutual_info_score(labels, pred)
    sil = silhouette_score(x, pred)
    return float(ari), float(nmi), float(sil)


def pooled(feats: np.ndarray) -> np.ndarray:
    """Utterance vector: mean over frames."""
    return np.asarray(feats, dtype=float).mean(axis=0)


# --------------------------------------------------------------------------
# alignment


@dataclass
class AlignmentResult:
    similarity: np.ndarray
    top1_path: np.ndarray
    diagonal_fraction: float


def alignment(a_feats: np.ndarray, b_feats: np.ndarray) -> AlignmentResult:
    """Frame-by-frame cosine matrix ``(T_a, T_b)`` and its top-1 path."""
    a = np.asarray(a_feats, dtype=float)
    b = np.asarray(b_feats, dtype=float)
    if a.ndim != 2 or b.ndim != 2 or a.shape[0] == 0 or b.shape[0] == 0:
        raise EvalError("alignment needs two non-empty (frames, dim) matrices")
    if a.shape[1] != b.shape[1]:
        raise EvalError(f"feature dims differ: {a.shape[1]} vs {b.shape[1]}")
    na, nb = np.linalg.norm(a, axis=1), np.linalg.norm(b, axis=1)
    if (na == 0).any() or (nb == 0).any():
        logger.warning("zero-norm frames (%d source, %d target); their similarities are set to 0",
                       int((na == 0).sum()), int((nb == 0).sum()))
    ua = np.divide(a, na[:, None], out=np.zeros_like(a), where=na[:, None] > 0)
    ub = np.divide(b, nb[:, None], out=np.zeros_like(b), where=nb[:, None] > 0)
    sim = np.clip(ua @ ub.T, -1.0, 1.0)
    path = sim.argmax(axis=1)
    ta, tb = a.shape[0], b.shape[0]
    expected = np.arange(ta) * (tb / ta)
    diag = float(np.mean(np.abs(expected - path) <= 1))
    return AlignmentResult(sim, path, diag)


def plot_similarity(result: AlignmentResult, path, title: str = ""):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 4))
    im = ax.imshow(result.similarity.T, origin="lower", aspect="auto", vmin=-1, vmax=1, cmap="viridis")
    ax.plot(np.arange(len(result.top1_path)), result.top1_path, "r.", markersize=2)
    ax.set_xlabel("source frame")
    ax.set_ylabel("target frame")
    ax.set_title(title or f"diagonal fraction {result.diagonal_fraction:.2f}")
    fig.colorbar(im, ax=ax)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return Path(path)


# --------------------------------------------------------------------------
# subjective score aggregation


def b_mos(mos: float, smos: float) -> float:
    for name, v in (("mos", mos), ("smos", smos)):
        if not (1.0 <= v <= 5.0):
            raise EvalError(f"{name}={v} outside [1, 5]")
    # round away binary noise, e.g. (3.42 + 3.48) / 2 = 3.4499999999999997
    return round((mos + smos) / 2, 10)


# --------------------------------------------------------------------------
# embedding export


def export_embeddings(items: Sequence[tuple[str, Waveform]], embedder: Embedder, out_path) -> Path:
    """Write ``id,e0,e1,...`` rows (CSV) or ``{"id", "vector"}`` lines (``.jsonl``)."""
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    vectors = [(item_id, np.asarray(embedder(w), dtype=float).ravel()) for item_id, w in items]
    if out_path.suffix == ".jsonl":
        with open(out_path, "w") as fh:
            for item_id, v in vectors:
                fh.write(json.dumps({"id": item_id, "vector": v.tolist()}) + "\n")
        return out_path
    dim = vectors[0][1].size if vectors else 0
    with open(out_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["id"] + [f"e{i}" for i in range(dim)])
        for item_id, v in vectors:
            writer.writerow([item_id] + [repr(float(x)) for x in v])
    return out_path


def read_embeddings(path) -> list[tuple[str, np.ndarray]]:
    path = Path(path)
    if path.suffix == ".jsonl":
        rows = [json.loads(l) for l in path.read_text().splitlines() if l.strip()]
        return [(r["id"], np.asarray(r["vector"], dtype=float)) for r in rows]
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        next(reader, None)
        return [(row[0], np.asarray([float(x) for x in row[1:]])) for row in reader]


# --------------------------------------------------------------------------


@dataclass
class MetricReport:
    secs: float
    f0_pcc: float
    ari: float
    nmi: float
    silhouette: float
    b_mos: float
    diagonal_fraction: float
    manifest_hash: str = ""
    checkpoint_id: str = ""
    seed: int = 0
    counts: dict = field(default_factory=dict)

    SCALARS = ("secs", "f0_pcc", "ari", "nmi", "silhouette", "b_mos", "diagonal_fraction")

    def __post_init__(self):
        for name in self.SCALARS:
            v = getattr(self, name)
            if not math.isfinite(v):
                raise EvalError(f"metric {name} is not finite ({v})")

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "MetricReport":
        return cls(**json.loads(text))

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_json())
        return path


def file_hash(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()[:16]
