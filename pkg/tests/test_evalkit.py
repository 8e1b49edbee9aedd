import itertools
import logging
from math import comb

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pairvc.audio import F0Contour, Waveform
from pairvc.evalkit import (EvalError, MetricReport, alignment, b_mos, clustering_probes, export_embeddings,
                            f0_pcc, read_embeddings, speaker_cosine)


def _brute_force_ari(a, b):
    """Adjusted index over all item pairs, without a contingency table."""
    pairs = list(itertools.combinations(range(len(a)), 2))
    both = sum(a[i] == a[j] and b[i] == b[j] for i, j in pairs)
    in_a = sum(a[i] == a[j] for i, j in pairs)
    in_b = sum(b[i] == b[j] for i, j in pairs)
    expected = in_a * in_b / comb(len(a), 2)
    return (both - expected) / ((in_a + in_b) / 2 - expected)


# labels [0,0,1,1] vs clusters [0,1,0,1]; computed by _brute_force_ari and frozen
ARI_CROSSED = -0.5


def test_brute_force_oracle_value():
    assert _brute_force_ari([0, 0, 1, 1], [0, 1, 0, 1]) == pytest.approx(ARI_CROSSED)


def test_sklearn_ari_matches_oracle():
    from sklearn.metrics import adjusted_rand_score

    assert adjusted_rand_score([0, 0, 1, 1], [0, 1, 0, 1]) == pytest.approx(ARI_CROSSED)
    rng = np.random.default_rng(2)
    for _ in range(20):
        a, b = rng.integers(0, 3, 12), rng.integers(0, 4, 12)
        assert adjusted_rand_score(a, b) == pytest.approx(_brute_force_ari(list(a), list(b)), abs=1e-12)


def test_ari_reference_properties():
    from sklearn.metrics import adjusted_rand_score

    labels = [0, 0, 1, 1, 2, 2]
    assert adjusted_rand_score(labels, labels) == 1.0
    assert adjusted_rand_score(labels, [0] * 6) == 0.0


def test_f0_pcc_examples():
    a = F0Contour(np.linspace(100, 200, 30))
    assert f0_pcc(a, a) == pytest.approx(1.0)
    assert f0_pcc(a, F0Contour(2 * a.values)) == pytest.approx(1.0)
    up = F0Contour(np.repeat([100.0, 200.0, 300.0], 5))
    down = F0Contour(np.repeat([300.0, 200.0, 100.0], 5))
    assert f0_pcc(up, down) == pytest.approx(-1.0)


def test_f0_pcc_insufficient_overlap():
    a = F0Contour(np.r_[np.full(8, 120.0), np.zeros(20)])
    b = F0Contour(np.r_[np.zeros(10), np.full(18, 150.0)])
    with pytest.raises(EvalError, match="insufficient voiced overlap"):
        f0_pcc(a, b)


def test_f0_pcc_resamples_shorter():
    a = F0Contour(np.linspace(100, 200, 40))
    b = F0Contour(np.linspace(100, 200, 20))
    assert f0_pcc(a, b) == pytest.approx(1.0)


contours = st.lists(st.floats(60.0, 400.0), min_size=12, max_size=60)


@settings(max_examples=100, deadline=None)
@given(contours, st.floats(0.1, 10.0), st.floats(0.0, 200.0))
def test_f0_pcc_positive_affine_invariance(values, scale, offset):
    v = np.array(values)
    if np.ptp(v) < 1e-3:
        return
    a = F0Contour(v)
    b = F0Contour(v[::-1].copy())
    try:
        base = f0_pcc(a, b)
    except EvalError:
        return
    moved = F0Contour(scale * v + offset)
    assert f0_pcc(moved, b) == pytest.approx(base, abs=1e-9)
    assert -1.0 <= base <= 1.0


def test_speaker_cosine():
    w1 = Waveform(np.zeros(8000), 16000)
    w2 = Waveform(np.full(8000, 0.1), 16000)
    assert speaker_cosine(w1, w1, lambda w: np.array([1.0, 2.0])) == pytest.approx(1.0)
    ortho = lambda w: np.array([1.0, 0.0]) if w is w1 else np.array([0.0, 3.0])
    assert speaker_cosine(w1, w2, ortho) == pytest.approx(0.0)
    emb = lambda w: np.array([1.0, float(w.samples[0]) + 0.5])
    assert speaker_cosine(w1, w2, emb) == pytest.approx(speaker_cosine(w2, w1, emb))
    with pytest.raises(EvalError):
        speaker_cosine(Waveform(np.zeros(100), 16000), w1, emb)


def test_clustering_separated():
    rng = np.random.default_rng(0)
    centres = np.eye(3) * 10
    x = np.concatenate([c + 0.1 * rng.standard_normal((5, 3)) for c in centres])
    labels = np.repeat([0, 1, 2], 5)
    ari, nmi, sil = clustering_probes(x, labels)
    assert ari == pytest.approx(1.0) and nmi == pytest.approx(1.0)
    assert sil > 0.9
    assert clustering_probes(x, labels) == (ari, nmi, sil)


def test_clustering_degenerate():
    with pytest.raises(EvalError):
        clustering_probes(np.ones((6, 2)), [0, 0, 0, 1, 1, 1])
    with pytest.raises(EvalError):
        clustering_probes(np.random.default_rng(0).random((4, 2)), [0, 0, 0, 0])
    with pytest.raises(EvalError):
        clustering_probes(np.random.default_rng(0).random((3, 2)), [0, 0, 1])


def test_alignment_identity_and_reverse():
    rng = np.random.default_rng(0)
    a = rng.standard_normal((20, 6))
    res = alignment(a, a)
    np.testing.assert_array_equal(res.top1_path, np.arange(20))
    assert res.diagonal_fraction == 1.0
    assert res.similarity.min() >= -1 and res.similarity.max() <= 1
    rev = alignment(a, a[::-1])
    np.testing.assert_array_equal(rev.top1_path, np.arange(20)[::-1])


def test_alignment_zero_frames_warn(caplog):
    a = np.ones((4, 3))
    a[1] = 0.0
    with caplog.at_level(logging.WARNING):
        res = alignment(a, a)
    assert "zero-norm" in caplog.text
    assert np.all(res.similarity[1] == 0.0)
    with pytest.raises(EvalError):
        alignment(np.zeros((0, 3)), a)


def test_b_mos():
    assert b_mos(3.42, 3.48) == 3.45
    assert b_mos(5, 5) == 5
    assert b_mos(1, 5) == 3
    with pytest.raises(EvalError):
        b_mos(0.5, 3)
    with pytest.raises(EvalError):
        b_mos(3, 5.5)


@pytest.mark.parametrize("suffix", [".csv", ".jsonl"])
def test_export_round_trip(tmp_path, suffix):
    items = [(f"u{i}", Waveform(np.full(100, 0.01 * i), 16000)) for i in range(4)]
    emb = lambda w: np.array([w.samples[0], 1.0 / 3.0, -2.5])
    path = export_embeddings(items, emb, tmp_path / f"e{suffix}")
    back = read_embeddings(path)
    assert [i for i, _ in back] == [i for i, _ in items]
    for (_, v), (_, w) in zip(back, items):
        np.testing.assert_array_equal(v, emb(w))


def test_export_empty(tmp_path):
    path = export_embeddings([], lambda w: np.zeros(2), tmp_path / "e.csv")
    assert path.read_text().strip() == "id"
    assert read_embeddings(path) == []


def test_metric_report_round_trip(tmp_path):
    rep = MetricReport(secs=0.8, f0_pcc=0.7, ari=0.1, nmi=0.2, silhouette=0.05, b_mos=3.45,
                       diagonal_fraction=0.9, manifest_hash="abc", checkpoint_id="final.pt:1", seed=3)
    back = MetricReport.from_json(rep.save(tmp_path / "r.json").read_text())
    assert back == rep
    with pytest.raises(EvalError):
        MetricReport(secs=float("nan"), f0_pcc=0, ari=0, nmi=0, silhouette=0, b_mos=3, diagonal_fraction=1)
