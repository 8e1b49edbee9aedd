"""Directional checks that only make sense on trained weights."""

import numpy as np
import pytest
import torch

from pairvc import trainer as T
from pairvc.audio import F0Contour, extract_f0
from pairvc.model import VoiceConversionModel

pytestmark = pytest.mark.slow


def _content_mu(model, wav):
    return model.extract_content(model.frontend_features(wav)).mu


def test_pair_content_is_closer_than_different_text(phase1_model, synth):
    same, other = [], []
    for i in range(20):
        pair, unrelated = synth.random_pair(90_000 + i), synth.random_pair(91_000 + i)
        a, b = _content_mu(phase1_model, pair.source), _content_mu(phase1_model, pair.target)
        c = _content_mu(phase1_model, unrelated.target)
        same.append(np.linalg.norm(a - b, axis=1).mean())
        t = min(len(a), len(c))
        other.append(np.linalg.norm(a[:t] - c[:t], axis=1).mean())
    assert np.mean(same) < np.mean(other)


def test_octave_contours_encode_differently(final_model):
    f0 = F0Contour(np.linspace(110.0, 160.0, 40))
    low = final_model.encode_f0(f0)
    high = final_model.encode_f0(F0Contour(2 * f0.values))
    assert np.abs(low - high).max() > 1e-3


def test_speaker_embeddings_group_by_speaker(final_model, synth):
    utts = [synth.random_utterance(92_000 + i) for i in range(32)]
    emb = np.stack([final_model.speaker_embed(w) for w, _ in utts])
    ids = np.array([s.id for _, s in utts])
    cos = emb @ emb.T / np.outer(np.linalg.norm(emb, axis=1), np.linalg.norm(emb, axis=1))
    same = (ids[:, None] == ids[None, :]) & ~np.eye(len(ids), dtype=bool)
    cross = ids[:, None] != ids[None, :]
    assert cos[same].mean() > cos[cross].mean()


def test_decoder_speakers_differ(final_model, synth):
    pair = synth.random_pair(93_000)
    g0 = final_model.speaker_embed(pair.source)
    g1 = final_model.speaker_embed(pair.target)
    _, z = final_model.encode_posterior(pair.source, g0)
    f0 = extract_f0(pair.source, final_model.cfg.audio.f0)
    a = final_model.decode_audio(z, f0, g0).samples
    b = final_model.decode_audio(z, f0, g1).samples
    assert np.abs(a - b).max() > 0


def _short_run(cfg, synth, phase, steps=500):
    torch.manual_seed(0)
    model = VoiceConversionModel(cfg)
    pairs = [synth.random_pair(94_000 + i) for i in range(8)]
    if phase == 1:
        data = T.pair_dataset(model, cfg, [(p.source, p.target, p.tgt_speaker.id) for p in pairs])
    else:
        data = T.real_dataset(model, cfg, [p.target for p in pairs])
    tr = T.Trainer(model, cfg, phase, data)
    return [tr.train_step().losses for _ in range(steps)]


def test_phase1_overfits_eight_pairs(acc_cfg, synth):
    log = _short_run(acc_cfg, synth, 1)
    assert log[-1]["total_g"] < log[0]["total_g"]


def test_phase2_reconstruction_decreases(acc_cfg, synth):
    log = _short_run(acc_cfg, synth, 2)
    assert log[-1]["rec_or_cv"] < log[0]["rec_or_cv"]
