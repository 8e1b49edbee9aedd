import json

import pytest
import torch

from pairvc import trainer as T
from pairvc.model import SUBMODULES, VoiceConversionModel


@pytest.fixture(scope="module")
def tiny_data(tiny_cfg, toy_pairs):
    model = VoiceConversionModel(tiny_cfg)
    pairs = T.pair_dataset(model, tiny_cfg, [(p.source, p.target, p.tgt_speaker.id) for p in toy_pairs])
    real = T.real_dataset(model, tiny_cfg, [p.target for p in toy_pairs])
    return pairs, real


def _trainer(cfg, data, phase=1, seed=0):
    torch.manual_seed(seed)
    return T.Trainer(VoiceConversionModel(cfg), cfg, phase, data)


def test_step_is_reproducible(tiny_cfg, tiny_data):
    a = _trainer(tiny_cfg, tiny_data[0]).train_step()
    b = _trainer(tiny_cfg, tiny_data[0]).train_step()
    assert a.losses == b.losses
    assert a.step == 1 and a.losses["phase"] == 1
    assert set(a.losses) >= {"kl", "rec_or_cv", "adv_g", "adv_d", "fm", "total_g", "total_d"}


def test_phase1_rejects_unpaired_data(tiny_cfg, tiny_data):
    with pytest.raises(T.TrainingError):
        _trainer(tiny_cfg, tiny_data[1], phase=1)


def test_empty_dataset(tiny_cfg):
    with pytest.raises(T.TrainingError, match="empty"):
        T.pair_dataset(VoiceConversionModel(tiny_cfg), tiny_cfg, [])


def test_frozen_modules_excluded_and_unchanged(tiny_cfg, tiny_data):
    tr = _trainer(tiny_cfg, tiny_data[1], phase=2)
    frozen = {id(p) for n in ("frontend", "content") for p in tr.model.submodule(n).parameters()}
    in_opt = {id(p) for g in tr.opt_g.param_groups for p in g["params"]}
    assert not frozen & in_opt
    before = T.submodule_hash(tr.model.content)
    for _ in range(2):
        tr.train_step()
    assert T.submodule_hash(tr.model.content) == before
    assert tr.hash_frozen() == tr.frozen_hashes


def test_drift_is_detected(tiny_cfg, tiny_data):
    tr = _trainer(tiny_cfg, tiny_data[0])
    with torch.no_grad():
        tr.model.frontend.projection.add_(1e-3)
    with pytest.raises(T.FrozenParameterDrift):
        tr.check_frozen()


def test_nan_aborts(tiny_cfg, tiny_data, monkeypatch):
    tr = _trainer(tiny_cfg, tiny_data[0])
    monkeypatch.setattr(T, "mel_l1", lambda a, b: torch.tensor(float("nan")))
    with pytest.raises(T.TrainingDiverged):
        tr.train_step()


def test_run_writes_checkpoints_and_log(tiny_cfg, tiny_data, tmp_path):
    final = T.run(tiny_cfg, 1, None, tmp_path, dataset=tiny_data[0])
    names = sorted(p.name for p in tmp_path.glob("*.pt"))
    assert names == ["ckpt_000000.pt", "ckpt_000002.pt", "ckpt_000004.pt", "final.pt"]
    assert final.read_bytes() == (tmp_path / "ckpt_000004.pt").read_bytes()
    lines = [json.loads(l) for l in (tmp_path / "train_log.jsonl").read_text().splitlines()]
    assert lines[0]["loss_weights"]["mel"] == 45.0
    assert [l["step"] for l in lines[1:]] == [1, 2, 3, 4]
    state = T.read_checkpoint(final)
    assert state["phase"] == 1 and state["step"] == 4
    assert state["config_hash"] == tiny_cfg.model_hash()
    assert set(state["params"]) == set(SUBMODULES)


def test_resume_matches_uninterrupted(tiny_cfg, tiny_data, tmp_path):
    straight = T.run(tiny_cfg, 1, None, tmp_path / "a", dataset=tiny_data[0])
    T.run(tiny_cfg, 1, None, tmp_path / "b", dataset=tiny_data[0], steps=2)
    resumed = T.run(tiny_cfg, 1, None, tmp_path / "b", dataset=tiny_data[0],
                    resume=tmp_path / "b" / "ckpt_000002.pt")
    sa, sb = T.read_checkpoint(straight), T.read_checkpoint(resumed)
    for name in SUBMODULES:
        for k, v in sa["params"][name].items():
            torch.testing.assert_close(v, sb["params"][name][k], rtol=0, atol=0)


def test_phase2_from_phase1(tiny_cfg, tiny_data, tmp_path):
    p1 = T.run(tiny_cfg, 1, None, tmp_path / "p1", dataset=tiny_data[0])
    with pytest.raises(T.TrainingError):
        T.run(tiny_cfg, 2, None, tmp_path / "p2", dataset=tiny_data[1])
    p2 = T.run(tiny_cfg, 2, None, tmp_path / "p2", dataset=tiny_data[1], init=p1)
    a, b = T.read_checkpoint(p1), T.read_checkpoint(p2)
    assert b["phase"] == 2
    for name in ("frontend", "content"):
        for k, v in a["params"][name].items():
            assert torch.equal(v, b["params"][name][k])
    assert any(not torch.equal(v, b["params"]["decoder"][k]) for k, v in a["params"]["decoder"].items())


def test_checkpoint_round_trip_is_byte_stable(tiny_cfg, tmp_path):
    model = VoiceConversionModel(tiny_cfg)
    first = T.save_checkpoint(tmp_path / "a.pt", model, 1, 10)
    loaded, _ = T.load_checkpoint(first, tiny_cfg)
    second = T.save_checkpoint(tmp_path / "b.pt", loaded, 1, 10)
    assert first.read_bytes() == second.read_bytes()


def test_checkpoint_hash_mismatch(tiny_cfg, tmp_path):
    path = T.save_checkpoint(tmp_path / "a.pt", VoiceConversionModel(tiny_cfg), 1, 0)
    other = tiny_cfg.with_overrides(audio={"voicing_threshold": 0.7})
    with pytest.raises(T.CheckpointMismatch):
        T.load_checkpoint(path, other)
    model, state = T.load_checkpoint(path, other, force=True)
    assert state["config_hash"] != other.model_hash()
    with pytest.raises(T.TrainingError, match="not found"):
        T.load_checkpoint(tmp_path / "missing.pt")
