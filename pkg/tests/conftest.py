import time

import numpy as np
import pytest
import torch

from pairvc import trainer as T
from pairvc.config import RunConfig
from pairvc.model import VoiceConversionModel
from pairvc.synth import PairSynthesizer

torch.set_num_threads(1)

TINY = {
    "model": {"frontend_dim": 16, "content_hidden": 16, "content_layers": 1, "latent_dim": 4,
              "posterior_hidden": 16, "posterior_layers": 1, "flow_layers": 2, "flow_hidden": 8,
              "flow_wn_layers": 1, "speaker_dim": 8, "speaker_hidden": 16, "f0_dim": 4,
              "decoder_hidden": 16, "decoder_layers": 1, "n_harmonics": 8, "n_noise_bands": 4,
              "disc_channels": 4},
    "train": {"batch_size": 2, "segment_frames": 16, "checkpoint_every": 2, "freeze_check_every": 1,
              "phase1": {"steps": 4, "freeze": ["frontend"]},
              "phase2": {"steps": 4, "freeze": ["frontend", "content"]}},
}


@pytest.fixture(scope="session")
def cfg():
    return RunConfig()


@pytest.fixture(scope="session")
def tiny_cfg():
    return RunConfig().with_overrides(**TINY)


@pytest.fixture(scope="session")
def synth(cfg):
    return PairSynthesizer(cfg.audio, cfg.synth)


@pytest.fixture(scope="session")
def toy_pairs(synth):
    return [synth.random_pair(seed) for seed in range(4)]


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# full-size two-phase run shared by the acceptance suite and the trained-model checks
N_TRAIN_PAIRS = 160
N_REAL = 80


@pytest.fixture(scope="session")
def acc_cfg():
    return RunConfig()


@pytest.fixture(scope="session")
def two_phase(acc_cfg, tmp_path_factory):
    cfg = acc_cfg
    root = tmp_path_factory.mktemp("two_phase")
    synth = PairSynthesizer(cfg.audio, cfg.synth)
    real = PairSynthesizer.real_corpus(cfg.audio, cfg.synth)
    pairs = [synth.random_pair(i) for i in range(N_TRAIN_PAIRS)]
    waves = [real.random_utterance(i)[0] for i in range(N_REAL)]
    model = VoiceConversionModel(cfg)
    p1_data = T.pair_dataset(model, cfg, [(p.source, p.target, p.tgt_speaker.id) for p in pairs])
    p2_data = T.real_dataset(model, cfg, waves)

    t0 = time.perf_counter()
    p1 = T.run(cfg, 1, None, root / "p1", dataset=p1_data)
    t1 = time.perf_counter()
    p2 = T.run(cfg, 2, None, root / "p2", dataset=p2_data, init=p1)
    t2 = time.perf_counter()
    return {"root": root, "p1": p1, "p2": p2, "p1_seconds": t1 - t0, "p2_seconds": t2 - t1,
            "speakers": {p.src_speaker.id for p in pairs} | {p.tgt_speaker.id for p in pairs}}


@pytest.fixture(scope="session")
def phase1_model(acc_cfg, two_phase):
    return T.load_checkpoint(two_phase["p1"], acc_cfg)[0]


@pytest.fixture(scope="session")
def final_model(acc_cfg, two_phase):
    return T.load_checkpoint(two_phase["p2"], acc_cfg)[0]


def pytest_terminal_summary(terminalreporter):
    from _report import LINES

    if LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(LINES):
            terminalreporter.write_line(LINES[n])
