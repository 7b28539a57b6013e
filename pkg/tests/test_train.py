import json
import math

import numpy as np
import pytest
import torch

from uaed.config import RunConfig
from uaed.errors import ConfigError, NumericError
from uaed.metrics import MatchParams
from uaed.model import PROB_EPS, build_detector
from uaed.simulate import Mixture
from uaed.timeline import Interval, ProbabilityMatrix, Timeline, timeline_to_matrix
from uaed.train import (
    OnlineSimulator,
    TRAIN_SEED_OFFSET,
    VAL_SEED_OFFSET,
    evaluate,
    lr_at_epoch,
    make_targets,
    train,
)


def tiny_config(**train_overrides):
    cfg = RunConfig()
    cfg.vocab.sound_classes = ["a", "b"]
    cfg.vocab.background_classes = ["a"]
    cfg.vocab.speakers = ["spk1", "spk2"]
    cfg.simulation.duration = 2.0
    cfg.simulation.enroll_duration = 3.0
    cfg.features.encoder_dim = 32
    cfg.features.encoder_layers = 2
    cfg.features.branch_dim = 16
    cfg.model.d_model = 32
    cfg.model.encoder_layers = 1
    cfg.model.decoder_layers = 1
    cfg.model.heads = 2
    cfg.model.dropout = 0.1
    cfg.train.epochs = 2
    cfg.train.batch_size = 2
    cfg.train.train_utterances = 4
    cfg.train.val_utterances = 2
    for key, value in train_overrides.items():
        setattr(cfg.train, key, value)
    return cfg


def test_lr_schedule_closed_form():
    assert lr_at_epoch(1e-4, 0.05, 0) == pytest.approx(1e-4)
    assert lr_at_epoch(1e-4, 0.05, 1) == pytest.approx(9.5e-5)
    assert lr_at_epoch(1e-4, 0.05, 13) == pytest.approx(1e-4 * 0.95**13)
    assert lr_at_epoch(1e-4, 0.05, 13) == pytest.approx(5.1334e-5, rel=1e-4)


def test_seed_ranges_are_disjoint():
    cfg = tiny_config()
    sim = OnlineSimulator(cfg)
    train_seeds = {
        sim.train_seed(e, i)
        for e in range(cfg.train.epochs)
        for i in range(cfg.train.train_utterances)
    }
    val_seeds = {sim.val_seed(i) for i in range(cfg.train.val_utterances)}
    assert train_seeds.isdisjoint(val_seeds)
    assert min(val_seeds) >= VAL_SEED_OFFSET
    assert min(train_seeds) >= TRAIN_SEED_OFFSET


def test_seed_overflow_rejected():
    cfg = tiny_config(epochs=10**6, train_utterances=10**5)
    with pytest.raises(ConfigError, match="seed range"):
        OnlineSimulator(cfg)


def test_online_simulator_fresh_vs_fixed_seeds():
    online = OnlineSimulator(tiny_config(online=True))
    fixed = OnlineSimulator(tiny_config(online=False))
    assert online.train_seed(0, 1) != online.train_seed(1, 1)
    assert fixed.train_seed(0, 1) == fixed.train_seed(1, 1)


def test_make_targets_shapes():
    cfg = tiny_config()
    model = build_detector(cfg)
    sim = OnlineSimulator(cfg)
    mixtures = [sim.train_utterance(0, i) for i in range(2)]
    waves, targets = make_targets(model, mixtures)
    assert waves.shape == (2, int(2.0 * 16000))
    assert targets.shape == (2, 4, model.frontend.output_frames(waves.shape[1]))
    assert set(np.unique(targets.numpy())) <= {0.0, 1.0}


def test_train_runs_and_logs(tmp_path):
    cfg = tiny_config()
    result = train(cfg, out_dir=tmp_path / "run")
    assert len(result.history) == 2
    lines = [json.loads(l) for l in result.log_path.read_text().splitlines()]
    assert lines[0]["event"] == "start"
    epochs = [l for l in lines if l["event"] == "epoch"]
    assert {"epoch", "lr", "loss", "val_uaed_sb_f1", "val_der"} <= set(epochs[0])
    assert epochs[0]["lr"] == pytest.approx(1e-4)
    assert epochs[1]["lr"] == pytest.approx(9.5e-5)
    assert result.checkpoint_path.exists()


def test_train_determinism():
    cfg = tiny_config()
    loss_a = train(cfg).history[-1]["loss"]
    loss_b = train(cfg).history[-1]["loss"]
    assert loss_a == loss_b


def test_resume_is_bit_identical(tmp_path):
    cfg = tiny_config()
    full = train(cfg, out_dir=tmp_path / "full")

    train(cfg, out_dir=tmp_path / "half", stop_after=1)
    resumed = train(
        cfg,
        out_dir=tmp_path / "resumed",
        resume=tmp_path / "half" / "checkpoint.pt",
    )
    # Resuming after epoch 0 must reproduce the uninterrupted run exactly.
    assert resumed.history[-1]["epoch"] == 1
    assert resumed.history[-1]["loss"] == full.history[-1]["loss"]
    for (name, a), (_, b) in zip(
        full.model.state_dict().items(), resumed.model.state_dict().items()
    ):
        assert torch.equal(a, b), name


def test_resume_refuses_config_mismatch(tmp_path):
    cfg = tiny_config(epochs=1)
    train(cfg, out_dir=tmp_path / "run")
    other = tiny_config(epochs=1, seed=123)
    with pytest.raises(ConfigError, match="hash"):
        train(other, out_dir=tmp_path / "other", resume=tmp_path / "run" / "checkpoint.pt")


def test_nan_loss_aborts_with_diagnostics():
    cfg = tiny_config(epochs=1)
    model = build_detector(cfg)
    with torch.no_grad():
        model.queries.sound_queries.fill_(float("nan"))
    with pytest.raises(NumericError, match="epoch 0"):
        train(cfg, model=model)


def _grid_mixture(cfg, entries, duration=2.0):
    sr = cfg.simulation.sample_rate
    timeline = Timeline([(lab, Interval(a, b)) for lab, a, b in entries], duration)
    wave = np.full(int(duration * sr), 0.05, dtype=np.float32)
    return Mixture(wave, timeline, {}, sr)


def test_evaluate_oracle_predictions_are_perfect():
    cfg = tiny_config()
    model = build_detector(cfg)
    frame = model.frontend.frame_duration
    mixtures = [
        _grid_mixture(cfg, [("a", 0.0, 0.4), ("spk1", 0.4, 1.2)]),
        _grid_mixture(cfg, [("b", 0.2, 1.0), ("spk2", 1.2, 2.0), ("spk1", 0.0, 0.8)]),
    ]
    # Labels above sit on the model frame grid, so feeding Y as the
    # prediction must score perfectly.
    assert all(
        (iv.onset / frame) % 1 == 0 and (iv.offset / frame) % 1 == 0
        for m in mixtures
        for _, iv in m.ground_truth.entries
    )

    def oracle(mix):
        y = timeline_to_matrix(mix.ground_truth, model.vocab, frame)
        values = np.clip(y.values.astype(np.float64), PROB_EPS, 1 - PROB_EPS)
        return ProbabilityMatrix(values, frame, model.vocab)

    report = evaluate(model, cfg, mixtures, probs_fn=oracle)
    assert report.uaed_ib_macro == pytest.approx(1.0)
    assert report.uaed_sb_macro == pytest.approx(1.0)
    assert report.sd_der.der == pytest.approx(0.0)


def test_evaluate_random_model_is_well_formed():
    cfg = tiny_config()
    model = build_detector(cfg)
    sim = OnlineSimulator(cfg)
    report = evaluate(model, cfg, [sim.val_utterance(0)], pool=sim.pool)
    d = report.to_dict()
    assert 0.0 <= d["uaed"]["sb_f1"]["macro"] <= 1.0
    assert set(d["uaed"]["ib_f1"]["per_class"]) <= {"a", "b", "spk1", "spk2"}
    if not report.sd_der.undefined:
        assert report.sd_der.der == pytest.approx(
            report.sd_der.ms + report.sd_der.fa + report.sd_der.sc, abs=1e-9
        )
    assert d["params"] == MatchParams().to_dict()


def test_evaluate_learned_embedding_path_runs():
    cfg = tiny_config()
    cfg.model.speaker_embedding = "learned"
    model = build_detector(cfg)
    sim = OnlineSimulator(cfg)
    report = evaluate(model, cfg, [sim.val_utterance(0)], pool=sim.pool)
    assert report.n_files == 1
