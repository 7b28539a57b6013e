import math

import numpy as np
import pytest
import torch

from uaed.config import RunConfig, config_hash
from uaed.errors import AlignmentError, ConfigError, DataError
from uaed.features import FeatureFrontEnd
from uaed.model import (
    Detector,
    PROB_EPS,
    UAEDQueries,
    bce_loss,
    build_detector,
    load_checkpoint,
    save_checkpoint,
    sinusoidal_position_encoding,
)
from uaed.simulate import synthesize_sources
from uaed.timeline import Vocabulary

SOUND_VOCAB = Vocabulary(("a", "b", "c"))
MIX_VOCAB = Vocabulary(("a", "b"), ("spk1", "spk2"))


def tiny_model(vocab=SOUND_VOCAB, d_model=8, layers=1, heads=2, dropout=0.0):
    torch.manual_seed(0)
    return Detector(
        vocab,
        d_model=d_model,
        encoder_layers=layers,
        decoder_layers=layers,
        heads=heads,
        dropout=dropout,
    )


# ---------------------------------------------------------------------------
# Encoder / decoder / head
# ---------------------------------------------------------------------------

def test_encode_preserves_shape_and_varies_with_input():
    model = tiny_model(d_model=16, layers=2)
    model.eval()
    x1, x2 = torch.randn(2, 12, 16), torch.randn(2, 12, 16)
    out1, out2 = model.encode(x1), model.encode(x2)
    assert out1.shape == x1.shape
    assert not torch.allclose(out1, out2)


@pytest.mark.parametrize("t", [10, 100, 1000])
def test_encode_variable_length_contract(t):
    model = tiny_model(d_model=16)
    model.eval()
    out = model.encode(torch.randn(1, t, 16))
    assert out.shape == (1, t, 16)
    assert torch.isfinite(out).all()


def test_encode_rejects_wrong_width():
    model = tiny_model(d_model=16)
    with pytest.raises(AlignmentError):
        model.encode(torch.randn(1, 10, 8))


def test_decode_output_shape():
    model = tiny_model(d_model=16)
    model.eval()
    f_enc = model.encode(torch.randn(1, 20, 16))
    out = model.decode(torch.randn(1, 5, 16), f_enc)
    assert out.shape == (1, 5, 16)


def test_decode_permutation_equivariance():
    model = tiny_model(d_model=16, layers=2)
    model.eval()
    f_enc = model.encode(torch.randn(1, 30, 16))
    queries = torch.randn(1, 6, 16)
    perm = torch.randperm(6)
    direct = model.decode(queries[:, perm], f_enc)
    permuted = model.decode(queries, f_enc)[:, perm]
    torch.testing.assert_close(direct, permuted, atol=1e-5, rtol=1e-5)


def test_decode_single_query():
    model = tiny_model(d_model=16)
    model.eval()
    f_enc = model.encode(torch.randn(1, 10, 16))
    assert model.decode(torch.randn(1, 1, 16), f_enc).shape == (1, 1, 16)


def test_predict_orthogonal_rows_give_half():
    f_dec = torch.tensor([[[1.0, 0.0, 0.0, 0.0]]])
    f_enc = torch.tensor([[[0.0, 1.0, 0.0, 0.0], [0.0, 0.0, 1.0, 0.0]]])
    probs = Detector.predict(f_dec, f_enc)
    torch.testing.assert_close(probs, torch.full((1, 1, 2), 0.5))


def test_predict_shapes_and_open_interval():
    f_dec, f_enc = torch.randn(2, 12, 192), torch.randn(2, 100, 192)
    probs = Detector.predict(f_dec, f_enc)
    assert probs.shape == (2, 12, 100)
    assert (probs > 0).all() and (probs < 1).all()


def test_predict_scaling_pushes_to_extremes_monotonically():
    f_dec = torch.randn(1, 1, 16)
    f_enc = torch.randn(1, 40, 16)
    base = Detector.predict(f_dec, f_enc)
    prev = base
    for scale in (2.0, 4.0, 8.0):
        cur = Detector.predict(scale * f_dec, f_enc)
        high = base > 0.5
        assert (cur[high] >= prev[high]).all()
        assert (cur[~high & (base < 0.5)] <= prev[~high & (base < 0.5)]).all()
        prev = cur


def test_prediction_never_saturates_after_extreme_logits():
    f_dec = torch.full((1, 1, 8), 1e4)
    f_enc = torch.full((1, 5, 8), 1e4)
    probs = Detector.predict(f_dec, f_enc)
    assert (probs < 1.0).all() and (probs > 0.0).all()
    assert probs.max() == pytest.approx(1.0 - PROB_EPS)


# ---------------------------------------------------------------------------
# Loss
# ---------------------------------------------------------------------------

def test_bce_loss_at_half_is_ln2():
    for y in (torch.zeros(3, 5, dtype=torch.float64), torch.ones(3, 5, dtype=torch.float64)):
        loss = bce_loss(torch.full((3, 5), 0.5, dtype=torch.float64), y)
        assert float(loss) == pytest.approx(math.log(2.0), abs=1e-9)


def test_bce_loss_single_frame():
    loss = bce_loss(
        torch.tensor([[0.9]], dtype=torch.float64), torch.tensor([[1.0]], dtype=torch.float64)
    )
    assert float(loss) == pytest.approx(-math.log(0.9), abs=1e-12)


def test_bce_loss_perfect_prediction_limit():
    y = torch.tensor([[0.0, 1.0, 1.0, 0.0]], dtype=torch.float64)
    loss = bce_loss(y.clone(), y)
    assert float(loss) <= -math.log1p(-PROB_EPS) * (1 + 1e-12)


def test_bce_loss_shape_mismatch():
    with pytest.raises(AlignmentError):
        bce_loss(torch.full((2, 3), 0.5), torch.zeros(3, 2))


def test_bce_loss_permutation_invariance():
    torch.manual_seed(1)
    y_hat = torch.rand(5, 11, dtype=torch.float64)
    y = (torch.rand(5, 11) > 0.5).double()
    perm = torch.randperm(5)
    assert float(bce_loss(y_hat, y)) == pytest.approx(
        float(bce_loss(y_hat[perm], y[perm])), abs=1e-12
    )


# ---------------------------------------------------------------------------
# Gradient correctness (finite differences on the tiny model)
# ---------------------------------------------------------------------------

def test_gradients_match_finite_differences():
    model = tiny_model(d_model=8, layers=1, heads=2).double()
    model.eval()
    torch.manual_seed(3)
    f_u = torch.randn(1, 5, 8, dtype=torch.float64)
    y = (torch.rand(1, 3, 5) > 0.6).double()

    def loss_value():
        return bce_loss(model.head_probs(f_u), y)

    loss = loss_value()
    model.zero_grad()
    loss.backward()

    step = 1e-4
    checked = 0
    for name, param in model.named_parameters():
        grad = param.grad
        assert grad is not None, name
        flat = param.data.view(-1)
        flat_grad = grad.view(-1)
        # Probe a handful of coordinates per tensor to keep runtime sane.
        idx = torch.linspace(0, flat.numel() - 1, steps=min(5, flat.numel())).long()
        for i in idx:
            orig = float(flat[i])
            flat[i] = orig + step
            with torch.no_grad():
                up = float(loss_value())
            flat[i] = orig - step
            with torch.no_grad():
                down = float(loss_value())
            flat[i] = orig
            numeric = (up - down) / (2 * step)
            analytic = float(flat_grad[i])
            denom = max(abs(numeric) + abs(analytic), 1e-6)
            assert abs(numeric - analytic) / denom < 1e-3, (
                f"{name}[{int(i)}]: analytic {analytic:.3e} vs numeric {numeric:.3e}"
            )
            checked += 1
    assert checked > 50


# ---------------------------------------------------------------------------
# Queries and speaker embeddings
# ---------------------------------------------------------------------------

def test_queries_concatenate_in_vocab_order():
    queries = UAEDQueries(n_sound_events=2, d_model=4)
    spk = torch.ones(3, 4)
    out = queries(spk)
    assert out.shape == (5, 4)
    torch.testing.assert_close(out[:2], queries.sound_queries)
    torch.testing.assert_close(out[2:], spk)


def test_queries_batched_speakers():
    queries = UAEDQueries(2, 4)
    spk = torch.randn(3, 2, 4)
    out = queries(spk)
    assert out.shape == (3, 4, 4)
    torch.testing.assert_close(out[1, 2:], spk[1])


def test_oracle_embeddings_unit_norm_and_deterministic():
    pool = synthesize_sources(MIX_VOCAB, rng=np.random.default_rng(0))
    model = tiny_model(MIX_VOCAB, d_model=16)
    emb1 = model.speaker_embeddings("oracle", pool=pool)
    emb2 = model.speaker_embeddings("oracle", pool=pool)
    torch.testing.assert_close(emb1, emb2)
    norms = emb1.norm(dim=-1)
    torch.testing.assert_close(norms, torch.ones_like(norms), atol=1e-6, rtol=0)


def test_learned_embeddings_require_enrollment():
    frontend = FeatureFrontEnd(
        encoder_dim=32, encoder_layers=2, branch_dim=16, d_model=24, fusion_stride=2
    )
    model = Detector(MIX_VOCAB, d_model=24, encoder_layers=1, decoder_layers=1, heads=2,
                     frontend=frontend)
    with pytest.raises(DataError, match="spk2"):
        model.speaker_embeddings("learned", enrollments={"spk1": np.zeros(32000, np.float32)})
    with pytest.raises(DataError, match="at least 1 s"):
        model.speaker_embeddings(
            "learned",
            enrollments={
                "spk1": np.zeros(8000, np.float32),
                "spk2": np.zeros(32000, np.float32),
            },
        )


def test_learned_embeddings_unit_norm():
    frontend = FeatureFrontEnd(
        encoder_dim=32, encoder_layers=2, branch_dim=16, d_model=24, fusion_stride=2
    )
    model = Detector(MIX_VOCAB, d_model=24, encoder_layers=1, decoder_layers=1, heads=2,
                     frontend=frontend)
    rng = np.random.default_rng(0)
    enrollments = {
        "spk1": rng.uniform(-0.5, 0.5, 32000).astype(np.float32),
        "spk2": rng.uniform(-0.5, 0.5, 32000).astype(np.float32),
    }
    emb = model.speaker_embeddings("learned", enrollments=enrollments)
    assert emb.shape == (2, 24)
    norms = emb.norm(dim=-1)
    torch.testing.assert_close(norms, torch.ones_like(norms), atol=1e-6, rtol=0)


def test_unknown_embedding_mode():
    model = tiny_model(MIX_VOCAB, d_model=16)
    with pytest.raises(ConfigError):
        model.speaker_embeddings("psychic")


# ---------------------------------------------------------------------------
# End-to-end forward and detection plumbing
# ---------------------------------------------------------------------------

def small_config():
    cfg = RunConfig()
    cfg.vocab.sound_classes = ["a", "b"]
    cfg.vocab.background_classes = ["a"]
    cfg.vocab.speakers = ["spk1", "spk2"]
    cfg.features.encoder_dim = 32
    cfg.features.encoder_layers = 2
    cfg.features.branch_dim = 16
    cfg.model.d_model = 32
    cfg.model.encoder_layers = 1
    cfg.model.decoder_layers = 1
    cfg.model.heads = 2
    cfg.simulation.duration = 4.0
    return cfg


def test_full_forward_shapes():
    cfg = small_config()
    model = build_detector(cfg)
    model.eval()
    pool = synthesize_sources(cfg.vocab.to_vocabulary(), rng=np.random.default_rng(1))
    emb = model.speaker_embeddings("oracle", pool=pool)
    wave = torch.randn(2, 2 * 16000) * 0.1
    probs, frame_duration = model(wave, emb)
    assert probs.shape == (2, 4, model.frontend.output_frames(2 * 16000))
    assert frame_duration == pytest.approx(0.04)


def test_detect_returns_timeline_within_vocab():
    cfg = small_config()
    model = build_detector(cfg)
    pool = synthesize_sources(cfg.vocab.to_vocabulary(), rng=np.random.default_rng(1))
    emb = model.speaker_embeddings("oracle", pool=pool)
    wave = np.random.default_rng(0).uniform(-0.1, 0.1, 32000).astype(np.float32)
    timeline, probs = model.detect(wave, emb, threshold=0.5, median_window=3)
    assert set(timeline.labels()) <= set(cfg.vocab.to_vocabulary().labels)
    assert probs.values.shape[0] == 4


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

def test_checkpoint_round_trip(tmp_path):
    cfg = small_config()
    model = build_detector(cfg)
    path = tmp_path / "model.ckpt"
    save_checkpoint(path, model, cfg, extra={"epoch": 3})
    loaded, loaded_cfg, extra = load_checkpoint(path)
    assert extra["epoch"] == 3
    assert config_hash(loaded_cfg) == config_hash(cfg)
    for (name_a, a), (_, b) in zip(
        model.state_dict().items(), loaded.state_dict().items()
    ):
        torch.testing.assert_close(a, b, msg=name_a)


def test_checkpoint_hash_mismatch_refused(tmp_path):
    cfg = small_config()
    model = build_detector(cfg)
    path = tmp_path / "model.ckpt"
    save_checkpoint(path, model, cfg)
    other = small_config()
    other.train.seed = 999
    with pytest.raises(ConfigError, match="hash"):
        load_checkpoint(path, expected_config_hash=config_hash(other))
    loaded, _, _ = load_checkpoint(path, expected_config_hash=config_hash(other), force=True)
    assert loaded.vocab.labels == model.vocab.labels


def test_position_encoding_shape():
    pe = sinusoidal_position_encoding(7, 10)
    assert pe.shape == (7, 10)
    assert torch.isfinite(pe).all()
