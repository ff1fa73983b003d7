import struct

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import gradient_check
from vapbc.audio import FeatureSequence
from vapbc.errors import BadMagic, CheckpointError, ConfigMismatch, InvalidConfig, LengthMismatch, MissingTensor, \
    NoForwardPass, NotFound, VersionMismatch
from vapbc.model import (ModelConfig, VAPModel, compute_gradients, encode_reference, expected_param_count,
                         init_model, load_checkpoint, read_feature_file, reset_bc_head, store_checkpoint,
                         write_feature_file)
from vapbc.training import LabelBatch, TrainConfig, compute_loss


def tiny(**kw):
    base = dict(d_channel=16, n_mels=8, max_context=64, n_heads=4)
    base.update(kw)
    return ModelConfig(**base)


def mel_pair(T, n_mels=8, seed=0, stride=5):
    g = torch.Generator().manual_seed(seed)
    return (torch.randn(1, T * stride, n_mels, generator=g), torch.randn(1, T * stride, n_mels, generator=g))


def feats(T, d=16, seed=0, B=1):
    g = torch.Generator().manual_seed(seed)
    return torch.randn(B, T, d, generator=g), torch.randn(B, T, d, generator=g)


# -- configuration -----------------------------------------------------------------

def test_config_examples():
    assert ModelConfig().head_dim == 64
    assert ModelConfig().d_concat == 512
    with pytest.raises(InvalidConfig):
        ModelConfig(n_heads=5)
    with pytest.raises(InvalidConfig):
        ModelConfig(d_concat=300)
    with pytest.raises(InvalidConfig):
        ModelConfig(bc_classes=4)
    with pytest.raises(InvalidConfig):
        ModelConfig(frame_rate=25)
    with pytest.raises(InvalidConfig):
        ModelConfig.from_dict({"width": 3})


def test_init_is_deterministic():
    a, b = init_model(tiny(), 7), init_model(tiny(), 7)
    for (n, p), (_, q) in zip(a.named_parameters(), b.named_parameters()):
        assert torch.equal(p, q), n
    c = init_model(tiny(), 8)
    assert not torch.equal(a.vap_head.weight, c.vap_head.weight)


@pytest.mark.parametrize("cfg", [ModelConfig(), tiny(), tiny(encoder="external"), tiny(arch="baseline"),
                                 tiny(bc_classes=3, n_cross_layers=1, conv_layers=2)])
def test_parameter_count_closed_form(cfg):
    assert VAPModel(cfg).n_params == expected_param_count(cfg)


# -- forward pass ------------------------------------------------------------------

def test_empty_input():
    m = init_model(tiny(encoder="external"))
    out = m.forward_features(torch.zeros(1, 0, 16), torch.zeros(1, 0, 16))
    assert out.vap_logits.shape == (1, 0, 256)


def test_length_mismatch():
    m = init_model(tiny(encoder="external"))
    with pytest.raises(LengthMismatch):
        m.forward_features(torch.zeros(1, 5, 16), torch.zeros(1, 6, 16))


def test_output_shapes_and_normalisation():
    m = init_model(tiny(bc_classes=3)).eval()
    x0, x1 = mel_pair(30)
    with torch.no_grad():
        out = m(10 * torch.tanh(x0), 10 * torch.tanh(x1))
    assert out.vap_logits.shape == (1, 30, 256) and out.vad_logits.shape == (1, 30, 2)
    assert out.bc_logits.shape == (1, 30, 3)
    for p in (out.vap_probs, out.bc_probs):
        assert torch.allclose(p.sum(-1), torch.ones(1, 30), atol=1e-6)
        assert torch.isfinite(p).all()
    assert ((out.vad_probs > 0) & (out.vad_probs < 1)).all()


@settings(max_examples=20, deadline=None)
@given(t=st.integers(0, 22), seed=st.integers(0, 1000), window=st.sampled_from([None, 4, 10]))
def test_causality_of_full_model(t, seed, window):
    m = init_model(tiny(dropout=0.0), seed).eval()
    T = 24
    x0, x1 = mel_pair(T, seed=seed)
    y0, y1 = x0.clone(), x1.clone()
    # Mel row 5t is the last one model frame t reads.
    y0[:, 5 * t + 1 :] += 3.0
    y1[:, 5 * t + 1 :] -= 2.0
    with torch.no_grad():
        a, b = m(x0, x1, window=window), m(y0, y1, window=window)
    assert torch.equal(a.vap_logits[:, : t + 1], b.vap_logits[:, : t + 1])
    assert torch.equal(a.bc_logits[:, : t + 1], b.bc_logits[:, : t + 1])
    assert not torch.equal(a.vap_logits[:, t + 1 :], b.vap_logits[:, t + 1 :])


def test_window_at_least_sequence_is_inert():
    m = init_model(tiny(encoder="external")).eval()
    f0, f1 = feats(20)
    with torch.no_grad():
        full = m.forward_features(f0, f1)
        for w in (20, 50):
            out = m.forward_features(f0, f1, window=w)
            assert torch.equal(full.vap_logits, out.vap_logits)


@settings(max_examples=20, deadline=None)
@given(W=st.integers(1, 12), t=st.integers(0, 29), seed=st.integers(0, 1000))
def test_window_ignores_frames_older_than_the_window(W, t, seed):
    m = init_model(tiny(encoder="external", dropout=0.0), seed).eval()
    f0, f1 = feats(30, seed=seed)
    g0, g1 = f0.clone(), f1.clone()
    g0[:, : max(0, t - W + 1)] = 5.0
    g1[:, : max(0, t - W + 1)] = -5.0
    with torch.no_grad():
        a = m.forward_features(f0, f1, window=W, batch_windows=7)
        b = m.forward_features(g0, g1, window=W, batch_windows=7)
    assert torch.allclose(a.bc_logits[:, t], b.bc_logits[:, t], atol=1e-5)


def test_windowed_frame_equals_cropped_pass():
    m = init_model(tiny(encoder="external")).eval()
    f0, f1 = feats(25, B=2)
    W = 6
    with torch.no_grad():
        out = m.forward_features(f0, f1, window=W)
        for t in (0, 3, 5, 6, 17, 24):
            lo = max(0, t - W + 1)
            ref = m.forward_features(f0[:, lo : t + 1], f1[:, lo : t + 1])
            assert torch.allclose(out.vap_logits[:, t], ref.vap_logits[:, -1], atol=1e-5)


def test_sequence_longer_than_max_context_needs_a_window():
    m = init_model(tiny(encoder="external", max_context=8)).eval()
    f0, f1 = feats(12)
    with pytest.raises(InvalidConfig):
        m.forward_features(f0, f1)
    with torch.no_grad():
        assert m.forward_features(f0, f1, window=8).vap_logits.shape[1] == 12


# -- reference encoder ------------------------------------------------------------------

def test_encode_reference_shape_default_width():
    m = init_model(ModelConfig(max_context=16))
    f = encode_reference(np.random.default_rng(0).normal(0, 0.1, 16000), m)
    assert isinstance(f, FeatureSequence) and f.frames.shape == (10, 256)


def test_encoder_settles_on_silence():
    m = init_model(tiny())
    f = encode_reference(np.zeros(32000), m).frames
    # Receptive field 13 mel rows; from model frame 3 (mel row 15) only floor-valued rows are seen.
    assert np.allclose(f[3:], f[3], atol=0)
    assert not np.allclose(f[0], f[3])


def test_encoder_is_causal_in_samples():
    m = init_model(tiny())
    x = np.random.default_rng(2).normal(0, 0.1, 32000)
    y = x.copy()
    y[8000:] = 0.0  # everything after 0.5 s
    a, b = encode_reference(x, m).frames, encode_reference(y, m).frames
    assert np.array_equal(a[:6], b[:6])
    assert not np.array_equal(a[6:], b[6:])


def test_encode_reference_rejects_external_mode():
    with pytest.raises(InvalidConfig):
        encode_reference(np.zeros(16000), init_model(tiny(encoder="external")))


# -- gradients --------------------------------------------------------------------

def batch_labels(T, classes=2, seed=0):
    g = torch.Generator().manual_seed(seed)
    return LabelBatch(torch.randint(0, 2, (1, T, 2), generator=g).float(), torch.randint(0, 256, (1, T), generator=g),
                      torch.randint(0, classes, (1, T), generator=g), torch.ones(1, T, dtype=torch.bool))


def test_zero_loss_weights_give_zero_gradients():
    m = init_model(tiny())
    x0, x1 = mel_pair(10)
    cfg = TrainConfig(stage="pretrain", alpha=0.0, beta=0.0)
    grads = compute_gradients(m, compute_loss(m(x0, x1), batch_labels(10), cfg).total)
    assert all(not g.any() for g in grads.values())


def test_identical_batches_give_identical_gradients():
    m = init_model(tiny(dropout=0.0))
    x0, x1 = mel_pair(10)
    lb = batch_labels(10)
    g1 = compute_gradients(m, compute_loss(m(x0, x1), lb, TrainConfig()).total)
    g2 = compute_gradients(m, compute_loss(m(x0, x1), lb, TrainConfig()).total)
    assert all(torch.equal(g1[k], g2[k]) for k in g1)


def test_backward_without_forward():
    m = init_model(tiny())
    with pytest.raises(NoForwardPass):
        compute_gradients(m, torch.tensor(1.0))


def test_external_mode_has_no_encoder_to_train():
    m = init_model(tiny(encoder="external"))
    assert m.encoder is None
    f0, f1 = feats(10)
    grads = compute_gradients(m, compute_loss(m(f0, f1), batch_labels(10), TrainConfig()).total)
    assert not any(k.startswith("encoder") for k in grads)
    assert f0.grad is None  # precomputed features are inputs, never updated


def test_gradient_check_on_parameter_sample():
    err, n = gradient_check(n_sample=400)
    assert n == 400 and err <= 1e-4


# -- checkpoints ------------------------------------------------------------------

def test_checkpoint_round_trip_is_bit_identical(tmp_path):
    m = init_model(tiny(bc_classes=3), 3).eval()
    store_checkpoint(m, tmp_path / "m.bin", {"note": "x"})
    back, meta = load_checkpoint(tmp_path / "m.bin", with_meta=True)
    assert meta == {"note": "x"} and back.cfg == m.cfg
    x0, x1 = mel_pair(20)
    with torch.no_grad():
        a, b = m(x0, x1, window=5), back(x0, x1, window=5)
    for k in ("vap_logits", "vad_logits", "bc_logits"):
        assert torch.equal(getattr(a, k), getattr(b, k))


def test_checkpoint_errors(tmp_path):
    m = init_model(tiny())
    path = tmp_path / "m.bin"
    store_checkpoint(m, path)
    data = path.read_bytes()
    with pytest.raises(NotFound):
        load_checkpoint(tmp_path / "none.bin")
    (tmp_path / "magic.bin").write_bytes(b"XXXX" + data[4:])
    with pytest.raises(BadMagic):
        load_checkpoint(tmp_path / "magic.bin")
    (tmp_path / "ver.bin").write_bytes(data[:4] + struct.pack("<I", 99) + data[8:])
    with pytest.raises(VersionMismatch):
        load_checkpoint(tmp_path / "ver.bin")
    for cut in (2, 10, len(data) // 2, len(data) - 1):
        (tmp_path / "cut.bin").write_bytes(data[:cut])
        with pytest.raises((BadMagic, MissingTensor)):
            load_checkpoint(tmp_path / "cut.bin")
    with pytest.raises(ConfigMismatch):
        load_checkpoint(path, expect_bc_classes=3)


def test_checkpoint_shape_disagreement_rejected(tmp_path):
    m = init_model(tiny())
    store_checkpoint(m, tmp_path / "m.bin")
    m3 = reset_bc_head(init_model(tiny()), 3)
    store_checkpoint(m3, tmp_path / "m3.bin")
    # Rewrite the header of the 3-class file to claim 2 classes: shapes then disagree.
    data = (tmp_path / "m3.bin").read_bytes().replace(b'"bc_classes": 3', b'"bc_classes": 2')
    (tmp_path / "bad.bin").write_bytes(data)
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "bad.bin")


def test_feature_file_round_trip(tmp_path):
    f = FeatureSequence(np.random.default_rng(0).normal(size=(7, 16)).astype(np.float32), 10)
    write_feature_file(tmp_path / "f.bin", f)
    back = read_feature_file(tmp_path / "f.bin")
    assert np.array_equal(back.frames, f.frames) and back.frame_rate == 10
    (tmp_path / "t.bin").write_bytes((tmp_path / "f.bin").read_bytes()[:-4])
    with pytest.raises(CheckpointError):
        read_feature_file(tmp_path / "t.bin")
