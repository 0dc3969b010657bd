import copy

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from njepa import autodiff as ad
from njepa.autodiff import Tensor
from njepa.vit import (Encoder, EncoderConfig, ModelBundle, PredictorConfig, encode_student,
                       encode_teacher, key_bias, patchify, predict, sincos_2d, unpatchify)

ENC = EncoderConfig(grid_h=4, grid_w=4, patch_size=2, channels=3, embed_dim=16, depth=2, heads=2)
PRED = PredictorConfig(embed_dim=8, depth=1, heads=2, out_dim=16)


def bundle(dtype=np.float64, **kw):
    return ModelBundle(ENC, PRED, np.random.default_rng(0), dtype=dtype, **kw)


def test_patchify_order():
    img = np.arange(2 * 3 * 4 * 4, dtype=float).reshape(2, 3, 4, 4)
    p = patchify(img, 2)
    assert p.shape == (2, 4, 12)
    # first patch, first pixel, all channels
    assert p[0, 0, :3].tolist() == [img[0, 0, 0, 0], img[0, 1, 0, 0], img[0, 2, 0, 0]]
    # patch 1 is the top-right 2x2 block
    assert p[0, 1, 0] == img[0, 0, 0, 2]
    with pytest.raises(ValueError):
        patchify(img, 3)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 3), st.integers(1, 4), st.integers(1, 3), st.integers(1, 3), st.integers(1, 3))
def test_patchify_roundtrip(b, c, p, gh, gw):
    img = np.random.default_rng(0).standard_normal((b, c, gh * p, gw * p))
    assert np.array_equal(unpatchify(patchify(img, p), p, (gh, gw), c), img)


def test_sincos_table():
    t = sincos_2d(16, 4, 4)
    assert t.shape == (16, 16)
    assert len({tuple(r) for r in np.round(t, 12)}) == 16
    assert np.allclose(t[0], np.r_[np.zeros(4), np.ones(4), np.zeros(4), np.ones(4)])


def test_config_validation():
    with pytest.raises(ValueError):
        EncoderConfig(embed_dim=30, heads=4)
    with pytest.raises(ValueError):
        EncoderConfig(embed_dim=6, heads=2)
    with pytest.raises(ValueError):
        ModelBundle(ENC, PredictorConfig(8, 1, 2, out_dim=32), np.random.default_rng(0))


def test_encoder_shapes(rng):
    b = bundle()
    x = patchify(rng.standard_normal((3, 3, 8, 8)), 2)
    assert encode_teacher(b, x).shape == (3, 16, 16)
    idx = np.array([0, 5, 6])
    assert encode_student(b, x, idx).shape == (3, 3, 16)
    outs = b.student(x, return_last=2)
    assert len(outs) == 2 and all(o.shape == (3, 16, 16) for o in outs)
    with pytest.raises(ValueError):
        encode_student(b, x, np.zeros((3, 0), int))


def test_teacher_copy_frozen():
    b = bundle()
    for (n1, p1), (n2, p2) in zip(b.student.named_parameters(), b.teacher.named_parameters()):
        assert n1 == n2 and np.array_equal(p1.data, p2.data) and p1 is not p2
        assert p1.requires_grad and not p2.requires_grad


def test_padding_mask_hides_keys(rng):
    # padded slots must not change the valid outputs
    b = bundle()
    x = patchify(rng.standard_normal((1, 3, 8, 8)), 2)
    idx = np.array([[1, 2, 3]])
    short = b.student(x, idx).data
    padded_idx = np.array([[1, 2, 3, 0, 0]])
    valid = np.array([[True, True, True, False, False]])
    long = b.student(x, padded_idx, valid).data
    assert np.allclose(short, long[:, :3], atol=1e-12)


def test_predictor_output_and_target_padding(rng):
    b = bundle()
    z = Tensor(rng.standard_normal((2, 3, 16)))
    psi = b.pos_embed[np.array([[4, 5, 6], [7, 8, 0]])]
    tv = np.array([[True, True, True], [True, True, False]])
    out = predict(b, "context", z, psi, tgt_valid=tv)
    assert out.shape == (2, 3, 16)
    alone = predict(b, "context", Tensor(z.data[1:]), psi[1:, :2])
    assert np.allclose(out.data[1, :2], alone.data[0], atol=1e-12)
    with pytest.raises(ValueError):
        predict(b, "other", z, psi)
    with pytest.raises(ValueError):
        predict(b, "noise", z, psi[:, :, :4])
    with pytest.raises(ValueError):
        predict(b, "noise", z, psi, target_indices=np.zeros((2, 2), int))


def test_predictor_context_positions(rng):
    b = bundle()
    z = Tensor(rng.standard_normal((2, 3, 16)))
    psi = b.pos_embed[np.array([[4, 5, 6], [7, 8, 0]])]
    ctx_pos = b.pos_embed[np.array([[0, 1, 2], [1, 2, 3]])]
    plain = predict(b, "context", z, psi)
    placed = predict(b, "context", z, psi, psi_context=ctx_pos)
    assert not np.allclose(plain.data, placed.data)
    zero = predict(b, "context", z, psi, psi_context=np.zeros_like(ctx_pos))
    assert np.array_equal(plain.data, zero.data)
    with pytest.raises(ValueError):
        predict(b, "context", z, psi, psi_context=ctx_pos[:, :2])


def test_sharing_flags():
    b = bundle(share_predictors=True, share_mask_tokens=True)
    assert b.predictor_c is b.predictor_n and b.mask_token_c is b.mask_token_n
    u = bundle()
    assert u.predictor_c is not u.predictor_n
    assert not np.array_equal(u.predictor_c.embed.weight.data, u.predictor_n.embed.weight.data)
    names = [n for n, _ in b.trainable()]
    assert len(names) == len(set(names))
    assert len(b.trainable()) < len(u.trainable())


def test_encoder_gradcheck(rng):
    b = bundle()
    x = patchify(rng.standard_normal((2, 3, 8, 8)), 2)
    params = dict(b.student.named_parameters())
    w = rng.standard_normal((2, 16, 16))
    loss = lambda: ad.sum(ad.mul(b.student(x), Tensor(w)))
    for name in ("patch_embed.weight", "blocks.0.attn.q.weight", "blocks.1.mlp.fc1.bias", "norm.gain"):
        p = params[name]
        b.student.zero_grad()
        loss().backward()
        entries = [int(i) for i in rng.choice(p.data.size, size=min(6, p.data.size), replace=False)]
        num = ad.numerical_grad(loss, p, entries=entries).reshape(-1)[entries]
        assert ad.relative_error(p.grad.reshape(-1)[entries], num) < 1e-4, name


def test_float32_forward(rng):
    b = bundle(np.float32)
    x = patchify(rng.standard_normal((2, 3, 8, 8)), 2)
    assert encode_teacher(b, x).dtype == np.float32


def test_key_bias():
    kb = key_bias(np.array([[True, False]]), np.float32)
    assert kb.shape == (1, 1, 1, 2) and kb[0, 0, 0, 0] == 0 and kb[0, 0, 0, 1] < -1e8
    assert key_bias(None, np.float32) is None


def test_patch_embed_fan_in_scale():
    cfg = EncoderConfig(grid_h=8, grid_w=8, patch_size=4, channels=3, embed_dim=64)
    w = Encoder(cfg, np.random.default_rng(0)).patch_embed.weight.data
    bound = 2 * cfg.patch_dim ** -0.5
    assert np.abs(w).max() <= bound
    # a 2-sigma truncated normal keeps about 88% of the nominal std
    assert 0.8 * cfg.patch_dim ** -0.5 < w.std() < cfg.patch_dim ** -0.5
