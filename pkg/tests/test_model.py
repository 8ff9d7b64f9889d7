import dataclasses

import numpy as np
import pytest
import torch

from rgbtmae.model import (PRESETS, ModelConfig, MultiHeadAttention, SiameseMAE, build_model,
                           finite_difference_check, masked_mse, normalize_patch_targets,
                           reconstruction_loss, sincos_2d)
from rgbtmae.patchgrid import normalize_targets, patchify

TINY = PRESETS["tiny"]


def np_attention(xq, xkv, w_qkv, b_qkv, w_o, b_o, heads):
    """Loop-per-head numpy oracle for packed-projection attention."""
    d = xq.shape[-1]
    hd = d // heads
    q = xq @ w_qkv[:d].T + b_qkv[:d]
    k = xkv @ w_qkv[d:2 * d].T + b_qkv[d:2 * d]
    v = xkv @ w_qkv[2 * d:].T + b_qkv[2 * d:]
    outs = []
    for h in range(heads):
        s = slice(h * hd, (h + 1) * hd)
        logits = q[:, s] @ k[:, s].T / np.sqrt(hd)
        logits -= logits.max(axis=1, keepdims=True)
        p = np.exp(logits)
        p /= p.sum(axis=1, keepdims=True)
        outs.append(p @ v[:, s])
    return np.concatenate(outs, axis=1) @ w_o.T + b_o


@pytest.mark.parametrize("cross", [False, True])
def test_attention_matches_numpy_oracle(cross):
    torch.manual_seed(0)
    att = MultiHeadAttention(16, 4).double()
    for p in att.parameters():
        torch.nn.init.normal_(p, std=0.3)
    xq = torch.randn(1, 5, 16, dtype=torch.float64)
    xkv = torch.randn(1, 7, 16, dtype=torch.float64) if cross else xq
    got = att(xq, xkv)[0].detach().numpy()
    ref = np_attention(xq[0].numpy(), xkv[0].numpy(), att.qkv.weight.detach().numpy(),
                       att.qkv.bias.detach().numpy(), att.proj.weight.detach().numpy(),
                       att.proj.bias.detach().numpy(), 4)
    np.testing.assert_allclose(got, ref, atol=1e-12)


def test_sincos_table():
    t = sincos_2d(8, 3)
    assert t.shape == (9, 8)
    np.testing.assert_allclose(t[0], [0, 0, 1, 1, 0, 0, 1, 1])
    with pytest.raises(ValueError):
        sincos_2d(6, 3)


def test_patchify_matches_numpy_grid(rng):
    m = build_model(TINY)
    img = rng.normal(size=(32, 32, 3))
    got = m.patchify(torch.from_numpy(img)[None])[0].numpy()
    np.testing.assert_array_equal(got, patchify(img, 8).patches)


def test_patch_targets_match_numpy(rng):
    img = rng.normal(size=(32, 32, 3))
    img[:8, :8] = 0.25
    px = torch.from_numpy(patchify(img, 8).patches)[None]
    np.testing.assert_allclose(normalize_patch_targets(px)[0].numpy(),
                               normalize_targets(patchify(img, 8)).targets, atol=1e-12)


def _batch(cfg, B=2, v=3, seed=0, dtype=torch.float64):
    g = torch.Generator().manual_seed(seed)
    L = cfg.num_patches
    px_r = torch.randn(B, L, cfg.patch_dim, generator=g, dtype=dtype)
    px_t = torch.randn(B, L, cfg.patch_dim, generator=g, dtype=dtype)
    vis_r = torch.stack([torch.randperm(L, generator=g)[:v].sort().values for _ in range(B)])
    vis_t = torch.stack([torch.randperm(L, generator=g)[:v].sort().values for _ in range(B)])
    mr = torch.ones(B, L, dtype=torch.bool).scatter(1, vis_r, False)
    mt = torch.ones(B, L, dtype=torch.bool).scatter(1, vis_t, False)
    return dict(px_rgb=px_r, px_t=px_t, tgt_rgb=normalize_patch_targets(px_r),
                tgt_t=normalize_patch_targets(px_t), vis_rgb=vis_r, vis_t=vis_t,
                masked_rgb=mr, masked_t=mt)


def test_forward_shapes_and_finite():
    m = build_model(TINY)
    b = _batch(TINY, dtype=torch.float32)
    pr, pt = m(b["px_rgb"], b["px_t"], b["vis_rgb"], b["vis_t"])
    assert pr.shape == (2, TINY.num_patches, TINY.patch_dim) == pt.shape
    assert torch.isfinite(pr).all() and torch.isfinite(pt).all()


def test_build_is_seed_deterministic():
    a, b, c = build_model(TINY, 3), build_model(TINY, 3), build_model(TINY, 4)
    for (n, p), q, r in zip(a.named_parameters(), b.parameters(), c.parameters()):
        assert torch.equal(p, q), n
    assert not all(torch.equal(p, r) for p, r in zip(a.parameters(), c.parameters()))


def test_cross_attention_starts_as_identity():
    m = build_model(TINY).double()
    b = _batch(TINY)
    with_x = m(b["px_rgb"], b["px_t"], b["vis_rgb"], b["vis_t"], use_cross=True)
    without = m(b["px_rgb"], b["px_t"], b["vis_rgb"], b["vis_t"], use_cross=False)
    for x, y in zip(with_x, without):
        assert torch.equal(x, y)


def test_exchange_shares_weights_both_directions():
    m = build_model(TINY).double()
    torch.nn.init.normal_(m.cross.proj.weight, std=0.1)
    z = torch.randn(1, 3, TINY.embed_dim, dtype=torch.float64)
    a, b = m.cross_attend(z, z.clone())
    assert torch.allclose(a, b)


def test_zero_depth_encoder_norm_is_identity():
    cfg = dataclasses.replace(TINY, depth=0)
    m = build_model(cfg).double()
    px = torch.randn(1, cfg.num_patches, cfg.patch_dim, dtype=torch.float64)
    out = m.encode_all(px)
    np.testing.assert_allclose(out.detach().numpy(),
                               (m.embed(px) + m.pos_embed).detach().numpy(), atol=1e-12)


def test_no_visible_patch_raises():
    m = build_model(TINY)
    with pytest.raises(ValueError):
        m.encode_visible(torch.zeros(1, TINY.num_patches, TINY.embed_dim),
                         torch.zeros(1, 0, dtype=torch.long))


def test_loss_ignores_visible_patches():
    m = build_model(TINY).double()
    b = _batch(TINY)
    pr, pt = m(b["px_rgb"], b["px_t"], b["vis_rgb"], b["vis_t"])
    base = reconstruction_loss(pr, pt, b["tgt_rgb"], b["tgt_t"], b["masked_rgb"], b["masked_t"])
    tgt = b["tgt_rgb"].clone()
    idx = b["vis_rgb"][0, 0]
    tgt[0, idx] += 100.0  # perturb a visible patch's target
    again = reconstruction_loss(pr, pt, tgt, b["tgt_t"], b["masked_rgb"], b["masked_t"])
    assert torch.equal(base[1], again[1])


def test_masked_mse_matches_loop(rng):
    pred = torch.from_numpy(rng.normal(size=(2, 4, 3)))
    tgt = torch.from_numpy(rng.normal(size=(2, 4, 3)))
    mask = torch.tensor([[True, False, True, False], [False, False, False, True]])
    errs = [((pred[b, i] - tgt[b, i]) ** 2).mean().item()
            for b in range(2) for i in range(4) if mask[b, i]]
    assert masked_mse(pred, tgt, mask).item() == pytest.approx(np.mean(errs), rel=1e-12)


def test_finite_difference_tiny():
    m = build_model(TINY)
    err = finite_difference_check(m, _batch(TINY), 40, np.random.default_rng(0))
    assert err < 1e-4


def test_finite_difference_step_sweep_is_v_shaped():
    """Error falls with h until roundoff takes over."""
    errs = {}
    for h in (1e-1, 1e-3, 1e-5, 1e-10):
        m = build_model(TINY, seed=1)
        errs[h] = finite_difference_check(m, _batch(TINY, seed=1), 20,
                                          np.random.default_rng(2), h=h)
    assert errs[1e-5] < errs[1e-1]
    assert errs[1e-5] < errs[1e-10]
    assert errs[1e-3] < errs[1e-1]


def test_finite_difference_detects_a_wrong_gradient():
    m = build_model(TINY).double()
    b = _batch(TINY)
    # corrupt the forward with a detached factor so autograd misses part of the slope
    orig = m.decoders["rgb"].head.forward

    def bad(x):
        y = orig(x)
        return y + (y.detach() - y) * 0.5

    m.decoders["rgb"].head.forward = bad
    err = finite_difference_check(m, b, 40, np.random.default_rng(0))
    assert err > 1e-2


def test_config_properties():
    cfg = ModelConfig(img_size=48, patch_size=8)
    assert cfg.grid_side == 6 and cfg.num_patches == 36 and cfg.patch_dim == 192
    assert PRESETS["desk"].embed_dim == 128 and PRESETS["desk"].decoder_depth == 4
    assert PRESETS["fidelity"].embed_dim == 768
