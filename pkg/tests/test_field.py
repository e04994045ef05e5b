import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from genn2n import tensor as T
from genn2n.field import (PretrainConfig, RenderConfig, composite, encoded_width,
                          init_original_field, load_field, positional_encode, pretrain_original_nerf,
                          read_arrays, render_image, sample_bins, save_field, translated_field_eval,
                          translated_from, volume_render, write_arrays)
from genn2n.scene import AnalyticScene, CameraPose, Rays, Sphere, make_camera_ring, ray_bounds, render_views
from genn2n.tensor import ShapeError, Tensor

from helpers import fd_check


def small_field(seed=0, code_dim=4):
    rng = np.random.default_rng(seed)
    return translated_from(init_original_field(rng), code_dim, rng)


def random_rays(rng, n, t_near=1.0, t_far=4.0):
    o = rng.normal(size=(n, 3)) * 0.2 + np.array([0.0, 0.0, -2.5])
    d = rng.normal(size=(n, 3)) * 0.2 + np.array([0.0, 0.0, 1.0])
    d /= np.linalg.norm(d, axis=-1, keepdims=True)
    return Rays(o, d, t_near, t_far)


# -- positional encoding ----------------------------------------------------------

def test_encoding_at_zero():
    out = positional_encode(np.zeros(3), 3)
    per = np.array([0.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0])
    np.testing.assert_array_equal(out, np.tile(per, 3))


def test_encoding_identity_and_width():
    x = np.array([0.3, -0.7, 0.1])
    np.testing.assert_array_equal(positional_encode(x, 0), x)
    assert positional_encode(x, 4).shape == (27,)
    assert encoded_width(4) == 27
    with pytest.raises(ValueError):
        positional_encode(x, -1)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-2, 2), min_size=3, max_size=3), st.integers(0, 6))
def test_encoding_matches_direct_formula(x, levels):
    x = np.array(x)
    out = positional_encode(x, levels).reshape(3, 1 + 2 * levels)
    for c in range(3):
        assert out[c, 0] == x[c]
        for k in range(levels):
            assert out[c, 1 + 2 * k] == pytest.approx(math.sin(2 ** k * math.pi * x[c]), abs=1e-10)
            assert out[c, 2 + 2 * k] == pytest.approx(math.cos(2 ** k * math.pi * x[c]), abs=1e-10)


# -- field evaluation ----------------------------------------------------------------

def test_field_output_ranges_and_determinism():
    fld = small_field()
    rng = np.random.default_rng(1)
    pts, dirs = rng.normal(size=(50, 3)), rng.normal(size=(50, 3))
    z = rng.normal(size=4)
    s1, c1 = translated_field_eval(fld, pts, dirs, z)
    s2, c2 = translated_field_eval(fld, pts, dirs, z)
    assert np.all(s1.data >= 0) and np.all((c1.data > 0) & (c1.data < 1))
    np.testing.assert_array_equal(s1.data, s2.data)
    np.testing.assert_array_equal(c1.data, c2.data)
    _, c3 = translated_field_eval(fld, pts, dirs, rng.normal(size=4))
    assert not np.array_equal(c1.data, c3.data)


def test_zero_final_layers_give_neutral_outputs():
    fld = small_field()
    for head in (fld.density_head, fld.color_head):
        head[-1][0].data[:] = 0.0
        head[-1][1].data[:] = 0.0
    rng = np.random.default_rng(2)
    sigma, rgb = translated_field_eval(fld, rng.normal(size=(20, 3)), rng.normal(size=(20, 3)), np.ones(4))
    np.testing.assert_allclose(sigma.data, math.log(2.0), atol=1e-15)
    np.testing.assert_allclose(rgb.data, 0.5, atol=1e-15)


def test_code_ablation_gives_unconditional_field():
    fld = small_field()
    feat = fld.feature_width
    for head in (fld.density_head, fld.color_head):
        head[0][0].data[feat:] = 0.0  # z columns removed
    rng = np.random.default_rng(3)
    pts, dirs = rng.normal(size=(30, 3)), rng.normal(size=(30, 3))
    a = translated_field_eval(fld, pts, dirs, rng.normal(size=4))
    b = translated_field_eval(fld, pts, dirs, rng.normal(size=4) * 10)
    assert np.array_equal(a[0].data, b[0].data) and np.array_equal(a[1].data, b[1].data)


def test_code_dimension_mismatch():
    fld = small_field()
    with pytest.raises(ShapeError):
        translated_field_eval(fld, np.zeros((2, 3)), np.ones((2, 3)), np.zeros(5))
    with pytest.raises(ShapeError):
        translated_field_eval(fld, np.zeros((2, 3)), np.ones((2, 3)), None)


def test_translated_keeps_trunk_and_reinits_heads():
    rng = np.random.default_rng(4)
    orig = init_original_field(rng)
    tr = translated_from(orig, 8, rng)
    for a, b in zip(orig.trunk, tr.trunk):
        np.testing.assert_array_equal(a[0].data, b[0].data)
        assert a[0] is not b[0]
    assert tr.density_head[0][0].shape == (orig.feature_width + 8, 32)
    assert tr.color_head[-1][0].shape == (32, 3)


def test_rgb_gradient_wrt_code_nonzero_after_step():
    fld = small_field(5)
    z = T.param(np.zeros(4))
    rng = np.random.default_rng(5)
    pts, dirs = rng.normal(size=(64, 3)), rng.normal(size=(64, 3))
    opt = T.Adam(fld.parameters(include_trunk=False), lr=1e-2)
    target = np.array([0.9, 0.1, 0.1])
    _, rgb = translated_field_eval(fld, pts, dirs, z)
    loss = T.square(rgb - target).mean()
    opt.zero_grad()
    T.backward(loss)
    opt.step()
    z.grad = None
    _, rgb = translated_field_eval(fld, pts, dirs, z)
    T.backward(rgb.sum())
    assert np.linalg.norm(z.grad) > 0
    assert fd_check(lambda: translated_field_eval(fld, pts, dirs, z)[1].sum(), [z], n_probes=4) < 1e-4


# -- volume rendering ----------------------------------------------------------------

def test_zero_density_gives_background():
    n_rays, n = 7, 16
    sigma = Tensor(np.zeros((n_rays, n)))
    rgb = Tensor(np.random.default_rng(0).random((n_rays, n, 3)))
    pix, w, total = composite(sigma, rgb, np.full((n_rays, n), 0.1), np.array([0.2, 0.3, 0.4]))
    np.testing.assert_array_equal(pix.data, np.broadcast_to([0.2, 0.3, 0.4], (n_rays, 3)))
    np.testing.assert_array_equal(w.data.sum(-1), 0.0)


def test_constant_medium_matches_closed_form():
    sig, L, c, bg = 1.3, 2.0, np.array([0.9, 0.2, 0.4]), np.array([0.1, 0.5, 0.7])
    edges, _ = sample_bins(1, 0.0, L, 48, False, None)
    deltas = np.diff(edges, axis=-1)
    pix, _, _ = composite(Tensor(np.full((1, 48), sig)), Tensor(np.broadcast_to(c, (1, 48, 3)).copy()), deltas, bg)
    expect = c * (1 - math.exp(-sig * L)) + bg * math.exp(-sig * L)
    np.testing.assert_allclose(pix.data[0], expect, atol=1e-3)


def test_weight_sum_identity():
    rng = np.random.default_rng(6)
    n_rays, n = 2000, 32
    sigma = rng.exponential(2.0, size=(n_rays, n)) * (rng.random((n_rays, n)) < 0.7)
    deltas = rng.uniform(0.01, 0.2, size=(n_rays, n))
    _, w, total = composite(Tensor(sigma), Tensor(rng.random((n_rays, n, 3))), deltas, np.zeros(3))
    ws = w.data.sum(-1)
    np.testing.assert_allclose(ws, 1 - np.exp(-(sigma * deltas).sum(-1)), atol=1e-9)
    assert np.all((ws >= 0) & (ws <= 1))


def test_bins_span_bounds():
    edges, t = sample_bins(5, 1.5, 4.0, 8, True, np.random.default_rng(0))
    np.testing.assert_allclose(np.diff(edges, axis=-1).sum(-1), 2.5, atol=1e-14)
    assert np.all((t >= edges[:, :-1]) & (t <= edges[:, 1:]))
    with pytest.raises(ValueError):
        sample_bins(5, 1.5, 4.0, 8, True, None)
    with pytest.raises(ValueError):
        RenderConfig(1)


def test_volume_render_finite_differences():
    fld = small_field(7)
    rng = np.random.default_rng(7)
    rays = random_rays(rng, 12)
    z = T.param(rng.normal(size=4))
    cfg = RenderConfig(16, stratified=False)
    target = rng.random((12, 3))
    leaves = fld.parameters() + [z]
    loss = lambda: T.square(volume_render(fld, rays, z, cfg).rgb - target).sum()
    assert fd_check(loss, leaves, n_probes=100, rng=rng) < 1e-3


def test_render_image_deterministic_and_chunk_invariant():
    fld = small_field(8)
    pose = CameraPose((0.0, 1.0, -3.0), (0.0, 0.0, 0.0), focal=10.0, width=8, height=8)
    cfg = RenderConfig(16, stratified=False)
    z = np.ones(4) * 0.3
    a = render_image(fld, pose, 1.0, 5.0, z, cfg)
    b = render_image(fld, pose, 1.0, 5.0, z, cfg, chunk=7)
    assert a.shape == (8, 8, 3)
    np.testing.assert_allclose(a, b, atol=1e-15)
    np.testing.assert_array_equal(a, render_image(fld, pose, 1.0, 5.0, z, cfg))


# -- checkpoints ---------------------------------------------------------------------

def test_checkpoint_roundtrip(tmp_path):
    fld = small_field(9)
    save_field(fld, tmp_path / "f.gn2n")
    raw = (tmp_path / "f.gn2n").read_bytes()
    assert raw[:4] == b"GN2N" and int.from_bytes(raw[4:8], "little") == 1
    back = load_field(tmp_path / "f.gn2n")
    for a, b in zip(fld.parameters(), back.parameters()):
        np.testing.assert_array_equal(a.data, b.data)
    assert back.code_dim == 4 and back.pos_levels == fld.pos_levels
    assert not list(tmp_path.glob("*.tmp"))


def test_checkpoint_rejects_bad_magic(tmp_path):
    (tmp_path / "x").write_bytes(b"NOPE" + bytes(20))
    with pytest.raises(ValueError):
        read_arrays(tmp_path / "x")
    write_arrays(tmp_path / "y", [3], [np.arange(6.0).reshape(2, 3), np.array(2.5)])
    meta, arrs = read_arrays(tmp_path / "y")
    assert meta == [3] and arrs[0].shape == (2, 3) and float(arrs[1]) == 2.5


# -- pretraining ---------------------------------------------------------------------

def test_pretrain_constant_color_scene():
    color = (0.3, 0.6, 0.2)
    scene = AnalyticScene((Sphere((0.0, 0.0, 0.0), 0.8, color, 30.0),), color,
                          ((-1.0, -1.0, -1.0), (1.0, 1.0, 1.0)))
    poses = make_camera_ring(4, 3.0, scene, width=16, height=16, focal=20.0)
    images = render_views(scene, poses, 64)
    cfg = PretrainConfig(iters=150, rays_per_step=256, samples_per_ray=16, lr=1e-2, log_every=0)
    fld, train_psnr = pretrain_original_nerf(images, poses, ray_bounds(poses[0], scene), cfg, color)
    assert train_psnr > 40.0


def test_pretrain_needs_two_views():
    poses = make_camera_ring(2, 4.0, AnalyticScene((Sphere((0, 0, 0), 0.5, (1, 1, 1), 1.0),)), width=4, height=4)
    with pytest.raises(ValueError):
        pretrain_original_nerf([np.zeros((4, 4, 3))], poses[:1], (1.0, 5.0))
