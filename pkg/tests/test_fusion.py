import numpy as np
import pytest

from mmkgr import fusion
from mmkgr.numerics import Tape, grad_check


def _params(d_x=6, d_y=9, d=5, j=4, seed=0, random_gl=True):
    rng = np.random.default_rng(seed)
    p = fusion.FusionParameters(d_x, d_y, d, j, rng, y_std=0.5)
    if random_gl:
        # with the ones init every a_i is exactly 1 and the gate gradients vanish
        p.w_gl.value[...] = rng.normal(0.0, 1.0, p.w_gl.value.shape)
    return p, rng


def test_shapes_and_ranges():
    p, rng = _params()
    x, y = rng.normal(size=(3, 6)), rng.normal(size=(3, 9))
    tp = Tape()
    f = fusion.fuse(tp, tp.const(y), tp.const(x), p)
    assert f.b_l.value.shape == f.b_r.value.shape == (3, 4)
    assert f.gate.value.shape == f.g_s.value.shape == (3, 5)
    assert f.attn.value.shape == f.g_f.value.shape == (3, 1)
    assert f.z.value.shape == (3, 4) and f.z_pooled.value.shape == (1, 4)
    assert ((f.gate.value > 0) & (f.gate.value < 1)).all()
    assert ((f.g_f.value > 0) & (f.g_f.value < 1)).all()
    np.testing.assert_allclose(f.g_s.value.sum(axis=1), 1.0, atol=1e-12)
    np.testing.assert_allclose(f.pooled_values(), f.v_hat.value.sum(axis=0))


def test_zero_queries_zero_joint_features():
    p, rng = _params()
    tp = Tape()
    f = fusion.fuse(tp, tp.const(rng.normal(size=(2, 9))), tp.const(np.zeros((2, 6))), p)
    assert (f.b_l.value == 0).all() and (f.b_r.value == 0).all()
    np.testing.assert_allclose(f.gate.value, 0.5)
    np.testing.assert_allclose(f.g_f.value, 0.5)
    assert (f.z.value == 0).all()


def test_uniform_gate_constant_rows_give_uniform_attention():
    p, _ = _params()
    tp = Tape()
    g = tp.const(np.full((2, 5), 0.5))
    k = q = tp.const(np.full((2, 5), 1.3))
    g_s, _ = fusion.gated_attention(tp, g, k, q, p)
    np.testing.assert_allclose(g_s.value, 0.2)


def test_ones_attention_projection_starts_as_identity():
    p, rng = _params(random_gl=False)
    tp = Tape()
    f = fusion.fuse(tp, tp.const(rng.normal(size=(3, 9))), tp.const(rng.normal(size=(3, 6))), p)
    np.testing.assert_allclose(f.attn.value, 1.0)
    np.testing.assert_allclose(f.v_hat.value, f.b_r.value)


def test_attend_examples():
    tp = Tape()
    b_r = tp.const(np.arange(6.0).reshape(2, 3))
    assert (fusion.attend(tp, tp.const([[0.0], [0.0]]), b_r).value == 0).all()
    np.testing.assert_array_equal(fusion.attend(tp, tp.const([[1.0], [1.0]]), b_r).value,
                                  b_r.value)


@pytest.mark.parametrize("mode", fusion.MODES)
def test_fusion_gradient_check_five_seeds(mode):
    for seed in range(5):
        p, rng = _params(seed=seed)
        x, y = Tape().const(rng.normal(size=(4, 6))), Tape().const(rng.normal(size=(4, 9)))
        C = rng.normal(size=(4, 4))
        err = grad_check(lambda tp: tp.weighted_sum(fusion.fuse(tp, y, x, p, mode).z, C),
                         p.parameters(), seed=seed)
        assert err < 1e-4, (mode, seed, err)


def test_ablation_modes_skip_stages():
    p, rng = _params()
    tp = Tape()
    y, x = tp.const(rng.normal(size=(2, 9))), tp.const(rng.normal(size=(2, 6)))
    fa = fusion.fuse(tp, y, x, p, fusion.SKIP_FILTER)
    assert "irrelevance_filter" not in fa.trace and fa.z is fa.v_hat
    fg = fusion.fuse(tp, y, x, p, fusion.SKIP_ATTENTION)
    assert "gated_attention" not in fg.trace and fg.attn is None
    with pytest.raises(ValueError):
        fusion.fuse(tp, y, x, p, "nope")
    with pytest.raises(ValueError):
        fusion.fuse(tp, y, tp.const(np.zeros((3, 6))), p)
