import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from metricseg.errors import CheckpointError, ValidationError
from metricseg.geometry import PointCloud, voxelize
from metricseg.model import (
    ADAM_EPS, BETA1, BETA2, adam_step, backward, featurize, forward, init_model, load_checkpoint,
    lr_schedule, save_checkpoint, softmax_cross_entropy,
)
from oracles import brute_density, central_difference


def small_model(seed=0, separate=False):
    return init_model(seed, input_width=5, hidden=(7, 6, 4), embed_dim=3, n_classes=4, separate_semantic_net=separate)


def slow_forward(state, x):
    """Row-by-row, unit-by-unit evaluation of the same network."""
    p = state.params
    per = 2 * state.n_hidden
    outs = []
    for t in range(state.n_trunks):
        h = [list(row) for row in x]
        for i in range(t * per, (t + 1) * per, 2):
            W, b = p[i], p[i + 1]
            h = [[max(sum(r[a] * W[a, c] for a in range(len(r))) + b[c], 0.0) for c in range(W.shape[1])] for r in h]
        outs.append(np.array(h))
    emb = outs[0] @ p[-4] + p[-3]
    logits = outs[-1] @ p[-2] + p[-1]
    return emb, logits


# --- forward ---------------------------------------------------------------


def test_zero_weights_give_bias():
    st_ = small_model()
    for a in st_.params:
        a[...] = 0.0
    st_.params[-3][:] = [0.5, -1.0, 2.0]
    emb, _ = forward(st_, np.random.default_rng(0).normal(size=(6, 5)))
    np.testing.assert_array_equal(emb, np.tile([0.5, -1.0, 2.0], (6, 1)))


@pytest.mark.parametrize("separate", [False, True])
def test_forward_matches_slow_reimplementation(separate):
    st_ = small_model(3, separate)
    for a in st_.params[1::2]:
        a[:] = np.random.default_rng(1).normal(0, 0.3, a.shape)
    x = np.random.default_rng(2).normal(size=(8, 5))
    emb, logits = forward(st_, x)
    ref_e, ref_l = slow_forward(st_, x)
    np.testing.assert_allclose(emb, ref_e, atol=1e-12)
    np.testing.assert_allclose(logits, ref_l, atol=1e-12)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31))
def test_pointwise_permutation_and_duplication(seed):
    rng = np.random.default_rng(seed)
    st_ = small_model(seed % 7)
    x = rng.normal(size=(10, 5))
    perm = rng.permutation(10)
    e, l = forward(st_, x)
    ep, lp = forward(st_, x[perm])
    np.testing.assert_array_equal(ep, e[perm])
    np.testing.assert_array_equal(lp, l[perm])
    ed, _ = forward(st_, x[[3, 3]])
    np.testing.assert_array_equal(ed[0], ed[1])


def test_width_mismatch():
    with pytest.raises(ValidationError):
        forward(small_model(), np.zeros((3, 4)))


# --- backward --------------------------------------------------------------


def test_zero_output_gradients():
    st_ = small_model()
    x = np.random.default_rng(0).normal(size=(5, 5))
    for g in backward(st_, x, np.zeros((5, 3)), np.zeros((5, 4))):
        assert not g.any()


def test_bias_gradient_of_sum_is_n():
    st_ = small_model()
    x = np.random.default_rng(0).normal(size=(9, 5))
    g = backward(st_, x, np.ones((9, 3)), np.zeros((9, 4)))
    np.testing.assert_array_equal(g[-3], [9.0, 9.0, 9.0])


@pytest.mark.parametrize("separate", [False, True])
def test_backward_finite_difference(separate):
    rng = np.random.default_rng(5)
    st_ = small_model(11, separate)
    for a in st_.params[1::2]:
        a[:] = rng.normal(0, 0.2, a.shape)
    x = rng.normal(size=(12, 5))
    ge, gl = rng.normal(size=(12, 3)), rng.normal(size=(12, 4))
    grads = backward(st_, x, ge, gl)
    for p, g in zip(st_.params, grads):
        def f(_):
            e, l = forward(st_, x)
            return float((e * ge).sum() + (l * gl).sum())
        num = central_difference(f, p, 1e-5)
        assert np.abs(num - g).max() / max(np.abs(num).max(), 1e-12) < 1e-5


def test_backward_shape_mismatch():
    with pytest.raises(ValidationError):
        backward(small_model(), np.zeros((4, 5)), np.zeros((4, 2)), np.zeros((4, 4)))


def test_cross_entropy_gradient():
    rng = np.random.default_rng(0)
    logits = rng.normal(size=(7, 4))
    labels = rng.integers(0, 4, 7)
    loss, g = softmax_cross_entropy(logits, labels)
    num = central_difference(lambda z: softmax_cross_entropy(z, labels)[0], logits.copy(), 1e-6)
    np.testing.assert_allclose(g, num, atol=1e-9)
    p = np.exp(logits) / np.exp(logits).sum(axis=1, keepdims=True)
    assert loss == pytest.approx(-np.log(p[np.arange(7), labels]).mean(), abs=1e-14)


# --- optimizer -------------------------------------------------------------


def scalar_state(value):
    st_ = small_model()
    st_.params = [np.array([value])]
    st_.m = [np.zeros(1)]
    st_.v = [np.zeros(1)]
    st_.names = ["w"]
    return st_


def test_adam_zero_gradient_no_change():
    st_ = small_model()
    before = [a.copy() for a in st_.params]
    adam_step(st_, [np.zeros_like(a) for a in st_.params], 1e-3)
    for a, b in zip(before, st_.params):
        np.testing.assert_array_equal(a, b)
    assert st_.step == 1


def test_adam_first_step_hand_formula():
    st_ = scalar_state(1.0)
    g, lr = 0.3, 1e-2
    adam_step(st_, [np.array([g])], lr)
    m_hat = (1 - BETA1) * g / (1 - BETA1)
    v_hat = (1 - BETA2) * g * g / (1 - BETA2)
    assert st_.params[0][0] == pytest.approx(1.0 - lr * m_hat / (np.sqrt(v_hat) + ADAM_EPS), abs=1e-15)
    assert st_.params[0][0] == pytest.approx(1.0 - lr, rel=1e-6)


def test_adam_two_steps_textbook():
    st_ = scalar_state(0.5)
    g, lr = -0.7, 1e-3
    theta, m, v = 0.5, 0.0, 0.0
    for t in (1, 2):
        adam_step(st_, [np.array([g])], lr)
        m = BETA1 * m + (1 - BETA1) * g
        v = BETA2 * v + (1 - BETA2) * g * g
        theta -= lr * (m / (1 - BETA1**t)) / (np.sqrt(v / (1 - BETA2**t)) + ADAM_EPS)
    assert st_.params[0][0] == pytest.approx(theta, abs=1e-15)


def test_adam_rejects_nonfinite_and_names_block():
    st_ = small_model()
    grads = [np.zeros_like(a) for a in st_.params]
    grads[2][0, 0] = np.nan
    with pytest.raises(ValidationError, match=st_.names[2].replace(".", r"\.")):
        adam_step(st_, grads, 1e-3)


@pytest.mark.parametrize("step, lr", [(0, 1e-4), (9999, 1e-4), (10000, 8e-5), (20000, 6.4e-5)])
def test_lr_schedule(step, lr):
    assert lr_schedule(1e-4, step) == pytest.approx(lr, rel=1e-12)


def test_lr_schedule_negative_step():
    with pytest.raises(ValidationError):
        lr_schedule(1e-4, -1)


# --- checkpoints -----------------------------------------------------------


def trained_state(separate=False):
    st_ = small_model(4, separate)
    rng = np.random.default_rng(0)
    x = rng.normal(size=(6, 5))
    adam_step(st_, backward(st_, x, rng.normal(size=(6, 3)), rng.normal(size=(6, 4))), 1e-3)
    return st_, x


@pytest.mark.parametrize("separate", [False, True])
def test_checkpoint_round_trip(tmp_path, separate):
    st_, _ = trained_state(separate)
    save_checkpoint(st_, tmp_path / "c.ckpt")
    back = load_checkpoint(tmp_path / "c.ckpt")
    assert back.step == st_.step and back.seed == st_.seed and back.n_trunks == st_.n_trunks
    assert back.names == st_.names
    for group in ("params", "m", "v"):
        for a, b in zip(getattr(st_, group), getattr(back, group)):
            assert a.tobytes() == b.tobytes()


def test_checkpoint_continuation_is_exact(tmp_path):
    st_, x = trained_state()
    save_checkpoint(st_, tmp_path / "c.ckpt")
    resumed = load_checkpoint(tmp_path / "c.ckpt")
    rng = np.random.default_rng(9)
    ge, gl = rng.normal(size=(6, 3)), rng.normal(size=(6, 4))
    adam_step(st_, backward(st_, x, ge, gl), 1e-3)
    adam_step(resumed, backward(resumed, x, ge, gl), 1e-3)
    for a, b in zip(st_.params, resumed.params):
        assert a.tobytes() == b.tobytes()


def test_checkpoint_errors(tmp_path):
    st_, _ = trained_state()
    path = tmp_path / "c.ckpt"
    save_checkpoint(st_, path)
    data = path.read_bytes()
    (tmp_path / "t.ckpt").write_bytes(data[:-3])
    with pytest.raises(CheckpointError, match="offset"):
        load_checkpoint(tmp_path / "t.ckpt")
    (tmp_path / "v.ckpt").write_bytes(b"MSEGCKPT2" + data[9:])
    with pytest.raises(CheckpointError, match="version"):
        load_checkpoint(tmp_path / "v.ckpt")
    (tmp_path / "g.ckpt").write_bytes(b"garbage")
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "g.ckpt")
    (tmp_path / "x.ckpt").write_bytes(data + b"\0")
    with pytest.raises(CheckpointError, match="trailing"):
        load_checkpoint(tmp_path / "x.ckpt")


# --- features --------------------------------------------------------------


def grid_of(pos):
    pos = np.asarray(pos, dtype=float)
    return voxelize(PointCloud(pos, np.full((len(pos), 3), 0.5)), 0.02)


def test_isolated_voxel():
    nf = featurize(grid_of([[0.01, 0.01, 0.01]]), 0.12)
    assert nf.density[0] == 1
    assert not nf.cov_diag.any()


def test_two_close_voxels():
    nf = featurize(grid_of([[0.01, 0.01, 0.01], [0.05, 0.01, 0.01]]), 0.12)
    np.testing.assert_array_equal(nf.density, [2, 2])
    np.testing.assert_allclose(nf.cov_diag[:, 0], [0.02**2, 0.02**2])


def test_density_matches_quadratic_oracle():
    rng = np.random.default_rng(0)
    grid = grid_of(rng.uniform(0, 0.6, (800, 3)))
    nf = featurize(grid, 0.12)
    np.testing.assert_array_equal(nf.density, brute_density(grid.positions, 0.12))
    # neighborhood color mean against a direct loop on a few voxels
    d = np.linalg.norm(grid.positions[:, None] - grid.positions[None], axis=2)
    for i in range(0, len(grid), 97):
        nb = d[i] <= 0.12
        np.testing.assert_allclose(nf.color_mean[i], grid.colors[nb].mean(axis=0), atol=1e-12)
        np.testing.assert_allclose(nf.cov_diag[i], grid.positions[nb].var(axis=0), atol=1e-12)
    assert nf.matrix().shape == (len(grid), 13)
    assert np.isfinite(nf.matrix()).all()


def test_featurize_rejects_bad_radius():
    with pytest.raises(ValidationError):
        featurize(grid_of([[0, 0, 0]]), 0.0)
