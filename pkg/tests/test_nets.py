import numpy as np
import pytest

from ensmcts import nets
from ensmcts.nets import NetParams, OptState, PriorPair


def test_init_shapes_and_determinism():
    p = nets.init_params("linear", 16, 3)
    assert p.weights[0].shape == (1, 16, 1) and p.biases[0].shape == (1, 1)
    assert p.weights[0].size + p.biases[0].size == 17
    q = nets.init_params("linear", 16, 3)
    r = nets.init_params("linear", 16, 4)
    assert all(np.array_equal(a, b) for a, b in zip(p.arrays(), q.arrays()))
    assert not np.array_equal(p.weights[0], r.weights[0])
    m = nets.init_params("mlp", 16, 0)
    assert [w.shape for w in m.weights] == [(1, 16, 50), (1, 50, 50), (1, 50, 1)]
    assert np.abs(m.weights[0]).max() <= 1 / 4
    assert all(not b.any() for b in m.biases)


def test_forward_special_cases():
    p = nets.init_params("linear", 5, 0)
    p.weights[0][:] = 0
    assert nets.net_forward(p, np.ones(5)) == 0.0
    m = nets.init_params("mlp", 5, 0)
    for w in m.weights[:-1]:
        w[:] = 0
    m.biases[-1][:] = 0.7
    out = nets.forward(m, np.random.default_rng(0).normal(size=(4, 5)))
    np.testing.assert_allclose(out, 0.7)
    with pytest.raises(ValueError):
        nets.forward(m, np.ones(6))


def test_prior_scale_zero_is_identity():
    t = nets.init_params("mlp", 4, 1)
    pr = nets.init_params("mlp", 4, 2)
    X = np.random.default_rng(0).normal(size=(3, 4))
    np.testing.assert_array_equal(PriorPair(t, pr, 0.0)(X), nets.forward(t, X))
    np.testing.assert_allclose(PriorPair(t, pr, 2.0)(X), nets.forward(t, X) + 2 * nets.forward(pr, X))


def test_zero_weights_gives_pure_l2_gradient():
    p = nets.init_params("mlp", 6, 0, members=2)
    X = np.random.default_rng(1).normal(size=(5, 6))
    _, g = nets.loss_and_grad(p, X, np.ones(5), np.zeros(5), zeta=0.3)
    for gp, pp in zip(g.arrays(), p.arrays()):
        np.testing.assert_allclose(gp, 2 * 0.3 * pp)


def test_linear_closed_form_gradient():
    p = nets.init_params("linear", 4, 5)
    x = np.array([0.5, -1.0, 2.0, 0.0])
    v = 0.3
    grads, _ = nets.net_grad(p, [(x, v, 1.0)], zeta=0.0)
    err = nets.net_forward(p, x) - v
    np.testing.assert_allclose(grads.weights[0][0, :, 0], 2 * err * x)
    np.testing.assert_allclose(grads.biases[0][0, 0], 2 * err)


def _numeric_grad(params, X, t, w, zeta, prior=None, h=1e-5):
    out = []
    for arr in params.arrays():
        g = np.zeros_like(arr)
        it = np.nditer(arr, flags=["multi_index"])
        for _ in it:
            i = it.multi_index
            old = arr[i]
            arr[i] = old + h
            lp = nets.loss_and_grad(params, X, t, w, zeta, prior)[0].sum()
            arr[i] = old - h
            lm = nets.loss_and_grad(params, X, t, w, zeta, prior)[0].sum()
            arr[i] = old
            g[i] = (lp - lm) / (2 * h)
        out.append(g)
    return out


@pytest.mark.parametrize("arch", ["linear", "mlp"])
def test_gradient_matches_finite_differences(arch):
    rng = np.random.default_rng(123)
    worst = 0.0
    for draw in range(20):
        n_in = int(rng.integers(2, 6))
        K = int(rng.integers(1, 3))
        B = int(rng.integers(1, 6))
        p = nets.init_params(arch, n_in, rng, members=K, hidden=(4, 3))
        # move biases off zero so ReLU kinks are unlikely to sit at a sample
        for b in p.biases:
            b += rng.normal(scale=0.3, size=b.shape)
        X = rng.normal(size=(B, n_in))
        t = rng.normal(size=B)
        w = (rng.random((B, K)) < 0.7).astype(float)
        zeta = float(rng.choice([0.0, 1e-2]))
        _, g = nets.loss_and_grad(p, X, t, w, zeta)
        num = _numeric_grad(p, X, t, w, zeta)
        for ga, gn in zip(g.arrays(), num):
            denom = np.maximum(np.maximum(np.abs(ga), np.abs(gn)), 1e-8)
            rel = np.abs(ga - gn) / denom
            rel[np.abs(ga - gn) < 1e-9] = 0.0  # both effectively zero
            worst = max(worst, rel.max())
    assert worst <= 1e-4


def test_gradient_with_prior_matches_finite_differences():
    rng = np.random.default_rng(7)
    p = nets.init_params("mlp", 3, rng, members=2, hidden=(4, 4))
    pr = nets.init_params("mlp", 3, rng, members=2, hidden=(4, 4))
    for b in p.biases:
        b += rng.normal(scale=0.3, size=b.shape)
    pair = PriorPair(p, pr, 1.5)
    X, t, w = rng.normal(size=(4, 3)), rng.normal(size=4), np.ones(4)
    _, g = nets.loss_and_grad(p, X, t, w, 0.0, pair)
    for ga, gn in zip(g.arrays(), _numeric_grad(p, X, t, w, 0.0, pair)):
        np.testing.assert_allclose(ga, gn, rtol=1e-4, atol=1e-8)


def test_masked_rows_do_not_touch_member():
    rng = np.random.default_rng(0)
    p = nets.init_params("mlp", 4, rng, members=3)
    before = p.copy()
    X = rng.normal(size=(1, 4))
    _, g = nets.loss_and_grad(p, X, np.array([1.0]), np.array([[1.0, 0.0, 1.0]]), 0.0)
    nets.rmsprop_step(p, g, OptState.for_params(p))
    for a, b in zip(p.arrays(), before.arrays()):
        np.testing.assert_array_equal(a[1], b[1])
        assert not np.array_equal(a[0], b[0]) or not a[0].any()


def test_rmsprop_zero_gradient():
    p = nets.init_params("mlp", 3, 0)
    before = p.copy()
    g = NetParams(p.arch, p.hidden, [np.zeros_like(w) for w in p.weights], [np.zeros_like(b) for b in p.biases])
    nets.rmsprop_step(p, g, OptState.for_params(p))
    assert all(np.array_equal(a, b) for a, b in zip(p.arrays(), before.arrays()))


def test_rmsprop_first_step_value():
    p = NetParams("linear", (), [np.zeros((1, 1, 1))], [np.zeros((1, 1))])
    g = NetParams("linear", (), [np.ones((1, 1, 1))], [np.zeros((1, 1))])
    st = OptState.for_params(p)
    nets.rmsprop_step(p, g, st)
    # hand evaluation of the update rule with rho=0.9, eps=1e-8, lr=2.5e-4
    assert p.weights[0][0, 0, 0] == pytest.approx(-2.5e-4 / (np.sqrt(0.1) + 1e-8), rel=1e-12)
    assert (st.acc[0] >= 0).all()


def test_rmsprop_step_converges_to_lr():
    p = NetParams("linear", (), [np.zeros((1, 1, 1))], [np.zeros((1, 1))])
    g = NetParams("linear", (), [np.full((1, 1, 1), 0.37)], [np.zeros((1, 1))])
    st = OptState.for_params(p)
    prev = 0.0
    for _ in range(300):
        nets.rmsprop_step(p, g, st)
        step = prev - p.weights[0][0, 0, 0]
        prev = p.weights[0][0, 0, 0]
    assert step == pytest.approx(2.5e-4, rel=1e-6)


def test_linear_regression_loss_monotone():
    rng = np.random.default_rng(0)
    X = rng.normal(size=(10, 3))
    y = X @ np.array([0.5, -1.0, 2.0]) + 0.1
    p = nets.init_params("linear", 3, 1)
    st = OptState(acc=[np.zeros_like(a) for a in p.arrays()], lr=3e-3)
    losses = []
    for _ in range(1000):
        loss, g = nets.loss_and_grad(p, X, y, np.ones(10), 0.0)
        losses.append(float(loss[0]))
        nets.rmsprop_step(p, g, st)
    windows = [np.mean(losses[i:i + 50]) for i in range(50, 1000, 50)]
    assert all(b <= a * (1 + 1e-2) + 1e-6 for a, b in zip(windows, windows[1:]))
    assert losses[-1] < losses[0] * 0.01


def test_prior_unchanged_by_training():
    from ensmcts.ensemble import Ensemble
    ens = Ensemble.create("mlp", 4, 3, seed=0, prior_scale=1.0)
    prior = ens.prior.copy()
    rng = np.random.default_rng(0)
    for _ in range(5):
        ens.train_step(rng.normal(size=(8, 4)), rng.normal(size=8), np.ones((8, 3)), 1e-4)
    assert all(a.tobytes() == b.tobytes() for a, b in zip(prior.arrays(), ens.prior.arrays()))


def test_checkpoint_roundtrip(tmp_path):
    rng = np.random.default_rng(0)
    p = nets.init_params("mlp", 5, rng, members=2)
    pr = nets.init_params("mlp", 5, rng, members=2)
    st = OptState.for_params(p, lr=1e-3)
    _, g = nets.loss_and_grad(p, rng.normal(size=(3, 5)), rng.normal(size=3), np.ones(3))
    nets.rmsprop_step(p, g, st)
    path = tmp_path / "c.npz"
    nets.save_checkpoint(path, p, st, PriorPair(p, pr, 0.5), {"note": "x"})
    p2, st2, pair, meta = nets.load_checkpoint(path)
    assert meta["note"] == "x" and meta["version"] == nets.CHECKPOINT_VERSION
    for a, b in zip(p.arrays() + st.acc + pr.arrays(), p2.arrays() + st2.acc + pair.prior.arrays()):
        assert a.tobytes() == b.tobytes()
    assert (st2.lr, st2.rho, st2.eps) == (st.lr, st.rho, st.eps) and pair.scale == 0.5
