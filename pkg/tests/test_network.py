import numpy as np
import pytest
from scipy.linalg import expm

from lazyntk.flow import FlowProblem, phi_inverse
from lazyntk.kernels import ArchSpec, kernel_matrices
from lazyntk.losses import LossSpec, TargetSet
from lazyntk.network import (NetSnapshot, empirical_ntk, forward, hessian_opnorm_probe, init_net, jacobian,
                             jacobian_norm, train_flow, train_linearized, vjp)


def small_net(seed=0, depth=2, d=3, K=2, width=16, **kw):
    return init_net(ArchSpec(depth, d, K, **kw), width, seed)


def test_zero_parameters_give_zero_output(rng):
    net = small_net()
    assert np.array_equal(forward(net, rng.standard_normal((4, 3)), np.zeros(net.n_params)), np.zeros((4, 2)))


def test_layout_round_trip():
    net = small_net(width=7)
    assert np.array_equal(net.flatten(net.layers()), net.theta)
    assert [W.shape for W, _ in net.layers()] == [(7, 3), (7, 7), (2, 7)]
    with pytest.raises(ValueError):
        NetSnapshot(net.arch, net.theta[:-1], net.theta0)


def test_readout_is_linear(rng):
    net = small_net(sigma_b=(0.1, 0.1, 0.0))
    X = rng.standard_normal((3, 3))
    theta = net.theta.copy()
    (w0, w1, _), _ = net._layout[-1]
    theta[w0:w1] *= 2
    assert np.allclose(forward(net, X, theta), 2 * forward(net, X))


def test_initialization_is_reproducible_and_seed_dependent():
    a, b, c = small_net(3), small_net(3), small_net(4)
    assert np.array_equal(a.theta, b.theta) and not np.array_equal(a.theta, c.theta)


def test_output_variance_matches_nngp():
    # width-4096 outputs over 50 seeds against the analytic NNGP diagonal
    arch = ArchSpec(1, 2, 1)
    X = np.random.default_rng(0).standard_normal((10, 2))
    outs = np.array([forward(init_net(arch, 4096, s), X)[:, 0] for s in range(50)])
    sq = outs ** 2
    nngp, _ = kernel_matrices(arch, X)
    se = sq.std(axis=0, ddof=1) / np.sqrt(50)
    assert np.all(np.abs(sq.mean(axis=0) - np.diag(nngp)) <= 3 * se)


def test_jacobian_matches_finite_differences(rng):
    net = small_net(width=12)
    X = rng.standard_normal((3, 3))
    J = jacobian(net, X)
    assert J.shape == (6, net.n_params)
    for _ in range(20):
        v = rng.standard_normal(net.n_params)
        h = 1e-5
        fd = (forward(net, X, net.theta + h * v) - forward(net, X, net.theta - h * v)).ravel() / (2 * h)
        assert np.linalg.norm(J @ v - fd) <= 1e-5 * np.linalg.norm(fd)


def test_vjp_and_empirical_ntk_agree_with_dense_jacobian(rng):
    net = small_net(width=10, K=3)
    X = rng.standard_normal((4, 3))
    J = jacobian(net, X)
    V = rng.standard_normal((4, 3))
    assert np.allclose(vjp(net, X, V), J.T @ V.ravel())
    collapsed, full = empirical_ntk(net, X)
    assert np.allclose(full, J @ J.T)
    assert np.array_equal(full, full.T)
    assert np.linalg.eigvalsh(full)[0] >= -1e-10 * np.trace(full)
    assert np.allclose(collapsed, np.einsum("ikjk->ij", full.reshape(4, 3, 4, 3)) / 3)


def test_readout_jacobian_columns_are_scaled_activations(rng):
    from scipy.special import erf
    net = small_net(width=5, K=1, depth=1)
    x = rng.standard_normal((1, 3))
    J = jacobian(net, x)
    (W1, b1), (W2, _) = net.layers()
    hidden = erf(x @ W1.T / np.sqrt(3) + b1)
    (w0, w1, _), _ = net._layout[-1]
    assert np.allclose(J[0, w0:w1], hidden[0] / np.sqrt(5))


def test_duplicate_inputs_give_identical_kernel_rows(rng):
    net = small_net()
    X = rng.standard_normal((3, 3))
    X[2] = X[0]
    collapsed, _ = empirical_ntk(net, X)
    assert np.array_equal(collapsed[0], collapsed[2])


def test_off_diagonal_class_blocks_are_small_at_width_1024(rng):
    X = rng.standard_normal((4, 3))
    ratios = []
    for s in range(10):
        _, full = empirical_ntk(init_net(ArchSpec(2, 3, 3), 1024, s), X)
        blocks = full.reshape(4, 3, 4, 3).transpose(1, 3, 0, 2)  # (class, class, point, point)
        mask = np.eye(3, dtype=bool)
        off = np.linalg.norm(blocks[~mask])
        diag = np.linalg.norm(blocks[mask])
        ratios.append(off / diag)
    assert np.median(ratios) <= 0.05


def test_train_flow_loss_is_monotone_and_trace_well_formed(rng):
    net = small_net(width=32)
    X = rng.standard_normal((5, 3))
    spec = LossSpec("ce", TargetSet.from_labels([0, 1, 1, 0, 1], 2).probs)
    trace = train_flow(net, spec, X, 0.01, 1.0, 20.0, test_points=rng.standard_normal((3, 3)), record_every=2.0)
    assert trace.max_loss_increase <= 1e-8
    assert np.all(np.diff(trace.times) > 0) and trace.times[-1] == 20.0
    assert np.all(np.diff(trace.loss) <= 1e-8)
    assert trace.lin_gap.shape == trace.times.shape and trace.lin_gap[0] == 0.0
    assert np.all(trace.centered_gap <= trace.lin_gap + 1e-12)
    assert not np.array_equal(net.theta, net.theta0)


def test_train_flow_is_deterministic(rng):
    X = rng.standard_normal((4, 3))
    spec = LossSpec("ce_ref", TargetSet.from_labels([0, 1, 1, 0], 2).probs)
    runs = [train_flow(init_net(ArchSpec(2, 3, 1), 16, 5), spec, X, 0.0, 1.0, 10.0, linearized=False)
            for _ in range(2)]
    assert np.array_equal(runs[0].loss, runs[1].loss) and np.array_equal(runs[0].ntk_probe, runs[1].ntk_probe)


def test_mse_beta0_fits_targets():
    rng = np.random.default_rng(2)
    net = init_net(ArchSpec(1, 2, 1), 8, 0)
    X = rng.standard_normal((2, 2))
    y = np.array([[0.5], [-0.3]])
    collapsed, _ = empirical_ntk(net, X)
    t_end = 50.0 / np.linalg.eigvalsh(collapsed)[0]
    trace = train_flow(net, LossSpec("mse", y), X, 0.0, 1.0, t_end, linearized=False, rtol=1e-9, atol=1e-12)
    assert np.max(np.abs(trace.f_train[-1] - y)) <= 1e-4


def test_strong_regularization_keeps_parameters_close():
    # at equilibrium theta - theta0 = -J^T grad C(f) / beta, so doubling beta halves the
    # displacement up to the second-order change of grad C along the (smaller) move
    rng = np.random.default_rng(4)
    X = rng.standard_normal((4, 3))
    spec = LossSpec("ce", TargetSet.from_labels([0, 1, 2, 0], 3).probs)
    ratios = []
    for s in range(5):
        d = [train_flow(init_net(ArchSpec(1, 3, 3), 64, s), spec, X, beta, 1.0, 0.05, linearized=False).theta_dist[-1]
             for beta in (1e3, 2e3)]
        ratios.append(d[0] / d[1])
    assert abs(np.median(ratios) - 2.0) <= 0.02


def test_linearized_mse_matches_matrix_exponential(rng):
    net = small_net(width=20, K=1)
    X, T = rng.standard_normal((5, 3)), rng.standard_normal((3, 3))
    y = rng.standard_normal((5, 1))
    beta, eta0 = 0.3, 0.7
    trace = train_linearized(net, LossSpec("mse", y), X, beta, eta0, 5.0, T, record_every=0.5, rtol=1e-10, atol=1e-12)
    _, full = empirical_ntk(net, np.vstack([X, T]))
    g0 = forward(net, np.vstack([X, T])).ravel()
    Txx, Ttx = full[:5, :5], full[5:, :5]
    A = Txx + beta * np.eye(5)
    fixed = np.linalg.solve(A, Txx @ y.ravel() + beta * g0[:5])
    for i, t in enumerate(trace.times):
        gx = fixed + expm(-eta0 * t * A) @ (g0[:5] - fixed)
        # test coordinates move along Theta_tx Theta_xx^-1 (g_x - g0_x)
        gt = g0[5:] + Ttx @ np.linalg.solve(Txx, gx - g0[:5])
        assert np.allclose(trace.f_train[i].ravel(), gx, atol=1e-6)
        assert np.allclose(trace.f_test[i].ravel(), gt, atol=1e-6)


def test_linearized_starts_at_network_output(rng):
    net = small_net(width=16)
    X, T = rng.standard_normal((4, 3)), rng.standard_normal((2, 3))
    spec = LossSpec("ce", TargetSet.from_labels([0, 1, 1, 0], 2).probs)
    lin = train_linearized(net, spec, X, 0.1, 1.0, 1.0, T)
    assert np.array_equal(lin.f_test[0], forward(net, T))


def test_linearized_terminal_state_matches_newton_with_empirical_kernel(rng):
    net = small_net(width=32, K=2)
    X = rng.standard_normal((4, 3))
    spec = LossSpec("ce", TargetSet.from_labels([0, 1, 1, 0], 2).probs)
    lin = train_linearized(net, spec, X, 0.01, 1.0, 8000.0, rtol=1e-10, atol=1e-12)
    _, full = empirical_ntk(net, X)
    g0 = forward(net, X).ravel()
    problem = FlowProblem(full, 4, spec, 0.01, g0=g0, dense=True)
    g = phi_inverse(problem, 0.01 * g0)
    assert np.max(np.abs(lin.f_train[-1].ravel() - g)) <= 1e-4


def test_hessian_and_jacobian_norm_scaling():
    arch = ArchSpec(1, 2, 2)
    x = np.array([0.3, -0.8])
    hess = {w: [] for w in (64, 256, 1024)}
    jac = {w: [] for w in hess}
    for w in hess:
        for s in range(10):
            net = init_net(arch, w, s)
            hess[w].append(hessian_opnorm_probe(net, x, 30, s)[0])
            jac[w].append(jacobian_norm(net, x))
    med = {w: np.median(v) for w, v in hess.items()}
    assert med[64] > med[256] > med[1024]
    assert med[64] / med[256] >= 1.5 and med[256] / med[1024] >= 1.5
    jm = [np.median(v) for v in jac.values()]
    assert max(jm) / min(jm) <= 1.5


def test_hessian_probe_needs_ten_iterations():
    net = init_net(ArchSpec(1, 2, 1), 4, 0)
    with pytest.raises(ValueError):
        hessian_opnorm_probe(net, np.zeros(2), iters=5)


def test_flow_argument_checks(rng):
    net = small_net()
    spec = LossSpec("mse", np.zeros((2, 2)))
    X = rng.standard_normal((2, 3))
    for beta, eta0, t_end in ((-1, 1, 1), (0, 0, 1), (0, 1, 0)):
        with pytest.raises(ValueError):
            train_flow(net, spec, X, beta, eta0, t_end)
    with pytest.raises(ValueError):
        forward(net, np.zeros((2, 4)))


def test_trace_csv(tmp_path, rng):
    net = small_net(width=8)
    X = rng.standard_normal((3, 3))
    spec = LossSpec("ce", TargetSet.from_labels([0, 1, 0], 2).probs)
    trace = train_flow(net, spec, X, 0.1, 1.0, 2.0, test_points=X[:1], record_every=1.0)
    trace.to_csv(tmp_path / "trace.csv")
    lines = (tmp_path / "trace.csv").read_text().splitlines()
    assert lines[0] == "t,loss,theta_dist,ntk_probe_1,ntk_probe_2,ntk_probe_3,lin_gap"
    assert len(lines) == 1 + trace.times.size
