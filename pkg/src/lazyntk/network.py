"""Finite-width erf MLPs in NTK parametrization, trained by gradient flow.

Parameters live in one flat vector. Layer ``l`` (1-based, ``L + 1`` layers
including the readout) contributes ``W^(l)`` of shape ``(n_l, n_{l-1})`` in
row-major order followed by ``b^(l)``. Jacobian rows are point-major,
class-minor: row ``i * K + k`` is the gradient of output ``k`` at point ``i``.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.integrate import RK45
from scipy.special import erf

from .flow import ConvergenceError, FlowProblem, integrate_flow
from .kernels import ArchSpec
from .losses import LossKind, LossSpec, center_project, loss_gradient, loss_value, softmax, softmax_ref

log = logging.getLogger(__name__)

__all__ = [
    "NetSnapshot",
    "TrainTrace",
    "init_net",
    "forward",
    "vjp",
    "jacobian",
    "empirical_ntk",
    "train_flow",
    "train_linearized",
    "hessian_opnorm_probe",
    "jacobian_norm",
]

_TWO_OVER_SQRT_PI = 2.0 / np.sqrt(np.pi)


def _derf(h):
    return _TWO_OVER_SQRT_PI * np.exp(-h * h)


def _layer_dims(arch: ArchSpec) -> list[int]:
    if arch.widths is None:
        raise ValueError("finite networks need widths; use arch.with_width(n)")
    return [arch.input_dim, *arch.widths, arch.output_dim]


def _layout(dims):
    shapes, offset = [], 0
    for n_in, n_out in zip(dims[:-1], dims[1:]):
        w = (offset, offset + n_out * n_in, (n_out, n_in))
        offset += n_out * n_in
        b = (offset, offset + n_out)
        offset += n_out
        shapes.append((w, b))
    return shapes, offset


@dataclass
class NetSnapshot:
    """Parameters of one network plus the copy taken at initialization."""

    arch: ArchSpec
    theta: np.ndarray
    theta0: np.ndarray
    _layout: list = field(init=False, repr=False)

    def __post_init__(self):
        self._layout, p = _layout(_layer_dims(self.arch))
        if self.theta.shape != (p,) or self.theta0.shape != (p,):
            raise ValueError(f"expected {p} parameters")

    @property
    def width(self) -> int:
        return self.arch.widths[0]

    @property
    def n_params(self) -> int:
        return self.theta.size

    def layers(self, theta=None):
        """``[(W, b), ...]`` as views into ``theta``."""
        theta = self.theta if theta is None else theta
        return [(theta[w0:w1].reshape(shape), theta[b0:b1]) for (w0, w1, shape), (b0, b1) in self._layout]

    def flatten(self, layers) -> np.ndarray:
        return np.concatenate([np.concatenate([W.ravel(), b]) for W, b in layers])

    def copy(self) -> "NetSnapshot":
        return NetSnapshot(self.arch, self.theta.copy(), self.theta0.copy())


def init_net(arch: ArchSpec, width: int | None = None, seed: int = 0) -> NetSnapshot:
    """Gaussian initialization with per-layer variances ``sigma_w^2``, ``sigma_b^2``."""
    if width is not None:
        arch = arch.with_width(width)
    dims = _layer_dims(arch)
    rng = np.random.default_rng(seed)
    parts = []
    for l, (n_in, n_out) in enumerate(zip(dims[:-1], dims[1:])):
        parts.append(arch.sigma_w[l] * rng.standard_normal(n_out * n_in))
        parts.append(arch.sigma_b[l] * rng.standard_normal(n_out))
    theta = np.concatenate(parts)
    return NetSnapshot(arch, theta, theta.copy())


def _forward_cache(net: NetSnapshot, X, theta=None):
    X = np.atleast_2d(np.asarray(X, dtype=float))
    if X.shape[1] != net.arch.input_dim:
        raise ValueError(f"expected inputs of dimension {net.arch.input_dim}, got {X.shape[1]}")
    layers = net.layers(theta)
    acts, pres = [X], []
    a = X
    for W, b in layers[:-1]:
        h = a @ W.T / np.sqrt(W.shape[1]) + b
        pres.append(h)
        a = erf(h)
        acts.append(a)
    W, b = layers[-1]
    out = a @ W.T / np.sqrt(W.shape[1]) + b
    return out, acts, pres, layers


def forward(net: NetSnapshot, X, theta=None) -> np.ndarray:
    """Network outputs, shape ``(N, K)`` for ``N`` inputs."""
    return _forward_cache(net, X, theta)[0]


def _backward(acts, pres, layers, delta):
    """Backpropagate output cotangents ``delta`` of shape ``(..., N, K)``.

    Yields per-layer ``(delta_l, a_{l-1})`` pairs from the readout down,
    where ``delta_l`` has shape ``(..., N, n_l)``.
    """
    n_layers = len(layers)
    for l in range(n_layers - 1, -1, -1):
        W, _ = layers[l]
        yield l, delta, acts[l]
        if l == 0:
            break
        delta = (delta @ W) / np.sqrt(W.shape[1]) * _derf(pres[l - 1])


def _vjp_cached(net: NetSnapshot, acts, pres, layers, V) -> np.ndarray:
    out = np.empty(net.n_params)
    for l, delta, a_prev in _backward(acts, pres, layers, V):
        (w0, w1, _), (b0, b1) = net._layout[l]
        out[w0:w1] = (delta.T @ a_prev / np.sqrt(a_prev.shape[1])).ravel()
        out[b0:b1] = delta.sum(axis=0)
    return out


def vjp(net: NetSnapshot, X, V, theta=None) -> np.ndarray:
    """``J^T v`` for output cotangents ``V`` of shape ``(N, K)``."""
    _, acts, pres, layers = _forward_cache(net, X, theta)
    V = np.asarray(V, dtype=float).reshape(acts[0].shape[0], net.arch.output_dim)
    return _vjp_cached(net, acts, pres, layers, V)


def jacobian(net: NetSnapshot, X, theta=None) -> np.ndarray:
    """Dense parameter Jacobian of shape ``(N*K, p)``. Small networks only."""
    _, acts, pres, layers = _forward_cache(net, X, theta)
    N, K = acts[0].shape[0], net.arch.output_dim
    # delta[k, i, :] seeds output k at every point i
    delta = np.broadcast_to(np.eye(K)[:, None, :], (K, N, K)).copy()
    blocks = [None] * len(layers)
    for l, d, a_prev in _backward(acts, pres, layers, delta):
        gw = np.einsum("kin,im->iknm", d, a_prev) / np.sqrt(a_prev.shape[1])
        gb = np.transpose(d, (1, 0, 2))
        blocks[l] = np.concatenate([gw.reshape(N, K, -1), gb], axis=2)
    return np.concatenate(blocks, axis=2).reshape(N * K, -1)


def empirical_ntk(net: NetSnapshot, X, theta=None):
    """Empirical NTK ``J J^T`` without materializing ``J``.

    Returns ``(collapsed, full)``: ``full`` is ``NK x NK``; ``collapsed`` is
    the ``N x N`` average of the class-diagonal blocks, comparable to the
    scalar analytic kernel.
    """
    _, acts, pres, layers = _forward_cache(net, X, theta)
    N, K = acts[0].shape[0], net.arch.output_dim
    delta = np.broadcast_to(np.eye(K)[:, None, :], (K, N, K)).copy()
    full = np.zeros((N * K, N * K))
    for l, d, a_prev in _backward(acts, pres, layers, delta):
        D = np.transpose(d, (1, 0, 2)).reshape(N * K, -1)
        gram_a = a_prev @ a_prev.T / a_prev.shape[1] + 1.0
        full += (D @ D.T) * np.kron(gram_a, np.ones((K, K)))
    full = 0.5 * (full + full.T)
    collapsed = np.einsum("ikjk->ij", full.reshape(N, K, N, K)) / K
    return collapsed, full


def jacobian_norm(net: NetSnapshot, x, theta=None) -> float:
    """Frobenius norm of the ``K x p`` Jacobian at a single input."""
    _, full = empirical_ntk(net, np.atleast_2d(x), theta)
    return float(np.sqrt(np.trace(full)))


def hessian_opnorm_probe(net: NetSnapshot, x, iters: int = 30, seed: int = 0, rtol: float = 1e-4):
    """Largest parameter-Hessian singular value over output coordinates.

    Power iteration on Hessian-vector products obtained by central
    differences of the gradient of each output, step ``1e-4 ||theta|| / ||v||``.
    Returns ``(estimate, converged)``.
    """
    if iters < 10:
        raise ValueError("iters must be >= 10")
    x = np.atleast_2d(np.asarray(x, dtype=float))
    K = net.arch.output_dim
    rng = np.random.default_rng(seed)
    theta = net.theta
    eps = 1e-4 * np.linalg.norm(theta)
    best, all_converged = 0.0, True
    for k in range(K):
        e_k = np.zeros((1, K))
        e_k[0, k] = 1.0

        def hvp(v):
            h = eps / np.linalg.norm(v)
            gp = vjp(net, x, e_k, theta + h * v)
            gm = vjp(net, x, e_k, theta - h * v)
            return (gp - gm) / (2.0 * h)

        v = rng.standard_normal(theta.size)
        v /= np.linalg.norm(v)
        lam, converged = 0.0, False
        for _ in range(iters):
            w = hvp(v)
            lam_new = float(np.linalg.norm(w))
            if lam_new == 0.0:
                break
            v = w / lam_new
            if abs(lam_new - lam) <= rtol * lam_new:
                lam, converged = lam_new, True
                break
            lam = lam_new
        all_converged &= converged
        best = max(best, lam)
    return best, all_converged


@dataclass
class TrainTrace:
    """Recorded quantities of one training run at fixed times.

    ``ntk_probe[t, j]`` is the class-averaged diagonal of the empirical NTK
    at probe point ``j``; ``post_softmax_probe`` the same for the kernel of
    the softmax outputs. ``lin_gap`` is the largest per-point Euclidean gap
    to the linearized network over test points, ``centered_gap`` the same
    after block centering.
    """

    times: np.ndarray
    theta_dist: np.ndarray
    loss: np.ndarray
    ntk_probe: np.ndarray
    lin_gap: np.ndarray | None = None
    centered_gap: np.ndarray | None = None
    post_softmax_probe: np.ndarray | None = None
    f_test: np.ndarray | None = None
    f_train: np.ndarray | None = None
    max_loss_increase: float = 0.0
    n_steps: int = 0
    final_grad_norm: float = float("nan")
    underflow: bool = False
    message: str = ""

    def drift(self, which: str = "ntk") -> np.ndarray:
        """Relative drift ``max_t |k_t - k_0| / k_0`` per probe point."""
        k = self.ntk_probe if which == "ntk" else self.post_softmax_probe
        return np.max(np.abs(k - k[0]), axis=0) / np.abs(k[0])

    def to_csv(self, path) -> None:
        n_probe = self.ntk_probe.shape[1]
        header = ["t", "loss", "theta_dist"] + [f"ntk_probe_{j + 1}" for j in range(n_probe)] + ["lin_gap"]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            for i, t in enumerate(self.times):
                gap = "" if self.lin_gap is None else repr(float(self.lin_gap[i]))
                w.writerow([repr(float(t)), repr(float(self.loss[i])), repr(float(self.theta_dist[i]))]
                           + [repr(float(v)) for v in self.ntk_probe[i]] + [gap])


def _record_grid(t_end, record_every):
    record_every = t_end / 50 if record_every is None else float(record_every)
    grid = np.arange(0.0, t_end, record_every)
    return np.append(grid, t_end) if grid[-1] < t_end else grid


def _probe_kernels(net, probe, theta, reference: bool = False):
    """Class-averaged pre- and post-softmax empirical NTK diagonals.

    The post-softmax kernel is ``S Theta S^T`` with ``S`` the Jacobian of the
    class probabilities with respect to the logits (the non-reference
    probabilities when ``reference`` is set).
    """
    probe = np.atleast_2d(probe)
    K = net.arch.output_dim
    pre, post = [], []
    out = forward(net, probe, theta)
    for j in range(probe.shape[0]):
        _, full = empirical_ntk(net, probe[j:j + 1], theta)
        pre.append(np.trace(full) / K)
        s = softmax_ref(out[j])[0] if reference else softmax(out[j])
        S = np.diag(s) - np.outer(s, s)
        post.append(np.trace(S @ full @ S.T) / K)
    return np.array(pre), np.array(post)


def _check_flow_args(beta, eta0, t_end):
    if beta < 0:
        raise ValueError("beta must be nonnegative")
    if eta0 <= 0 or t_end <= 0:
        raise ValueError("eta0 and t_end must be positive")


def train_linearized(net: NetSnapshot, spec: LossSpec, train_points, beta: float, eta0: float,
                     t_end: float, test_points=None, record_every: float | None = None,
                     rtol: float = 1e-6, atol: float = 1e-9) -> TrainTrace:
    """Gradient flow of the parameter-linearized network.

    The linearized model only moves through its function values, so the
    flow runs in function space with the empirical NTK at initialization on
    train and test points jointly. The parameter distance is recovered as
    ``||theta - theta0||^2 = (g - g0)^T Theta0^{-1} (g - g0)`` on the
    training points.
    """
    _check_flow_args(beta, eta0, t_end)
    X = np.atleast_2d(np.asarray(train_points, dtype=float))
    T = np.zeros((0, X.shape[1])) if test_points is None else np.atleast_2d(np.asarray(test_points, dtype=float))
    XT = np.vstack([X, T])
    _, full = empirical_ntk(net, XT)
    # evaluate blocks separately so t=0 matches forward() on the same inputs bit for bit
    g0 = np.concatenate([forward(net, X).ravel(), forward(net, T).ravel()])
    problem = FlowProblem(full, X.shape[0], spec, beta, eta0, g0, dense=True)
    grid = _record_grid(t_end, record_every)
    step = grid[1] - grid[0] if grid.size > 1 else t_end
    states = integrate_flow(problem, t_end, step, rtol=rtol, atol=atol, check_identity=False)
    # integrate_flow records on its own grid; align to ours
    times = np.array([s.t for s in states])
    m = problem.train_dim
    dists, losses = [], []
    for s in states:
        d = s.g_train - problem.g0_train
        sq = float(d @ problem.solve_theta(d))
        dists.append(np.sqrt(max(sq, 0.0)))
        losses.append(loss_value(spec, s.g_train) + 0.5 * beta * sq)
    _, full_x = empirical_ntk(net, X[:1])
    probe_val = np.trace(full_x) / net.arch.output_dim
    return TrainTrace(
        times=times,
        theta_dist=np.array(dists),
        loss=np.array(losses),
        ntk_probe=np.full((times.size, 1), probe_val),
        f_test=np.array([s.g_test for s in states]).reshape(times.size, T.shape[0], spec.n_logits),
        f_train=np.array([s.g_train for s in states]).reshape(times.size, X.shape[0], -1),
        final_grad_norm=states[-1].grad_norm,
        n_steps=len(states) - 1,
    )


def train_flow(net: NetSnapshot, spec: LossSpec, train_points, beta: float, eta0: float, t_end: float,
               probe=None, test_points=None, record_every: float | None = None, rtol: float = 1e-6,
               atol: float = 1e-9, linearized: bool = True, post_softmax: bool = False,
               stop_grad_norm: float | None = None) -> TrainTrace:
    """Integrate ``dtheta/dt = -eta0 (J^T grad C + beta (theta - theta0))``.

    Uses an adaptive Dormand-Prince pair; the regularized loss is checked
    after every accepted step and the largest increase is stored in the
    trace. ``net.theta`` is updated to the final parameters. When
    ``linearized`` is set and test points are given, the linearized network
    is trained on the same record grid and the gaps are filled in.
    A step-size underflow ends the run early with ``underflow=True``.

    With ``stop_grad_norm`` set, integration stops once the parameter
    gradient norm drops below it; the remaining record times repeat the
    final state, which is stationary up to that tolerance.
    """
    _check_flow_args(beta, eta0, t_end)
    X = np.atleast_2d(np.asarray(train_points, dtype=float))
    T = None if test_points is None else np.atleast_2d(np.asarray(test_points, dtype=float))
    probe = X[:3] if probe is None else np.atleast_2d(np.asarray(probe, dtype=float))
    theta0 = net.theta0
    reference = spec.kind in (LossKind.CE_REF, LossKind.BRIER_REF)

    def reg_loss(theta):
        f = forward(net, X, theta).ravel()
        d = theta - theta0
        return loss_value(spec, f) + 0.5 * beta * float(d @ d)

    def grad(theta):
        # one forward pass serves both the loss gradient and the backward pass
        out, acts, pres, layers = _forward_cache(net, X, theta)
        g = _vjp_cached(net, acts, pres, layers, loss_gradient(spec, out.ravel()).reshape(out.shape))
        if beta:
            g += beta * (theta - theta0)
        return g

    def rhs(t, theta):
        return -eta0 * grad(theta)

    grid = _record_grid(t_end, record_every)
    records = {"theta_dist": [], "loss": [], "ntk": [], "post": [], "f_test": [], "f_train": []}

    def record(theta):
        records["theta_dist"].append(float(np.linalg.norm(theta - theta0)))
        records["loss"].append(reg_loss(theta))
        pre, post = _probe_kernels(net, probe, theta, reference)
        records["ntk"].append(pre)
        records["post"].append(post)
        records["f_train"].append(forward(net, X, theta))
        if T is not None:
            records["f_test"].append(forward(net, T, theta))

    solver = RK45(rhs, 0.0, net.theta.copy(), t_end, rtol=rtol, atol=atol)
    record(net.theta)
    gi, prev_loss, max_inc, n_steps = 1, reg_loss(net.theta), -np.inf, 0
    underflow, message = False, ""
    times = [0.0]
    while solver.status == "running":
        msg = solver.step()
        if solver.status == "failed":
            underflow, message = True, str(msg)
            log.warning("training stopped at t=%.4g: %s", solver.t, msg)
            break
        n_steps += 1
        cur = reg_loss(solver.y)
        max_inc = max(max_inc, cur - prev_loss)
        prev_loss = cur
        dense = None
        while gi < grid.size and grid[gi] <= solver.t:
            if grid[gi] == solver.t:
                y = solver.y
            else:
                dense = dense or solver.dense_output()
                y = dense(grid[gi])
            record(y)
            times.append(float(grid[gi]))
            gi += 1
        # RK45 evaluates the right-hand side at the accepted point (FSAL)
        if stop_grad_norm is not None and np.linalg.norm(solver.f) / eta0 < stop_grad_norm:
            message = f"gradient norm below {stop_grad_norm:g} at t={solver.t:.6g}"
            break
    if message and not underflow:
        while gi < grid.size:
            for key in records:
                if records[key]:
                    records[key].append(records[key][-1])
            times.append(float(grid[gi]))
            gi += 1
    net.theta = solver.y.copy()

    trace = TrainTrace(
        times=np.array(times),
        theta_dist=np.array(records["theta_dist"]),
        loss=np.array(records["loss"]),
        ntk_probe=np.array(records["ntk"]),
        post_softmax_probe=np.array(records["post"]) if post_softmax else None,
        f_train=np.array(records["f_train"]),
        f_test=np.array(records["f_test"]) if T is not None else None,
        max_loss_increase=float(max_inc) if n_steps else 0.0,
        n_steps=n_steps,
        final_grad_norm=float(np.linalg.norm(grad(net.theta))),
        underflow=underflow,
        message=message,
    )
    if linearized and T is not None and not underflow:
        start = NetSnapshot(net.arch, theta0.copy(), theta0.copy())
        lin = train_linearized(start, spec, X, beta, eta0, t_end, T, record_every=grid[1] - grid[0] if grid.size > 1 else None,
                               rtol=rtol, atol=atol)
        if lin.times.size != trace.times.size or np.max(np.abs(lin.times - trace.times)) > 1e-9 * t_end:
            raise ConvergenceError("record grids of network and linearization differ")
        diff = trace.f_test - lin.f_test
        trace.lin_gap = np.max(np.linalg.norm(diff, axis=2), axis=1)
        K = diff.shape[2]
        centered = np.array([center_project(d.ravel(), K).reshape(d.shape) for d in diff])
        trace.centered_gap = np.max(np.linalg.norm(centered, axis=2), axis=1)
    return trace
