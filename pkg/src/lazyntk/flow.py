"""Function-space dynamics driven by a fixed NTK.

Training points come first in every stacked vector, test points after them.
With ``x`` the training inputs the flow is

    dg/dt = -eta0 * (Theta[:, x] grad C(g(x)) + beta * (g - g0))

on all points jointly; its fixed point on the training points solves
``Phi(z) = beta * g0(x)`` with ``Phi(z) = Theta[x, x] grad C(z) + beta z``.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.integrate import RK45

from .kernels import KernelPack, add_jitter
from .losses import LossKind, LossSpec, block_diag, center_project, loss_gradient, loss_hessian, loss_value

log = logging.getLogger(__name__)

__all__ = [
    "ConvergenceError",
    "FlowProblem",
    "FlowState",
    "phi_apply",
    "phi_jacobian",
    "phi_inverse",
    "integrate_flow",
    "predict_test",
    "centered_flow",
    "map_objective",
    "stationarity_residual",
    "stationary_points",
    "solution_report",
]


class ConvergenceError(RuntimeError):
    """Raised when an iterative solve or integration stops short.

    ``z`` holds the last iterate and ``residual`` its residual norm.
    """

    def __init__(self, message, z=None, residual=None):
        super().__init__(message)
        self.z = z
        self.residual = residual


def _expand(mat: np.ndarray, K: int, n: int) -> np.ndarray:
    """Full ``nK x nK`` kernel from a scalar ``n x n`` one."""
    if mat.shape != (n, n):
        raise ValueError(f"kernel of shape {mat.shape} does not cover {n} points")
    return np.kron(mat, np.eye(K)) if K > 1 else mat.copy()


@dataclass(frozen=True)
class FlowProblem:
    """A kernel regression problem on training points plus test points.

    ``ntk`` (and optionally ``nngp``) cover all ``n_train + n_test`` points,
    either as a scalar matrix meaning ``matrix (x) I_K`` or as a dense
    ``NK x NK`` matrix when ``dense`` is set (e.g. an empirical NTK). ``g0`` stacks the initial
    function values on training then test points.
    """

    ntk: np.ndarray
    n_train: int
    spec: LossSpec
    beta: float
    eta0: float = 1.0
    g0: np.ndarray | None = None
    nngp: np.ndarray | None = None
    jitter: float = 1e-8
    dense: bool = False
    refine_steps: int = 2
    _cache: dict = field(default_factory=dict, init=False, repr=False, compare=False)

    def __post_init__(self):
        ntk = np.asarray(self.ntk, dtype=float)
        K = self.spec.n_logits
        if self.spec.n_points != self.n_train:
            raise ValueError(f"loss has {self.spec.n_points} points, problem has {self.n_train} training points")
        if self.beta < 0:
            raise ValueError("beta must be nonnegative")
        if self.eta0 <= 0:
            raise ValueError("eta0 must be positive")
        n_all = ntk.shape[0] // K if self.dense else ntk.shape[0]
        if self.dense and ntk.shape[0] % K:
            raise ValueError(f"dense kernel size {ntk.shape[0]} is not a multiple of K={K}")
        if n_all < self.n_train:
            raise ValueError("kernel covers fewer points than the training set")
        full = ntk if self.dense else _expand(ntk, K, n_all)
        g0 = np.zeros(n_all * K) if self.g0 is None else np.asarray(self.g0, dtype=float).ravel()
        if g0.size != n_all * K:
            raise ValueError(f"g0 has length {g0.size}, expected {n_all * K}")
        object.__setattr__(self, "ntk", ntk)
        object.__setattr__(self, "g0", g0)
        if self.nngp is not None:
            object.__setattr__(self, "nngp", np.asarray(self.nngp, dtype=float))
        self._cache["full"] = full
        self._cache["n_all"] = n_all

    @classmethod
    def from_pack(cls, pack: KernelPack, n_train: int, spec: LossSpec, beta: float,
                  eta0: float = 1.0, g0=None) -> "FlowProblem":
        return cls(np.asarray(pack.ntk), n_train, spec, beta, eta0, g0, np.asarray(pack.nngp))

    def with_g0(self, g0) -> "FlowProblem":
        new = FlowProblem(self.ntk, self.n_train, self.spec, self.beta, self.eta0,
                          np.asarray(g0, dtype=float), self.nngp, self.jitter, self.dense, self.refine_steps)
        for key in ("eig", "cond"):
            if key in self._cache:
                new._cache[key] = self._cache[key]
        return new

    @property
    def K(self) -> int:
        return self.spec.n_logits

    @property
    def n_points(self) -> int:
        return self._cache["n_all"]

    @property
    def n_test(self) -> int:
        return self.n_points - self.n_train

    @property
    def train_dim(self) -> int:
        return self.n_train * self.K

    @property
    def full_ntk(self) -> np.ndarray:
        return self._cache["full"]

    @property
    def full_nngp(self) -> np.ndarray:
        if self.nngp is None:
            raise ValueError("problem carries no NNGP kernel")
        if self.dense:
            return self.nngp
        return _expand(self.nngp, self.K, self.n_points)

    @property
    def theta_xx(self) -> np.ndarray:
        m = self.train_dim
        return self.full_ntk[:m, :m]

    @property
    def theta_tx(self) -> np.ndarray:
        m = self.train_dim
        return self.full_ntk[m:, :m]

    @property
    def theta_tt(self) -> np.ndarray:
        m = self.train_dim
        return self.full_ntk[m:, m:]

    @property
    def g0_train(self) -> np.ndarray:
        return self.g0[:self.train_dim]

    @property
    def g0_test(self) -> np.ndarray:
        return self.g0[self.train_dim:]

    def solve_theta(self, rhs: np.ndarray) -> np.ndarray:
        """``Theta[x, x]^{-1} rhs`` via a jittered symmetric eigendecomposition
        followed by ``refine_steps`` steps of iterative refinement."""
        if "eig" not in self._cache:
            w, V = np.linalg.eigh(add_jitter(self.theta_xx, self.jitter))
            if w[0] <= 0:
                raise np.linalg.LinAlgError("training NTK is not positive definite after jitter")
            cond = w[-1] / w[0]
            log.debug("training NTK condition number %.3e", cond)
            self._cache["eig"] = (w, V)
            self._cache["cond"] = float(cond)
        w, V = self._cache["eig"]
        scale = w[:, None] if rhs.ndim == 2 else w

        def jittered(r):
            return V @ ((V.T @ r) / scale)

        # the jittered factor preconditions a short refinement against the
        # exact kernel, removing the O(jitter) bias where Theta is well posed
        x = jittered(rhs)
        for _ in range(self.refine_steps):
            x = x + jittered(rhs - self.theta_xx @ x)
        return x

    @property
    def condition_number(self) -> float:
        if "cond" not in self._cache:
            self.solve_theta(np.zeros(self.train_dim))
        return self._cache["cond"]

    def to_json(self, points=None, arch=None) -> str:
        doc = {
            "n_train": self.n_train,
            "beta": self.beta,
            "eta0": self.eta0,
            "loss": self.spec.kind.value,
            "targets": self.spec.targets.tolist(),
            "ntk": self.ntk.tolist(),
            "g0": self.g0.tolist(),
            "dense": self.dense,
        }
        if self.nngp is not None:
            doc["nngp"] = self.nngp.tolist()
        if points is not None:
            doc["points"] = np.asarray(points).tolist()
        if arch is not None:
            doc["arch"] = arch.to_dict()
            doc["arch_hash"] = _arch_hash(arch)
        return json.dumps(doc)

    @classmethod
    def from_json(cls, text: str) -> "FlowProblem":
        doc = json.loads(text)
        spec = LossSpec(LossKind(doc["loss"]), np.array(doc["targets"]))
        nngp = np.array(doc["nngp"]) if "nngp" in doc else None
        return cls(np.array(doc["ntk"]), int(doc["n_train"]), spec, float(doc["beta"]),
                   float(doc.get("eta0", 1.0)), np.array(doc["g0"]), nngp,
                   dense=bool(doc.get("dense", False)))


def _arch_hash(arch) -> str:
    return hashlib.sha256(json.dumps(arch.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


def phi_apply(problem: FlowProblem, z) -> np.ndarray:
    """``Theta[x, x] grad C(z) + beta z``."""
    z = np.asarray(z, dtype=float)
    if z.size != problem.train_dim:
        raise ValueError(f"expected length {problem.train_dim}, got {z.size}")
    return problem.theta_xx @ loss_gradient(problem.spec, z) + problem.beta * z


def phi_jacobian(problem: FlowProblem, z) -> np.ndarray:
    H = block_diag(loss_hessian(problem.spec, z))
    return problem.theta_xx @ H + problem.beta * np.eye(problem.train_dim)


def _preflow(problem, z, rhs, steps=200):
    # explicit Euler on dz/dt = -(Phi(z) - rhs); step within the stability bound
    lam = 0.5 * np.linalg.norm(problem.theta_xx, 2) + problem.beta
    if problem.spec.kind is LossKind.MSE:
        lam = np.linalg.norm(problem.theta_xx, 2) + problem.beta
    h = 1.0 / max(lam, 1e-12)
    for _ in range(steps):
        z = z - h * (phi_apply(problem, z) - rhs)
    return z


def phi_inverse(problem: FlowProblem, rhs, z0=None, tol: float = 1e-10, max_iter: int = 100,
                max_halvings: int = 40, step_tol: float = 1e-6) -> np.ndarray:
    """Solve ``Phi(z) = rhs`` by damped Newton.

    Backtracking halves the step until the residual norm decreases. If the
    very first Newton step cannot be accepted the iterate is preconditioned
    by 200 explicit gradient-flow steps and Newton restarts once.
    Converged when ``||Phi(z) - rhs|| <= tol * (1 + ||rhs||)`` and one more
    full Newton step is shorter than ``step_tol * (1 + ||z||)``. The second
    test catches residuals that vanish along a flat tail with no finite root,
    e.g. one-hot cross-entropy targets without regularization.
    """
    rhs = np.asarray(rhs, dtype=float).ravel()
    if rhs.size != problem.train_dim:
        raise ValueError(f"expected rhs of length {problem.train_dim}, got {rhs.size}")
    if z0 is None:
        z0 = rhs / problem.beta if problem.beta > 0 else np.zeros_like(rhs)
    z = np.array(z0, dtype=float)
    target = tol * (1.0 + np.linalg.norm(rhs))
    singular_ok = problem.beta == 0 and problem.spec.kind is LossKind.CE
    restarted = False

    F = phi_apply(problem, z) - rhs
    res = np.linalg.norm(F)
    it = 0
    while res > target:
        if it >= max_iter:
            raise ConvergenceError(f"Newton did not converge in {max_iter} iterations (residual {res:.3e})", z, res)
        Jm = phi_jacobian(problem, z)
        try:
            if singular_ok:
                step = np.linalg.lstsq(Jm, -F, rcond=None)[0]
            else:
                step = np.linalg.solve(Jm, -F)
        except np.linalg.LinAlgError as exc:
            raise ConvergenceError(f"singular Newton matrix: {exc}", z, res) from exc
        alpha, accepted = 1.0, False
        for _ in range(max_halvings + 1):
            z_try = z + alpha * step
            F_try = phi_apply(problem, z_try) - rhs
            r_try = np.linalg.norm(F_try)
            if np.isfinite(r_try) and r_try < res:
                accepted = True
                break
            alpha *= 0.5
        if not accepted:
            if it == 0 and not restarted:
                restarted = True
                z = _preflow(problem, z, rhs)
                F = phi_apply(problem, z) - rhs
                res = np.linalg.norm(F)
                continue
            raise ConvergenceError(f"Newton stagnated at residual {res:.3e}", z, res)
        if np.linalg.norm(alpha * step) < 1e-14 and r_try > target:
            raise ConvergenceError(f"Newton step underflow at residual {r_try:.3e}", z_try, r_try)
        z, F, res = z_try, F_try, r_try
        it += 1
    if step_tol is not None and res > 0:
        Jm = phi_jacobian(problem, z)
        try:
            step = np.linalg.lstsq(Jm, -F, rcond=None)[0] if singular_ok else np.linalg.solve(Jm, -F)
        except np.linalg.LinAlgError:
            step = np.full_like(z, np.inf)
        size = np.linalg.norm(step)
        if not size <= step_tol * (1.0 + np.linalg.norm(z)):
            raise ConvergenceError(f"residual {res:.3e} reached but the next Newton step is {size:.3e}; "
                                   "no finite root near the iterate", z, res)
    return z


def stationarity_residual(problem: FlowProblem, g_train) -> float:
    """``||Theta grad C(g) + beta (g - g0)||`` on the training points."""
    g_train = np.asarray(g_train, dtype=float)
    return float(np.linalg.norm(phi_apply(problem, g_train) - problem.beta * problem.g0_train))


def map_objective(problem: FlowProblem, z) -> float:
    """``C(z) + beta/2 (z - g0)^T Theta^{-1} (z - g0)`` on the training points."""
    z = np.asarray(z, dtype=float)
    d = z - problem.g0_train
    reg = 0.0 if problem.beta == 0 else 0.5 * problem.beta * float(d @ problem.solve_theta(d))
    return loss_value(problem.spec, z) + reg


@dataclass
class FlowState:
    t: float
    g_train: np.ndarray
    g_test: np.ndarray
    grad_norm: float
    objective: float = float("nan")


def _flow_rhs(problem: FlowProblem):
    m = problem.train_dim
    cols = problem.full_ntk[:, :m]
    g0 = problem.g0
    scale = -problem.eta0

    def rhs(t, g):
        return scale * (cols @ loss_gradient(problem.spec, g[:m]) + problem.beta * (g - g0))

    return rhs


def _check_integration_identity(problem: FlowProblem, g: np.ndarray, tol: float = 1e-6):
    if problem.n_test == 0:
        return
    m = problem.train_dim
    d_train = g[:m] - problem.g0_train
    pred = problem.theta_tx @ problem.solve_theta(d_train)
    d_test = g[m:] - problem.g0_test
    err = np.max(np.abs(d_test - pred)) if d_test.size else 0.0
    if err > tol * (1.0 + np.max(np.abs(d_test))):
        raise ConvergenceError(f"test/train integration identity violated by {err:.3e}", g, err)


def integrate_flow(problem: FlowProblem, t_end: float, record_every: float | None = None,
                   rtol: float = 1e-6, atol: float = 1e-9, stop_grad_norm: float | None = None,
                   check_identity: bool = True) -> list[FlowState]:
    """Integrate the function-space flow with an adaptive Dormand-Prince pair.

    States are recorded at multiples of ``record_every`` (default
    ``t_end / 100``) and at the final time. With ``stop_grad_norm`` the run
    ends at the first accepted step whose stationarity residual falls below
    it; that state is appended last.
    """
    if t_end <= 0:
        raise ValueError("t_end must be positive")
    record_every = t_end / 100 if record_every is None else float(record_every)
    m = problem.train_dim
    solver = RK45(_flow_rhs(problem), 0.0, problem.g0.copy(), t_end, rtol=rtol, atol=atol)
    grid = list(np.arange(0.0, t_end, record_every)[1:]) + [t_end]

    def make_state(t, g):
        if check_identity:
            _check_integration_identity(problem, g)
        return FlowState(float(t), g[:m].copy(), g[m:].copy(), stationarity_residual(problem, g[:m]),
                         map_objective(problem, g[:m]))

    states = [make_state(0.0, problem.g0.copy())]
    gi = 0
    while solver.status == "running":
        msg = solver.step()
        if solver.status == "failed":
            raise ConvergenceError(f"integrator failed at t={solver.t:.4g}: {msg}", solver.y, None)
        dense = None
        while gi < len(grid) and grid[gi] <= solver.t:
            if grid[gi] == solver.t:
                y = solver.y.copy()
            else:
                dense = dense or solver.dense_output()
                y = dense(grid[gi])
            states.append(make_state(grid[gi], y))
            gi += 1
        if stop_grad_norm is not None and stationarity_residual(problem, solver.y[:m]) <= stop_grad_norm:
            if states[-1].t != solver.t:
                states.append(make_state(solver.t, solver.y.copy()))
            break
    return states


def predict_test(problem: FlowProblem, g_inf_train, check: bool = True) -> np.ndarray:
    """Test predictions from converged training values.

    Formula A: ``g0(x') + Theta[x', x] Theta[x, x]^{-1} (g_inf - g0(x))``.
    For ``beta > 0`` formula B, ``g0(x') - Theta[x', x] grad C(g_inf) / beta``,
    is evaluated as well and must agree to ``1e-6 (1 + ||A||)``.
    """
    g_inf = np.asarray(g_inf_train, dtype=float)
    if problem.n_test == 0:
        return np.zeros(0)
    a = problem.g0_test + problem.theta_tx @ problem.solve_theta(g_inf - problem.g0_train)
    if check and problem.beta > 0:
        b = problem.g0_test - problem.theta_tx @ loss_gradient(problem.spec, g_inf) / problem.beta
        gap = np.max(np.abs(a - b))
        if gap > 1e-6 * (1.0 + np.linalg.norm(a)):
            raise ConvergenceError(f"prediction formulas disagree by {gap:.3e}; training solution unconverged",
                                   g_inf, gap)
    return a


def predict_test_both(problem: FlowProblem, g_inf_train) -> tuple[np.ndarray, np.ndarray]:
    g_inf = np.asarray(g_inf_train, dtype=float)
    a = problem.g0_test + problem.theta_tx @ problem.solve_theta(g_inf - problem.g0_train)
    if problem.beta == 0:
        return a, None
    b = problem.g0_test - problem.theta_tx @ loss_gradient(problem.spec, g_inf) / problem.beta
    return a, b


def centered_flow(problem: FlowProblem, t_end: float, record_every: float | None = None,
                  **kwargs) -> list[FlowState]:
    """Cross-entropy flow reported in block-centered coordinates."""
    if problem.spec.kind is not LossKind.CE:
        raise ValueError("centered flow is for cross-entropy without a reference class")
    K = problem.K
    states = integrate_flow(problem, t_end, record_every, **kwargs)
    for s in states:
        s.g_train = center_project(s.g_train, K)
        if s.g_test.size:
            s.g_test = center_project(s.g_test, K)
    return states


def _objective_hessian(problem: FlowProblem, z):
    H = block_diag(loss_hessian(problem.spec, z))
    if problem.beta == 0:
        return H
    return H + problem.beta * problem.solve_theta(np.eye(problem.train_dim))


def stationary_points(problem: FlowProblem, starts, rhs=None, tol: float = 1e-10,
                      merge_tol: float = 1e-6, step_tol: float = 1e-8) -> list[tuple[np.ndarray, str]]:
    """All stationary points reachable by Newton from the given starts.

    A converged iterate only counts if the next full Newton step is below
    ``step_tol``; this rejects flat tails where the residual underflows
    without a root nearby. Returns ``(z, kind)`` pairs sorted by the first
    coordinate, with ``kind`` one of ``"min"``, ``"max"`` or ``"saddle"``
    from the eigenvalue signs of the Hessian of the regularized objective.
    """
    rhs = problem.beta * problem.g0_train if rhs is None else np.asarray(rhs, dtype=float)
    found: list[np.ndarray] = []
    for s in starts:
        z0 = np.broadcast_to(np.asarray(s, dtype=float), (problem.train_dim,)).copy()
        try:
            z = phi_inverse(problem, rhs, z0=z0, tol=tol)
        except ConvergenceError:
            continue
        F = phi_apply(problem, z) - rhs
        try:
            step = np.linalg.solve(phi_jacobian(problem, z), F)
        except np.linalg.LinAlgError:
            continue
        if np.linalg.norm(step) > step_tol * (1.0 + np.linalg.norm(z)):
            continue
        if not any(np.max(np.abs(z - f)) < merge_tol for f in found):
            found.append(z)
    out = []
    for z in sorted(found, key=lambda v: tuple(v)):
        eig = np.linalg.eigvalsh(_symmetrize(_objective_hessian(problem, z)))
        kind = "min" if eig[0] > 0 else "max" if eig[-1] < 0 else "saddle"
        out.append((z, kind))
    return out


def _symmetrize(m):
    return 0.5 * (m + m.T)


def solution_report(problem: FlowProblem, g_inf_train) -> dict:
    g = np.asarray(g_inf_train, dtype=float)
    return {
        "n_train": problem.n_train,
        "n_test": problem.n_test,
        "beta": problem.beta,
        "residual": stationarity_residual(problem, g),
        "objective": map_objective(problem, g),
        "condition_number": problem.condition_number,
        "g_inf_train": g.tolist(),
    }
