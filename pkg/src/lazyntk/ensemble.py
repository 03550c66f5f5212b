"""The distribution of trained predictors induced by random initialization.

Initial functions are drawn from the NNGP prior over training and test
points jointly, then pushed through the kernel training map (solve
``Phi(z) = beta f0(x)`` and predict on the test points). Around the MAP
``g*`` of the zero-mean problem the map is close to affine, which gives a
Gaussian approximation ``(mu_ens, sigma_ens)``; it is compared with the
Laplace covariance of GP classification, ``sigma_lap``.

Notation used below, with ``M = H* A^{-1}`` and ``A = Theta H* + beta I``::

    mu_ens    = Theta[t, x] Theta[x, x]^{-1} g*
    sigma_ens = K[t, t] - K[t, x] M^T Theta[x, t] - Theta[t, x] M K[x, t]
                + Theta[t, x] M K[x, x] M^T Theta[x, t]
    sigma_lap = Theta[t, t] - Theta[t, x] M Theta[x, t]

``M`` is symmetric, so the formulas may be written with either ``M`` or
``M^T``. When ``K = Theta`` the difference ``sigma_lap - sigma_ens`` equals
``beta Theta[t, x] A^{-T} H* A^{-1} Theta[x, t]``, which is PSD.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field

import numpy as np

from .flow import ConvergenceError, FlowProblem, map_objective, phi_apply, phi_inverse, predict_test
from .kernels import KernelPack, add_jitter
from .losses import block_diag, loss_hessian

log = logging.getLogger(__name__)

__all__ = [
    "MapAnchor",
    "EnsembleDraws",
    "EnsembleSummary",
    "sample_prior",
    "push_through",
    "push_through_many",
    "gaussian_approx",
    "laplace_cov",
    "gap_matrix",
    "gap_certificate",
    "check_map_optimality",
    "summarize_ensemble",
]


def _cholesky_escalating(mat: np.ndarray, jitters=(1e-8, 1e-7, 1e-6)) -> np.ndarray:
    last = None
    for j in jitters:
        try:
            return np.linalg.cholesky(add_jitter(mat, j))
        except np.linalg.LinAlgError as exc:
            last = exc
            log.debug("cholesky failed with jitter %.0e", j)
    raise np.linalg.LinAlgError(f"prior covariance not factorizable with jitter up to {jitters[-1]:g}") from last


def sample_prior(kernel: KernelPack | np.ndarray, n_samples: int, seed: int = 0,
                 output_dim: int | None = None) -> np.ndarray:
    """Joint Gaussian draws from the NNGP prior ``N(0, K (x) I_K)``.

    ``kernel`` is a :class:`KernelPack` (its ``nngp`` is used) or a scalar
    covariance matrix over ``N`` points. Returns an ``(n_samples, N*K)``
    array, point-major and class-minor. Classes are drawn independently
    from the same Cholesky factor.
    """
    if isinstance(kernel, KernelPack):
        mat, K = np.asarray(kernel.nngp), kernel.output_dim
    else:
        mat, K = np.asarray(kernel, dtype=float), 1 if output_dim is None else int(output_dim)
    if output_dim is not None:
        K = int(output_dim)
    if n_samples < 0:
        raise ValueError("n_samples must be nonnegative")
    N = mat.shape[0]
    L = _cholesky_escalating(mat)
    rng = np.random.default_rng(seed)
    z = rng.standard_normal((n_samples, N, K))
    return np.einsum("ij,sjk->sik", L, z).reshape(n_samples, N * K)


def push_through(problem: FlowProblem, draw) -> tuple[np.ndarray, np.ndarray]:
    """Train on one initial function and return ``(g_train, f_test)``.

    ``draw`` stacks the initial values on training then test points.
    """
    p = problem.with_g0(draw)
    g = phi_inverse(p, p.beta * p.g0_train)
    return g, predict_test(p, g)


@dataclass
class EnsembleDraws:
    """Pushed-through draws in draw order; failed draws are left out."""

    train: np.ndarray
    test: np.ndarray
    index: np.ndarray
    failed: list = field(default_factory=list)

    @property
    def n_ok(self) -> int:
        return int(self.index.size)

    @property
    def failure_rate(self) -> float:
        total = self.n_ok + len(self.failed)
        return len(self.failed) / total if total else 0.0


def push_through_many(problem: FlowProblem, draws) -> EnsembleDraws:
    """Apply :func:`push_through` to each row of ``draws``.

    Solver failures are recorded as ``(index, message)`` and excluded.
    """
    draws = np.atleast_2d(np.asarray(draws, dtype=float))
    m, t = problem.train_dim, problem.n_test * problem.K
    train, test, idx, failed = [], [], [], []
    for i, d in enumerate(draws):
        try:
            g, f = push_through(problem, d)
        except ConvergenceError as exc:
            failed.append((i, str(exc)))
            continue
        train.append(g)
        test.append(f)
        idx.append(i)
    if failed:
        log.warning("%d of %d draws failed to converge", len(failed), draws.shape[0])
    n_ok = len(idx)
    return EnsembleDraws(np.array(train).reshape(n_ok, m), np.array(test).reshape(n_ok, t),
                         np.array(idx, dtype=int), failed)


def _solve_a(a_matrix: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    cond = np.linalg.cond(a_matrix)
    if not np.isfinite(cond) or cond > 1e14:
        raise np.linalg.LinAlgError(f"A = Theta H* + beta I is singular (condition number {cond:.2e})")
    return np.linalg.solve(a_matrix, rhs)


@dataclass(frozen=True)
class MapAnchor:
    """MAP of the zero-prior-mean problem and the matrices built from it."""

    g_star: np.ndarray
    h_star: np.ndarray
    a_matrix: np.ndarray
    m_matrix: np.ndarray
    residual: float

    @classmethod
    def from_problem(cls, problem: FlowProblem, tol: float = 1e-10, sym_tol: float = 1e-8) -> "MapAnchor":
        """Solve ``Theta grad C(g) + beta g = 0`` and build ``H*``, ``A`` and ``H* A^{-1}``."""
        zero = problem.with_g0(np.zeros(problem.n_points * problem.K))
        rhs = np.zeros(problem.train_dim)
        g = phi_inverse(zero, rhs, tol=tol)
        residual = float(np.linalg.norm(phi_apply(zero, g)))
        if residual > tol:
            raise ConvergenceError(f"MAP residual {residual:.3e} above {tol:g}", g, residual)
        H = block_diag(loss_hessian(problem.spec, g))
        A = problem.theta_xx @ H + problem.beta * np.eye(problem.train_dim)
        # H A^{-1} = (A^{-T} H)^T; solve with A^T to avoid forming the inverse
        M = _solve_a(A.T, H).T
        asym = np.max(np.abs(M - M.T))
        if asym > sym_tol * max(1.0, np.max(np.abs(M))):
            raise ValueError(f"H* A^-1 is not symmetric (asymmetry {asym:.3e})")
        return cls(g, H, A, M, residual)


def _blocks(problem: FlowProblem, which: str):
    m = problem.train_dim
    full = problem.full_ntk if which == "ntk" else problem.full_nngp
    return full[:m, :m], full[m:, :m], full[m:, m:]


def gaussian_approx(anchor: MapAnchor, problem: FlowProblem, kernel_equal: bool = False):
    """``(mu_ens, sigma_ens)`` at the test points.

    With ``kernel_equal`` the prior covariance is taken to be the NTK and
    the simplified expression ``Theta_tt - Theta_tx (M + beta A^-T H* A^-1) Theta_xt``
    is used; otherwise the four-term expression with the problem's NNGP.
    """
    _, Ttx, Ttt = _blocks(problem, "ntk")
    mu = Ttx @ problem.solve_theta(anchor.g_star)
    M = anchor.m_matrix
    if kernel_equal:
        inner = M + problem.beta * _solve_a(anchor.a_matrix.T, anchor.h_star) @ _solve_a(anchor.a_matrix,
                                                                                       np.eye(M.shape[0]))
        sigma = Ttt - Ttx @ inner @ Ttx.T
    else:
        Kxx, Ktx, Ktt = _blocks(problem, "nngp")
        B = Ttx @ M
        sigma = Ktt - Ktx @ M.T @ Ttx.T - B @ Ktx.T + B @ Kxx @ B.T
    return mu, _symmetrize_checked(sigma, "sigma_ens")


def laplace_cov(anchor: MapAnchor, problem: FlowProblem) -> np.ndarray:
    """``Theta_tt - Theta_tx H* A^{-1} Theta_xt``."""
    _, Ttx, Ttt = _blocks(problem, "ntk")
    return _symmetrize_checked(Ttt - Ttx @ anchor.m_matrix @ Ttx.T, "sigma_lap")


def _symmetrize_checked(mat: np.ndarray, name: str, tol: float = 1e-8) -> np.ndarray:
    if mat.size == 0:
        return mat
    asym = np.max(np.abs(mat - mat.T))
    if asym > tol * max(1.0, np.max(np.abs(mat))):
        raise ValueError(f"{name} is not symmetric (asymmetry {asym:.3e})")
    return 0.5 * (mat + mat.T)


def gap_matrix(anchor: MapAnchor, problem: FlowProblem) -> np.ndarray:
    """Closed form ``beta Theta_tx A^{-T} H* A^{-1} Theta_xt``."""
    _, Ttx, _ = _blocks(problem, "ntk")
    right = _solve_a(anchor.a_matrix, Ttx.T)
    return problem.beta * right.T @ anchor.h_star @ right


def gap_certificate(anchor: MapAnchor, problem: FlowProblem, tol: float = 1e-8) -> float:
    """Smallest eigenvalue of ``sigma_lap - sigma_ens`` with the prior set to the NTK.

    The difference is also compared with :func:`gap_matrix`; a mismatch
    larger than ``tol * max(1, max|sigma_lap|)`` raises ``AssertionError``.
    """
    lap = laplace_cov(anchor, problem)
    _, ens = gaussian_approx(anchor, problem, kernel_equal=True)
    diff = lap - ens
    if diff.size == 0:
        return 0.0
    closed = gap_matrix(anchor, problem)
    mismatch = np.max(np.abs(diff - closed))
    scale = max(1.0, np.max(np.abs(lap)))
    if mismatch > tol * scale:
        raise AssertionError(f"gap differs from its closed form by {mismatch:.3e}")
    return float(np.linalg.eigvalsh(0.5 * (diff + diff.T))[0])


def check_map_optimality(problem: FlowProblem, g_train, n_perturb: int = 100, scale: float = 1e-2,
                         seed: int = 0) -> tuple[float, float]:
    """First-order residual and smallest objective change under random perturbations.

    The residual is ``||Theta^{-1}(Phi(g) - beta g0)||``, the gradient of the
    regularized objective. Perturbations have norm ``scale``. A minimizer has
    a tiny residual and a nonnegative smallest change.
    """
    g = np.asarray(g_train, dtype=float)
    grad = problem.solve_theta(phi_apply(problem, g) - problem.beta * problem.g0_train)
    base = map_objective(problem, g)
    rng = np.random.default_rng(seed)
    worst = np.inf
    for _ in range(n_perturb):
        v = rng.standard_normal(g.size)
        v *= scale / np.linalg.norm(v)
        worst = min(worst, map_objective(problem, g + v) - base)
    return float(np.linalg.norm(grad)), float(worst)


@dataclass
class EnsembleSummary:
    """Empirical and approximate ensemble statistics at the test points."""

    n_samples: int
    n_failed: int
    output_dim: int
    mean_test: np.ndarray
    cov_test: np.ndarray
    mu_ens: np.ndarray
    sigma_ens: np.ndarray
    sigma_lap: np.ndarray
    gap_min_eig: float
    samples: np.ndarray | None = field(default=None, repr=False)

    @property
    def failure_rate(self) -> float:
        total = self.n_samples + self.n_failed
        return self.n_failed / total if total else 0.0

    def class_block(self, which: str, k: int) -> np.ndarray:
        """Covariance among test points for class ``k``."""
        mat = getattr(self, which)
        return mat[k::self.output_dim, k::self.output_dim]

    def to_dict(self) -> dict:
        def eig(m):
            return np.linalg.eigvalsh(m).tolist() if m.size else []

        return {
            "n_samples": self.n_samples,
            "n_failed": self.n_failed,
            "failure_rate": self.failure_rate,
            "output_dim": self.output_dim,
            "gap_min_eig": self.gap_min_eig,
            "trace_sigma_lap": float(np.trace(self.sigma_lap)),
            "trace_sigma_ens": float(np.trace(self.sigma_ens)),
            "trace_cov_test": float(np.trace(self.cov_test)),
            "eig_sigma_ens": eig(self.sigma_ens),
            "eig_sigma_lap": eig(self.sigma_lap),
            "eig_cov_test": eig(self.cov_test),
            "max_mean_error": float(np.max(np.abs(self.mean_test - self.mu_ens))) if self.mu_ens.size else 0.0,
        }

    def to_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2)

    def to_csv(self, path, x=None, quantiles=(0.05, 0.5, 0.95)) -> None:
        """One row per (test point, class) with means, variances and sample quantiles."""
        K = self.output_dim
        n = self.mean_test.size // K if K else 0
        qs = (np.quantile(self.samples, quantiles, axis=0) if self.samples is not None and len(self.samples)
              else np.full((len(quantiles), self.mean_test.size), np.nan))
        header = ["point", "x", "cls", "mean", "var", "mu_ens", "var_ens", "var_lap"] + [f"q{q:g}" for q in quantiles]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            for i in range(n):
                xv = "" if x is None else repr(float(np.ravel(x[i])[0]))
                for k in range(K):
                    j = i * K + k
                    w.writerow([i, xv, k, repr(float(self.mean_test[j])), repr(float(self.cov_test[j, j])),
                                repr(float(self.mu_ens[j])), repr(float(self.sigma_ens[j, j])),
                                repr(float(self.sigma_lap[j, j]))] + [repr(float(v)) for v in qs[:, j]])


def summarize_ensemble(problem: FlowProblem, n_samples: int, seed: int = 0, kernel_equal: bool = False,
                       keep_samples: bool = True) -> EnsembleSummary:
    """Sample the prior, push every draw through, and compare with the approximations.

    The prior covariance is the problem's NNGP, or its NTK with
    ``kernel_equal``. ``gap_min_eig`` is the smallest eigenvalue of
    ``sigma_lap - sigma_ens``.
    """
    if problem.dense:
        raise ValueError("ensemble summaries need scalar (class-independent) kernels")
    if not kernel_equal and problem.nngp is None:
        raise ValueError("problem carries no NNGP kernel")
    prior = problem.ntk if kernel_equal else problem.nngp
    draws = sample_prior(prior, n_samples, seed, output_dim=problem.K)
    result = push_through_many(problem, draws)
    test = result.test
    dim = problem.n_test * problem.K
    if result.n_ok:
        mean = test.mean(axis=0)
        cov = np.cov(test, rowvar=False, ddof=1).reshape(dim, dim) if result.n_ok > 1 else np.zeros((dim, dim))
    else:
        mean, cov = np.full(dim, np.nan), np.full((dim, dim), np.nan)
    anchor = MapAnchor.from_problem(problem)
    mu, sigma = gaussian_approx(anchor, problem, kernel_equal=kernel_equal)
    lap = laplace_cov(anchor, problem)
    diff = lap - sigma
    gap = float(np.linalg.eigvalsh(0.5 * (diff + diff.T))[0]) if diff.size else 0.0
    return EnsembleSummary(result.n_ok, len(result.failed), problem.K, mean, cov, mu, sigma, lap, gap,
                           test if keep_samples else None)
