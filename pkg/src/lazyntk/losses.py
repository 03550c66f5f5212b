"""Function-space losses over stacked network outputs.

A loss acts on ``z`` in R^{N*K}: N training points, K logits each, stored
point-major (``z.reshape(N, K)[i]`` is the logit vector of point ``i``).
All four losses sum over points, so their Hessians are block diagonal with
``K x K`` blocks; :func:`loss_hessian` returns the ``(N, K, K)`` stack and
:func:`block_diag` expands it when a dense matrix is needed.
"""

from __future__ import annotations

import csv
import enum
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import logsumexp, xlogy

__all__ = [
    "LossKind",
    "TargetSet",
    "LossSpec",
    "SublevelProbe",
    "softmax",
    "softmax_ref",
    "loss_value",
    "loss_gradient",
    "loss_hessian",
    "block_diag",
    "center_project",
    "audit_assumptions",
    "load_targets_csv",
]


class LossKind(str, enum.Enum):
    MSE = "mse"
    CE = "ce"
    CE_REF = "ce_ref"
    BRIER_REF = "brier_ref"


@dataclass(frozen=True)
class TargetSet:
    """Target probability vectors, one row per training point.

    For cross-entropy with a reference class the rows have ``K + 1`` entries
    and column 0 is the reference class.
    """

    probs: np.ndarray
    labels: np.ndarray | None = None

    def __post_init__(self):
        p = np.atleast_2d(np.asarray(self.probs, dtype=float))
        if np.any(p < 0) or np.any(p > 1):
            raise ValueError("target probabilities must lie in [0, 1]")
        if np.any(np.abs(p.sum(axis=1) - 1.0) > 1e-12):
            raise ValueError("each target row must sum to 1")
        object.__setattr__(self, "probs", p)

    @property
    def full_support(self) -> bool:
        return bool(np.all(self.probs > 0))

    @property
    def n_points(self) -> int:
        return self.probs.shape[0]

    @classmethod
    def from_labels(cls, labels, n_classes: int, smoothing: float = 0.0) -> "TargetSet":
        """One-hot targets, optionally label-smoothed: ``(1-a) e_y + a/C``."""
        labels = np.asarray(labels, dtype=int).ravel()
        if labels.min() < 0 or labels.max() >= n_classes:
            raise ValueError("labels out of range")
        if not 0.0 <= smoothing < 1.0:
            raise ValueError("smoothing must be in [0, 1)")
        p = np.full((labels.size, n_classes), smoothing / n_classes)
        p[np.arange(labels.size), labels] += 1.0 - smoothing
        # renormalize away the last ulp so rows pass the 1e-12 check exactly
        p /= p.sum(axis=1, keepdims=True)
        return cls(p, labels)


def load_targets_csv(path) -> TargetSet:
    """Read targets from CSV: one row per training point, probability columns.

    A header row is skipped if its first cell is not numeric.
    """
    rows = []
    with open(Path(path), newline="") as fh:
        for row in csv.reader(fh):
            if not row:
                continue
            try:
                rows.append([float(v) for v in row])
            except ValueError:
                if rows:
                    raise
    if not rows:
        raise ValueError(f"no target rows in {path}")
    return TargetSet(np.array(rows))


def softmax(z, axis=-1):
    z = np.asarray(z, dtype=float)
    e = np.exp(z - z.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def softmax_ref(z):
    """Softmax with a fixed zero reference logit.

    Returns ``(probs, ref)`` where ``probs`` has the shape of ``z`` and
    ``ref`` is the reference-class probability ``1 / (1 + sum exp z)``.
    Works on the last axis.
    """
    z = np.asarray(z, dtype=float)
    m = np.maximum(z.max(axis=-1, keepdims=True), 0.0)
    e = np.exp(z - m)
    e0 = np.exp(-m)
    denom = e0 + e.sum(axis=-1, keepdims=True)
    return e / denom, (e0 / denom)[..., 0]


def _sigmoid(z):
    return np.exp(-np.logaddexp(0.0, -z))


@dataclass(frozen=True)
class LossSpec:
    """A function-space loss together with its targets.

    ``targets`` is an ``(N, K)`` array: regression targets for MSE, target
    probabilities for CE, and ``(N, K+1)`` probabilities (reference class in
    column 0) for CE_REF and BRIER_REF.
    """

    kind: LossKind
    targets: np.ndarray
    inf_value: float = field(init=False)

    def __post_init__(self):
        kind = LossKind(self.kind)
        t = np.atleast_2d(np.asarray(self.targets, dtype=float))
        if kind is not LossKind.MSE:
            TargetSet(t)  # validates the simplex constraint
        if kind is LossKind.BRIER_REF and t.shape[1] != 2:
            raise ValueError("BRIER_REF is only defined for one logit (two classes)")
        t.setflags(write=False)
        object.__setattr__(self, "kind", kind)
        object.__setattr__(self, "targets", t)
        object.__setattr__(self, "inf_value", _infimum(kind, t))

    @classmethod
    def from_targets(cls, kind, targets: TargetSet | np.ndarray) -> "LossSpec":
        probs = targets.probs if isinstance(targets, TargetSet) else targets
        return cls(LossKind(kind), probs)

    @property
    def n_points(self) -> int:
        return self.targets.shape[0]

    @property
    def n_logits(self) -> int:
        if self.kind in (LossKind.CE_REF, LossKind.BRIER_REF):
            return self.targets.shape[1] - 1
        return self.targets.shape[1]

    @property
    def dim(self) -> int:
        return self.n_points * self.n_logits

    @property
    def full_support(self) -> bool:
        return self.kind is not LossKind.MSE and bool(np.all(self.targets > 0))

    @property
    def logit_targets(self) -> np.ndarray:
        """Targets aligned with the logits (reference column dropped)."""
        if self.kind in (LossKind.CE_REF, LossKind.BRIER_REF):
            return self.targets[:, 1:]
        return self.targets

    def _blocks(self, z) -> np.ndarray:
        z = np.asarray(z, dtype=float)
        if z.ndim != 1 or z.size != self.dim:
            raise ValueError(f"expected a vector of length {self.dim}, got shape {z.shape}")
        return z.reshape(self.n_points, self.n_logits)

    def value(self, z) -> float:
        return loss_value(self, z)

    def gradient(self, z) -> np.ndarray:
        return loss_gradient(self, z)

    def hessian(self, z) -> np.ndarray:
        return loss_hessian(self, z)


def _infimum(kind: LossKind, t: np.ndarray) -> float:
    if kind in (LossKind.MSE, LossKind.BRIER_REF):
        return 0.0
    # sum of target entropies; 0 log 0 = 0 so one-hot rows contribute 0
    return float(-xlogy(t, t).sum())


def loss_value(spec: LossSpec, z) -> float:
    Z = spec._blocks(z)
    kind = spec.kind
    if kind is LossKind.MSE:
        return 0.5 * float(np.sum((Z - spec.targets) ** 2))
    P = spec.logit_targets
    if kind is LossKind.CE:
        return float(np.sum(-np.sum(P * Z, axis=1) + logsumexp(Z, axis=1)))
    if kind is LossKind.CE_REF:
        Z0 = np.concatenate([np.zeros((Z.shape[0], 1)), Z], axis=1)
        return float(np.sum(-np.sum(P * Z, axis=1) + logsumexp(Z0, axis=1)))
    s = _sigmoid(Z)
    return 0.5 * float(np.sum((s - P) ** 2))


def loss_gradient(spec: LossSpec, z) -> np.ndarray:
    Z = spec._blocks(z)
    kind = spec.kind
    if kind is LossKind.MSE:
        G = Z - spec.targets
    elif kind is LossKind.CE:
        G = softmax(Z) - spec.targets
    elif kind is LossKind.CE_REF:
        G = softmax_ref(Z)[0] - spec.logit_targets
    else:
        s = _sigmoid(Z)
        G = (s - spec.logit_targets) * s * (1.0 - s)
    return G.ravel()


def loss_hessian(spec: LossSpec, z) -> np.ndarray:
    """Hessian blocks, shape ``(N, K, K)``."""
    Z = spec._blocks(z)
    N, K = Z.shape
    kind = spec.kind
    if kind is LossKind.MSE:
        return np.broadcast_to(np.eye(K), (N, K, K)).copy()
    if kind in (LossKind.CE, LossKind.CE_REF):
        S = softmax(Z) if kind is LossKind.CE else softmax_ref(Z)[0]
        H = -S[:, :, None] * S[:, None, :]
        H[:, np.arange(K), np.arange(K)] += S
        return H
    s = _sigmoid(Z)
    ds = s * (1.0 - s)
    h = ds * (ds + (s - spec.logit_targets) * (1.0 - 2.0 * s))
    return h[:, :, None]


def block_diag(blocks: np.ndarray) -> np.ndarray:
    """Dense ``NK x NK`` matrix from an ``(N, K, K)`` block stack."""
    N, K, _ = blocks.shape
    out = np.zeros((N * K, N * K))
    for i in range(N):
        out[i * K:(i + 1) * K, i * K:(i + 1) * K] = blocks[i]
    return out


def center_project(z, K: int) -> np.ndarray:
    """Apply ``I_K - 11^T/K`` to every length-``K`` block of ``z``."""
    z = np.asarray(z, dtype=float)
    if z.ndim != 1 or z.size % K:
        raise ValueError(f"length {z.size} is not divisible by K={K}")
    Z = z.reshape(-1, K)
    return (Z - Z.mean(axis=1, keepdims=True)).ravel()


@dataclass
class SublevelProbe:
    """Empirical constants of the gradient bound, gradient growth and PL
    inequalities on a loss sublevel set ``{z : C(z) <= K0}``."""

    K0: float
    samples: np.ndarray
    K1: float
    K2: float
    mu_C: float
    mu_C_analytic: float | None = None
    n_proposed: int = 0

    def to_dict(self) -> dict:
        return {
            "K0": self.K0,
            "n_samples": int(self.samples.shape[0]),
            "n_proposed": self.n_proposed,
            "K1": self.K1,
            "K2": self.K2,
            "mu_C": self.mu_C,
            "mu_C_analytic": self.mu_C_analytic,
        }


PROPOSAL_SCALES = (0.5, 1.0, 2.0, 4.0)


def audit_assumptions(spec: LossSpec, K0: float, n_samples: int, seed: int = 0,
                      max_proposals: int | None = None) -> SublevelProbe:
    """Rejection-sample the sublevel set and estimate K1, K2 and mu_C.

    Proposals are ``N(0, s^2 I)`` with ``s`` cycling through
    ``PROPOSAL_SCALES``. Points with ``C(z) - inf C < 1e-12`` are kept as
    samples but skipped in the ratio estimates.
    """
    if K0 <= spec.inf_value:
        raise ValueError("K0 must exceed inf C")
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    rng = np.random.default_rng(seed)
    budget = max_proposals if max_proposals is not None else 1000 * n_samples
    accepted, proposed = [], 0
    per_scale = max(1, n_samples // len(PROPOSAL_SCALES))
    while len(accepted) < n_samples and proposed < budget:
        for s in PROPOSAL_SCALES:
            zs = s * rng.standard_normal((per_scale, spec.dim))
            proposed += per_scale
            for z in zs:
                if loss_value(spec, z) <= K0:
                    accepted.append(z)
            if len(accepted) >= n_samples or proposed >= budget:
                break
    if not accepted:
        raise RuntimeError(f"no sublevel samples accepted after {proposed} proposals (K0={K0})")
    samples = np.array(accepted[:n_samples])

    norms_sq, ratios = [], []
    for z in samples:
        g = loss_gradient(spec, z)
        gsq = float(g @ g)
        norms_sq.append(gsq)
        excess = loss_value(spec, z) - spec.inf_value
        if excess >= 1e-12:
            ratios.append(gsq / (2.0 * excess))
    ratios = np.array(ratios) if ratios else np.array([np.nan])

    mu_analytic = None
    if spec.kind is LossKind.CE and spec.full_support:
        mu_analytic = 0.5 * float(np.min(np.exp(-K0 / spec.targets)))
    return SublevelProbe(
        K0=float(K0),
        samples=samples,
        K1=float(np.sqrt(max(norms_sq))),
        K2=float(np.max(ratios)),
        mu_C=float(np.min(ratios)),
        mu_C_analytic=mu_analytic,
        n_proposed=proposed,
    )
