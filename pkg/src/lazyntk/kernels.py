"""Analytic NNGP and NTK kernels of fully-connected erf networks.

The network convention follows the NTK parametrization with the weight and
bias scales living in the initialization variance::

    h^(1)   = W^(1) x / sqrt(d) + b^(1)
    h^(l+1) = W^(l+1) erf(h^(l)) / sqrt(n_l) + b^(l+1),   l = 1..L
    f(x)    = h^(L+1)

with ``W^(l)_ij ~ N(0, sigma_w[l]^2)`` and ``b^(l)_i ~ N(0, sigma_b[l]^2)``.
Under this convention the infinite-width kernels obey

    Sigma^(1) = sw_1^2 <x, x'> / d + sb_1^2
    Theta^(1) = <x, x'> / d + 1
    Sigma^(l+1) = sw_{l+1}^2 E[erf(u) erf(v)] + sb_{l+1}^2
    Theta^(l+1) = E[erf(u) erf(v)] + 1 + sw_{l+1}^2 E[erf'(u) erf'(v)] Theta^(l)

where ``(u, v)`` is centered Gaussian with covariance taken from
``Sigma^(l)``. Both expectations have closed forms for erf, so no quadrature
is involved. The output kernels are scalar; the full kernel over ``K``
outputs is ``scalar (x) I_K``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

__all__ = [
    "ArchSpec",
    "KernelPack",
    "nngp_kernel",
    "ntk_kernel",
    "kernel_matrices",
    "assemble_pack",
    "empirical_ntk_error",
    "add_jitter",
    "erf_expectations",
]


def _per_layer(value, n_layers: int, name: str) -> tuple:
    if np.ndim(value) == 0:
        return (float(value),) * n_layers
    values = tuple(float(v) for v in value)
    if len(values) != n_layers:
        raise ValueError(f"{name} needs {n_layers} entries (one per weight layer), got {len(values)}")
    return values


@dataclass(frozen=True)
class ArchSpec:
    """Architecture of a fully-connected erf network.

    ``sigma_w`` and ``sigma_b`` may be scalars or sequences with one entry per
    weight layer (``depth + 1`` entries, the last one for the linear readout).
    ``widths`` is only used by finite networks; analytic kernels ignore it.
    """

    depth: int
    input_dim: int
    output_dim: int = 1
    sigma_w: float | Sequence[float] = 1.5
    sigma_b: float | Sequence[float] = 0.1
    widths: tuple[int, ...] | None = None
    activation: str = "erf"

    def __post_init__(self):
        if int(self.depth) < 1:
            raise ValueError("depth must be >= 1")
        if int(self.input_dim) < 1 or int(self.output_dim) < 1:
            raise ValueError("input_dim and output_dim must be >= 1")
        if self.activation != "erf":
            raise ValueError(f"unsupported activation {self.activation!r}; only 'erf' is available")
        sw = _per_layer(self.sigma_w, self.depth + 1, "sigma_w")
        sb = _per_layer(self.sigma_b, self.depth + 1, "sigma_b")
        if any(s <= 0 for s in sw):
            raise ValueError("sigma_w must be positive")
        if any(s < 0 for s in sb):
            raise ValueError("sigma_b must be nonnegative")
        object.__setattr__(self, "sigma_w", sw)
        object.__setattr__(self, "sigma_b", sb)
        if self.widths is not None:
            widths = tuple(int(n) for n in self.widths)
            if len(widths) != self.depth or any(n < 1 for n in widths):
                raise ValueError("widths must hold depth positive integers")
            object.__setattr__(self, "widths", widths)

    def with_width(self, width: int) -> "ArchSpec":
        return ArchSpec(self.depth, self.input_dim, self.output_dim, self.sigma_w,
                        self.sigma_b, (int(width),) * self.depth, self.activation)

    def kernel_key(self) -> tuple:
        """Everything the analytic kernels depend on (widths excluded)."""
        return (self.depth, self.input_dim, self.output_dim, self.sigma_w,
                self.sigma_b, self.activation)

    def to_dict(self) -> dict:
        return {
            "depth": self.depth,
            "input_dim": self.input_dim,
            "output_dim": self.output_dim,
            "sigma_w": list(self.sigma_w),
            "sigma_b": list(self.sigma_b),
            "widths": None if self.widths is None else list(self.widths),
            "activation": self.activation,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ArchSpec":
        widths = d.get("widths")
        return cls(int(d["depth"]), int(d["input_dim"]), int(d.get("output_dim", 1)),
                   d.get("sigma_w", 1.5), d.get("sigma_b", 0.1),
                   None if widths is None else tuple(widths), d.get("activation", "erf"))


def erf_expectations(s11, s12, s22):
    """Closed-form ``E[erf(u)erf(v)]`` and ``E[erf'(u)erf'(v)]``.

    ``(u, v)`` is centered Gaussian with covariance ``[[s11, s12], [s12, s22]]``.
    Works elementwise on broadcastable arrays.
    """
    s11 = np.asarray(s11, dtype=float)
    s12 = np.asarray(s12, dtype=float)
    s22 = np.asarray(s22, dtype=float)
    prod = (1.0 + 2.0 * s11) * (1.0 + 2.0 * s22)
    ratio = np.clip(2.0 * s12 / np.sqrt(prod), -1.0, 1.0)
    e_phi = (2.0 / np.pi) * np.arcsin(ratio)
    # prod - 4 s12^2 >= 1 + 2 s11 + 2 s22 > 0 by Cauchy-Schwarz
    e_dphi = (4.0 / np.pi) / np.sqrt(prod - 4.0 * s12 ** 2)
    return e_phi, e_dphi


def _recursion(arch: ArchSpec, gram, sq_a, sq_b):
    """Run the layer recursion on a cross Gram matrix and the two squared-norm
    vectors. Returns ``(nngp, ntk)`` with the shape of ``gram``."""
    d = arch.input_dim
    sw, sb = arch.sigma_w, arch.sigma_b
    cross = sw[0] ** 2 * gram / d + sb[0] ** 2
    diag_a = sw[0] ** 2 * sq_a / d + sb[0] ** 2
    diag_b = sw[0] ** 2 * sq_b / d + sb[0] ** 2
    ntk = gram / d + 1.0
    for layer in range(1, arch.depth + 1):
        e_phi, e_dphi = erf_expectations(diag_a[:, None], cross, diag_b[None, :])
        e_aa, _ = erf_expectations(diag_a, diag_a, diag_a)
        e_bb, _ = erf_expectations(diag_b, diag_b, diag_b)
        ntk = e_phi + 1.0 + sw[layer] ** 2 * e_dphi * ntk
        cross = sw[layer] ** 2 * e_phi + sb[layer] ** 2
        diag_a = sw[layer] ** 2 * e_aa + sb[layer] ** 2
        diag_b = sw[layer] ** 2 * e_bb + sb[layer] ** 2
    return cross, ntk


def _as_points(points, d: int) -> np.ndarray:
    X = np.atleast_2d(np.asarray(points, dtype=float))
    if X.shape[1] != d:
        raise ValueError(f"expected inputs of dimension {d}, got {X.shape[1]}")
    return X


def kernel_matrices(arch: ArchSpec, X, Y=None) -> tuple[np.ndarray, np.ndarray]:
    """Scalar NNGP and NTK cross-kernel matrices between two point sets."""
    X = _as_points(X, arch.input_dim)
    Y = X if Y is None else _as_points(Y, arch.input_dim)
    gram = X @ Y.T
    sq_x = np.einsum("ij,ij->i", X, X)
    sq_y = np.einsum("ij,ij->i", Y, Y)
    return _recursion(arch, gram, sq_x, sq_y)


def nngp_kernel(arch: ArchSpec, x, x_prime) -> float:
    x = np.asarray(x, dtype=float).ravel()
    y = np.asarray(x_prime, dtype=float).ravel()
    if x.shape[0] != arch.input_dim or y.shape[0] != arch.input_dim:
        raise ValueError(f"expected inputs of dimension {arch.input_dim}")
    nngp, _ = _pair(arch, x, y)
    return nngp


def ntk_kernel(arch: ArchSpec, x, x_prime) -> float:
    x = np.asarray(x, dtype=float).ravel()
    y = np.asarray(x_prime, dtype=float).ravel()
    if x.shape[0] != arch.input_dim or y.shape[0] != arch.input_dim:
        raise ValueError(f"expected inputs of dimension {arch.input_dim}")
    _, ntk = _pair(arch, x, y)
    return ntk


def _pair(arch, x, y):
    # same arithmetic for (x, y) and (y, x): the dot product is symmetric and
    # the recursion only sees the unordered pair of diagonals through products
    gram = np.array([[float(np.dot(x, y))]])
    a, b = float(np.dot(x, x)), float(np.dot(y, y))
    if b < a:
        a, b = b, a
    nngp, ntk = _recursion(arch, gram, np.array([a]), np.array([b]))
    return float(nngp[0, 0]), float(ntk[0, 0])


@dataclass(frozen=True)
class KernelPack:
    """Analytic kernels on a fixed point set.

    ``nngp`` and ``ntk`` are ``N x N`` scalar matrices; the kernel over all
    ``N*K`` output coordinates is ``matrix (x) I_K`` with point-major,
    class-minor ordering.
    """

    points: np.ndarray
    nngp: np.ndarray
    ntk: np.ndarray
    output_dim: int
    arch: ArchSpec | None = field(default=None, compare=False)

    def __post_init__(self):
        for a in (self.points, self.nngp, self.ntk):
            a.setflags(write=False)

    @property
    def n_points(self) -> int:
        return self.ntk.shape[0]

    def full(self, which: str = "ntk") -> np.ndarray:
        """The ``NK x NK`` matrix ``scalar (x) I_K``."""
        mat = self.ntk if which == "ntk" else self.nngp
        return np.kron(mat, np.eye(self.output_dim))

    def subset(self, idx) -> "KernelPack":
        idx = np.asarray(idx, dtype=int)
        return KernelPack(self.points[idx].copy(), self.nngp[np.ix_(idx, idx)].copy(),
                          self.ntk[np.ix_(idx, idx)].copy(), self.output_dim, self.arch)


def _mirror_upper(m: np.ndarray) -> np.ndarray:
    upper = np.triu(m)
    return upper + np.triu(m, 1).T


def assemble_pack(arch: ArchSpec, points) -> KernelPack:
    X = _as_points(points, arch.input_dim)
    if X.shape[0] == 0:
        raise ValueError("empty point list")
    nngp, ntk = kernel_matrices(arch, X)
    return KernelPack(X.copy(), _mirror_upper(nngp), _mirror_upper(ntk), arch.output_dim, arch)


def empirical_ntk_error(pack: KernelPack | np.ndarray, emp: np.ndarray) -> float:
    """Relative Frobenius error of an empirical NTK against the analytic one."""
    ref = pack.ntk if isinstance(pack, KernelPack) else np.asarray(pack, dtype=float)
    emp = np.asarray(emp, dtype=float)
    if emp.shape != ref.shape:
        raise ValueError(f"shape mismatch: {emp.shape} vs {ref.shape}")
    denom = np.linalg.norm(ref)
    if denom == 0.0:
        raise ValueError("analytic kernel has zero norm")
    return float(np.linalg.norm(emp - ref) / denom)


def add_jitter(mat: np.ndarray, scale: float = 1e-8) -> np.ndarray:
    """``mat + scale * trace/N * I``; used before every kernel inversion."""
    n = mat.shape[0]
    return mat + scale * np.trace(mat) / n * np.eye(n)
