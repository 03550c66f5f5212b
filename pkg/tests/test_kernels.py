import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy.special import erf

from lazyntk.kernels import (ArchSpec, KernelPack, add_jitter, assemble_pack, empirical_ntk_error, erf_expectations,
                             kernel_matrices, nngp_kernel, ntk_kernel)

arch_strategy = st.builds(
    ArchSpec,
    depth=st.integers(1, 4),
    input_dim=st.just(3),
    output_dim=st.integers(1, 3),
    sigma_w=st.floats(0.2, 3.0),
    sigma_b=st.floats(0.0, 1.0),
)
points_strategy = st.integers(0, 2**32 - 1).map(lambda s: np.random.default_rng(s).standard_normal((6, 3)))


def test_zero_input_without_bias_is_zero():
    for depth in (1, 2, 4):
        arch = ArchSpec(depth, 4, sigma_b=0.0)
        assert nngp_kernel(arch, np.zeros(4), np.zeros(4)) == 0.0


def test_nngp_matches_monte_carlo_erf_second_moment():
    arch = ArchSpec(1, 1, sigma_w=1.0, sigma_b=0.0)
    u = np.random.default_rng(0).standard_normal(1_000_000)
    vals = erf(u) ** 2
    se = vals.std(ddof=1) / np.sqrt(vals.size)
    assert abs(nngp_kernel(arch, [1.0], [1.0]) - vals.mean()) <= 3 * se


def test_erf_expectations_match_monte_carlo():
    rng = np.random.default_rng(1)
    cov = np.array([[0.7, 0.3], [0.3, 1.4]])
    uv = rng.multivariate_normal([0, 0], cov, size=1_000_000)
    e_phi, e_dphi = erf_expectations(cov[0, 0], cov[0, 1], cov[1, 1])
    dphi = 2 / np.sqrt(np.pi) * np.exp(-uv ** 2)
    for analytic, vals in ((e_phi, erf(uv[:, 0]) * erf(uv[:, 1])), (e_dphi, dphi[:, 0] * dphi[:, 1])):
        assert abs(analytic - vals.mean()) <= 3 * vals.std(ddof=1) / np.sqrt(vals.size)


def test_ntk_for_orthogonal_inputs_matches_monte_carlo():
    # depth 1, orthogonal inputs, no bias: first-layer covariance is diagonal, so
    # the derivative term factorizes into E[erf'(u)] E[erf'(v)]
    arch = ArchSpec(1, 2, sigma_w=1.0, sigma_b=0.0)
    x, y = np.array([1.0, 0.0]), np.array([0.0, 1.0])
    s = 1.0 / 2  # sigma_w^2 <x, x> / d
    rng = np.random.default_rng(2)
    u, v = rng.normal(0, np.sqrt(s), (2, 1_000_000))
    d = 2 / np.sqrt(np.pi)
    vals = erf(u) * erf(v) + 1.0 + d * np.exp(-u ** 2) * d * np.exp(-v ** 2) * (x @ y / 2 + 1.0)
    assert abs(ntk_kernel(arch, x, y) - vals.mean()) <= 3 * vals.std(ddof=1) / np.sqrt(vals.size)


def test_element_calls_are_exactly_symmetric(rng):
    arch = ArchSpec(3, 5, sigma_w=1.3, sigma_b=0.2)
    for _ in range(100):
        x, y = rng.standard_normal((2, 5)) * rng.uniform(0.1, 3)
        assert nngp_kernel(arch, x, y) == nngp_kernel(arch, y, x)
        assert ntk_kernel(arch, x, y) == ntk_kernel(arch, y, x)


@given(arch=arch_strategy, X=points_strategy)
def test_pack_symmetric_psd_and_cauchy_schwarz(arch, X):
    pack = assemble_pack(arch, X)
    for mat in (pack.nngp, pack.ntk):
        assert np.array_equal(mat, mat.T)
        assert np.linalg.eigvalsh(mat)[0] >= -1e-10 * np.trace(mat)
        d = np.diag(mat)
        assert np.all(mat ** 2 <= np.outer(d, d) * (1 + 1e-10) + 1e-12)


@given(depth=st.integers(1, 4), sw=st.floats(0.1, 1.0), sb=st.floats(0.0, 1.0), X=points_strategy)
def test_ntk_dominates_nngp_on_the_diagonal(depth, sw, sb, X):
    # each recursion step adds a nonnegative term, and the first-layer NTK term
    # <x,x>/d + 1 dominates sigma_w^2 <x,x>/d + sigma_b^2 when both scales are <= 1
    nngp, ntk = kernel_matrices(ArchSpec(depth, 3, sigma_w=sw, sigma_b=sb), X)
    assert np.all(np.diag(ntk) >= np.diag(nngp) - 1e-12)


def test_ntk_dominance_1000_random_trials(rng):
    for _ in range(1000):
        arch = ArchSpec(int(rng.integers(1, 5)), 3, sigma_w=rng.uniform(0.1, 1.0), sigma_b=rng.uniform(0, 1.0))
        x = rng.standard_normal(3) * rng.uniform(0.1, 5)
        assert ntk_kernel(arch, x, x) >= nngp_kernel(arch, x, x)


def test_strictly_positive_definite_on_distinct_points(rng):
    for depth in (1, 2, 3):
        pack = assemble_pack(ArchSpec(depth, 4), rng.standard_normal((20, 4)))
        assert np.linalg.eigvalsh(pack.ntk)[0] > 0


def test_pack_matches_element_calls(rng):
    arch = ArchSpec(2, 3, output_dim=2)
    X = rng.standard_normal((5, 3))
    pack = assemble_pack(arch, X)
    for i in range(5):
        for j in range(5):
            assert pack.nngp[i, j] == pytest.approx(nngp_kernel(arch, X[i], X[j]), rel=1e-13)
            assert pack.ntk[i, j] == pytest.approx(ntk_kernel(arch, X[i], X[j]), rel=1e-13)


def test_single_point_and_duplicate_rows(rng):
    arch = ArchSpec(2, 3)
    assert assemble_pack(arch, rng.standard_normal((1, 3))).ntk.shape == (1, 1)
    X = rng.standard_normal((4, 3))
    X[3] = X[1]
    pack = assemble_pack(arch, X)
    assert np.array_equal(pack.ntk[1], pack.ntk[3])
    assert np.array_equal(pack.nngp[:, 1], pack.nngp[:, 3])


def test_kernels_do_not_depend_on_widths(rng):
    X = rng.standard_normal((4, 3))
    a = kernel_matrices(ArchSpec(2, 3), X)
    b = kernel_matrices(ArchSpec(2, 3).with_width(17), X)
    assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])


def test_full_kernel_is_kronecker_with_identity(rng):
    pack = assemble_pack(ArchSpec(1, 2, output_dim=3), rng.standard_normal((2, 2)))
    full = pack.full()
    assert full.shape == (6, 6)
    assert full[0, 1] == 0.0 and full[0, 3] == pack.ntk[0, 1] and full[4, 1] == pack.ntk[1, 0]


def test_empirical_ntk_error_examples(rng):
    pack = assemble_pack(ArchSpec(2, 3), rng.standard_normal((4, 3)))
    assert empirical_ntk_error(pack, pack.ntk) == 0.0
    assert empirical_ntk_error(pack, 2 * pack.ntk) == pytest.approx(1.0)
    with pytest.raises(ValueError):
        empirical_ntk_error(pack, np.zeros((3, 3)))
    with pytest.raises(ValueError):
        empirical_ntk_error(np.zeros((2, 2)), np.zeros((2, 2)))


def test_dimension_mismatch_raises():
    arch = ArchSpec(1, 3)
    with pytest.raises(ValueError):
        nngp_kernel(arch, np.zeros(2), np.zeros(3))
    with pytest.raises(ValueError):
        kernel_matrices(arch, np.zeros((2, 4)))


@pytest.mark.parametrize("kwargs", [dict(depth=0, input_dim=2), dict(depth=1, input_dim=2, sigma_w=0.0),
                                    dict(depth=1, input_dim=2, sigma_b=-1.0), dict(depth=2, input_dim=2, widths=(3,)),
                                    dict(depth=1, input_dim=2, activation="relu")])
def test_invalid_architectures(kwargs):
    with pytest.raises(ValueError):
        ArchSpec(**kwargs)


def test_arch_dict_round_trip():
    arch = ArchSpec(2, 3, 2, sigma_w=(1.0, 1.2, 0.8), sigma_b=0.1, widths=(8, 8))
    assert ArchSpec.from_dict(arch.to_dict()) == arch


def test_jitter_scale():
    m = np.diag([1.0, 3.0])
    assert np.allclose(add_jitter(m, 1e-2) - m, 2e-2 * np.eye(2))


def test_pack_is_read_only(rng):
    pack = assemble_pack(ArchSpec(1, 2), rng.standard_normal((3, 2)))
    assert isinstance(pack, KernelPack)
    with pytest.raises(ValueError):
        pack.ntk[0, 0] = 1.0
