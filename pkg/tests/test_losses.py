import numpy as np
import pytest
from hypothesis import given, strategies as st

from lazyntk.losses import (LossKind, LossSpec, TargetSet, audit_assumptions, block_diag, center_project,
                            load_targets_csv, loss_gradient, loss_hessian, loss_value, softmax, softmax_ref)


def random_spec(rng, kind, N=None, K=None, full_support=True):
    N = int(rng.integers(1, 6)) if N is None else N
    K = int(rng.integers(1, 4)) if K is None else K
    if kind == "mse":
        return LossSpec("mse", rng.standard_normal((N, K)))
    if kind == "brier_ref":
        p = rng.uniform(0.05, 0.95, N)
        return LossSpec("brier_ref", np.column_stack([1 - p, p]))
    cols = K + 1 if kind == "ce_ref" else max(K, 2)
    if full_support:
        p = rng.dirichlet(np.ones(cols), N)
    else:
        p = TargetSet.from_labels(rng.integers(0, cols, N), cols).probs
    p /= p.sum(axis=1, keepdims=True)
    return LossSpec(kind, p)


def fd_gradient(spec, z, h=1e-5):
    g = np.zeros_like(z)
    for i in range(z.size):
        e = np.zeros_like(z)
        e[i] = h
        g[i] = (loss_value(spec, z + e) - loss_value(spec, z - e)) / (2 * h)
    return g


def fd_hessian(spec, z, h=1e-5):
    H = np.zeros((z.size, z.size))
    for i in range(z.size):
        e = np.zeros_like(z)
        e[i] = h
        H[:, i] = (loss_gradient(spec, z + e) - loss_gradient(spec, z - e)) / (2 * h)
    return H


def rel_err(a, b):
    return np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-12)


KINDS = ["mse", "ce", "ce_ref", "brier_ref"]


@pytest.mark.parametrize("kind", KINDS)
def test_gradient_matches_finite_differences(kind, rng):
    worst = 0.0
    for _ in range(25):  # 100 random (spec, z) pairs over the four kinds
        spec = random_spec(rng, kind, full_support=bool(rng.integers(0, 2)))
        z = 2 * rng.standard_normal(spec.dim)
        worst = max(worst, rel_err(fd_gradient(spec, z), loss_gradient(spec, z)))
    assert worst <= 1e-5


@pytest.mark.parametrize("kind", KINDS)
def test_hessian_matches_finite_differences(kind, rng):
    worst = 0.0
    for _ in range(13):
        spec = random_spec(rng, kind)
        z = 2 * rng.standard_normal(spec.dim)
        worst = max(worst, rel_err(fd_hessian(spec, z), block_diag(loss_hessian(spec, z))))
    assert worst <= 1e-4


def test_value_examples():
    y = np.array([[0.3, -1.2]])
    assert loss_value(LossSpec("mse", y), y.ravel()) == 0.0
    assert loss_value(LossSpec("ce", [[0.5, 0.5]]), np.zeros(2)) == pytest.approx(np.log(2), abs=1e-15)
    assert loss_value(LossSpec("brier_ref", [[0.5, 0.5]]), np.zeros(1)) == 0.0


def test_ce_gradient_vanishes_at_uniform():
    spec = LossSpec("ce", np.full((3, 4), 0.25))
    assert np.array_equal(loss_gradient(spec, np.zeros(12)), np.zeros(12))


def test_mse_identities(rng):
    spec = random_spec(rng, "mse", N=4, K=3)
    for _ in range(20):
        z = rng.standard_normal(spec.dim) * 3
        g = loss_gradient(spec, z)
        assert g @ g == pytest.approx(2 * loss_value(spec, z), rel=1e-13)
    assert np.array_equal(block_diag(loss_hessian(spec, z)), np.eye(12))


def test_hessian_structure_bounds(rng):
    ce = random_spec(rng, "ce", N=3, K=3)
    ce_ref = random_spec(rng, "ce_ref", N=3, K=2)
    for _ in range(1000):
        z = rng.standard_normal(9) * rng.choice([0.5, 2.0, 8.0])
        H = loss_hessian(ce, z)
        assert np.max(np.linalg.norm(H, 2, axis=(1, 2))) <= 0.5
        assert np.allclose(H, np.transpose(H, (0, 2, 1)))
        z2 = rng.standard_normal(6) * rng.choice([0.5, 2.0, 8.0])
        assert np.min(np.linalg.eigvalsh(loss_hessian(ce_ref, z2))) > 0


def test_softmax_ref_examples():
    p, ref = softmax_ref(np.zeros(1))
    assert p[0] == 0.5 and ref == 0.5
    p, ref = softmax_ref(np.zeros(4))
    assert np.allclose(p, 0.2) and ref == pytest.approx(0.2)
    p, ref = softmax_ref(np.array([30.0, 0.0]))
    assert p[0] > 1 - 1e-12 and ref < 1e-12 and abs(p.sum() + ref - 1) <= 1e-12
    p, ref = softmax_ref(np.array([800.0, -800.0]))
    assert np.isfinite(p).all() and abs(p.sum() + ref - 1) <= 1e-12


@given(st.lists(st.floats(-50, 50), min_size=1, max_size=5))
def test_softmax_ref_is_a_distribution(z):
    p, ref = softmax_ref(np.array(z))
    assert np.all(p > 0) and ref > 0
    assert abs(p.sum() + ref - 1) <= 1e-12


@given(st.integers(0, 2**32 - 1), st.integers(1, 4), st.integers(1, 5))
def test_center_projection_properties(seed, N, K):
    rng = np.random.default_rng(seed)
    z = rng.standard_normal(N * K) * 5
    Pz = center_project(z, K)
    assert np.array_equal(center_project(Pz, K), Pz) or np.allclose(center_project(Pz, K), Pz, atol=1e-15)
    const = np.repeat(rng.standard_normal(N), K)
    assert np.allclose(center_project(const, K), 0.0, atol=1e-15)
    if K >= 2:
        spec = LossSpec("ce", rng.dirichlet(np.ones(K), N))
        shifted = z + np.repeat(rng.standard_normal(N) * 10, K)
        assert loss_value(spec, shifted) == pytest.approx(loss_value(spec, z), abs=1e-10)
        g = loss_gradient(spec, z)
        assert np.allclose(g, center_project(g, K), atol=1e-12)
        assert np.allclose(g, loss_gradient(spec, Pz), atol=1e-12)


def test_softmax_contraction(rng):
    for _ in range(10_000):
        K = int(rng.integers(2, 6))
        a, b = rng.standard_normal((2, K)) * rng.choice([0.1, 1.0, 5.0])
        lhs = np.linalg.norm(softmax(a) - softmax(b))
        assert lhs <= 0.5 * np.linalg.norm(center_project(a - b, K)) + 1e-15


@pytest.mark.parametrize("kind", KINDS)
def test_value_never_below_infimum(kind, rng):
    for _ in range(50):
        spec = random_spec(rng, kind, full_support=bool(rng.integers(0, 2)))
        z = rng.standard_normal(spec.dim) * rng.choice([0.1, 3.0, 30.0])
        assert loss_value(spec, z) >= spec.inf_value - 1e-9


def test_infimum_is_sum_of_entropies_and_attained(rng):
    p = rng.dirichlet(np.ones(3), 4)
    spec = LossSpec("ce", p)
    assert spec.inf_value == pytest.approx(-np.sum(p * np.log(p)))
    assert loss_value(spec, np.log(p).ravel()) == pytest.approx(spec.inf_value, abs=1e-12)
    ref = LossSpec("ce_ref", p)
    z = np.log(p[:, 1:] / p[:, :1]).ravel()
    assert loss_value(ref, z) == pytest.approx(ref.inf_value, abs=1e-12)
    assert LossSpec("ce", TargetSet.from_labels([0, 1], 2).probs).inf_value == 0.0


def test_audit_samples_stay_in_sublevel_set(rng):
    for kind in ("mse", "ce", "ce_ref"):
        spec = random_spec(rng, kind, N=3, K=2)
        K0 = 2 * loss_value(spec, np.zeros(spec.dim)) + 1
        probe = audit_assumptions(spec, K0, 300, seed=1)
        assert probe.samples.shape == (300, spec.dim)
        assert max(loss_value(spec, z) for z in probe.samples) <= K0 + 1e-9
        assert probe.mu_C <= probe.K2


def test_audit_constants():
    N = 4
    rng = np.random.default_rng(3)
    ce = LossSpec("ce", TargetSet.from_labels(rng.integers(0, 3, N), 3, 0.1).probs)
    K0 = 2 * loss_value(ce, np.zeros(ce.dim))
    probe = audit_assumptions(ce, K0, 1000, seed=0)
    assert probe.K1 <= np.sqrt(2 * N)
    assert probe.mu_C >= probe.mu_C_analytic
    # the PL-type inequality with the analytic constant on every sample
    for z in probe.samples:
        g = loss_gradient(ce, z)
        assert loss_value(ce, z) - ce.inf_value <= g @ g / (2 * probe.mu_C_analytic)
    mse = LossSpec("mse", rng.standard_normal((N, 3)))
    p2 = audit_assumptions(mse, 10.0, 1000, seed=0)
    assert p2.K2 == pytest.approx(1, abs=1e-9) and p2.mu_C == pytest.approx(1, abs=1e-9)


def test_audit_errors():
    spec = LossSpec("mse", np.zeros((1, 1)))
    with pytest.raises(ValueError):
        audit_assumptions(spec, 0.0, 10)
    with pytest.raises(ValueError):
        audit_assumptions(spec, 1.0, 0)
    with pytest.raises(RuntimeError):
        audit_assumptions(LossSpec("mse", np.full((50, 3), 40.0)), 1e-3, 5, max_proposals=100)


def test_target_validation():
    with pytest.raises(ValueError):
        TargetSet(np.array([[0.5, 0.6]]))
    with pytest.raises(ValueError):
        TargetSet(np.array([[1.2, -0.2]]))
    with pytest.raises(ValueError):
        TargetSet.from_labels([0, 3], 3)
    with pytest.raises(ValueError):
        LossSpec("brier_ref", np.full((1, 3), 1 / 3))
    t = TargetSet.from_labels([0, 2, 1], 3, 0.3)
    assert t.full_support and np.allclose(t.probs.sum(axis=1), 1, atol=1e-12)
    assert t.probs[0, 0] == pytest.approx(0.8)
    assert not TargetSet.from_labels([0, 1], 2).full_support


def test_dimension_mismatch():
    spec = LossSpec("ce", np.full((2, 3), 1 / 3))
    for fn in (loss_value, loss_gradient, loss_hessian):
        with pytest.raises(ValueError):
            fn(spec, np.zeros(5))
    with pytest.raises(ValueError):
        center_project(np.zeros(5), 2)


def test_load_targets_csv(tmp_path):
    path = tmp_path / "t.csv"
    path.write_text("p0,p1,p2\n0.2,0.3,0.5\n1,0,0\n")
    t = load_targets_csv(path)
    assert t.probs.shape == (2, 3) and t.probs[0, 2] == 0.5
    path.write_text("0.2,0.9\n")
    with pytest.raises(ValueError):
        load_targets_csv(path)


def test_kind_parsing():
    assert LossSpec("ce_ref", [[0.2, 0.8]]).kind is LossKind.CE_REF
    assert LossSpec("ce_ref", [[0.2, 0.8]]).n_logits == 1
    with pytest.raises(ValueError):
        LossSpec("hinge", [[1.0]])
