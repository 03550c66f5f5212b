import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from lazyntk.flow import FlowProblem
from lazyntk.kernels import ArchSpec, assemble_pack
from lazyntk.losses import LossSpec, TargetSet

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def random_problem(seed, kind="ce", n_train=None, n_classes=None, n_test=3, beta=0.1, dim=3, depth=2,
                   smoothing=0.0, g0="prior"):
    """A random FlowProblem over ``n_train`` training and ``n_test`` test points."""
    rng = np.random.default_rng(seed)
    N = int(rng.integers(2, 9)) if n_train is None else n_train
    C = int(rng.integers(2, 4)) if n_classes is None else n_classes
    if kind == "mse":
        spec = LossSpec("mse", rng.standard_normal((N, C)))
    else:
        spec = LossSpec(kind, TargetSet.from_labels(rng.integers(0, C, N), C, smoothing).probs)
    arch = ArchSpec(depth, dim, spec.n_logits)
    pack = assemble_pack(arch, rng.standard_normal((N + n_test, dim)))
    problem = FlowProblem.from_pack(pack, N, spec, beta)
    if g0 == "prior":
        from lazyntk.ensemble import sample_prior
        problem = problem.with_g0(sample_prior(pack, 1, seed)[0])
    return problem


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# -- acceptance report ---------------------------------------------------------------------
# Tests marked ``criterion(number, title)`` get one PASS/FAIL line each in the
# terminal summary; ``record_detail`` adds the measured values to that line.

_CRITERIA: dict = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion")


def pytest_runtest_logreport(report):
    info = _CRITERIA.get(report.nodeid)
    if info is None:
        return
    if report.when in ("setup", "call"):
        info["seconds"] += report.duration  # shared fixtures count towards the first test using them
    if report.when == "call" or report.failed:
        if info["outcome"] != "FAIL":
            info["outcome"] = "PASS" if report.passed else "FAIL"


def pytest_collection_modifyitems(items):
    for item in items:
        mark = item.get_closest_marker("criterion")
        if mark is not None:
            number, title = mark.args
            _CRITERIA[item.nodeid] = {"number": number, "title": title, "outcome": "NOT RUN",
                                      "seconds": 0.0, "detail": ""}


@pytest.fixture
def record_detail(request):
    def record(text):
        if request.node.nodeid in _CRITERIA:
            _CRITERIA[request.node.nodeid]["detail"] = text
    return record


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for info in sorted(_CRITERIA.values(), key=lambda d: d["number"]):
        line = f"[{info['outcome']}] criterion {info['number']:>2}: {info['title']} ({info['seconds']:.1f}s)"
        if info["detail"]:
            line += f" | {info['detail']}"
        terminalreporter.write_line(line)
