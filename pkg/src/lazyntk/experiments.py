"""Experiment runners behind the command-line interface.

Each runner takes a validated config (see :mod:`lazyntk.config`) and returns
an :class:`ExperimentResult`: named checks with pass/fail outcomes, CSV
tables and free-form metadata. :func:`run_experiment` writes everything
into a run directory. Column layouts are documented in SCHEMAS.md.

Per-run drift of a kernel trace is summarized by the median over probe
points of ``max_t |k_t - k_0| / k_0``; orderings compare medians of that
number over seeds.
"""

from __future__ import annotations

import csv
import json
import logging
import platform
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy
import sklearn

from .config import validate_config
from .datasets import interval_toy, load_parity_idx, synthetic_blobs, unit_rows
from .ensemble import (MapAnchor, gap_certificate, gaussian_approx, laplace_cov, sample_prior,
                       summarize_ensemble)
from .flow import ConvergenceError, FlowProblem, integrate_flow, map_objective, phi_apply, stationary_points
from .kernels import ArchSpec, assemble_pack
from .losses import (LossKind, LossSpec, TargetSet, audit_assumptions, loss_hessian, loss_value, softmax,
                     softmax_ref)
from .network import _probe_kernels, hessian_opnorm_probe, init_net, jacobian_norm, train_flow

log = logging.getLogger(__name__)

__all__ = ["Check", "ExperimentResult", "RUNNERS", "run_experiment", "write_run"]

MONOTONE_TOL = 1e-8


@dataclass
class Check:
    name: str
    passed: bool
    value: object = None
    threshold: object = None
    detail: str = ""

    def to_dict(self) -> dict:
        return {"name": self.name, "passed": bool(self.passed), "value": _jsonable(self.value),
                "threshold": _jsonable(self.threshold), "detail": self.detail}


@dataclass
class ExperimentResult:
    checks: list[Check] = field(default_factory=list)
    tables: dict = field(default_factory=dict)
    metadata: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def check(self, name, passed, value=None, threshold=None, detail=""):
        self.checks.append(Check(name, bool(passed), value, threshold, detail))

    def table(self, name, header, rows):
        self.tables[name] = (list(header), rows)

    def get_check(self, name) -> Check:
        for c in self.checks:
            if c.name == name:
                return c
        raise KeyError(f"no check named {name!r}")


def _jsonable(v):
    if isinstance(v, np.generic):
        return v.item()
    if isinstance(v, np.ndarray):
        return v.tolist()
    if isinstance(v, (list, tuple)):
        return [_jsonable(x) for x in v]
    if isinstance(v, dict):
        return {k: _jsonable(x) for k, x in v.items()}
    return v


def _cell(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return str(bool(v)).lower()
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def _write_csv(path: Path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_cell(v) for v in row])


# -- shared helpers -----------------------------------------------------------------------

def _loss_spec(kind: str, labels, n_classes: int, smoothing: float) -> LossSpec:
    probs = TargetSet.from_labels(labels, n_classes, smoothing).probs
    return LossSpec(kind, probs)


def _probs(spec: LossSpec, logits: np.ndarray) -> np.ndarray:
    """Class probabilities for an ``(n, K)`` logit array (reference class first for ``ce_ref``)."""
    if spec.kind is LossKind.CE_REF:
        p, ref = softmax_ref(logits)
        return np.column_stack([ref, p])
    if spec.kind is LossKind.CE:
        return softmax(logits, axis=1)
    return logits


def _run_drift(values: np.ndarray) -> float:
    """Median over probe points of the relative drift of a ``(T, n_probe)`` trace."""
    return float(np.median(np.max(np.abs(values - values[0]), axis=0) / np.abs(values[0])))


def _toy_data(cfg, meta):
    data = cfg["data"]
    if data["source"] == "synthetic":
        return interval_toy(data["n_train"], data["n_classes"], data["low"], data["high"])
    return _external_data(cfg, meta, data["n_train"])


def _external_data(cfg, meta, n_points):
    data = cfg["data"]
    if data["source"] == "inline":
        X = np.asarray(data["x"], dtype=float)
        X = X[:, None] if X.ndim == 1 else X
        return X[:n_points], np.asarray(data["labels"], dtype=int)[:n_points]
    if data["source"] == "csv":
        arr = np.loadtxt(_resolve(cfg, data["path"]), delimiter=",", skiprows=1, ndmin=2)
        return np.ascontiguousarray(arr[:n_points, :-1]), arr[:n_points, -1].astype(int)
    images, labels = _resolve(cfg, data["images"]), _resolve(cfg, data["label_file"])
    if images.exists() and labels.exists():
        meta["data"] = {"source": "idx", "images": str(images), "labels": str(labels)}
        return load_parity_idx(images, labels, n_points)
    meta["data_substitution"] = (f"IDX files {images} / {labels} not found; "
                                 "synthetic two-class blobs used instead")
    log.warning(meta["data_substitution"])
    return None


def _resolve(cfg, path) -> Path:
    p = Path(path)
    base = cfg.get("_base_dir")
    return p if p.is_absolute() or base is None else Path(base) / p


def _grid(section) -> np.ndarray:
    return np.linspace(section["low"], section["high"], section["n_points"])[:, None]


def _train_kwargs(cfg, stop: bool = True) -> dict:
    tr = cfg["train"]
    return {"record_every": tr["record_every"], "rtol": tr["rtol"], "atol": tr["atol"],
            "stop_grad_norm": tr["stop_grad_norm"] if stop else None}


# -- toy ensemble --------------------------------------------------------------------------

def run_toy_ensemble(cfg) -> ExperimentResult:
    """Finite-width ensemble over seeds next to the infinite-width ensemble over prior draws."""
    res = ExperimentResult()
    X, labels = _toy_data(cfg, res.metadata)
    n_classes = int(cfg["data"]["n_classes"])
    spec = _loss_spec(cfg["loss"]["kind"], labels, n_classes, cfg["loss"]["label_smoothing"])
    K = spec.n_logits
    grid = _grid(cfg["test"])
    arch = ArchSpec(cfg["arch"]["depth"], X.shape[1], K, cfg["arch"]["sigma_w"], cfg["arch"]["sigma_b"])
    tr_cfg = cfg["train"]
    qs = [float(q) for q in cfg["quantiles"]]

    def bands(prob_samples):
        rows = []
        P = np.asarray(prob_samples)  # (members, points, classes)
        quant = np.quantile(P, qs, axis=0)
        mean = P.mean(axis=0)
        for i, x in enumerate(grid[:, 0]):
            for c in range(P.shape[2]):
                rows.append([x, c, mean[i, c], *quant[:, i, c]])
        return rows, mean

    header = ["x", "cls", "mean"] + [f"q{q:g}" for q in qs]
    finite_rows, worst_increase, finite_means = [], -np.inf, {}
    for width in cfg["widths"]:
        members = []
        for seed in cfg["seeds"]:
            net = init_net(arch, width, seed)
            trace = train_flow(net, spec, X, tr_cfg["beta"], tr_cfg["eta0"], tr_cfg["t_end"], probe=X[:1],
                               test_points=grid, linearized=False, **_train_kwargs(cfg))
            worst_increase = max(worst_increase, trace.max_loss_increase)
            members.append(_probs(spec, trace.f_test[-1]))
        rows, finite_means[width] = bands(members)
        finite_rows += [[width, *r] for r in rows]
    res.table("bands_finite", ["width", *header], finite_rows)

    pack = assemble_pack(arch, np.vstack([X, grid]))
    problem = FlowProblem.from_pack(pack, X.shape[0], spec, tr_cfg["beta"], tr_cfg["eta0"])
    draws = sample_prior(pack, cfg["ensemble"]["n_draws"], cfg["ensemble"]["seed"], output_dim=K)
    members, failed = [], 0
    for d in draws:
        try:
            states = integrate_flow(problem.with_g0(d), tr_cfg["t_end"], tr_cfg["t_end"],
                                    rtol=tr_cfg["rtol"], atol=tr_cfg["atol"])
        except ConvergenceError:
            failed += 1
            continue
        members.append(_probs(spec, states[-1].g_test.reshape(-1, K)))
    limit_rows, limit_mean = bands(members)
    res.table("bands_limit", header, limit_rows)

    x_finite = sorted({r[1] for r in finite_rows})
    x_limit = sorted({r[0] for r in limit_rows})
    res.check("x_grids_match", x_finite == x_limit, len(x_limit))
    res.check("finite_loss_monotone", worst_increase <= MONOTONE_TOL, worst_increase, MONOTONE_TOL)
    rate = failed / len(draws)
    res.check("limit_failure_rate", rate < 0.01, rate, 0.01)
    res.metadata["mean_prob_gap"] = {str(w): float(np.max(np.abs(m - limit_mean))) for w, m in finite_means.items()}
    return res


# -- pre/post softmax kernel ---------------------------------------------------------------

def run_ntk_prepost(cfg) -> ExperimentResult:
    """Empirical NTK of the logits against the kernel of the softmax outputs during training."""
    res = ExperimentResult()
    X, labels = _toy_data(cfg, res.metadata)
    spec = _loss_spec(cfg["loss"]["kind"], labels, int(cfg["data"]["n_classes"]), cfg["loss"]["label_smoothing"])
    K = spec.n_logits
    arch = ArchSpec(cfg["arch"]["depth"], X.shape[1], K, cfg["arch"]["sigma_w"], cfg["arch"]["sigma_b"])
    probe = np.asarray(cfg["probe"]["x"], dtype=float).reshape(len(cfg["probe"]["x"]), -1)
    tr_cfg = cfg["train"]
    trace_rows, drift_rows = [], []
    pre_drift, post_drift = {}, {}
    initial_ok, worst_increase = True, -np.inf
    reference = spec.kind is LossKind.CE_REF
    for width in cfg["widths"]:
        pre_drift[width], post_drift[width] = [], []
        for seed in cfg["seeds"]:
            net = init_net(arch, width, seed)
            pre0, post0 = _probe_kernels(net, probe, net.theta, reference)
            trace = train_flow(net, spec, X, tr_cfg["beta"], tr_cfg["eta0"], tr_cfg["t_end"], probe=probe,
                               linearized=False, post_softmax=True, **_train_kwargs(cfg))
            initial_ok &= bool(np.array_equal(trace.ntk_probe[0], pre0)
                               and np.array_equal(trace.post_softmax_probe[0], post0))
            worst_increase = max(worst_increase, trace.max_loss_increase)
            for i, t in enumerate(trace.times):
                for j in range(probe.shape[0]):
                    trace_rows.append([width, seed, t, j, trace.ntk_probe[i, j], trace.post_softmax_probe[i, j]])
            dp, dq = _run_drift(trace.ntk_probe), _run_drift(trace.post_softmax_probe)
            pre_drift[width].append(dp)
            post_drift[width].append(dq)
            drift_rows.append([width, seed, dp, dq, trace.n_steps, trace.max_loss_increase])
    res.table("kernel_traces", ["width", "seed", "t", "probe", "pre_softmax", "post_softmax"], trace_rows)
    res.table("drift", ["width", "seed", "pre_drift", "post_drift", "n_steps", "max_loss_increase"], drift_rows)

    for width in cfg["widths"]:
        mp, mq = float(np.median(pre_drift[width])), float(np.median(post_drift[width]))
        res.check(f"pre_below_post_w{width}", mp < mq, [mp, mq], "pre < post")
    widths = list(cfg["widths"])
    for a, b in zip(widths[:-1], widths[1:]):
        ma, mb = float(np.median(pre_drift[a])), float(np.median(pre_drift[b]))
        res.check(f"pre_drift_decreases_w{a}_to_w{b}", mb < ma, [ma, mb], "decreasing")
    res.check("traces_start_at_initial_kernel", initial_ok)
    res.check("loss_monotone", worst_increase <= MONOTONE_TOL, worst_increase, MONOTONE_TOL)
    return res


# -- NTK tracking on two-class data --------------------------------------------------------

def _tracking_data(cfg, seed, meta):
    data = cfg["data"]
    n = data["n_train"] + data["n_probe"]
    loaded = None if data["source"] == "synthetic" else _external_data(cfg, meta, n)
    if loaded is None:
        X, labels = synthetic_blobs(n, data["dim"], data["separation"], seed)
    else:
        X, labels = unit_rows(loaded[0]), loaded[1]
    if data["input_scale"] == "sqrt_dim":
        X = X * np.sqrt(X.shape[1])
    return X, labels


TRACKING_RUNS = ("onehot_beta0", "smoothed_beta0", "onehot_regularized")


def run_ntk_tracking(cfg) -> ExperimentResult:
    """NTK drift for one-hot, smoothed and regularized training of a deep network."""
    res = ExperimentResult()
    data, tr_cfg = cfg["data"], cfg["train"]
    n_train = data["n_train"]
    settings = {
        "onehot_beta0": (0.0, 0.0),
        "smoothed_beta0": (cfg["loss"]["label_smoothing"], 0.0),
        "onehot_regularized": (0.0, tr_cfg["beta"]),
    }
    trace_rows, drift_rows = [], []
    drifts = {w: {r: [] for r in TRACKING_RUNS} for w in cfg["widths"]}
    worst_increase, underflows = -np.inf, 0
    for width in cfg["widths"]:
        for seed in cfg["seeds"]:
            X, labels = _tracking_data(cfg, seed, res.metadata)
            Xtr, probe = X[:n_train], X[n_train:]
            arch = ArchSpec(cfg["arch"]["depth"], X.shape[1], 1, cfg["arch"]["sigma_w"], cfg["arch"]["sigma_b"])
            for run in TRACKING_RUNS:
                smoothing, beta = settings[run]
                spec = _loss_spec("ce_ref", labels[:n_train], 2, smoothing)
                net = init_net(arch, width, seed)
                # the one-hot, unregularized loss has no minimizer, so no early stop there
                trace = train_flow(net, spec, Xtr, beta, tr_cfg["eta0"], tr_cfg["t_end"], probe=probe,
                                   linearized=False, **_train_kwargs(cfg, stop=run != "onehot_beta0"))
                worst_increase = max(worst_increase, trace.max_loss_increase)
                underflows += int(trace.underflow)
                per_probe = np.max(np.abs(trace.ntk_probe - trace.ntk_probe[0]), axis=0) / np.abs(trace.ntk_probe[0])
                d = float(np.median(per_probe))
                drifts[width][run].append(d)
                for i, t in enumerate(trace.times):
                    trace_rows.append([width, seed, run, t, trace.loss[i], trace.theta_dist[i],
                                       *trace.ntk_probe[i]])
                drift_rows.append([width, seed, run, *per_probe, d, trace.theta_dist[-1], trace.n_steps,
                                   trace.max_loss_increase, trace.message])
    n_probe = data["n_probe"]
    res.table("ntk_traces", ["width", "seed", "run", "t", "loss", "theta_dist"]
              + [f"ntk_probe_{j + 1}" for j in range(n_probe)], trace_rows)
    res.table("drift", ["width", "seed", "run"] + [f"drift_probe_{j + 1}" for j in range(n_probe)]
              + ["drift", "theta_dist_final", "n_steps", "max_loss_increase", "note"], drift_rows)

    th = cfg["thresholds"]
    for width in cfg["widths"]:
        med = {r: float(np.median(drifts[width][r])) for r in TRACKING_RUNS}
        res.metadata[f"median_drift_w{width}"] = med
        ordered = med["onehot_beta0"] > med["smoothed_beta0"] > med["onehot_regularized"]
        res.check(f"drift_ordering_w{width}", ordered, [med[r] for r in TRACKING_RUNS],
                  "onehot_beta0 > smoothed_beta0 > onehot_regularized")
        if th["onehot_min_drift"] is not None:
            res.check(f"onehot_drift_above_w{width}", med["onehot_beta0"] > th["onehot_min_drift"],
                      med["onehot_beta0"], th["onehot_min_drift"])
        if th["regularized_max_drift"] is not None:
            res.check(f"regularized_drift_below_w{width}", med["onehot_regularized"] < th["regularized_max_drift"],
                      med["onehot_regularized"], th["regularized_max_drift"])
    res.check("loss_monotone", worst_increase <= MONOTONE_TOL, worst_increase, MONOTONE_TOL)
    res.check("no_step_underflow", underflows == 0, underflows, 0)
    return res


# -- width sweep ---------------------------------------------------------------------------

def run_width_sweep(cfg) -> ExperimentResult:
    """Linearization gap, parameter-Hessian norm and Jacobian norm across widths."""
    res = ExperimentResult()
    X, labels = _toy_data(cfg, res.metadata)
    spec = _loss_spec(cfg["loss"]["kind"], labels, int(cfg["data"]["n_classes"]), cfg["loss"]["label_smoothing"])
    K = spec.n_logits
    arch = ArchSpec(cfg["arch"]["depth"], X.shape[1], K, cfg["arch"]["sigma_w"], cfg["arch"]["sigma_b"])
    grid = _grid(cfg["test"])
    tr_cfg = cfg["train"]
    rows, gap_rows = [], []
    per_width = {w: {"gap": [], "centered": [], "hess": [], "jac": []} for w in cfg["widths"]}
    worst_increase, centered_ok, unconverged, worst_excess = -np.inf, True, 0, -np.inf
    for width in cfg["widths"]:
        for seed in cfg["seeds"]:
            net = init_net(arch, width, seed)
            hess, conv = hessian_opnorm_probe(net, X[0], cfg["hessian"]["iters"], seed)
            jac = jacobian_norm(net, X[0])
            trace = train_flow(net, spec, X, tr_cfg["beta"], tr_cfg["eta0"], tr_cfg["t_end"], probe=X[:1],
                               test_points=grid, linearized=True, **_train_kwargs(cfg))
            worst_increase = max(worst_increase, trace.max_loss_increase)
            excess = float(np.max(trace.centered_gap - trace.lin_gap))
            centered_ok &= excess <= 1e-12
            worst_excess = max(worst_excess, excess)
            unconverged += int(not conv)
            gap, cgap = float(np.max(trace.lin_gap)), float(np.max(trace.centered_gap))
            for key, v in (("gap", gap), ("centered", cgap), ("hess", hess), ("jac", jac)):
                per_width[width][key].append(v)
            rows.append([width, seed, gap, cgap, hess, conv, jac, trace.max_loss_increase])
            gap_rows += [[width, seed, t, trace.lin_gap[i], trace.centered_gap[i]] for i, t in enumerate(trace.times)]
    res.table("width_sweep", ["width", "seed", "sup_lin_gap", "sup_centered_gap", "hessian_opnorm",
                              "hessian_converged", "jacobian_norm", "max_loss_increase"], rows)
    res.table("gap_traces", ["width", "seed", "t", "lin_gap", "centered_gap"], gap_rows)

    med = {w: {k: float(np.median(v)) for k, v in d.items()} for w, d in per_width.items()}
    res.metadata["medians"] = {str(w): m for w, m in med.items()}
    scaling_rows = []
    widths = list(cfg["widths"])
    for a, b in zip(widths[:-1], widths[1:]):
        ratio = med[a]["gap"] / med[b]["gap"]
        hratio = med[a]["hess"] / med[b]["hess"]
        scaling_rows.append([a, b, med[a]["gap"], med[b]["gap"], ratio, med[a]["hess"], med[b]["hess"], hratio])
        if b == 4 * a:
            res.check(f"gap_ratio_w{a}_to_w{b}", ratio >= cfg["thresholds"]["min_gap_ratio"], ratio,
                      cfg["thresholds"]["min_gap_ratio"])
        res.check(f"hessian_decreases_w{a}_to_w{b}", med[b]["hess"] < med[a]["hess"], [med[a]["hess"], med[b]["hess"]],
                  "decreasing")
    res.table("scaling", ["width_a", "width_b", "gap_a", "gap_b", "gap_ratio", "hessian_a", "hessian_b",
                          "hessian_ratio"], scaling_rows)
    jac = [med[w]["jac"] for w in widths]
    band = max(jac) / min(jac)
    res.check("jacobian_norm_bounded", band <= cfg["thresholds"]["jacobian_band"], band, cfg["thresholds"]["jacobian_band"])
    res.check("centered_gap_below_gap", centered_ok, worst_excess, 1e-12)
    res.check("loss_monotone", worst_increase <= MONOTONE_TOL, worst_increase, MONOTONE_TOL)
    res.metadata["hessian_unconverged_runs"] = unconverged
    return res


# -- ensemble vs Laplace -------------------------------------------------------------------

def _random_problem(cfg, rng, beta):
    data = cfg["data"]
    N = int(rng.integers(2, data["max_train"] + 1))
    C = int(rng.integers(2, data["max_classes"] + 1))
    kind = cfg["loss"]["kind"]
    X = rng.standard_normal((N + data["n_test"], data["dim"]))
    labels = rng.integers(0, C, N)
    if kind == "mse":
        spec = LossSpec("mse", rng.standard_normal((N, C)))
    else:
        spec = _loss_spec(kind, labels, C, cfg["loss"]["label_smoothing"])
    arch = ArchSpec(cfg["arch"]["depth"], data["dim"], spec.n_logits, cfg["arch"]["sigma_w"], cfg["arch"]["sigma_b"])
    pack = assemble_pack(arch, X)
    return FlowProblem.from_pack(pack, N, spec, beta), N, C


def run_ensemble_vs_laplace(cfg) -> ExperimentResult:
    """Gaussian approximation of the ensemble against the Laplace covariance."""
    res = ExperimentResult()
    gap_rows, spec_rows = [], []
    all_psd, all_monotone, worst_rel, worst_mono = True, True, -np.inf, np.inf
    for seed in cfg["seeds"]:
        rng = np.random.default_rng(seed)
        for c in range(cfg["n_configs"]):
            beta = float(cfg["betas"][c % len(cfg["betas"])])
            problem, N, C = _random_problem(cfg, rng, beta)
            anchor = MapAnchor.from_problem(problem)
            lap = laplace_cov(anchor, problem)
            lam = gap_certificate(anchor, problem)  # also checks the closed form
            tr = float(np.trace(lap))
            all_psd &= lam >= -1e-8 * tr
            worst_rel = max(worst_rel, -lam / tr)
            _, ens_theta = gaussian_approx(anchor, problem, kernel_equal=True)
            half = FlowProblem(problem.ntk, problem.n_train, problem.spec, beta, nngp=0.5 * problem.ntk)
            _, ens_half = gaussian_approx(anchor, half)
            mono = float(np.linalg.eigvalsh(ens_theta - ens_half)[0])
            all_monotone &= mono >= -1e-8 * float(np.trace(ens_theta))
            worst_mono = min(worst_mono, mono / float(np.trace(ens_theta)))
            _, ens_nngp = gaussian_approx(anchor, problem)
            gap_rows.append([seed, c, N, C, beta, lam, tr, mono, anchor.residual])
            for name, mat in (("sigma_lap", lap), ("sigma_ens_ntk_prior", ens_theta), ("sigma_ens_nngp_prior", ens_nngp)):
                for i, ev in enumerate(np.linalg.eigvalsh(mat)):
                    spec_rows.append([seed, c, beta, name, i, ev])
    res.table("gap", ["seed", "config", "n_train", "n_classes", "beta", "gap_min_eig", "trace_sigma_lap",
                      "prior_monotonicity_min_eig", "map_residual"], gap_rows)
    res.table("spectra", ["seed", "config", "beta", "matrix", "index", "eigenvalue"], spec_rows)
    res.check("gap_psd", all_psd, worst_rel, "min eig >= -1e-8 trace")
    res.check("prior_monotonicity", all_monotone, worst_mono, "min eig >= -1e-8 trace")

    # beta = 0: the gap carries a factor beta and must vanish exactly
    rng = np.random.default_rng(cfg["seeds"][0])
    zero_cfg = dict(cfg, loss={"kind": "ce_ref", "label_smoothing": 0.1})
    problem, _, _ = _random_problem(zero_cfg, rng, 0.0)
    anchor = MapAnchor.from_problem(problem)
    _, ens = gaussian_approx(anchor, problem, kernel_equal=True)
    zero_gap = float(np.max(np.abs(laplace_cov(anchor, problem) - ens)))
    res.check("gap_zero_at_beta0", zero_gap == 0.0, zero_gap, 0.0)

    # one empirical ensemble next to its Gaussian approximation (reported, not asserted)
    rng = np.random.default_rng(cfg["seeds"][0])
    problem, _, _ = _random_problem(cfg, rng, float(max(cfg["betas"])))
    summary = summarize_ensemble(problem, cfg["ensemble"]["n_draws"], cfg["ensemble"]["seed"])
    se = np.sqrt(np.maximum(np.diag(summary.cov_test), 1e-300) / max(summary.n_samples, 1))
    res.metadata["empirical_mean_error_in_se"] = float(np.max(np.abs(summary.mean_test - summary.mu_ens) / se))
    res.metadata["ensemble_summary"] = summary.to_dict()
    K = summary.output_dim
    res.table("ensemble_summary", ["point", "cls", "mean", "var", "mu_ens", "var_ens", "var_lap"],
              [[j // K, j % K, summary.mean_test[j], summary.cov_test[j, j], summary.mu_ens[j],
                summary.sigma_ens[j, j], summary.sigma_lap[j, j]] for j in range(summary.mean_test.size)])
    res.check("ensemble_failure_rate", summary.failure_rate < 0.01, summary.failure_rate, 0.01)
    return res


# -- Brier counterexample ------------------------------------------------------------------

def brier_problem(theta: float, target: float, beta: float, z0: float) -> FlowProblem:
    spec = LossSpec("brier_ref", np.array([[1.0 - target, target]]))
    return FlowProblem(np.array([[theta]]), 1, spec, beta, g0=np.array([z0]))


def run_brier_counterexample(cfg) -> ExperimentResult:
    """Stationary points of the regularized Brier objective with a single logit."""
    res = ExperimentResult()
    problem = brier_problem(cfg["theta"], cfg["target"], cfg["beta"], cfg["z0"])
    starts = np.linspace(cfg["starts"]["low"], cfg["starts"]["high"], cfg["starts"]["n"])
    points = stationary_points(problem, starts)
    res.table("stationary_points", ["z", "kind", "objective", "residual"],
              [[float(z[0]), kind, map_objective(problem, z),
                float(abs(phi_apply(problem, z)[0] - problem.beta * problem.g0_train[0]))] for z, kind in points])
    zs = np.linspace(cfg["grid"]["low"], cfg["grid"]["high"], cfg["grid"]["n"])
    res.table("landscape", ["z", "objective", "loss"],
              [[z, map_objective(problem, np.array([z])), loss_value(problem.spec, np.array([z]))] for z in zs])

    exp_z, exp_k, tol = cfg["expected"]["z"], cfg["expected"]["kind"], cfg["expected"]["tol"]
    found = [(float(z[0]), k) for z, k in points]
    res.check("stationary_count", len(found) == len(exp_z), len(found), len(exp_z))
    for (ez, ek), got in zip(zip(exp_z, exp_k), found + [(np.nan, "")] * max(0, len(exp_z) - len(found))):
        res.check(f"stationary_point_{ez:g}", abs(got[0] - ez) <= tol and got[1] == ek, list(got), [ez, ek, tol])

    zero = brier_problem(cfg["theta"], cfg["target"], 0.0, cfg["z0"])
    roots = stationary_points(zero, starts)
    expected_root = float(np.log(cfg["target"] / (1.0 - cfg["target"])))
    ok = len(roots) == 1 and abs(float(roots[0][0][0]) - expected_root) <= cfg["beta_zero_tol"]
    res.check("beta0_unique_root", ok, [float(z[0]) for z, _ in roots], [expected_root, cfg["beta_zero_tol"]])
    return res


# -- assumption audit ----------------------------------------------------------------------

def run_assumption_audit(cfg) -> ExperimentResult:
    """Empirical constants of the loss assumptions on sublevel sets."""
    res = ExperimentResult()
    rows = []
    N, C = cfg["n_train"], cfg["n_classes"]
    for seed in cfg["seeds"]:
        rng = np.random.default_rng(seed)
        labels = rng.integers(0, C, N)
        for kind in cfg["losses"]:
            if kind == "mse":
                spec = LossSpec("mse", rng.standard_normal((N, C)))
            else:
                spec = _loss_spec(kind, labels, C, cfg["label_smoothing"])
            c0 = loss_value(spec, np.zeros(spec.dim))
            K0 = cfg["K0_factor"] * max(c0, spec.inf_value + 1e-3)
            probe = audit_assumptions(spec, K0, cfg["n_samples"], seed)
            hess = [loss_hessian(spec, z) for z in probe.samples]
            max_norm = max(float(np.max(np.linalg.norm(h, 2, axis=(1, 2)))) for h in hess)
            min_eig = min(float(np.min(np.linalg.eigvalsh(h))) for h in hess)
            rows.append([seed, kind, K0, probe.samples.shape[0], probe.n_proposed, probe.K1, probe.K2, probe.mu_C,
                         probe.mu_C_analytic, np.sqrt(2 * N), max_norm, min_eig])
            tag = f"{kind}_s{seed}"
            if kind == "ce":
                res.check(f"{tag}_K1_bound", probe.K1 <= np.sqrt(2 * N), probe.K1, float(np.sqrt(2 * N)))
                res.check(f"{tag}_hessian_norm_half", max_norm <= 0.5, max_norm, 0.5)
                if probe.mu_C_analytic is not None:
                    res.check(f"{tag}_pl_constant", probe.mu_C >= probe.mu_C_analytic, probe.mu_C, probe.mu_C_analytic)
            if kind == "ce_ref":
                res.check(f"{tag}_hessian_pd", min_eig > 0, min_eig, 0.0)
            if kind == "mse":
                res.check(f"{tag}_K2_one", abs(probe.K2 - 1) <= 1e-9, probe.K2, 1.0)
                res.check(f"{tag}_mu_one", abs(probe.mu_C - 1) <= 1e-9, probe.mu_C, 1.0)
    res.table("audit", ["seed", "loss", "K0", "n_samples", "n_proposed", "K1", "K2", "mu_C", "mu_C_analytic",
                        "sqrt_2N", "max_hessian_norm", "min_hessian_eig"], rows)
    return res


RUNNERS = {
    "toy_ensemble": run_toy_ensemble,
    "ntk_prepost": run_ntk_prepost,
    "ntk_tracking": run_ntk_tracking,
    "width_sweep": run_width_sweep,
    "ensemble_vs_laplace": run_ensemble_vs_laplace,
    "brier_counterexample": run_brier_counterexample,
    "assumption_audit": run_assumption_audit,
}


def environment_record(cfg) -> dict:
    seeds = cfg.get("seeds")
    return {
        "python": sys.version.split()[0],
        "numpy": np.__version__,
        "scipy": scipy.__version__,
        "scikit-learn": sklearn.__version__,
        "platform": platform.platform(),
        "machine": platform.machine(),
        "seeds": seeds,
        "experiment": cfg["experiment"],
    }


def write_run(out_dir, cfg, result: ExperimentResult, runtime: float) -> dict:
    """Write the run directory and return the summary dictionary."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    public = {k: v for k, v in cfg.items() if k != "_base_dir"}
    with open(out / "config.json", "w") as fh:
        json.dump(public, fh, indent=2, sort_keys=True)
        fh.write("\n")
    env = environment_record(cfg)
    env.update(_jsonable(result.metadata))
    with open(out / "environment.json", "w") as fh:
        json.dump(env, fh, indent=2, sort_keys=True)
        fh.write("\n")
    files = []
    for name, (header, rows) in result.tables.items():
        _write_csv(out / f"{name}.csv", header, rows)
        files.append(f"{name}.csv")
    summary = {
        "experiment": cfg["experiment"],
        "passed": result.passed,
        "checks": [c.to_dict() for c in result.checks],
        "files": files,
        "runtime_seconds": round(runtime, 3),
    }
    with open(out / "summary.json", "w") as fh:
        json.dump(summary, fh, indent=2)
        fh.write("\n")
    return summary


def run_experiment(cfg: dict, out_dir=None) -> tuple[ExperimentResult, dict | None]:
    """Validate, run and (when ``out_dir`` is given) write one experiment."""
    base = cfg.get("_base_dir")
    validate_config(cfg, base=None if base is None else Path(base))
    start = time.perf_counter()
    result = RUNNERS[cfg["experiment"]](cfg)
    runtime = time.perf_counter() - start
    summary = write_run(out_dir, cfg, result, runtime) if out_dir is not None else None
    return result, summary
