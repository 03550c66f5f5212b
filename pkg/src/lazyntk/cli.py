"""Command-line entry point: ``lazyntk run`` and ``lazyntk audit``.

``run`` executes one experiment and writes a run directory; the exit code
is 0 exactly when every check passes. ``audit`` resolves and validates a
config without training anything, reports where the data comes from and
probes the loss assumptions on the configured targets.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .config import ConfigError, load_config
from .experiments import _loss_spec, _resolve, run_experiment
from .losses import LossSpec, audit_assumptions, loss_value

EXIT_OK, EXIT_FAILED, EXIT_CONFIG = 0, 1, 2


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="lazyntk", description="Function-space NTK training experiments.")
    sub = p.add_subparsers(dest="command", required=True)
    run = sub.add_parser("run", help="run an experiment and write a run directory")
    run.add_argument("config", help="JSON config file")
    run.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                     help="override a config value by dot path; VALUE is parsed as JSON (repeatable)")
    run.add_argument("--out", help="run directory (default: output.dir, else runs/<experiment>)")
    run.add_argument("-q", "--quiet", action="store_true", help="only print the final verdict")
    audit = sub.add_parser("audit", help="validate a config and probe the loss assumptions")
    audit.add_argument("config", help="JSON config file")
    audit.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE")
    audit.add_argument("--samples", type=int, default=200, help="sublevel-set samples for the loss probe")
    return p


def _line(ok: bool, name: str, detail: str = "") -> str:
    return f"[{'PASS' if ok else 'FAIL'}] {name}" + (f": {detail}" if detail else "")


def _fmt(v) -> str:
    if isinstance(v, float):
        return f"{v:.6g}"
    if isinstance(v, list):
        return "[" + ", ".join(_fmt(x) for x in v) + "]"
    return str(v)


def cmd_run(args) -> int:
    cfg = load_config(args.config, args.overrides)
    out = Path(args.out or cfg["output"]["dir"] or Path("runs") / cfg["experiment"])
    result, summary = run_experiment(cfg, out)
    if not args.quiet:
        for c in result.checks:
            print(_line(c.passed, c.name, f"value={_fmt(c.to_dict()['value'])} threshold={_fmt(c.to_dict()['threshold'])}"))
    n_fail = sum(not c.passed for c in result.checks)
    print(f"{cfg['experiment']}: {'PASSED' if result.passed else f'FAILED ({n_fail} of {len(result.checks)} checks)'}"
          f" -> {out}")
    return EXIT_OK if result.passed else EXIT_FAILED


def _audit_spec(cfg) -> LossSpec | None:
    """Loss with the configured targets, or ``None`` when the experiment has no single loss."""
    exp = cfg["experiment"]
    if exp == "brier_counterexample":
        t = cfg["target"]
        return LossSpec("brier_ref", np.array([[1.0 - t, t]]))
    if exp in ("toy_ensemble", "ntk_prepost", "width_sweep"):
        data = cfg["data"]
        if data["source"] == "synthetic":
            x = np.linspace(data["low"], data["high"], data["n_train"])
            labels = np.digitize(x, np.linspace(data["low"], data["high"], data["n_classes"] + 1)[1:-1])
        else:
            labels = np.asarray(data["labels"] if data["source"] == "inline" else
                                np.loadtxt(_resolve(cfg, data["path"]), delimiter=",", skiprows=1, ndmin=2)[:, -1],
                                dtype=int)[: data["n_train"]]
        return _loss_spec(cfg["loss"]["kind"], labels, data["n_classes"], cfg["loss"]["label_smoothing"])
    if exp == "ntk_tracking":
        labels = np.arange(cfg["data"]["n_train"]) % 2
        return _loss_spec("ce_ref", labels, 2, cfg["loss"]["label_smoothing"])
    return None


def cmd_audit(args) -> int:
    cfg = load_config(args.config, args.overrides)
    print(_line(True, "config", f"experiment={cfg['experiment']} resolved and valid"))
    ok = True
    data = cfg.get("data", {})
    if data.get("source") == "idx":
        found = all(_resolve(cfg, data[k]).exists() for k in ("images", "label_file"))
        print(_line(True, "data", "IDX files found" if found else
                    "IDX files missing; the run will substitute synthetic two-class blobs"))
    elif data.get("source"):
        print(_line(True, "data", f"source={data['source']}"))
    spec = _audit_spec(cfg)
    if spec is None:
        print(_line(True, "loss probe", "not applicable (the experiment builds its own losses)"))
    else:
        c0 = loss_value(spec, np.zeros(spec.dim))
        K0 = 2.0 * max(c0, spec.inf_value + 1e-3)
        probe = audit_assumptions(spec, K0, args.samples, seed=0)
        finite = all(np.isfinite(v) for v in (probe.K1, probe.K2, probe.mu_C))
        positive = probe.mu_C > 0
        ok &= finite
        detail = (f"loss={spec.kind.value} K0={K0:.4g} samples={probe.samples.shape[0]} K1={probe.K1:.4g} "
                  f"K2={probe.K2:.4g} mu_C={probe.mu_C:.4g}")
        if probe.mu_C_analytic is not None:
            detail += f" mu_C_lower_bound={probe.mu_C_analytic:.4g}"
        print(_line(finite, "loss probe", detail))
        if not positive:
            print(_line(True, "note", "estimated mu_C is not positive on this sublevel set"))
    print("audit: " + ("PASSED" if ok else "FAILED"))
    return EXIT_OK if ok else EXIT_FAILED


def main(argv=None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    args = _parser().parse_args(argv)
    try:
        return cmd_run(args) if args.command == "run" else cmd_audit(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
