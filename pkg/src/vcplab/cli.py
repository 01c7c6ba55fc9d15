"""Command-line entry point (``vcplab``).

Every failure prints one ``error: <kind>: <message>`` line on stderr and exits
with 2 (config), 3 (data), 4 (numerical divergence) or 5 (I/O).
"""
from __future__ import annotations

import argparse
import json
import math
import sys
import warnings
from pathlib import Path

import numpy as np

from . import geom, specfun
from .dataset import DataError, Dataset, load_csv, make_synthetic_gaussians
from .harness import (
    PRESETS,
    ConfigError,
    ExperimentConfig,
    ExperimentDivergence,
    emit_results,
    prepare_data,
    preset,
    run_experiment,
    run_pair_regularization,
    trend_summary,
)
from .model import DivergenceError, LinearModel, load_checkpoint
from .vcp import REGIONS, EstimationError, aggregate, write_aggregate_csv

EXIT_CONFIG, EXIT_DATA, EXIT_DIVERGENCE, EXIT_IO = 2, 3, 4, 5


class CliError(Exception):
    def __init__(self, kind: str, message: str, code: int):
        super().__init__(message)
        self.kind, self.code = kind, code


class _Parser(argparse.ArgumentParser):
    def __init__(self, *args, **kwargs):
        kwargs.setdefault("allow_abbrev", False)
        super().__init__(*args, **kwargs)

    def error(self, message):
        raise CliError("config", message, EXIT_CONFIG)


def _emit(obj):
    print(json.dumps(obj, sort_keys=True))


# analytic / gcurve


def cmd_analytic(args):
    out = {"gamma": args.gamma, "epsilon": args.epsilon, "dim": args.dim, "region": args.region}
    try:
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always", geom.DegenerateShellWarning)
            if args.region == "shell":
                p = geom.vcp_linear_uniform(args.gamma, args.epsilon, args.dim)
            else:
                p = geom.vcp_linear_uniform_ball(args.gamma, args.epsilon, args.dim)
        out["p"] = p
        if args.gamma >= args.epsilon:
            out["note"] = "degenerate shell: gamma >= epsilon, no perturbation can cross"
        elif caught:
            out["note"] = str(caught[0].message)
        if args.asymptotic:
            if 0 < args.gamma < args.epsilon:
                out["asymptotic"] = geom.vcp_nonlinear_asymptotic(args.gamma, args.epsilon, args.dim, args.variant)
                out["asymptotic_variant"] = args.variant
            else:
                out["asymptotic"] = None
    except specfun.DomainError as exc:
        raise CliError("config", str(exc), EXIT_CONFIG) from None
    _emit(out)


def cmd_gcurve(args):
    if args.points < 2 or not args.epsilon > 0:
        raise CliError("config", "gcurve needs --points >= 2 and --epsilon > 0", EXIT_CONFIG)
    k = args.points
    print("mean_margin,g")
    for i in range(1, k + 1):
        gamma = args.epsilon * i / (k + 1)
        print(f"{gamma!r},{geom.g_of_mean_margin(gamma, args.epsilon, args.dim)!r}")


# estimate


def _synthetic_from_spec(spec: str) -> Dataset:
    # synthetic:m=200,n=2,separation=2,label_noise=0.1,seed=0
    fields = {"m": 200, "n": 2, "separation": 2.0, "label_noise": 0.0, "seed": 0}
    body = spec.split(":", 1)[1]
    for item in filter(None, body.split(",")):
        key, _, value = item.partition("=")
        if key not in fields:
            raise CliError("config", f"unknown synthetic field {key!r}", EXIT_CONFIG)
        try:
            fields[key] = type(fields[key])(float(value)) if isinstance(fields[key], int) else float(value)
        except ValueError:
            raise CliError("config", f"synthetic field {key!r}: cannot parse {value!r}", EXIT_CONFIG) from None
    return make_synthetic_gaussians(fields["m"], fields["n"], fields["separation"], fields["seed"],
                                    fields["label_noise"])


def _estimation_data(args):
    """Return ``(dataset, config_or_None, resolved_epsilon_or_None)``."""
    source = args.data
    if source.startswith("synthetic:"):
        return _synthetic_from_spec(source), None, None
    path = Path(source)
    if path.suffix == ".json":
        config = ExperimentConfig.load(path)
        resolved = None
        raw = json.loads(path.read_text())
        if isinstance(raw, dict) and "resolved" in raw:
            resolved = raw["resolved"].get("epsilon")
        data = prepare_data(config)
        return data.train, config, resolved
    if not args.label_column:
        raise CliError("config", "--label-column is required when --data is a CSV file", EXIT_CONFIG)
    return load_csv(path, args.label_column, args.missing_policy), None, None


def cmd_estimate(args):
    model, header = load_checkpoint(args.checkpoint)
    data, config, resolved = _estimation_data(args)
    if data.n != model.input_dim:
        raise CliError("data", f"data has {data.n} features but the model expects {model.input_dim}", EXIT_DATA)
    if args.epsilon == "auto":
        if resolved is not None:
            epsilon = float(resolved)
        elif config is not None:
            prepared = prepare_data(config)
            epsilon = config.epsilon.resolve(prepared.input_dim, prepared.feature_dim)
        else:
            raise CliError("config", "--epsilon auto needs --data pointing at a config or run.json", EXIT_CONFIG)
    else:
        try:
            epsilon = float(args.epsilon)
        except ValueError:
            raise CliError("config", f"--epsilon must be a number or 'auto', got {args.epsilon!r}", EXIT_CONFIG) from None
        if not epsilon > 0:
            raise CliError("config", "--epsilon must be positive", EXIT_CONFIG)
    region = args.region or (config.vcp.region if config else "ball")
    samples = args.samples or (config.vcp.samples if config else 1000)
    seed = args.seed if args.seed is not None else (config.seed if config else 0)
    method = "analytic" if args.analytic else "monte-carlo"
    if method == "analytic" and not isinstance(model, LinearModel):
        raise CliError("config", "--analytic needs a linear checkpoint", EXIT_CONFIG)
    agg = aggregate(model, data, epsilon, region, samples, seed, method=method, workers=args.workers)
    if args.out:
        write_aggregate_csv(agg, args.out)
    _emit({
        "checkpoint": str(args.checkpoint),
        "epoch": header.get("epoch"),
        "epsilon": epsilon,
        "region": region,
        "samples": samples,
        "seed": seed,
        "points": len(agg.per_point),
        "mean_vcp": agg.mean_p,
        "vcp_stderr": agg.stderr,
        "mean_margin": agg.mean_margin,
        "excluded_margins": agg.excluded_margin_count,
        "jensen_bound": agg.jensen_bound,
        "dim": agg.dim,
    })


# train / pair


def _load_config(args) -> ExperimentConfig:
    if args.config and args.preset:
        raise CliError("config", "use either --config or --preset, not both", EXIT_CONFIG)
    if args.preset:
        if not args.full:
            raise CliError("config", f"preset {args.preset!r} is a full-scale run; pass --full to confirm", EXIT_CONFIG)
        if not args.data:
            raise CliError("config", "--preset needs --data <csv>", EXIT_CONFIG)
        config = preset(args.preset, args.data, args.label_column)
    elif args.config:
        config = ExperimentConfig.load(args.config)
    else:
        raise CliError("config", "one of --config or --preset is required", EXIT_CONFIG)
    if args.seed is not None:
        config.seed = args.seed
        config.validate()
    return config


def _progress(enabled):
    if not enabled:
        return None

    def report(c):
        print(f"epoch {c.epoch}: train_acc={c.train_accuracy:.4f} mean_vcp={c.mean_vcp:.4f} "
              f"mean_margin={c.mean_margin:.4g}", file=sys.stderr)
    return report


def cmd_train(args):
    config = _load_config(args)
    result = run_experiment(config, out_dir=args.out, workers=args.workers, save_models=args.save_models,
                            progress=_progress(args.verbose))
    files = emit_results(result, args.out, svg=not args.no_svg)
    _emit({"out": str(args.out), "files": sorted(str(p) for p in files.values()), **trend_summary(result)})


def cmd_pair(args):
    config = _load_config(args)
    out = Path(args.out)
    plain, reg = run_pair_regularization(config, args.dropout, workers=args.workers,
                                         progress=_progress(args.verbose))
    summary = {}
    for name, result in (("plain", plain), ("dropout", reg)):
        emit_results(result, out / name, svg=not args.no_svg)
        summary[name] = {"final_mean_vcp": result.checkpoints[-1].mean_vcp,
                         "final_train_acc": result.checkpoints[-1].train_accuracy, **trend_summary(result)}
    _emit({"out": str(out), **summary})


# selftest


def _selftest_checks():
    rng = np.random.default_rng(0)

    def beta_identities():
        x = rng.random(500)
        a, b = rng.uniform(0.25, 30, 500), rng.uniform(0.25, 30, 500)
        err = max(abs(specfun.reg_inc_beta(xi, ai, bi) + specfun.reg_inc_beta(1 - xi, bi, ai) - 1)
                  for xi, ai, bi in zip(x, a, b))
        err = max(err, abs(specfun.reg_inc_beta(0.3, 1, 1) - 0.3), abs(specfun.reg_inc_beta(0.5, 7.5, 7.5) - 0.5))
        return err <= 1e-12, f"max error {err:.2e}"

    def closed_form_vs_mc():
        n, ratio, samples = 5, 0.4, 20000
        shell = geom.Shell(np.zeros(n), ratio, 1.0)
        cap = geom.CapSpec(shell, np.eye(n)[0])
        p_hat = geom.crosses_cap(geom.sample_shell(shell, samples, rng), cap).mean()
        p = geom.vcp_linear_uniform(ratio, 1.0, n)
        se = math.sqrt(p * (1 - p) / samples)
        return abs(p_hat - p) <= 4 * se, f"mc {p_hat:.4f} vs exact {p:.4f}"

    def limits():
        lo = min(geom.vcp_linear_uniform(1e-9, 1.0, n) for n in range(1, 21))
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", geom.DegenerateShellWarning)
            hi = max(geom.vcp_linear_uniform(1 - 1e-9, 1.0, n) for n in range(2, 21))
        return lo >= 0.4999 and hi <= 1e-3, f"near-zero margin min {lo:.6f}, near-epsilon max {hi:.2e}"

    def asymptotic():
        ratios = [geom.vcp_nonlinear_asymptotic(1.0, 1.0 + 1e-5, n) / geom.vcp_linear_uniform(1.0, 1.0 + 1e-5, n)
                  for n in (2, 3, 5)]
        ok = all(0.99 <= r <= 1.01 for r in ratios) and geom.asymptotic_coefficient(1, 1.0) == 0.5
        return ok, "ratios " + ", ".join(f"{r:.6f}" for r in ratios)

    def monotone_g():
        grid = np.linspace(0.001, 0.999, 1000)
        d = np.diff([geom.g_of_mean_margin(g, 1.0, 10) for g in grid])
        return bool((d < 0).all()), f"max consecutive difference {d.max():.2e}"

    return [
        ("incomplete beta identities", beta_identities),
        ("closed form vs Monte-Carlo", closed_form_vs_mc),
        ("limit values", limits),
        ("asymptotic expansion", asymptotic),
        ("g strictly decreasing", monotone_g),
    ]


def cmd_selftest(args):
    failed = 0
    for name, check in _selftest_checks():
        ok, detail = check()
        failed += not ok
        print(f"{'PASS' if ok else 'FAIL'} {name}: {detail}")
    if failed:
        raise CliError("selftest", f"{failed} check(s) failed", 1)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="vcplab", description="Counterfactual-probability diagnostics for binary classifiers.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("analytic", help="closed-form probability for a flat boundary")
    p.add_argument("--gamma", type=float, required=True)
    p.add_argument("--epsilon", type=float, required=True)
    p.add_argument("--dim", type=int, required=True)
    p.add_argument("--region", choices=REGIONS, default="ball")
    p.add_argument("--asymptotic", action="store_true", help="also print the small-delta expansion")
    p.add_argument("--variant", choices=sorted(geom.ASYMPTOTIC_VARIANTS), default=geom.DEFAULT_ASYMPTOTIC_VARIANT)
    p.set_defaults(func=cmd_analytic)

    p = sub.add_parser("gcurve", help="CSV of g(mean margin) on an interior grid of (0, epsilon)")
    p.add_argument("--dim", type=int, required=True)
    p.add_argument("--epsilon", type=float, required=True)
    p.add_argument("--points", type=int, default=100)
    p.set_defaults(func=cmd_gcurve)

    p = sub.add_parser("estimate", help="aggregate probability and margins for a saved model")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, help="CSV file, config/run.json, or synthetic:m=..,n=..,...")
    p.add_argument("--label-column")
    p.add_argument("--missing-policy", choices=("drop", "mean"), default="mean")
    p.add_argument("--epsilon", default="auto", help="a positive number or 'auto'")
    p.add_argument("--samples", type=int)
    p.add_argument("--region", choices=REGIONS)
    p.add_argument("--analytic", action="store_true", help="closed form (linear checkpoints only)")
    p.add_argument("--seed", type=int)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--out", help="write per-point CSV here")
    p.set_defaults(func=cmd_estimate)

    for name, func, help_ in (("train", cmd_train, "run one experiment"),
                              ("pair", cmd_pair, "plain and dropout runs with identical seeds")):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config")
        p.add_argument("--preset", choices=PRESETS)
        p.add_argument("--data", help="CSV file for --preset")
        p.add_argument("--label-column")
        p.add_argument("--full", action="store_true", help="confirm a full-scale preset run")
        p.add_argument("--out", required=True)
        p.add_argument("--seed", type=int)
        p.add_argument("--workers", type=int, default=1)
        p.add_argument("--no-svg", action="store_true")
        p.add_argument("--verbose", action="store_true")
        if name == "train":
            p.add_argument("--save-models", action="store_true", help="write epoch_<t>.ckpt files")
        else:
            p.add_argument("--dropout", type=float, help="dropout rate of the regularized run (default 0.5)")
        p.set_defaults(func=func)

    p = sub.add_parser("selftest", help="quick oracle-agreement checks")
    p.set_defaults(func=cmd_selftest)
    return parser


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        args.func(args)
        return 0
    except CliError as exc:
        err = (exc.kind, str(exc), exc.code)
    except ExperimentDivergence as exc:
        err = ("divergence", f"{exc} (after {len(exc.checkpoints)} checkpoints)", EXIT_DIVERGENCE)
    except (DivergenceError, EstimationError) as exc:
        err = ("divergence", str(exc), EXIT_DIVERGENCE)
    except ConfigError as exc:
        err = ("config", str(exc), EXIT_CONFIG)
    except DataError as exc:
        err = ("data", str(exc), EXIT_DATA)
    except OSError as exc:
        err = ("io", f"{exc.filename or ''}: {exc.strerror or exc}".lstrip(": "), EXIT_IO)
    except (ValueError, KeyError) as exc:
        err = ("data", str(exc), EXIT_DATA)
    print(f"error: {err[0]}: {' '.join(err[1].split())}", file=sys.stderr)
    return err[2]


if __name__ == "__main__":
    sys.exit(main())
