"""Margins and counterfactual probabilities of trained classifiers.

For each point we measure how far it sits from the decision boundary and how
likely a uniformly random perturbation of norm below ``epsilon`` is to flip
its predicted label. Per-point values are averaged over a dataset and paired
with the Jensen-type bound obtained by plugging the mean margin into the
flat-boundary formula.
"""
from __future__ import annotations

import csv
import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import geom
from .dataset import Dataset
from .model import LinearModel, classify

GRADIENT_FLOOR = 1e-12
DEFAULT_SAMPLES = 1000
REGIONS = ("ball", "shell")
CSV_COLUMNS = ("point_index", "margin", "margin_method", "p", "stderr", "samples", "region")


class EstimationError(ArithmeticError):
    pass


@dataclass(frozen=True)
class MarginEstimate:
    value: float
    method: str
    gradient_norm: float = math.nan

    @property
    def is_sentinel(self) -> bool:
        """True when no nearby boundary was detected (flat score)."""
        return math.isinf(self.value)


@dataclass(frozen=True)
class VcpEstimate:
    p: float
    samples: int
    stderr: float
    region: str
    method: str


@dataclass(frozen=True)
class AggregateVcp:
    mean_p: float
    per_point: tuple
    margins: tuple
    mean_margin: float
    jensen_bound: float
    excluded_margin_count: int
    epsilon: float
    dim: int

    @property
    def stderr(self) -> float:
        """Standard error of ``mean_p`` from the per-point Monte-Carlo errors."""
        se = np.array([e.stderr for e in self.per_point])
        return float(np.sqrt(np.sum(se * se)) / len(se))


def margin_exact_linear(model: LinearModel, x) -> MarginEstimate:
    """Distance from ``x`` to the hyperplane ``w.x + b = 0``."""
    norm = float(np.linalg.norm(model.weights))
    if norm == 0.0:
        raise ValueError("zero weight vector: the decision boundary is undefined")
    return MarginEstimate(abs(model.score(x)) / norm, "exact-linear", norm)


def margin_gradient_estimate(model, x) -> MarginEstimate:
    """First-order distance to the boundary, ``|h(x)| / |grad h(x)|``.

    A vanishing gradient yields an ``inf`` sentinel unless ``h(x) == 0``.
    """
    h = model.score(x)
    norm = float(np.linalg.norm(model.input_gradient(x)))
    if h == 0.0:
        return MarginEstimate(0.0, "gradient-first-order", norm)
    if norm < GRADIENT_FLOOR:
        return MarginEstimate(math.inf, "gradient-first-order", norm)
    return MarginEstimate(abs(h) / norm, "gradient-first-order", norm)


def margins(model, X) -> list:
    """Margins for every row of ``X``: exact for linear models, first-order otherwise."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    if isinstance(model, LinearModel):
        norm = float(np.linalg.norm(model.weights))
        if norm == 0.0:
            raise ValueError("zero weight vector: the decision boundary is undefined")
        return [MarginEstimate(float(v), "exact-linear", norm) for v in np.abs(model.score(X)) / norm]
    h = model.score(X)
    norms = np.linalg.norm(model.input_gradient(X), axis=1)
    out = []
    for hi, gi in zip(h, norms):
        if hi == 0.0:
            out.append(MarginEstimate(0.0, "gradient-first-order", float(gi)))
        elif gi < GRADIENT_FLOOR:
            out.append(MarginEstimate(math.inf, "gradient-first-order", float(gi)))
        else:
            out.append(MarginEstimate(float(abs(hi) / gi), "gradient-first-order", float(gi)))
    return out


def point_rng(seed, index: int) -> np.random.Generator:
    """Random stream for one point, derived from ``(seed, index)`` only."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(index)]))


def _perturbed_points(x, epsilon, region, gamma, samples, rng):
    if region == "ball":
        return geom.sample_ball(x, epsilon, samples, rng)
    return geom.sample_shell(geom.Shell(x, gamma, epsilon), samples, rng).points


def vcp_monte_carlo(model, x, epsilon, region="ball", gamma=None, samples=DEFAULT_SAMPLES, rng=None) -> VcpEstimate:
    """Fraction of uniform perturbations of ``x`` that change its predicted label.

    ``region="ball"`` samples the whole ``epsilon``-ball; ``region="shell"``
    samples ``gamma <= |r| < epsilon`` and requires ``gamma``.
    """
    if region not in REGIONS:
        raise ValueError(f"region must be one of {REGIONS}, got {region!r}")
    if not epsilon > 0:
        raise ValueError(f"epsilon must be positive, got {epsilon}")
    if region == "shell":
        if gamma is None:
            raise ValueError("region='shell' needs gamma")
        if gamma >= epsilon:
            raise geom.DegenerateShellError(f"empty shell: gamma={gamma} >= epsilon={epsilon}")
    x = np.asarray(x, dtype=float)
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    points = _perturbed_points(x, epsilon, region, gamma, samples, rng)
    h = model.score(points)
    bad = np.flatnonzero(~np.isfinite(h))
    if bad.size:
        raise EstimationError(f"non-finite score at sample index {bad[0]}")
    flips = np.count_nonzero((h >= 0.0) != (model.score(x) >= 0.0))
    p = flips / samples
    return VcpEstimate(p, samples, math.sqrt(p * (1.0 - p) / samples), region, "monte-carlo")


def vcp_analytic(model: LinearModel, x, epsilon, region="ball") -> VcpEstimate:
    """Closed-form probability for a linear model."""
    gamma = margin_exact_linear(model, x).value
    n = model.input_dim
    if region == "ball":
        p = geom.vcp_linear_uniform_ball(gamma, epsilon, n)
    elif region == "shell":
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", geom.DegenerateShellWarning)
            p = geom.vcp_linear_uniform(gamma, epsilon, n)
    else:
        raise ValueError(f"region must be one of {REGIONS}, got {region!r}")
    return VcpEstimate(p, 0, 0.0, region, "analytic")


def jensen_bound(mean_margin: float, epsilon: float, n: int) -> float:
    """Flat-boundary probability at the mean margin; 0 once the margin reaches ``epsilon``."""
    if not math.isfinite(mean_margin):
        return math.nan
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", geom.DegenerateShellWarning)
        return geom.vcp_linear_uniform(mean_margin, epsilon, n)


def _estimate_point(model, x, margin, epsilon, region, samples, seed, index, method):
    if method == "analytic":
        return vcp_analytic(model, x, epsilon, region)
    if region == "shell" and not margin.value < epsilon:
        # empty or undetected shell: no perturbation can be a counterfactual
        return VcpEstimate(0.0, samples, 0.0, region, "monte-carlo")
    gamma = margin.value if region == "shell" else None
    return vcp_monte_carlo(model, x, epsilon, region, gamma, samples, point_rng(seed, index))


def aggregate(
    model,
    data: Dataset,
    epsilon: float,
    region: str = "ball",
    samples: int = DEFAULT_SAMPLES,
    seed=0,
    method: str = "monte-carlo",
    workers: int = 1,
) -> AggregateVcp:
    """Per-point probabilities and margins over ``data`` with their averages.

    Per-point random streams depend only on ``(seed, point index)`` and results
    are reduced in index order, so the output does not depend on ``workers``.
    """
    if method not in ("monte-carlo", "analytic"):
        raise ValueError(f"method must be 'monte-carlo' or 'analytic', got {method!r}")
    if method == "analytic" and not isinstance(model, LinearModel):
        raise ValueError("analytic estimation needs a linear model")
    X = data.features
    point_margins = margins(model, X)

    def one(i):
        try:
            return _estimate_point(model, X[i], point_margins[i], epsilon, region, samples, seed, i, method)
        except (EstimationError, ValueError) as exc:
            return exc

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(one, range(data.m)))
    else:
        results = [one(i) for i in range(data.m)]
    failures = [r for r in results if isinstance(r, Exception)]
    if len(failures) == len(results):
        raise EstimationError(f"every point failed; first error: {failures[0]}")
    if failures:
        warnings.warn(f"{len(failures)} of {len(results)} points failed and were skipped", RuntimeWarning)
    kept = [(r, mg) for r, mg in zip(results, point_margins) if not isinstance(r, Exception)]
    per_point = tuple(r for r, _ in kept)
    kept_margins = tuple(mg for _, mg in kept)
    finite = [mg.value for mg in kept_margins if not mg.is_sentinel]
    mean_margin = float(np.mean(finite)) if finite else math.inf
    mean_p = float(np.mean([e.p for e in per_point]))
    return AggregateVcp(
        mean_p=mean_p,
        per_point=per_point,
        margins=kept_margins,
        mean_margin=mean_margin,
        jensen_bound=jensen_bound(mean_margin, epsilon, model.input_dim),
        excluded_margin_count=len(kept_margins) - len(finite),
        epsilon=float(epsilon),
        dim=model.input_dim,
    )


def rescale_epsilon(eps_ori: float, n: int, n_prime: int) -> float:
    """Perturbation budget for an ``n_prime``-dimensional expansion of ``n`` features."""
    if not (eps_ori > 0 and n > 0 and n_prime > 0):
        raise ValueError("rescale_epsilon needs positive arguments")
    return eps_ori * math.sqrt(n_prime / n)


def write_aggregate_csv(agg: AggregateVcp, path) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CSV_COLUMNS)
        for i, (est, mg) in enumerate(zip(agg.per_point, agg.margins)):
            w.writerow([i, repr(mg.value), mg.method, repr(est.p), repr(est.stderr), est.samples, est.region])
    return path


def read_aggregate_csv(path) -> list:
    with Path(path).open(newline="") as fh:
        return [
            {
                "point_index": int(r["point_index"]),
                "margin": float(r["margin"]),
                "margin_method": r["margin_method"],
                "p": float(r["p"]),
                "stderr": float(r["stderr"]),
                "samples": int(r["samples"]),
                "region": r["region"],
            }
            for r in csv.DictReader(fh)
        ]
