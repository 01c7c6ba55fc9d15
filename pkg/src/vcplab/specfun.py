"""Scalar special functions used by the closed-form counterfactual probabilities.

Everything here works on plain Python floats and has no dependency beyond
:mod:`math`, so the functions are pure and thread-safe.
"""
from __future__ import annotations

import math
from dataclasses import dataclass


class DomainError(ValueError):
    """Argument outside the mathematical domain of a function."""


class ConvergenceError(ArithmeticError):
    """A continued fraction did not converge within its iteration cap."""


# Lanczos approximation, g = 607/128, 15 terms (Godfrey's coefficient set).
_LANCZOS_G = 607.0 / 128.0
_LANCZOS_COEF = (
    0.99999999999999709182,
    57.156235665862923517,
    -59.597960355475491248,
    14.136097974741747174,
    -0.49191381609762019978,
    0.33994649984811888699e-4,
    0.46523628927048575665e-4,
    -0.98374475304879564677e-4,
    0.15808870322491248884e-3,
    -0.21026444172410488319e-3,
    0.21743961811521264320e-3,
    -0.16431810653676389022e-3,
    0.84418223983852743293e-4,
    -0.26190838401581408670e-4,
    0.36899182659531622704e-5,
)
_HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)

CF_TOLERANCE = 1e-15
CF_MAX_ITER = 500
_TINY = 1e-300


@dataclass(frozen=True)
class BetaParams:
    """Shape parameters ``(a, b)`` of a beta distribution."""

    a: float
    b: float

    def __post_init__(self):
        if not (self.a > 0 and self.b > 0):
            raise DomainError(f"beta parameters must be positive, got a={self.a}, b={self.b}")


def _as_params(p, b=None) -> BetaParams:
    if isinstance(p, BetaParams):
        return p
    if b is None:
        a, b = p
        return BetaParams(float(a), float(b))
    return BetaParams(float(p), float(b))


def log_gamma(x: float) -> float:
    """Natural log of the gamma function for ``x > 0``."""
    x = float(x)
    if not x > 0 or math.isinf(x):
        raise DomainError(f"log_gamma requires a finite x > 0, got {x}")
    if x < 0.5:
        # reflection: Gamma(x) Gamma(1-x) = pi / sin(pi x)
        return math.log(math.pi / math.sin(math.pi * x)) - log_gamma(1.0 - x)
    z = x - 1.0
    series = _LANCZOS_COEF[0]
    for k in range(1, len(_LANCZOS_COEF)):
        series += _LANCZOS_COEF[k] / (z + k)
    t = z + _LANCZOS_G + 0.5
    return _HALF_LOG_2PI + (z + 0.5) * math.log(t) - t + math.log(series)


def euler_beta(p, b=None) -> float:
    """Euler beta function ``B(a, b)``.

    Accepts either a :class:`BetaParams`, an ``(a, b)`` pair or two numbers.
    Evaluated through :func:`log_gamma` so large shape parameters do not overflow.
    """
    p = _as_params(p, b)
    return math.exp(log_beta(p))


def log_beta(p, b=None) -> float:
    p = _as_params(p, b)
    return log_gamma(p.a) + log_gamma(p.b) - log_gamma(p.a + p.b)


def _beta_cf(x: float, a: float, b: float) -> float:
    """Continued fraction for I(x; a, b), modified Lentz evaluation."""
    qab = a + b
    qap = a + 1.0
    qam = a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    if abs(d) < _TINY:
        d = _TINY
    d = 1.0 / d
    h = d
    for m in range(1, CF_MAX_ITER + 1):
        m2 = 2 * m
        # even step
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        if abs(d) < _TINY:
            d = _TINY
        c = 1.0 + aa / c
        if abs(c) < _TINY:
            c = _TINY
        d = 1.0 / d
        h *= d * c
        # odd step
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        if abs(d) < _TINY:
            d = _TINY
        c = 1.0 + aa / c
        if abs(c) < _TINY:
            c = _TINY
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < CF_TOLERANCE:
            return h
    raise ConvergenceError(
        f"incomplete beta continued fraction did not converge in {CF_MAX_ITER} "
        f"iterations (x={x}, a={a}, b={b})"
    )


def reg_inc_beta(x: float, p, b=None) -> float:
    """Regularized incomplete beta function ``I(x; a, b)``.

    >>> reg_inc_beta(0.25, 1.0, 1.0)
    0.25
    """
    p = _as_params(p, b)
    x = float(x)
    if not 0.0 <= x <= 1.0:
        raise DomainError(f"reg_inc_beta requires 0 <= x <= 1, got {x}")
    if x == 0.0:
        return 0.0
    if x == 1.0:
        return 1.0
    a, b = p.a, p.b
    log_front = a * math.log(x) + b * math.log1p(-x) - log_beta(p)
    if x < (a + 1.0) / (a + b + 2.0):
        return math.exp(log_front) * _beta_cf(x, a, b) / a
    value = 1.0 - math.exp(log_front) * _beta_cf(1.0 - x, b, a) / b
    return min(max(value, 0.0), 1.0)


def unit_ball_volume(n: int) -> float:
    """Volume of the unit ball in ``n`` dimensions, ``pi^(n/2) / Gamma(1 + n/2)``."""
    if int(n) != n or n < 1:
        raise DomainError(f"dimension must be a positive integer, got {n}")
    return math.exp(0.5 * n * math.log(math.pi) - log_gamma(1.0 + 0.5 * n))
