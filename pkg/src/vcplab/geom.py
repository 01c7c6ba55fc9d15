"""Geometry of the counterfactual shell around a point.

A point ``x`` at distance ``gamma`` from a decision boundary can only change label
under a perturbation whose norm lies in ``[gamma, epsilon)``. This module holds
the closed-form volume fractions for a flat boundary, the small-``delta``
expansion used for curved boundaries, and uniform samplers for balls and shells.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

from .specfun import BetaParams, DomainError, euler_beta, reg_inc_beta, unit_ball_volume


class DegenerateShellWarning(RuntimeWarning):
    """Raised as a warning when ``gamma >= epsilon`` and the shell is empty."""


class DegenerateShellError(ValueError):
    """Sampling was requested from an empty shell."""


# Exponent on 2 in the numerator of the leading asymptotic coefficient.
# "derived": (n + 1) / 2, what the expansion of the exact formula produces;
#            it reproduces the exact 1-D value 1/2.
# "halved":  (n - 1) / 2, half the derived coefficient; its ratio to the exact
#            value tends to 1/2. Kept only for comparison.
ASYMPTOTIC_VARIANTS = {
    "derived": lambda n: 0.5 * (n + 1),
    "halved": lambda n: 0.5 * (n - 1),
}
DEFAULT_ASYMPTOTIC_VARIANT = "derived"


@dataclass(frozen=True)
class Shell:
    center: np.ndarray
    gamma: float
    epsilon: float

    def __post_init__(self):
        object.__setattr__(self, "center", np.atleast_1d(np.asarray(self.center, dtype=float)))
        if not self.epsilon > 0:
            raise DomainError(f"epsilon must be positive, got {self.epsilon}")
        if not self.gamma >= 0:
            raise DomainError(f"gamma must be nonnegative, got {self.gamma}")

    @property
    def dim(self) -> int:
        return self.center.shape[0]

    @property
    def is_empty(self) -> bool:
        return self.gamma >= self.epsilon


@dataclass(frozen=True)
class ShellSample:
    direction: np.ndarray
    radius: float
    point: np.ndarray


@dataclass(frozen=True)
class ShellSamples:
    """A batch of shell samples; rows of ``directions``/``points`` are samples."""

    directions: np.ndarray
    radii: np.ndarray
    points: np.ndarray

    def __len__(self):
        return self.radii.shape[0]

    def __getitem__(self, i) -> ShellSample:
        return ShellSample(self.directions[i], float(self.radii[i]), self.points[i])


@dataclass(frozen=True)
class CapSpec:
    """Shell plus the unit normal pointing from the center to the nearest boundary point."""

    shell: Shell
    normal: np.ndarray

    def __post_init__(self):
        normal = np.asarray(self.normal, dtype=float)
        if abs(np.linalg.norm(normal) - 1.0) > 1e-12:
            raise DomainError("cap normal must be a unit vector")
        object.__setattr__(self, "normal", normal)

    @property
    def boundary_point(self) -> np.ndarray:
        return self.shell.center + self.shell.gamma * self.normal


def _check_dim(n):
    if int(n) != n or n < 1:
        raise DomainError(f"dimension must be a positive integer, got {n}")
    return int(n)


def shell_volume(shell: Shell, n: int | None = None) -> float:
    n = shell.dim if n is None else _check_dim(n)
    if shell.is_empty:
        return 0.0
    return unit_ball_volume(n) * (shell.epsilon**n - shell.gamma**n)


def _cap_reg_beta(gamma: float, epsilon: float, n: int) -> float:
    """I(1 - (gamma/eps)^2; (n+1)/2, 1/2) without rounding the argument near either end."""
    a = 0.5 * (n + 1)
    x = (epsilon - gamma) * (epsilon + gamma) / (epsilon * epsilon)
    if x < (a + 1.0) / (a + 2.5):
        return reg_inc_beta(x, BetaParams(a, 0.5))
    # same switch the continued fraction makes, but fed the exact complement (gamma/eps)^2
    return 1.0 - reg_inc_beta((gamma / epsilon) ** 2, BetaParams(0.5, a))


def cap_fraction_of_ball(gamma_over_eps: float, n: int) -> float:
    """Fraction of a ball cut off by a hyperplane at relative distance ``gamma_over_eps``."""
    n = _check_dim(n)
    r = float(gamma_over_eps)
    if not 0.0 <= r <= 1.0:
        raise DomainError(f"gamma/epsilon must lie in [0, 1], got {r}")
    return 0.5 * _cap_reg_beta(r, 1.0, n)


def _shell_prefactor(gamma: float, epsilon: float, n: int) -> float:
    # eps^n / (eps^n - gamma^n) = -1 / expm1(n log(gamma / eps))
    if gamma == 0.0:
        return 1.0
    if 2.0 * gamma > epsilon:
        log_ratio = math.log1p((gamma - epsilon) / epsilon)
    else:
        log_ratio = math.log(gamma / epsilon)
    return -1.0 / math.expm1(n * log_ratio)


def vcp_linear_uniform(gamma: float, epsilon: float, n: int) -> float:
    """Probability that a uniform shell perturbation crosses a flat boundary.

    The perturbation is uniform on the shell ``gamma <= |r| < epsilon`` and the
    boundary is a hyperplane at distance ``gamma``. Returns 0 (and emits a
    :class:`DegenerateShellWarning`) when the shell is empty.
    """
    n = _check_dim(n)
    gamma, epsilon = float(gamma), float(epsilon)
    if not epsilon > 0 or not gamma >= 0:
        raise DomainError(f"need gamma >= 0 and epsilon > 0, got gamma={gamma}, epsilon={epsilon}")
    if gamma >= epsilon:
        warnings.warn(
            f"degenerate shell: gamma={gamma} >= epsilon={epsilon}, probability is 0",
            DegenerateShellWarning,
            stacklevel=2,
        )
        return 0.0
    cap = _cap_reg_beta(gamma, epsilon, n)
    return min(0.5 * _shell_prefactor(gamma, epsilon, n) * cap, 0.5)


def vcp_linear_uniform_ball(gamma: float, epsilon: float, n: int) -> float:
    """Same crossing probability with the perturbation uniform on the whole ball."""
    n = _check_dim(n)
    if not epsilon > 0 or not gamma >= 0:
        raise DomainError(f"need gamma >= 0 and epsilon > 0, got gamma={gamma}, epsilon={epsilon}")
    if gamma >= epsilon:
        return 0.0
    return cap_fraction_of_ball(gamma / epsilon, n)


def asymptotic_coefficient(n: int, gamma: float, variant: str = DEFAULT_ASYMPTOTIC_VARIANT) -> float:
    """Leading coefficient K(n, gamma) of the expansion ``p ~ K * delta^((n-1)/2)``."""
    n = _check_dim(n)
    if not gamma > 0:
        raise DomainError(f"gamma must be positive, got {gamma}")
    try:
        exponent = ASYMPTOTIC_VARIANTS[variant](n)
    except KeyError:
        raise ValueError(f"unknown coefficient variant {variant!r}") from None
    a = 0.5 * (n + 1)
    return 2.0**exponent / (n * (n + 1) * euler_beta(a, 0.5) * gamma ** (0.5 * (n - 1)))


def vcp_nonlinear_asymptotic(
    gamma: float, epsilon: float, n: int, variant: str = DEFAULT_ASYMPTOTIC_VARIANT
) -> float:
    """Leading-order crossing probability as ``delta = epsilon - gamma -> 0``.

    Valid when the boundary is locally flat on the scale of ``delta``; the
    relative correction is O(delta).
    """
    if not gamma > 0 or not epsilon > gamma:
        raise DomainError(f"need 0 < gamma < epsilon, got gamma={gamma}, epsilon={epsilon}")
    delta = epsilon - gamma
    return asymptotic_coefficient(n, gamma, variant) * delta ** (0.5 * (n - 1))


def g_of_mean_margin(mean_gamma: float, epsilon: float, n: int) -> float:
    """Jensen lower bound on the average probability, evaluated at the mean margin."""
    if not 0.0 < mean_gamma < epsilon:
        raise DomainError(f"mean margin must lie in (0, epsilon), got {mean_gamma} with epsilon={epsilon}")
    return vcp_linear_uniform(mean_gamma, epsilon, n)


def _rng(rng) -> np.random.Generator:
    if isinstance(rng, np.random.Generator):
        return rng
    return np.random.default_rng(rng)


def uniform_directions(rng, size: int, n: int) -> np.ndarray:
    """``size`` unit vectors uniform on the sphere in R^n (normalized Gaussians)."""
    rng = _rng(rng)
    g = rng.standard_normal((size, n))
    norms = np.linalg.norm(g, axis=1, keepdims=True)
    # a zero Gaussian vector has probability zero; redraw defensively
    bad = norms[:, 0] == 0.0
    while bad.any():
        g[bad] = rng.standard_normal((int(bad.sum()), n))
        norms = np.linalg.norm(g, axis=1, keepdims=True)
        bad = norms[:, 0] == 0.0
    return g / norms


def shell_radii(rng, size: int, gamma: float, epsilon: float, n: int) -> np.ndarray:
    """Radii distributed so that points are uniform by volume on the shell."""
    rng = _rng(rng)
    u = rng.random(size)
    # rho = (gamma^n + u (eps^n - gamma^n))^(1/n), scaled by eps to stay finite for large n
    ratio_n = (gamma / epsilon) ** n
    return epsilon * (ratio_n + u * (1.0 - ratio_n)) ** (1.0 / n)


def sample_shell(shell: Shell, size: int, rng) -> ShellSamples:
    """Draw ``size`` points uniformly (by volume) from the shell."""
    if shell.is_empty:
        raise DegenerateShellError(
            f"cannot sample an empty shell (gamma={shell.gamma} >= epsilon={shell.epsilon})"
        )
    rng = _rng(rng)
    n = shell.dim
    directions = uniform_directions(rng, size, n)
    radii = shell_radii(rng, size, shell.gamma, shell.epsilon, n)
    # guard the half-open upper end against rounding up to epsilon
    radii = np.minimum(radii, np.nextafter(shell.epsilon, 0.0))
    radii = np.maximum(radii, shell.gamma)
    points = shell.center + radii[:, None] * directions
    return ShellSamples(directions, radii, points)


def sample_shell_uniform(shell: Shell, rng) -> ShellSample:
    return sample_shell(shell, 1, rng)[0]


def sample_ball(center, epsilon: float, size: int, rng) -> np.ndarray:
    """``size`` points uniform in the open ball of radius ``epsilon``; one per row."""
    return sample_shell(Shell(center, 0.0, epsilon), size, rng).points


def sample_ball_uniform(center, epsilon: float, rng) -> np.ndarray:
    return sample_ball(center, epsilon, 1, rng)[0]


def angle_to(sample: ShellSample, cap: CapSpec) -> float:
    """Angle between a sampled direction and the cap normal, in ``[0, pi]``."""
    direction = np.asarray(sample.direction, dtype=float)
    if direction.shape != cap.normal.shape:
        raise DomainError(f"shape mismatch: {direction.shape} vs {cap.normal.shape}")
    cos = float(np.clip(np.dot(direction, cap.normal), -1.0, 1.0))
    return math.acos(cos)


def crosses_cap(samples: ShellSamples, cap: CapSpec) -> np.ndarray:
    """Boolean mask: which samples lie beyond the flat boundary of ``cap``."""
    offsets = samples.points - cap.shell.center
    return offsets @ cap.normal >= cap.shell.gamma
