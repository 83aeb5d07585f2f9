"""Closed-form polarization physics.

Sinusoidal polarizer response, degree of polarization and the Fresnel
degree-of-polarization models for specular, diffuse and mixed reflection.
Every function accepts scalars or numpy arrays and broadcasts; scalar input
gives a Python float back.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import DegenerateSampling, DomainError, NegativeClamp, ZeroIntensity

#: relative amplitude (i_max - i_min)/(i_max + i_min) below which phase is unobservable
DEGENERATE_DOP = 1e-4


@dataclass(frozen=True)
class SinusoidFit:
    i_max: float
    i_min: float
    phase: float
    degenerate: bool = False
    clamped: bool = False

    @property
    def mean(self) -> float:
        """Rotation-averaged intensity (i_max + i_min) / 2."""
        return 0.5 * (self.i_max + self.i_min)


@dataclass(frozen=True)
class PolarizerSample:
    angle: float
    intensity: float

    def __post_init__(self):
        if not self.intensity >= 0:
            raise DomainError(f"negative intensity {self.intensity}")


@dataclass(frozen=True)
class IntensityDecomposition:
    """Dichromatic split of one observation.

    Convention: every quantity is rotation averaged, so ``total`` is
    (i_max + i_min)/2 of the measured sinusoid, ``specular`` is
    (spec_max + spec_min)/2 and ``total == diffuse + specular``.
    """

    total: float
    diffuse: float
    specular: float
    spec_max: float
    spec_min: float

    @classmethod
    def from_model(cls, diffuse, specular, specular_rho):
        return cls(
            total=diffuse + specular,
            diffuse=diffuse,
            specular=specular,
            spec_max=specular * (1.0 + specular_rho),
            spec_min=specular * (1.0 - specular_rho),
        )


def _out(x):
    x = np.asarray(x, dtype=float)
    return float(x) if x.ndim == 0 else x


def eval_sinusoid(fit: SinusoidFit, pol_angle):
    """Intensity seen through a linear polarizer at ``pol_angle`` radians."""
    a = np.asarray(pol_angle, dtype=float)
    if not np.all(np.isfinite(a)):
        raise DomainError("polarizer angle must be finite")
    mean = 0.5 * (fit.i_max + fit.i_min)
    amp = 0.5 * (fit.i_max - fit.i_min)
    return _out(mean + amp * np.cos(2.0 * (a - fit.phase)))


def sinusoid_design(angles) -> np.ndarray:
    """Design matrix of the (offset, cos 2a, sin 2a) basis; raises on ill-posed angle sets."""
    a = np.asarray(angles, dtype=float).ravel()
    if a.size < 3:
        raise DegenerateSampling(f"need at least 3 polarizer angles, got {a.size}")
    A = np.column_stack([np.ones_like(a), np.cos(2 * a), np.sin(2 * a)])
    s = np.linalg.svd(A, compute_uv=False)
    if s[-1] <= 1e-9 * s[0]:
        raise DegenerateSampling("polarizer angles are not distinct modulo pi")
    return A


def _coefficients_to_params(c0, c1, c2, eps):
    """Convert basis coefficients to (i_max, i_min, phase, degenerate, clamped) arrays."""
    amp = np.hypot(c1, c2)
    i_max = c0 + amp
    i_min = c0 - amp
    # rounding-level negatives are clamped silently; only real ones are flagged
    clamped = i_min < -1e-12 * np.abs(c0)
    i_min = np.maximum(i_min, 0.0)
    i_max = np.maximum(i_max, 0.0)
    phase = np.mod(0.5 * np.arctan2(c2, c1), np.pi)
    # mod can return exactly pi for tiny negative inputs
    phase = np.where(phase >= np.pi, 0.0, phase)
    total = i_max + i_min
    with np.errstate(invalid="ignore", divide="ignore"):
        rel = np.where(total > 0, (i_max - i_min) / np.where(total > 0, total, 1.0), 0.0)
    degenerate = rel < eps
    phase = np.where(degenerate, 0.0, phase)
    return i_max, i_min, phase, degenerate, clamped


def fit_sinusoid(samples: Sequence[PolarizerSample], eps: float = DEGENERATE_DOP) -> SinusoidFit:
    """Least-squares fit of the polarizer sinusoid to three or more samples.

    Raises
    ------
    DegenerateSampling
        If the angles do not span the (offset, cos, sin) basis.
    """
    angles = [s.angle for s in samples]
    values = np.array([s.intensity for s in samples], dtype=float)
    A = sinusoid_design(angles)
    coef, *_ = np.linalg.lstsq(A, values, rcond=None)
    i_max, i_min, phase, degenerate, clamped = _coefficients_to_params(*coef, eps)
    if clamped:
        warnings.warn("fitted i_min < 0 clamped to 0", NegativeClamp, stacklevel=2)
    return SinusoidFit(float(i_max), float(i_min), float(phase), bool(degenerate), bool(clamped))


def fit_sinusoid_stack(angles, images, eps: float = DEGENERATE_DOP):
    """Vectorized fit over a stack of images with shape (K, ...).

    Returns a dict of arrays ``i_max``, ``i_min``, ``phase``, ``degenerate``,
    ``clamped`` shaped like one image. No warnings are raised; inspect
    ``clamped`` instead.
    """
    A = sinusoid_design(angles)
    stack = np.asarray(images, dtype=float)
    if stack.shape[0] != A.shape[0]:
        raise ValueError(f"{stack.shape[0]} images for {A.shape[0]} angles")
    flat = stack.reshape(stack.shape[0], -1)
    coef = np.linalg.pinv(A) @ flat
    i_max, i_min, phase, degenerate, clamped = _coefficients_to_params(coef[0], coef[1], coef[2], eps)
    shape = stack.shape[1:]
    return {
        "i_max": i_max.reshape(shape),
        "i_min": i_min.reshape(shape),
        "phase": phase.reshape(shape),
        "degenerate": degenerate.reshape(shape),
        "clamped": clamped.reshape(shape),
    }


def degree_of_polarization(fit: SinusoidFit) -> float:
    total = fit.i_max + fit.i_min
    if total <= 0:
        raise ZeroIntensity("i_max + i_min must be positive")
    return (fit.i_max - fit.i_min) / total


def _check_index(n):
    if not np.all(np.asarray(n) > 1.0):
        raise DomainError("refractive index must exceed 1")


def specular_dop(theta, n):
    """Degree of polarization of specularly reflected light.

    Zero at normal incidence, one at the Brewster angle arctan(n), defined
    for zenith in [0, pi/2).
    """
    t = np.asarray(theta, dtype=float)
    n = np.asarray(n, dtype=float)
    _check_index(n)
    if np.any(t < 0) or np.any(t >= 0.5 * np.pi):
        raise DomainError("specular zenith must lie in [0, pi/2)")
    s = np.sin(t)
    tn = np.tan(t)
    s2 = s * s
    return _out(2.0 * s * tn * np.sqrt(n * n - s2) / (n * n - 2.0 * s2 + tn * tn))


def specular_dop_dn(theta, n):
    """Partial derivative of :func:`specular_dop` with respect to n."""
    t = np.asarray(theta, dtype=float)
    n = np.asarray(n, dtype=float)
    s = np.sin(t)
    tn = np.tan(t)
    s2 = s * s
    root = np.sqrt(n * n - s2)
    num = 2.0 * s * tn * root
    den = n * n - 2.0 * s2 + tn * tn
    dnum = 2.0 * s * tn * n / root
    return _out((dnum * den - num * 2.0 * n) / (den * den))


def diffuse_dop(theta, n):
    """Degree of polarization of light refracted from inside the surface to air."""
    t = np.asarray(theta, dtype=float)
    n = np.asarray(n, dtype=float)
    _check_index(n)
    if np.any(t < 0) or np.any(t > 0.5 * np.pi):
        raise DomainError("diffuse zenith must lie in [0, pi/2]")
    s2 = np.sin(t) ** 2
    num = (n - 1.0 / n) ** 2 * s2
    den = 2.0 + 2.0 * n * n - (n + 1.0 / n) ** 2 * s2 + 4.0 * np.cos(t) * np.sqrt(n * n - s2)
    return _out(num / den)


def mixed_dop(theta, n, diffuse, total):
    """Measured DoP when unpolarized diffuse light dilutes a specular reflection."""
    d = np.asarray(diffuse, dtype=float)
    tot = np.asarray(total, dtype=float)
    if np.any(tot <= 0):
        raise DomainError("total intensity must be positive")
    if np.any(d < 0) or np.any(d > tot):
        raise DomainError("diffuse intensity must lie in [0, total]")
    return _out(np.asarray(specular_dop(theta, n)) * (tot - d) / tot)


def diffuse_from_view(I, rho, theta, n):
    """Diffuse intensity implied by one view, I * (1 - rho / specular_dop(theta, n)).

    The result is not clamped and goes negative for observations that are
    more polarized than the specular model allows.
    """
    t = np.asarray(theta, dtype=float)
    if np.any(t <= 0) or np.any(t >= 0.5 * np.pi):
        raise DomainError("zenith must lie strictly inside (0, pi/2)")
    I = np.asarray(I, dtype=float)
    rho = np.asarray(rho, dtype=float)
    return _out(I * (1.0 - rho / np.asarray(specular_dop(t, n))))


def brewster_angle(n) -> float:
    return _out(np.arctan(np.asarray(n, dtype=float)))


__all__ = [
    "DEGENERATE_DOP",
    "IntensityDecomposition",
    "PolarizerSample",
    "SinusoidFit",
    "brewster_angle",
    "degree_of_polarization",
    "diffuse_dop",
    "diffuse_from_view",
    "eval_sinusoid",
    "fit_sinusoid",
    "fit_sinusoid_stack",
    "mixed_dop",
    "sinusoid_design",
    "specular_dop",
    "specular_dop_dn",
]
