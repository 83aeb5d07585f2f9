"""Joint recovery of diffuse intensity and refractive index from multiview tracks.

For one surface point seen in N views, every view implies a diffuse intensity

    f(n, theta_i, I_i, rho_i) = I_i * (1 - rho_i / specular_dop(theta_i, n))

and, under a Lambertian diffuse term, all of them must agree. The solver
minimizes sum_i (I_d - f_i)^2 over (I_d, n) inside a box, then re-inverts
the specular Fresnel curve on the diffuse-corrected DoP to refine each
view's zenith, and alternates until the zeniths stop moving.
"""
from __future__ import annotations

import enum
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from . import _backend
from .errors import DomainError, InsufficientViews, OutOfRange
from .polar import DEGENERATE_DOP, diffuse_dop, diffuse_from_view, specular_dop


class Status(enum.IntEnum):
    CONVERGED = 0
    MAX_ITER = 1
    DEGENERATE = 2
    #: fixed point reached only with a clamped zenith (corrected DoP above 1,
    #: or zenith pinned to the floor/ceiling)
    INCONSISTENT = 3


@dataclass(frozen=True)
class ViewObservation:
    intensity: float
    dop: float
    phase: float = 0.0
    zenith: float = math.nan
    view_rotation: np.ndarray = field(default_factory=lambda: np.eye(3), compare=False)

    def __post_init__(self):
        if not self.intensity > 0:
            raise DomainError("observation intensity must be positive")
        if not 0.0 <= self.dop <= 1.0:
            raise DomainError("dop must lie in [0, 1]")


@dataclass(frozen=True)
class PointTrack:
    observations: tuple
    point_id: object = None

    def __post_init__(self):
        object.__setattr__(self, "observations", tuple(self.observations))
        if not self.observations:
            raise InsufficientViews("a track needs at least one observation")

    def __len__(self):
        return len(self.observations)

    def arrays(self):
        I = np.array([o.intensity for o in self.observations], dtype=float)
        rho = np.array([o.dop for o in self.observations], dtype=float)
        theta = np.array([o.zenith for o in self.observations], dtype=float)
        return I, rho, theta


@dataclass(frozen=True)
class SeparationResult:
    diffuse: float
    index: float
    zeniths: tuple
    residual: float
    iterations: int
    status: Status
    #: another start reached a different exact minimizer, so the data admit
    #: more than one (diffuse, index) pair
    ambiguous: bool = False

    @property
    def index_identified(self) -> bool:
        return self.status != Status.DEGENERATE


@dataclass(frozen=True)
class SolverConfig:
    n_box: tuple = (1.05, 2.5)
    max_outer_iters: int = 20
    inner_tol: float = 1e-10
    outer_tol: float = 1e-6
    zenith_floor: float = math.radians(2.0)
    zenith_ceiling: float = math.radians(89.9)
    multistart_count: int = 5
    max_inner_iters: int = 100
    degenerate_dop: float = DEGENERATE_DOP
    #: alternate with zenith re-inversion; False gives the single-pass variant
    refine_zenith: bool = True
    #: Brewster branch for zeniths initialized from the raw DoP
    branch: str = "below_brewster"

    def __post_init__(self):
        lo, hi = self.n_box
        if not 1.0 < lo < hi:
            raise DomainError("n_box must satisfy 1 < n_lo < n_hi")
        if self.inner_tol <= 0 or self.outer_tol <= 0:
            raise DomainError("tolerances must be positive")
        if self.multistart_count > 64:
            raise DomainError("multistart_count is limited to 64")
        if self.multistart_count < 1 or self.max_outer_iters < 1 or self.max_inner_iters < 1:
            raise DomainError("iteration counts must be positive")
        if not 0 < self.zenith_floor < self.zenith_ceiling < 0.5 * math.pi:
            raise DomainError("need 0 < zenith_floor < zenith_ceiling < pi/2")
        if self.branch not in ("below_brewster", "above_brewster"):
            raise DomainError(f"unknown branch {self.branch!r}")

    @property
    def n_mid(self) -> float:
        return 0.5 * (self.n_box[0] + self.n_box[1])


def _bisect(fn, target, lo, hi, increasing, steps=200):
    lo = np.broadcast_to(np.asarray(lo, dtype=float), target.shape).copy()
    hi = np.broadcast_to(np.asarray(hi, dtype=float), target.shape).copy()
    for _ in range(steps):
        mid = 0.5 * (lo + hi)
        below = fn(mid) < target
        go_up = below if increasing else ~below
        lo = np.where(go_up, mid, lo)
        hi = np.where(go_up, hi, mid)
        if np.all(np.nextafter(lo, hi) >= hi):
            break
    return 0.5 * (lo + hi)


def estimate_zenith_naive(dop, n_assumed, model="specular", branch="below_brewster", clip=False):
    """Zenith from a DoP by inverting a single reflection model.

    ``model`` is ``"specular"`` or ``"diffuse"``. The specular curve peaks at
    the Brewster angle, so ``branch`` picks the side. With ``clip=True``,
    unattainable DoPs map to the model's peak instead of raising.
    """
    rho = np.asarray(dop, dtype=float)
    n = float(n_assumed)
    if not n > 1:
        raise DomainError("assumed refractive index must exceed 1")
    if np.any(rho < 0):
        raise DomainError("dop must be non-negative")
    if model == "specular":
        tb = math.atan(n)
        if np.any(rho > 1.0):
            if not clip:
                raise OutOfRange("specular DoP cannot exceed 1")
            rho = np.minimum(rho, 1.0)
        if branch == "below_brewster":
            t = _bisect(lambda x: np.asarray(specular_dop(x, n)), rho, 0.0, tb, increasing=True)
            t = np.where(rho <= 0, 0.0, t)
        elif branch == "above_brewster":
            top = np.nextafter(0.5 * math.pi, 0)
            t = _bisect(lambda x: np.asarray(specular_dop(x, n)), rho, tb, top, increasing=False)
            t = np.where(rho <= 0, top, t)
        else:
            raise DomainError(f"unknown branch {branch!r}")
        t = np.where(rho >= 1.0, tb, t)
    elif model == "diffuse":
        peak = float(diffuse_dop(0.5 * math.pi, n))
        if np.any(rho > peak * (1 + 1e-12)):
            if not clip:
                raise OutOfRange(f"diffuse DoP cannot exceed {peak:.6g} for n={n}")
        rho = np.minimum(rho, peak)
        t = _bisect(lambda x: np.asarray(diffuse_dop(x, n)), rho, 0.0, 0.5 * math.pi, increasing=True)
        t = np.where(rho <= 0, 0.0, t)
        t = np.where(rho >= peak, 0.5 * math.pi, t)
    else:
        raise DomainError(f"unknown model {model!r}")
    return float(t) if t.ndim == 0 else t


def residual_vector(track: PointTrack, i_d: float, n: float, zenith_floor: float = SolverConfig.zenith_floor):
    """Per-view residuals ``i_d - f_i(n)`` at the track's stored zeniths."""
    I, rho, theta = track.arrays()
    if not np.all(theta >= zenith_floor):
        raise DomainError("every zenith must be at least the zenith floor")
    return i_d - np.asarray(diffuse_from_view(I, rho, theta, n))


def _threads(threads):
    if threads is None:
        env = os.environ.get("POLARSFP_THREADS")
        threads = int(env) if env else (os.cpu_count() or 1)
    return max(1, int(threads))


def initial_zeniths(rho, cfg: SolverConfig):
    """Naive specular zeniths at the middle of the index box."""
    return estimate_zenith_naive(np.minimum(rho, 1.0), cfg.n_mid, "specular", cfg.branch, clip=True)


def solve_arrays(I, rho, theta, cfg: SolverConfig = SolverConfig(), threads=None, backend=None,
                 chunk=2048, progress: Optional[Callable[[int, int], None]] = None):
    """Solve T tracks of N views held in (T, N) arrays.

    NaN zeniths are initialized with :func:`initial_zeniths`. Returns a dict
    with ``diffuse``, ``index``, ``zeniths``, ``residual``, ``iterations``,
    ``status`` and ``ambiguous`` arrays. Results do not depend on ``threads`` or ``chunk``.
    """
    I = np.ascontiguousarray(I, dtype=np.float64)
    rho = np.ascontiguousarray(rho, dtype=np.float64)
    theta = np.array(theta, dtype=np.float64)
    if I.ndim != 2 or I.shape != rho.shape or I.shape != theta.shape:
        raise ValueError("I, rho and theta must share shape (T, N)")
    T, N = I.shape
    if N < 2:
        raise InsufficientViews("joint recovery needs at least two views")
    missing = ~np.isfinite(theta)
    if missing.any():
        theta[missing] = initial_zeniths(rho[missing], cfg)
    kernel = _backend.get_kernel(backend)
    args = (
        cfg.n_box[0], cfg.n_box[1], cfg.max_outer_iters, cfg.inner_tol, cfg.outer_tol,
        cfg.zenith_floor, cfg.zenith_ceiling, cfg.multistart_count, cfg.degenerate_dop,
        bool(cfg.refine_zenith), cfg.max_inner_iters,
    )
    bounds = [(s, min(s + chunk, T)) for s in range(0, T, chunk)] or [(0, 0)]

    def run(b):
        s, e = b
        return kernel.solve_tracks(I[s:e], rho[s:e], theta[s:e], *args)

    nthreads = _threads(threads)
    parts = []
    done = 0
    if nthreads == 1 or len(bounds) == 1:
        for b in bounds:
            parts.append(run(b))
            done += b[1] - b[0]
            if progress:
                progress(done, T)
    else:
        with ThreadPoolExecutor(max_workers=nthreads) as pool:
            for b, part in zip(bounds, pool.map(run, bounds)):
                parts.append(part)
                done += b[1] - b[0]
                if progress:
                    progress(done, T)
    keys = ("diffuse", "index", "zeniths", "residual", "iterations", "status", "ambiguous")
    return {k: np.concatenate([p[i] for p in parts]) for i, k in enumerate(keys)}


def _to_result(out, k):
    return SeparationResult(
        diffuse=float(out["diffuse"][k]),
        index=float(out["index"][k]),
        zeniths=tuple(float(t) for t in out["zeniths"][k]),
        residual=float(out["residual"][k]),
        iterations=int(out["iterations"][k]),
        status=Status(int(out["status"][k])),
        ambiguous=bool(out["ambiguous"][k]),
    )


def solve_point(track: PointTrack, cfg: SolverConfig = SolverConfig(), backend=None) -> SeparationResult:
    """Joint (diffuse, index) estimate for one track, with zenith refinement."""
    if len(track) < 2:
        raise InsufficientViews("joint recovery needs at least two views")
    I, rho, theta = track.arrays()
    out = solve_arrays(I[None], rho[None], theta[None], cfg, threads=1, backend=backend)
    return _to_result(out, 0)


def solve_image(tracks: Sequence[PointTrack], cfg: SolverConfig = SolverConfig(), threads=None,
                backend=None, progress=None):
    """Apply :func:`solve_point` to every track.

    Tracks are grouped by view count and solved in batches. A track that
    cannot be solved yields ``None`` in its slot rather than aborting the batch.
    """
    results = [None] * len(tracks)
    groups = {}
    for k, tr in enumerate(tracks):
        if len(tr) >= 2:
            groups.setdefault(len(tr), []).append(k)
    for N, idx in groups.items():
        arrs = [tracks[k].arrays() for k in idx]
        I = np.array([a[0] for a in arrs])
        rho = np.array([a[1] for a in arrs])
        theta = np.array([a[2] for a in arrs])
        out = solve_arrays(I, rho, theta, cfg, threads=threads, backend=backend, progress=progress)
        for j, k in enumerate(idx):
            results[k] = _to_result(out, j)
    return results
