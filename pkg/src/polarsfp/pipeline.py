"""Polarized stacks to per-view normal maps, diffuse image and index map.

Pixel coordinates follow the renderer: columns grow right (+x), rows grow
down (-y), and camera z points toward the viewer. Every output map lives on
the reference view's pixel grid.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np
from scipy import ndimage

from . import _backend
from .errors import DomainError, EmptyIntersection, InsufficientViews
from .polar import fit_sinusoid_stack
from .scene import CorrespondenceMap, GroundTruth, PolarizedStack
from .solver import SolverConfig, Status, estimate_zenith_naive, solve_arrays


class Mode(str, enum.Enum):
    UNCORRECTED_SPECULAR = "uncorrected_specular"
    UNCORRECTED_DIFFUSE = "uncorrected_diffuse"
    CORRECTED_MIXED = "corrected_mixed"


ZENITH_INITS = ("stereo", "naive")


@dataclass(frozen=True)
class PipelineConfig:
    mode: Mode = Mode.CORRECTED_MIXED
    #: index for the uncorrected modes; ignored by corrected_mixed
    assumed_n: float = 1.5
    azimuth_convention: str = "specular_phase"
    disambiguation: str = "convex_outward"
    solver: SolverConfig = field(default_factory=SolverConfig)
    #: starting zeniths for the solver. "stereo" triangulates depth from the
    #: correspondences; "naive" inverts the raw DoP at the middle of n_box.
    zenith_init: str = "stereo"
    #: DoP below which a view carries no usable phase; None uses solver.degenerate_dop
    dop_floor: Optional[float] = None
    #: spline order used to resample non-reference views
    interp_order: int = 3
    threads: Optional[int] = None
    backend: Optional[str] = None

    def __post_init__(self):
        object.__setattr__(self, "mode", Mode(self.mode))
        if not self.assumed_n > 1:
            raise DomainError("assumed_n must exceed 1")
        if self.azimuth_convention not in ("specular_phase", "diffuse_shift"):
            raise DomainError(f"unknown azimuth_convention {self.azimuth_convention!r}")
        if self.disambiguation not in ("convex_outward", "none"):
            raise DomainError(f"unknown disambiguation {self.disambiguation!r}")
        if self.zenith_init not in ZENITH_INITS:
            raise DomainError(f"unknown zenith_init {self.zenith_init!r}")
        if not 0 <= self.interp_order <= 5:
            raise DomainError("interp_order must lie in [0, 5]")

    @property
    def floor(self) -> float:
        return self.solver.degenerate_dop if self.dop_floor is None else float(self.dop_floor)


@dataclass
class NormalMap:
    normals: np.ndarray
    mask: np.ndarray
    frame: str = "world"


@dataclass
class Metrics:
    normal_mse: float
    mean_angular_error_deg: float
    index_mae: float = math.nan
    diffuse_rel_error: float = math.nan
    pixels: int = 0


@dataclass
class PipelineResult:
    normals: list
    diffuse: Optional[np.ndarray]
    index: Optional[np.ndarray]
    diagnostics: dict
    #: (V, H, W) maps, NaN off the track mask
    zenith: np.ndarray = None
    azimuth: np.ndarray = None
    dop: np.ndarray = None
    intensity: np.ndarray = None
    #: solver status per pixel, -1 where no track
    status: np.ndarray = None

    def __iter__(self):
        return iter((self.normals, self.diffuse, self.index, self.diagnostics))


def compose_normal(azimuth, zenith):
    """Camera-frame unit normal (sin t cos a, sin t sin a, cos t)."""
    a = np.asarray(azimuth, dtype=float)
    t = np.asarray(zenith, dtype=float)
    if np.any(t < 0) or np.any(t > 0.5 * np.pi):
        raise DomainError("zenith must lie in [0, pi/2]")
    s = np.sin(t)
    n = np.stack(np.broadcast_arrays(s * np.cos(a), s * np.sin(a), np.cos(t)), axis=-1)
    return n / np.linalg.norm(n, axis=-1, keepdims=True)


def _outward(phase, cols, rows, cc, rc):
    """Pick phase or phase + pi so the azimuth points away from (cc, rc)."""
    away = np.arctan2(-(rows - rc), cols - cc)
    flip = np.cos(phase - away) < 0
    az = np.where(flip, phase + np.pi, phase)
    return np.where(az > np.pi, az - 2 * np.pi, az)


def disambiguate_azimuth(phase_map, mask, policy="convex_outward"):
    """Resolve the pi ambiguity of a phase map in [0, pi).

    ``convex_outward`` assumes a convex object and orients every azimuth
    away from the mask centroid; it is a heuristic. ``none`` returns the
    phase unchanged, leaving the ambiguity in place.
    """
    phase = np.asarray(phase_map, dtype=float)
    if policy == "none":
        return phase.copy()
    if policy != "convex_outward":
        raise DomainError(f"unknown policy {policy!r}")
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        return phase.copy()
    rows, cols = np.indices(phase.shape)
    rc = rows[mask].mean()
    cc = cols[mask].mean()
    return np.where(mask, _outward(phase, cols, rows, cc, rc), phase)


def _gradient(z, valid, axis):
    """Finite differences that stay inside ``valid``; NaN where no neighbour is valid."""
    zp = np.roll(z, -1, axis)
    zm = np.roll(z, 1, axis)
    vp = np.roll(valid, -1, axis)
    vm = np.roll(valid, 1, axis)
    idx = np.indices(z.shape)[axis]
    vp &= idx < z.shape[axis] - 1
    vm &= idx > 0
    g = np.full(z.shape, np.nan)
    both = valid & vp & vm
    g[both] = 0.5 * (zp - zm)[both]
    fwd = valid & vp & ~vm
    g[fwd] = (zp - z)[fwd]
    bwd = valid & vm & ~vp
    g[bwd] = (z - zm)[bwd]
    return g


def stereo_normals(correspondences: CorrespondenceMap, rotations, image_sizes):
    """World normals from depth triangulated across orthographic views.

    ``rotations[v]`` maps world to camera v. Each camera looks at the world
    origin with a centred principal point, so a pixel's camera-frame x and y
    (in pixel units) are linear in the world point and one least-squares
    solve per pixel recovers it. Normals are the reference-view depth
    gradient rotated to the world frame.
    """
    coords = correspondences.coords
    V, H, W, _ = coords.shape
    ref = correspondences.reference_view
    rows = []
    rhs = []
    for v in range(V):
        h, w = image_sizes[v]
        R = np.asarray(rotations[v], dtype=float)
        rows.extend([R[0], R[1]])
        rhs.append(coords[v, ..., 0] - (w / 2 - 0.5))
        rhs.append((h / 2 - 0.5) - coords[v, ..., 1])
    A = np.array(rows)
    b = np.stack(rhs, axis=-1)
    P = b @ np.linalg.pinv(A).T
    Rr = np.asarray(rotations[ref], dtype=float)
    z = (P @ Rr.T)[..., 2]
    valid = correspondences.mask
    dzdx = _gradient(np.where(valid, z, 0.0), valid, 1)
    dzdy = -_gradient(np.where(valid, z, 0.0), valid, 0)
    ncam = np.stack([-dzdx, -dzdy, np.ones_like(z)], axis=-1)
    ncam /= np.linalg.norm(ncam, axis=-1, keepdims=True)
    ok = valid & np.isfinite(ncam).all(axis=-1)
    world = ncam @ Rr
    world[~ok] = np.nan
    return world, ok


def _sample(image, col, row, order):
    ic = np.rint(col)
    ir = np.rint(row)
    if np.array_equal(ic, col) and np.array_equal(ir, row):
        return image[ir.astype(np.int64), ic.astype(np.int64)]
    return ndimage.map_coordinates(image, [row, col], order=order, mode="nearest")


def _identity_correspondences(shape):
    h, w = shape
    cols, rows = np.meshgrid(np.arange(w, dtype=float), np.arange(h, dtype=float))
    return CorrespondenceMap(np.stack([cols, rows], axis=-1)[None], reference_view=0)


def run_pipeline(stacks: Sequence[PolarizedStack], correspondences: Optional[CorrespondenceMap],
                 cfg: PipelineConfig = PipelineConfig(), rotations=None) -> PipelineResult:
    """Recover per-view normals (and, in corrected mode, diffuse and index maps).

    ``rotations`` are the world-to-camera matrices of the views; identity is
    assumed when omitted. The stereo zenith initialization needs the true rig.
    """
    V = len(stacks)
    if V < 1:
        raise InsufficientViews("no stacks given")
    corrected = cfg.mode == Mode.CORRECTED_MIXED
    if corrected and V < 2:
        raise InsufficientViews("corrected_mixed needs at least two views")
    if correspondences is None:
        if V != 1:
            raise ValueError("correspondences are required with more than one view")
        correspondences = _identity_correspondences(stacks[0].shape)
    if correspondences.num_views != V:
        raise ValueError(f"correspondences cover {correspondences.num_views} views, got {V} stacks")
    if rotations is None:
        rotations = [np.eye(3)] * V
    rotations = [np.asarray(R, dtype=float) for R in rotations]
    ref = correspondences.reference_view
    H, W = stacks[ref].shape
    if correspondences.coords.shape[1:3] != (H, W):
        raise ValueError("correspondence grid does not match the reference view")

    track = correspondences.mask
    rr, cc = np.nonzero(track)
    M = rr.size
    floor = cfg.floor

    # per-view sinusoid fits at every tracked point
    I = np.zeros((V, M))
    rho = np.zeros((V, M))
    phase = np.zeros((V, M))
    az = np.zeros((V, M))
    for v, st in enumerate(stacks):
        col = correspondences.coords[v, rr, cc, 0]
        row = correspondences.coords[v, rr, cc, 1]
        samples = np.stack([_sample(np.asarray(im, dtype=float), col, row, cfg.interp_order)
                            for im in st.images])
        fit = fit_sinusoid_stack(st.angles, samples, eps=floor)
        tot = fit["i_max"] + fit["i_min"]
        I[v] = 0.5 * tot
        with np.errstate(invalid="ignore", divide="ignore"):
            rho[v] = np.where(tot > 0, (fit["i_max"] - fit["i_min"]) / tot, 0.0)
        ph = fit["phase"]
        if cfg.azimuth_convention == "diffuse_shift":
            ph = np.mod(ph + 0.5 * np.pi, np.pi)
        phase[v] = ph
        if cfg.disambiguation == "convex_outward" and M:
            az[v] = _outward(ph, col, row, col.mean(), row.mean())
        else:
            az[v] = ph
    lit = np.all(I > 0, axis=0)
    informative = (rho >= floor) & (I > 0)

    status = np.full(M, -1, dtype=np.int64)
    diffuse_t = index_t = None
    zen = np.full((V, M), np.nan)
    diag = {"mode": cfg.mode.value, "views": V, "tracked_pixels": int(M), "unlit_pixels": int((~lit).sum()),
            "dop_floor": floor, "azimuth_ambiguous": cfg.disambiguation == "none"}
    if corrected:
        if cfg.zenith_init == "stereo":
            sizes = [s.shape for s in stacks]
            nw, ok = stereo_normals(correspondences, rotations, sizes)
            th0 = np.full((V, M), np.nan)
            for v in range(V):
                cosz = nw[rr, cc] @ rotations[v][2]
                th0[v] = np.arccos(np.clip(cosz, -1.0, 1.0))
            th0[:, ~ok[rr, cc]] = np.nan
        else:
            th0 = np.full((V, M), np.nan)
        out = solve_arrays(I.T, np.minimum(rho, 1.0).T, th0.T,
                           replace(cfg.solver, degenerate_dop=floor),
                           threads=cfg.threads, backend=cfg.backend)
        status = out["status"]
        status[~lit] = Status.DEGENERATE
        diffuse_t = np.where(lit, out["diffuse"], np.mean(I, axis=0))
        index_t = out["index"]
        zen = out["zeniths"].T.copy()
        solved = status != Status.DEGENERATE
        valid = informative & solved[None, :]
        counts = {s.name.lower(): int((status == s).sum()) for s in Status}
        diag.update(status_counts=counts,
                    degenerate_fraction=float(counts["degenerate"] / M) if M else 1.0,
                    zenith_init=cfg.zenith_init, backend=cfg.backend or _backend.BACKEND)
    else:
        model = "specular" if cfg.mode == Mode.UNCORRECTED_SPECULAR else "diffuse"
        for v in range(V):
            zen[v] = estimate_zenith_naive(np.minimum(rho[v], 1.0), cfg.assumed_n, model,
                                           cfg.solver.branch, clip=True)
        valid = informative
        diag.update(degenerate_fraction=float((~informative.any(axis=0)).mean()) if M else 1.0)

    normals = []
    zen_maps = np.full((V, H, W), np.nan)
    az_maps = np.full((V, H, W), np.nan)
    dop_maps = np.full((V, H, W), np.nan)
    int_maps = np.full((V, H, W), np.nan)
    failed = 0
    for v in range(V):
        ok = valid[v] & np.isfinite(zen[v])
        ncam = compose_normal(az[v], np.clip(np.nan_to_num(zen[v]), 0.0, 0.5 * np.pi))
        nw = ncam @ rotations[v]
        ok &= np.isfinite(nw).all(axis=1)
        failed += int((valid[v] & ~ok).sum())
        nmap = np.zeros((H, W, 3))
        mask = np.zeros((H, W), dtype=bool)
        nmap[rr[ok], cc[ok]] = nw[ok]
        mask[rr[ok], cc[ok]] = True
        normals.append(NormalMap(nmap, mask))
        zen_maps[v, rr, cc] = zen[v]
        az_maps[v, rr, cc] = az[v]
        dop_maps[v, rr, cc] = rho[v]
        int_maps[v, rr, cc] = I[v]
    diag["failed_pixels"] = failed
    diag["normal_pixels"] = [int(n.mask.sum()) for n in normals]

    diffuse = index = None
    status_map = np.full((H, W), -1, dtype=np.int64)
    status_map[rr, cc] = status
    if corrected:
        diffuse = np.full((H, W), np.nan)
        diffuse[rr, cc] = diffuse_t
        index = np.full((H, W), np.nan)
        keep = status != Status.DEGENERATE
        index[rr[keep], cc[keep]] = index_t[keep]
    return PipelineResult(normals, diffuse, index, diag, zenith=zen_maps, azimuth=az_maps,
                          dop=dop_maps, intensity=int_maps, status=status_map)


def angular_error_deg(a, b):
    # atan2 stays accurate near 0 and 180 degrees, where arccos loses digits
    cross = np.linalg.norm(np.cross(a, b), axis=-1)
    return np.degrees(np.arctan2(cross, np.sum(a * b, axis=-1)))


def evaluate(normals: NormalMap, gt: GroundTruth, index=None, diffuse=None, mask=None) -> Metrics:
    """Normal, index and diffuse errors over the intersection of the masks.

    ``normal_mse`` is the mean squared length of n_hat - n_gt. ``index`` and
    ``diffuse`` are optional maps with NaN marking missing estimates.
    """
    if normals.normals.shape != gt.normals.shape:
        raise ValueError(f"shape mismatch {normals.normals.shape} vs {gt.normals.shape}")
    m = normals.mask & gt.mask
    if mask is not None:
        m &= mask
    if not m.any():
        raise EmptyIntersection("estimate and ground-truth masks do not overlap")
    a = normals.normals[m]
    b = gt.normals[m]
    mse = float(np.mean(np.sum((a - b) ** 2, axis=-1)))
    ang = float(np.mean(angular_error_deg(a, b)))
    index_mae = diffuse_rel = math.nan
    if index is not None:
        index = np.asarray(index, dtype=float)
        sel = gt.mask & np.isfinite(index) & (True if mask is None else mask)
        if sel.any():
            index_mae = float(np.mean(np.abs(index[sel] - gt.index_map[sel])))
    if diffuse is not None:
        diffuse = np.asarray(diffuse, dtype=float)
        sel = gt.mask & np.isfinite(diffuse) & (gt.diffuse_image > 0) & (True if mask is None else mask)
        if sel.any():
            diffuse_rel = float(np.mean(np.abs(diffuse[sel] - gt.diffuse_image[sel]) / gt.diffuse_image[sel]))
    return Metrics(mse, ang, index_mae, diffuse_rel, int(m.sum()))
