"""Analytic multiview polarimetric renderer with exact ground truth.

Cameras are orthographic. Camera frame: +x right, +y up, +z toward the
camera; image rows run top to bottom. A pixel (col, row) of a W x H image
sits at camera-plane coordinates

    x = (col + 0.5 - W/2) * pixel_size,   y = (H/2 - row - 0.5) * pixel_size

with ``pixel_size = 2 * extent / min(W, H)``. Each view's rotation maps world
vectors to camera vectors, so the direction toward camera ``i`` in world
coordinates is ``R_i.T @ (0, 0, 1)``.

Shading uses one distant unpolarized light: Lambertian diffuse and a Phong
specular lobe. Diffuse light is unpolarized unless ``model_violation`` > 0,
in which case that fraction of it is polarized by the diffuse Fresnel model
with its phase rotated by pi/2.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Union

import numpy as np

from .errors import DegenerateSampling, DomainError, EmptyMask
from .polar import diffuse_dop, sinusoid_design, specular_dop

DEFAULT_POLARIZER_ANGLES = (0.0, np.pi / 4, np.pi / 2)


@dataclass(frozen=True)
class Sphere:
    center: tuple = (0.0, 0.0, 0.0)
    radius: float = 1.0

    def __post_init__(self):
        if not self.radius > 0:
            raise DomainError("sphere radius must be positive")


@dataclass(frozen=True)
class Plane:
    """Surface points x with ``normal . x == offset``; ``normal`` is normalized on use."""

    normal: tuple = (0.0, 0.0, 1.0)
    offset: float = 0.0


@dataclass(frozen=True)
class Checker:
    """Checkerboard texture over the surface's (u, v) parameterization, ``cells`` per unit."""

    low: float
    high: float
    cells: int = 8


Texture = Union[float, Checker]


@dataclass(frozen=True)
class MaterialSpec:
    n_true: float = 1.5
    diffuse_albedo: Texture = 0.5
    specular_strength: Texture = 0.5
    specular_exponent: float = 4.0

    def __post_init__(self):
        if not self.n_true > 1:
            raise DomainError("n_true must exceed 1")
        if not self.specular_exponent > 0:
            raise DomainError("specular_exponent must be positive")


@dataclass(frozen=True)
class ViewSpec:
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    polarizer_angles: tuple = DEFAULT_POLARIZER_ANGLES

    def __post_init__(self):
        R = np.asarray(self.rotation, dtype=float)
        if R.shape != (3, 3):
            raise DomainError("rotation must be 3x3")
        if not np.allclose(R @ R.T, np.eye(3), atol=1e-9) or not np.isclose(np.linalg.det(R), 1.0, atol=1e-9):
            raise DomainError("rotation must be orthonormal with det +1")
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "polarizer_angles", tuple(float(a) for a in self.polarizer_angles))
        try:
            sinusoid_design(self.polarizer_angles)
        except DegenerateSampling as exc:
            raise DomainError(str(exc)) from exc

    @property
    def direction(self) -> np.ndarray:
        """Unit vector from the scene toward the camera, world frame."""
        return self.rotation[2].copy()

    def __eq__(self, other):
        if not isinstance(other, ViewSpec):
            return NotImplemented
        return np.array_equal(self.rotation, other.rotation) and self.polarizer_angles == other.polarizer_angles

    __hash__ = None


@dataclass(frozen=True)
class SceneSpec:
    geometry: Union[Sphere, Plane]
    material: MaterialSpec
    views: tuple
    image_size: tuple = (128, 128)
    noise_sigma: float = 0.0
    model_violation: float = 0.0
    light_direction: tuple = (0.0, 0.0, 1.0)
    light_intensity: float = 1.0
    extent: float = 1.1
    name: str = "scene"

    def __post_init__(self):
        object.__setattr__(self, "views", tuple(self.views))
        if len(self.views) < 1:
            raise DomainError("scene needs at least one view")
        w, h = self.image_size
        if int(w) <= 0 or int(h) <= 0:
            raise DomainError("image_size must be positive")
        object.__setattr__(self, "image_size", (int(w), int(h)))
        if self.noise_sigma < 0:
            raise DomainError("noise_sigma must be non-negative")
        if not 0.0 <= self.model_violation <= 1.0:
            raise DomainError("model_violation must lie in [0, 1]")
        if not self.extent > 0:
            raise DomainError("extent must be positive")
        if np.linalg.norm(self.light_direction) == 0:
            raise DomainError("light_direction must be non-zero")

    @property
    def pixel_size(self) -> float:
        return 2.0 * self.extent / min(self.image_size)


def rotation_about_vertical(angle: float) -> np.ndarray:
    """World-to-camera rotation for a camera orbited by ``angle`` about world +y."""
    c, s = np.cos(angle), np.sin(angle)
    orbit = np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])
    return orbit.T


def camera_ring(count: int, increment: float, polarizer_angles=DEFAULT_POLARIZER_ANGLES):
    """Orthographic views orbiting the origin about the vertical axis in equal steps."""
    if count < 1:
        raise DomainError("count must be at least 1")
    return [ViewSpec(rotation_about_vertical(k * increment), polarizer_angles) for k in range(count)]


@dataclass
class PolarizedStack:
    images: list
    angles: tuple
    view_index: int = 0
    exposure_scale: float = 1.0

    def __post_init__(self):
        if len(self.images) != len(self.angles) or len(self.angles) < 3:
            raise DomainError("need one image per polarizer angle and at least 3 angles")
        shapes = {np.shape(im) for im in self.images}
        if len(shapes) != 1:
            raise DomainError("stack images must share dimensions")

    @property
    def shape(self):
        return np.shape(self.images[0])

    def as_array(self) -> np.ndarray:
        return np.stack([np.asarray(im, dtype=float) for im in self.images])


@dataclass
class CorrespondenceMap:
    """Locations of each reference-view pixel's surface point in every view.

    ``coords[v, row, col] = (x, y)`` gives continuous pixel coordinates
    (x = column, y = row) in view ``v``, NaN where the point is not tracked.
    The reference view maps each pixel onto itself.
    """

    coords: np.ndarray
    reference_view: int = 0

    @property
    def num_views(self) -> int:
        return self.coords.shape[0]

    @property
    def mask(self) -> np.ndarray:
        return np.all(np.isfinite(self.coords[..., 0]), axis=0)


@dataclass
class GroundTruth:
    """Ground-truth maps on the reference view's pixel grid."""

    normals: np.ndarray
    zenith_per_view: np.ndarray
    diffuse_image: np.ndarray
    specular_per_view: np.ndarray
    index_map: np.ndarray
    mask: np.ndarray


def _texture(tex, uv):
    if isinstance(tex, Checker):
        k = np.floor(uv[..., 0] * tex.cells).astype(np.int64) + np.floor(uv[..., 1] * tex.cells).astype(np.int64)
        return np.where(k % 2 == 0, tex.low, tex.high)
    return np.full(uv.shape[:-1], float(tex))


def _surface_uv(geometry, points):
    if isinstance(geometry, Sphere):
        d = (points - np.asarray(geometry.center)) / geometry.radius
        u = 0.5 + np.arctan2(d[..., 0], d[..., 2]) / (2 * np.pi)
        v = 0.5 + np.arcsin(np.clip(d[..., 1], -1, 1)) / np.pi
        return np.stack([u, v], axis=-1)
    nrm = np.asarray(geometry.normal, dtype=float)
    nrm = nrm / np.linalg.norm(nrm)
    helper = np.array([1.0, 0.0, 0.0]) if abs(nrm[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    e1 = np.cross(nrm, helper)
    e1 /= np.linalg.norm(e1)
    e2 = np.cross(nrm, e1)
    return np.stack([points @ e1, points @ e2], axis=-1)


def _pixel_grid(scene):
    w, h = scene.image_size
    s = scene.pixel_size
    cols = np.arange(w)
    rows = np.arange(h)
    x = (cols + 0.5 - w / 2) * s
    y = (h / 2 - rows - 0.5) * s
    return np.meshgrid(x, y)


def world_to_pixel(scene, view: ViewSpec, points):
    """Continuous (col, row) of world points in ``view``."""
    w, h = scene.image_size
    s = scene.pixel_size
    p = points @ view.rotation.T
    col = p[..., 0] / s + w / 2 - 0.5
    row = h / 2 - 0.5 - p[..., 1] / s
    return col, row


def intersect(scene, view: ViewSpec):
    """Surface hit per pixel: (mask, world points, world normals)."""
    X, Y = _pixel_grid(scene)
    R = view.rotation
    g = scene.geometry
    if isinstance(g, Sphere):
        c = R @ np.asarray(g.center, dtype=float)
        dx = X - c[0]
        dy = Y - c[1]
        disc = g.radius ** 2 - dx * dx - dy * dy
        mask = disc > 0
        z = c[2] + np.sqrt(np.where(mask, disc, 0.0))
        pc = np.stack([X, Y, z], axis=-1)
        points = pc @ R
        normals = (points - np.asarray(g.center, dtype=float)) / g.radius
    else:
        nw = np.asarray(g.normal, dtype=float)
        nw = nw / np.linalg.norm(nw)
        nc = R @ nw
        if abs(nc[2]) < 1e-12:
            mask = np.zeros(X.shape, dtype=bool)
            z = np.zeros_like(X)
        else:
            z = (g.offset - nc[0] * X - nc[1] * Y) / nc[2]
            mask = np.ones(X.shape, dtype=bool)
        pc = np.stack([X, Y, z], axis=-1)
        points = pc @ R
        sign = 1.0 if nc[2] >= 0 else -1.0
        normals = np.broadcast_to(sign * nw, points.shape).copy()
    facing = normals @ view.direction > 0
    mask &= facing
    # renormalize so unit length holds to rounding
    normals = normals / np.linalg.norm(normals, axis=-1, keepdims=True)
    return mask, points, normals


def shade(scene, view: ViewSpec, points, normals):
    """Noiseless per-point model quantities for one view.

    Returns a dict with diffuse, specular, zenith, azimuth (camera frame),
    and the sinusoid basis coefficients c0, c1, c2.
    """
    m = scene.material
    L = np.asarray(scene.light_direction, dtype=float)
    L = L / np.linalg.norm(L)
    V = view.direction
    uv = _surface_uv(scene.geometry, points)
    ndl = normals @ L
    lit = ndl > 0
    diffuse = _texture(m.diffuse_albedo, uv) * np.where(lit, ndl, 0.0) * scene.light_intensity
    refl = 2.0 * ndl[..., None] * normals - L
    rdv = np.clip(refl @ V, 0.0, None)
    specular = np.where(lit, _texture(m.specular_strength, uv) * rdv ** m.specular_exponent, 0.0)
    specular = specular * scene.light_intensity
    cos_z = np.clip(normals @ V, -1.0, 1.0)
    zenith = np.arccos(cos_z)
    ncam = normals @ view.rotation.T
    azimuth = np.arctan2(ncam[..., 1], ncam[..., 0])
    zs = np.clip(zenith, 0.0, np.nextafter(0.5 * np.pi, 0))
    rho_s = np.asarray(specular_dop(zs, m.n_true))
    rho_d = np.asarray(diffuse_dop(zs, m.n_true))
    amp = specular * rho_s - scene.model_violation * diffuse * rho_d
    c0 = diffuse + specular
    return {
        "diffuse": diffuse,
        "specular": specular,
        "zenith": zenith,
        "azimuth": azimuth,
        "c0": c0,
        "c1": amp * np.cos(2 * azimuth),
        "c2": amp * np.sin(2 * azimuth),
    }


def render_views(scene: SceneSpec, rng_seed: int = 0):
    """Render every view's polarizer stack plus ground truth and correspondences.

    Returns
    -------
    stacks : list of PolarizedStack
    truth : GroundTruth
        On the pixel grid of view 0.
    corr : CorrespondenceMap
    """
    rng = np.random.default_rng(rng_seed)
    w, h = scene.image_size
    stacks = []
    masks = []
    for vi, view in enumerate(scene.views):
        mask, points, normals = intersect(scene, view)
        q = shade(scene, view, points, normals)
        A = sinusoid_design(view.polarizer_angles)
        images = []
        for k in range(A.shape[0]):
            img = A[k, 0] * q["c0"] + A[k, 1] * q["c1"] + A[k, 2] * q["c2"]
            img = np.where(mask, img, 0.0)
            if scene.noise_sigma > 0:
                img = img * (1.0 + scene.noise_sigma * rng.standard_normal(img.shape))
            images.append(img)
        stacks.append(PolarizedStack(images, view.polarizer_angles, view_index=vi))
        masks.append(mask)

    ref = scene.views[0]
    mask0, points0, normals0 = intersect(scene, ref)
    if not mask0.any():
        raise EmptyMask("geometry projects to zero pixels in the reference view")
    coords = np.full((len(scene.views), h, w, 2), np.nan)
    track = mask0.copy()
    zen = np.zeros((len(scene.views), h, w))
    spec = np.zeros((len(scene.views), h, w))
    diffuse_ref = None
    for vi, view in enumerate(scene.views):
        col, row = world_to_pixel(scene, view, points0)
        visible = mask0 & (normals0 @ view.direction > 0)
        if vi == 0:
            col, row = np.meshgrid(np.arange(w, dtype=float), np.arange(h, dtype=float))
        else:
            visible &= _bilinear_support(masks[vi], col, row)
        track &= visible
        coords[vi, ..., 0] = col
        coords[vi, ..., 1] = row
        q = shade(scene, view, points0, normals0)
        zen[vi] = q["zenith"]
        spec[vi] = q["specular"]
        if vi == 0:
            diffuse_ref = q["diffuse"]
    coords[:, ~track] = np.nan
    if not track.any():
        raise EmptyMask("no surface point is visible in every view")
    truth = GroundTruth(
        normals=np.where(track[..., None], normals0, 0.0),
        zenith_per_view=np.where(track, zen, 0.0),
        diffuse_image=np.where(track, diffuse_ref, 0.0),
        specular_per_view=np.where(track, spec, 0.0),
        index_map=np.where(track, scene.material.n_true, 0.0),
        mask=track,
    )
    return stacks, truth, CorrespondenceMap(coords, reference_view=0)


def _bilinear_support(mask, col, row):
    """True where all four bilinear neighbours of (col, row) lie on ``mask``."""
    h, w = mask.shape
    c0 = np.floor(np.nan_to_num(col, nan=-10.0)).astype(np.int64)
    r0 = np.floor(np.nan_to_num(row, nan=-10.0)).astype(np.int64)
    inside = (c0 >= 0) & (r0 >= 0) & (c0 + 1 < w) & (r0 + 1 < h)
    c0c = np.clip(c0, 0, w - 2)
    r0c = np.clip(r0, 0, h - 2)
    ok = mask[r0c, c0c] & mask[r0c, c0c + 1] & mask[r0c + 1, c0c] & mask[r0c + 1, c0c + 1]
    return inside & ok
