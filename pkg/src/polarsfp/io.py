"""On-disk formats: PFM images, JSON scenes and correspondences, CSV metrics.

PFM
    ``Pf`` (one channel) or ``PF`` (three channels), then ``width height``,
    then a scale whose sign gives the byte order (negative means little
    endian), each on its own line, followed by float32 rows from the bottom
    of the image to the top. Writes are always little endian with scale
    ``-1.0``. Subnormal float32 values are flushed to a zero of the same
    sign on write, so round trips are bit exact for everything else.

Scene JSON
    See ``SCENE_SCHEMA``. Unknown keys are rejected; optional keys take the
    defaults of :class:`~polarsfp.scene.SceneSpec`.
"""
from __future__ import annotations

import csv
import io as _io
import json
import math
import os
from typing import Iterable

import jsonschema
import numpy as np

from .errors import MalformedHeader, SchemaError, TruncatedData
from .scene import Checker, CorrespondenceMap, MaterialSpec, Plane, SceneSpec, Sphere, ViewSpec, camera_ring

SCHEMA_VERSION = 1

METRICS_HEADER = ("scene", "mode", "normal_mse", "angular_err_deg", "index_mae", "diffuse_rel_err")

_F32_TINY = np.finfo(np.float32).tiny


def flush_subnormals(image: np.ndarray) -> np.ndarray:
    a = np.asarray(image, dtype=np.float32)
    sub = (a != 0) & (np.abs(a) < _F32_TINY)
    if sub.any():
        a = a.copy()
        a[sub] = np.copysign(np.float32(0), a[sub])
    return a


def encode_pfm(image) -> bytes:
    a = flush_subnormals(image)
    if a.ndim == 2:
        magic = b"Pf"
    elif a.ndim == 3 and a.shape[2] == 3:
        magic = b"PF"
    else:
        raise ValueError(f"PFM holds (H, W) or (H, W, 3) images, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValueError("PFM writer requires finite values")
    h, w = a.shape[:2]
    if h == 0 or w == 0:
        raise ValueError("image has a zero dimension")
    header = b"%s\n%d %d\n-1.0\n" % (magic, w, h)
    return header + np.ascontiguousarray(a[::-1], dtype="<f4").tobytes()


def _header_line(buf, pos):
    end = buf.find(b"\n", pos)
    if end < 0:
        raise MalformedHeader("PFM header ends early")
    return buf[pos:end].strip(), end + 1


def decode_pfm(buf: bytes) -> np.ndarray:
    magic, pos = _header_line(buf, 0)
    if magic == b"Pf":
        channels = 1
    elif magic == b"PF":
        channels = 3
    else:
        raise MalformedHeader(f"bad PFM magic {magic[:8]!r}")
    dims, pos = _header_line(buf, pos)
    try:
        w, h = (int(t) for t in dims.split())
    except ValueError:
        raise MalformedHeader(f"bad PFM dimensions {dims[:32]!r}") from None
    if w <= 0 or h <= 0:
        raise MalformedHeader(f"PFM dimensions must be positive, got {w} x {h}")
    scale_s, pos = _header_line(buf, pos)
    try:
        scale = float(scale_s)
    except ValueError:
        raise MalformedHeader(f"bad PFM scale {scale_s[:32]!r}") from None
    if scale == 0 or not math.isfinite(scale):
        raise MalformedHeader("PFM scale must be finite and non-zero")
    count = w * h * channels
    need = 4 * count
    if len(buf) - pos < need:
        raise TruncatedData(f"PFM payload has {len(buf) - pos} bytes, expected {need}")
    dtype = "<f4" if scale < 0 else ">f4"
    data = np.frombuffer(buf, dtype=dtype, count=count, offset=pos).astype(np.float32)
    shape = (h, w) if channels == 1 else (h, w, 3)
    return data.reshape(shape)[::-1].copy()


def write_pfm(path, image) -> None:
    with open(path, "wb") as fh:
        fh.write(encode_pfm(image))


def read_pfm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        return decode_pfm(fh.read())


_VEC3 = {"type": "array", "items": {"type": "number"}, "minItems": 3, "maxItems": 3}
_TEXTURE = {
    "oneOf": [
        {"type": "number"},
        {
            "type": "object",
            "additionalProperties": False,
            "required": ["type", "low", "high"],
            "properties": {
                "type": {"const": "checker"},
                "low": {"type": "number"},
                "high": {"type": "number"},
                "cells": {"type": "integer", "minimum": 1},
            },
        },
    ]
}

SCENE_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "required": ["schema_version", "geometry", "views"],
    "properties": {
        "schema_version": {"const": SCHEMA_VERSION},
        "name": {"type": "string"},
        "geometry": {
            "type": "object",
            "required": ["type"],
            "properties": {"type": {"enum": ["sphere", "plane"]}},
            "allOf": [
                {
                    "if": {"properties": {"type": {"const": "sphere"}}},
                    "then": {
                        "additionalProperties": False,
                        "properties": {"type": {}, "center": _VEC3, "radius": {"type": "number", "exclusiveMinimum": 0}},
                    },
                },
                {
                    "if": {"properties": {"type": {"const": "plane"}}},
                    "then": {
                        "additionalProperties": False,
                        "required": ["normal"],
                        "properties": {"type": {}, "normal": _VEC3, "offset": {"type": "number"}},
                    },
                },
            ],
        },
        "material": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "n_true": {"type": "number", "exclusiveMinimum": 1},
                "diffuse_albedo": _TEXTURE,
                "specular_strength": _TEXTURE,
                "specular_exponent": {"type": "number", "exclusiveMinimum": 0},
            },
        },
        "views": {
            "oneOf": [
                {
                    "type": "array",
                    "minItems": 1,
                    "items": {
                        "type": "object",
                        "additionalProperties": False,
                        "required": ["rotation"],
                        "properties": {
                            "rotation": {"type": "array", "items": _VEC3, "minItems": 3, "maxItems": 3},
                            "polarizer_angles": {"type": "array", "items": {"type": "number"}, "minItems": 3},
                        },
                    },
                },
                {
                    "type": "object",
                    "additionalProperties": False,
                    "required": ["ring"],
                    "properties": {
                        "ring": {
                            "type": "object",
                            "additionalProperties": False,
                            "required": ["count", "increment_deg"],
                            "properties": {
                                "count": {"type": "integer", "minimum": 1},
                                "increment_deg": {"type": "number"},
                                "polarizer_angles": {"type": "array", "items": {"type": "number"}, "minItems": 3},
                            },
                        }
                    },
                },
            ]
        },
        "image_size": {"type": "array", "items": {"type": "integer", "minimum": 1}, "minItems": 2, "maxItems": 2},
        "noise_sigma": {"type": "number", "minimum": 0},
        "model_violation": {"type": "number", "minimum": 0, "maximum": 1},
        "light": {
            "type": "object",
            "additionalProperties": False,
            "properties": {"direction": _VEC3, "intensity": {"type": "number", "minimum": 0}},
        },
        "extent": {"type": "number", "exclusiveMinimum": 0},
    },
}


def _schema_error(err: jsonschema.ValidationError) -> SchemaError:
    # descend into the most specific branch of oneOf/anyOf failures
    while err.context:
        err = max(err.context, key=lambda e: (len(e.absolute_path), e.validator == "additionalProperties",
                                                 e.validator != "type"))
    path = ".".join(str(p) for p in err.absolute_path)
    if err.validator == "additionalProperties":
        extra = sorted(set(err.instance) - set(err.schema.get("properties", {})))
        key = extra[0] if extra else "?"
        where = f"{path}.{key}" if path else key
        return SchemaError(f"unknown key {key!r}", where)
    if err.validator == "required" and err.validator_value and "views" in err.validator_value and not path:
        return SchemaError("missing; a scene needs >= 1 view", "views")
    if err.validator == "minItems" and path == "views":
        return SchemaError("a scene needs >= 1 view", "views")
    return SchemaError(err.message, path)


def _texture_from(obj):
    if isinstance(obj, dict):
        return Checker(obj["low"], obj["high"], obj.get("cells", 8))
    return float(obj)


def _texture_to(tex):
    if isinstance(tex, Checker):
        return {"type": "checker", "low": tex.low, "high": tex.high, "cells": tex.cells}
    return float(tex)


def scene_from_dict(doc: dict) -> SceneSpec:
    """Validate ``doc`` against ``SCENE_SCHEMA`` and build the scene."""
    if not isinstance(doc, dict):
        raise SchemaError("scene document must be a JSON object", "")
    errors = sorted(jsonschema.Draft202012Validator(SCENE_SCHEMA).iter_errors(doc),
                    key=lambda e: (-len(list(e.absolute_path)), e.validator != "additionalProperties"))
    if errors:
        unknown = [e for e in errors if e.validator == "additionalProperties"]
        raise _schema_error(unknown[0] if unknown else errors[0])
    g = doc["geometry"]
    if g["type"] == "sphere":
        geometry = Sphere(tuple(g.get("center", (0.0, 0.0, 0.0))), g.get("radius", 1.0))
    else:
        geometry = Plane(tuple(g["normal"]), g.get("offset", 0.0))
    m = doc.get("material", {})
    defaults = MaterialSpec()
    material = MaterialSpec(
        n_true=m.get("n_true", defaults.n_true),
        diffuse_albedo=_texture_from(m.get("diffuse_albedo", defaults.diffuse_albedo)),
        specular_strength=_texture_from(m.get("specular_strength", defaults.specular_strength)),
        specular_exponent=m.get("specular_exponent", defaults.specular_exponent),
    )
    vdoc = doc["views"]
    if isinstance(vdoc, dict):
        ring = vdoc["ring"]
        kw = {}
        if "polarizer_angles" in ring:
            kw["polarizer_angles"] = tuple(ring["polarizer_angles"])
        views = camera_ring(ring["count"], math.radians(ring["increment_deg"]), **kw)
    else:
        views = []
        for k, v in enumerate(vdoc):
            kw = {}
            if "polarizer_angles" in v:
                kw["polarizer_angles"] = tuple(v["polarizer_angles"])
            try:
                views.append(ViewSpec(np.array(v["rotation"], dtype=float), **kw))
            except ValueError as exc:
                raise SchemaError(str(exc), f"views.{k}") from None
    light = doc.get("light", {})
    base = SceneSpec.__dataclass_fields__
    try:
        return SceneSpec(
            geometry=geometry,
            material=material,
            views=views,
            image_size=tuple(doc.get("image_size", base["image_size"].default)),
            noise_sigma=doc.get("noise_sigma", 0.0),
            model_violation=doc.get("model_violation", 0.0),
            light_direction=tuple(light.get("direction", base["light_direction"].default)),
            light_intensity=light.get("intensity", base["light_intensity"].default),
            extent=doc.get("extent", base["extent"].default),
            name=doc.get("name", base["name"].default),
        )
    except ValueError as exc:
        raise SchemaError(str(exc), "") from None


def scene_to_dict(scene: SceneSpec) -> dict:
    g = scene.geometry
    if isinstance(g, Sphere):
        geometry = {"type": "sphere", "center": [float(c) for c in g.center], "radius": float(g.radius)}
    else:
        geometry = {"type": "plane", "normal": [float(c) for c in g.normal], "offset": float(g.offset)}
    m = scene.material
    return {
        "schema_version": SCHEMA_VERSION,
        "name": scene.name,
        "geometry": geometry,
        "material": {
            "n_true": float(m.n_true),
            "diffuse_albedo": _texture_to(m.diffuse_albedo),
            "specular_strength": _texture_to(m.specular_strength),
            "specular_exponent": float(m.specular_exponent),
        },
        "views": [
            {"rotation": np.asarray(v.rotation, dtype=float).tolist(),
             "polarizer_angles": [float(a) for a in v.polarizer_angles]}
            for v in scene.views
        ],
        "image_size": list(scene.image_size),
        "noise_sigma": float(scene.noise_sigma),
        "model_violation": float(scene.model_violation),
        "light": {"direction": [float(c) for c in scene.light_direction], "intensity": float(scene.light_intensity)},
        "extent": float(scene.extent),
    }


def read_scene(path) -> SceneSpec:
    with open(path, "r", encoding="utf-8") as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise SchemaError(f"invalid JSON: {exc}", "") from None
    return scene_from_dict(doc)


def write_scene(scene: SceneSpec, path) -> None:
    # json writes floats with repr, which round-trips exactly
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(scene_to_dict(scene), fh, indent=2)
        fh.write("\n")


def correspondences_to_dict(corr: CorrespondenceMap) -> dict:
    """One entry per tracked reference pixel: its (view, x, y) in every view."""
    V, H, W, _ = corr.coords.shape
    rows, cols = np.nonzero(corr.mask)
    tracks = []
    for r, c in zip(rows.tolist(), cols.tolist()):
        locs = [[v, float(corr.coords[v, r, c, 0]), float(corr.coords[v, r, c, 1])] for v in range(V)]
        tracks.append({"pixel": [c, r], "locations": locs})
    return {
        "schema_version": SCHEMA_VERSION,
        "reference_view": int(corr.reference_view),
        "num_views": int(V),
        "image_size": [int(W), int(H)],
        "tracks": tracks,
    }


def correspondences_from_dict(doc: dict) -> CorrespondenceMap:
    try:
        if doc["schema_version"] != SCHEMA_VERSION:
            raise SchemaError(f"unsupported schema_version {doc['schema_version']!r}", "schema_version")
        V = int(doc["num_views"])
        W, H = (int(x) for x in doc["image_size"])
        ref = int(doc["reference_view"])
        coords = np.full((V, H, W, 2), np.nan)
        for k, tr in enumerate(doc["tracks"]):
            c, r = tr["pixel"]
            for v, x, y in tr["locations"]:
                coords[int(v), r, c] = (x, y)
    except (KeyError, TypeError, ValueError, IndexError) as exc:
        raise SchemaError(f"malformed correspondence file: {exc!r}", "tracks") from None
    return CorrespondenceMap(coords, reference_view=ref)


def write_correspondences(corr: CorrespondenceMap, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(correspondences_to_dict(corr), fh, separators=(",", ":"))
        fh.write("\n")


def read_correspondences(path) -> CorrespondenceMap:
    with open(path, "r", encoding="utf-8") as fh:
        return correspondences_from_dict(json.load(fh))


def _fmt(x) -> str:
    return format(float(x), ".17g")


def format_metrics_csv(rows: Iterable) -> str:
    """CSV text for metric rows.

    Each row is a mapping or sequence with the ``METRICS_HEADER`` fields.
    Floats are written with 17 significant digits; ``nan`` marks a metric
    that was not computed.
    """
    buf = _io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(METRICS_HEADER)
    for row in rows:
        if isinstance(row, dict):
            row = [row[k] for k in METRICS_HEADER]
        scene, mode, *vals = row
        w.writerow([scene, mode, *(_fmt(v) for v in vals)])
    return buf.getvalue()


def write_metrics_csv(rows: Iterable, path) -> None:
    text = format_metrics_csv(rows)
    tmp = f"{path}.tmp{os.getpid()}"
    with open(tmp, "w", encoding="utf-8", newline="") as fh:
        fh.write(text)
    os.replace(tmp, path)


def read_metrics_csv(path) -> list:
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if tuple(header or ()) != METRICS_HEADER:
            raise SchemaError(f"unexpected metrics header {header!r}", "header")
        out = []
        for row in reader:
            scene, mode, *vals = row
            out.append(dict(zip(METRICS_HEADER, [scene, mode, *(float(v) for v in vals)])))
    return out
