"""Command-line driver: ``polarsfp {render,solve,evaluate,experiment}``.

Exit codes: 0 success, 1 computational failure, 2 usage or I/O error.

Render directory layout::

    manifest.json           artifact list with sha256 hashes and the seed
    scene.json              normalized scene document
    correspondences.json
    view{v}/pol{k}.pfm      one image per polarizer angle
    truth/normals.pfm       world normals (3 channels), mask.pfm, diffuse.pfm,
    truth/index.pfm         zenith_view{v}.pfm, specular_view{v}.pfm

Solve directory layout::

    diagnostics.json
    normals_view{v}.pfm, mask_view{v}.pfm, zenith_view{v}.pfm, dop_view{v}.pfm
    diffuse.pfm, index.pfm, index_mask.pfm, status.pfm   (corrected mode only)

False-color previews (written by ``evaluate``): normals map to RGB as
(n + 1) / 2; DoP maps linearly from [0, 1] and index from [1, 2.5] to
black..white. Pixels outside the mask are black. Each preview is written
as a 3-channel PFM and an 8-bit PNG.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import math
import os
import sys
import time
from dataclasses import asdict
from importlib import resources
from pathlib import Path

import numpy as np

from . import __version__
from .errors import InsufficientViews, MalformedHeader, PolarSfPError, SchemaError, TruncatedData
from .io import (
    read_correspondences,
    read_pfm,
    read_scene,
    scene_from_dict,
    scene_to_dict,
    write_correspondences,
    write_metrics_csv,
    write_pfm,
    write_scene,
)
from .pipeline import Metrics, Mode, NormalMap, PipelineConfig, evaluate, run_pipeline
from .scene import CorrespondenceMap, GroundTruth, PolarizedStack, render_views
from .solver import SolverConfig, Status

EXIT_OK, EXIT_COMPUTE, EXIT_USAGE = 0, 1, 2
INDEX_RAMP = (1.0, 2.5)
PRESETS = ("sphere-fig4", "bunny-like", "noise-sweep", "violation-sweep")


class UsageError(Exception):
    pass


class StageError(Exception):
    def __init__(self, stage, exc):
        self.stage = stage
        self.exc = exc
        super().__init__(f"stage {stage!r} failed: {exc}")


def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _write_json(path, obj):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _read_json(path):
    with open(path, "r", encoding="utf-8") as fh:
        return json.load(fh)


# ---------------------------------------------------------------- render

def render_to_dir(scene, out_dir, seed=0) -> dict:
    out = Path(out_dir)
    stacks, truth, corr = render_views(scene, seed)
    (out / "truth").mkdir(parents=True, exist_ok=True)
    files = []

    def put(rel, image):
        write_pfm(out / rel, image)
        files.append(rel)

    views = []
    for v, st in enumerate(stacks):
        (out / f"view{v}").mkdir(exist_ok=True)
        names = []
        for k, im in enumerate(st.images):
            rel = f"view{v}/pol{k}.pfm"
            put(rel, im)
            names.append(rel)
        views.append({
            "rotation": np.asarray(scene.views[v].rotation).tolist(),
            "polarizer_angles": [float(a) for a in st.angles],
            "images": names,
        })
    put("truth/normals.pfm", truth.normals)
    put("truth/mask.pfm", truth.mask.astype(np.float32))
    put("truth/diffuse.pfm", truth.diffuse_image)
    put("truth/index.pfm", truth.index_map)
    for v in range(len(stacks)):
        put(f"truth/zenith_view{v}.pfm", truth.zenith_per_view[v])
        put(f"truth/specular_view{v}.pfm", truth.specular_per_view[v])
    write_scene(scene, out / "scene.json")
    files.append("scene.json")
    write_correspondences(corr, out / "correspondences.json")
    files.append("correspondences.json")
    manifest = {
        "schema_version": 1,
        "generator": f"polarsfp {__version__}",
        "seed": int(seed),
        "scene": "scene.json",
        "name": scene.name,
        "n_true": float(scene.material.n_true),
        "reference_view": int(corr.reference_view),
        "correspondences": "correspondences.json",
        "views": views,
        "artifacts": {rel: _sha256(out / rel) for rel in sorted(files)},
    }
    _write_json(out / "manifest.json", manifest)
    return manifest


def load_render(in_dir):
    """(manifest, stacks, correspondences, rotations) from a render directory."""
    d = Path(in_dir)
    man = _read_json(d / "manifest.json")
    stacks = []
    for v, view in enumerate(man["views"]):
        imgs = [read_pfm(d / rel).astype(np.float64) for rel in view["images"]]
        stacks.append(PolarizedStack(imgs, tuple(view["polarizer_angles"]), view_index=v))
    corr = read_correspondences(d / man["correspondences"])
    rotations = [np.array(view["rotation"], dtype=float) for view in man["views"]]
    return man, stacks, corr, rotations


def load_truth(truth_dir) -> GroundTruth:
    d = Path(truth_dir)
    if (d / "truth").is_dir():
        d = d / "truth"
    mask = read_pfm(d / "mask.pfm") > 0.5
    normals = read_pfm(d / "normals.pfm").astype(np.float64)
    zen = []
    spec = []
    v = 0
    while (d / f"zenith_view{v}.pfm").exists():
        zen.append(read_pfm(d / f"zenith_view{v}.pfm"))
        spec.append(read_pfm(d / f"specular_view{v}.pfm"))
        v += 1
    # stored as float32; renormalize so unit length holds in float64
    nrm = np.linalg.norm(normals, axis=-1, keepdims=True)
    normals = np.where(nrm > 0, normals / np.where(nrm > 0, nrm, 1.0), 0.0)
    return GroundTruth(
        normals=normals,
        zenith_per_view=np.array(zen, dtype=float),
        diffuse_image=read_pfm(d / "diffuse.pfm").astype(np.float64),
        specular_per_view=np.array(spec, dtype=float),
        index_map=read_pfm(d / "index.pfm").astype(np.float64),
        mask=mask,
    )


# ---------------------------------------------------------------- solve

def solve_dir(in_dir, cfg: PipelineConfig, out_dir, views=None) -> dict:
    man, stacks, corr, rotations = load_render(in_dir)
    ref = corr.reference_view
    if views is not None:
        if ref not in views:
            raise UsageError(f"--views must include the reference view {ref}")
        bad = [v for v in views if not 0 <= v < len(stacks)]
        if bad:
            raise UsageError(f"unknown views {bad}; render has {len(stacks)}")
        stacks = [stacks[v] for v in views]
        rotations = [rotations[v] for v in views]
        corr = CorrespondenceMap(corr.coords[list(views)], reference_view=list(views).index(ref))
        # pixels missing only from dropped views become tracks again
        corr.coords[:, ~corr.mask] = np.nan
    res = run_pipeline(stacks, corr, cfg, rotations)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for v, nm in enumerate(res.normals):
        write_pfm(out / f"normals_view{v}.pfm", nm.normals)
        write_pfm(out / f"mask_view{v}.pfm", nm.mask.astype(np.float32))
        write_pfm(out / f"zenith_view{v}.pfm", np.nan_to_num(res.zenith[v]))
        write_pfm(out / f"dop_view{v}.pfm", np.nan_to_num(res.dop[v]))
    if res.index is not None:
        write_pfm(out / "diffuse.pfm", np.nan_to_num(res.diffuse))
        write_pfm(out / "index.pfm", np.nan_to_num(res.index))
        write_pfm(out / "index_mask.pfm", np.isfinite(res.index).astype(np.float32))
        write_pfm(out / "status.pfm", res.status.astype(np.float32))
    diag = dict(res.diagnostics)
    diag["views_used"] = list(views) if views is not None else list(range(len(stacks)))
    diag["source"] = str(in_dir)
    diag["scene"] = man.get("name", "scene")
    diag["config"] = _config_dict(cfg)
    _write_json(out / "diagnostics.json", diag)
    return diag


def _config_dict(cfg: PipelineConfig) -> dict:
    d = asdict(cfg)
    d["mode"] = cfg.mode.value
    d["solver"]["n_box"] = list(cfg.solver.n_box)
    d.pop("threads")
    return d


def nonconverged_fraction(diag) -> float:
    counts = diag.get("status_counts")
    if not counts:
        return 0.0
    solved = sum(counts.values()) - counts["degenerate"]
    return counts["max_iter"] / solved if solved else 0.0


# ---------------------------------------------------------------- evaluate

def _ramp(values, mask, lo, hi):
    g = np.clip((np.nan_to_num(values) - lo) / (hi - lo), 0.0, 1.0)
    return np.where(mask[..., None], np.repeat(g[..., None], 3, axis=-1), 0.0)


def false_color_normals(normals, mask):
    return np.where(mask[..., None], (np.asarray(normals) + 1.0) / 2.0, 0.0)


def write_preview(out_base, rgb):
    """Write ``rgb`` in [0, 1] as ``<base>.pfm`` and an 8-bit ``<base>.png``."""
    from PIL import Image

    rgb = np.clip(np.asarray(rgb, dtype=np.float64), 0.0, 1.0)
    write_pfm(f"{out_base}.pfm", rgb)
    Image.fromarray(np.rint(rgb * 255).astype(np.uint8), mode="RGB").save(f"{out_base}.png")


def _load_result(result_dir, view):
    d = Path(result_dir)
    nf = d / f"normals_view{view}.pfm"
    if not nf.exists():
        raise UsageError(f"{nf} not found")
    normals = read_pfm(nf).astype(np.float64)
    nrm = np.linalg.norm(normals, axis=-1, keepdims=True)
    normals = np.where(nrm > 0, normals / np.where(nrm > 0, nrm, 1.0), 0.0)
    mask = read_pfm(d / f"mask_view{view}.pfm") > 0.5
    index = diffuse = None
    if (d / "index.pfm").exists():
        im = read_pfm(d / "index_mask.pfm") > 0.5
        index = np.where(im, read_pfm(d / "index.pfm").astype(np.float64), np.nan)
        diffuse = read_pfm(d / "diffuse.pfm").astype(np.float64)
        diffuse = np.where(mask | im, diffuse, np.nan)
    dop = read_pfm(d / f"dop_view{view}.pfm") if (d / f"dop_view{view}.pfm").exists() else None
    diag = _read_json(d / "diagnostics.json") if (d / "diagnostics.json").exists() else {}
    return NormalMap(normals, mask), index, diffuse, dop, diag


def evaluate_dirs(result_dir, truth_dir, view=0, extra_mask=None, previews=None):
    nm, index, diffuse, dop, diag = _load_result(result_dir, view)
    gt = load_truth(truth_dir)
    if nm.normals.shape != gt.normals.shape:
        raise UsageError(f"result is {nm.normals.shape[:2]} but truth is {gt.normals.shape[:2]}")
    metrics = evaluate(nm, gt, index=index, diffuse=diffuse, mask=extra_mask)
    if previews is not None:
        p = Path(previews)
        p.mkdir(parents=True, exist_ok=True)
        write_preview(p / f"normals_view{view}", false_color_normals(nm.normals, nm.mask))
        write_preview(p / "normals_truth", false_color_normals(gt.normals, gt.mask))
        if dop is not None:
            write_preview(p / f"dop_view{view}", _ramp(dop, gt.mask, 0.0, 1.0))
        if index is not None:
            write_preview(p / "index", _ramp(index, np.isfinite(index), *INDEX_RAMP))
    return metrics, diag


def metrics_row(scene, mode, m: Metrics):
    return {
        "scene": scene,
        "mode": mode,
        "normal_mse": m.normal_mse,
        "angular_err_deg": m.mean_angular_error_deg,
        "index_mae": m.index_mae,
        "diffuse_rel_err": m.diffuse_rel_error,
    }


# ---------------------------------------------------------------- experiment

def load_preset(name) -> dict:
    if name not in PRESETS:
        raise UsageError(f"unknown preset {name!r}; choose from {', '.join(PRESETS)}")
    text = resources.files("polarsfp.presets").joinpath(f"{name}.json").read_text(encoding="utf-8")
    return json.loads(text)


def _sweep_scenes(preset):
    base = preset["scene"]
    sweep = preset.get("sweep")
    if not sweep:
        yield preset["name"], base, None
        return
    key = sweep["field"]
    for val in sweep["values"]:
        doc = dict(base, **{key: val})
        doc["name"] = f"{preset['name']}-{key}={val:g}"
        yield doc["name"], doc, val


def _stage(name, fn, *a, **kw):
    try:
        return fn(*a, **kw)
    except (UsageError, StageError):
        raise
    except Exception as exc:
        raise StageError(name, exc) from exc


def run_experiment(preset_name, out_dir, seed=0, threads=None, log=print):
    preset = load_preset(preset_name)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    pcfg = preset.get("pipeline", {})
    modes = [Mode.CORRECTED_MIXED, Mode.UNCORRECTED_SPECULAR]
    rows = []
    report = []
    for tag, doc, val in _sweep_scenes(preset):
        scene = _stage("render", scene_from_dict, doc)
        rdir = out / tag / "render"
        _stage("render", render_to_dir, scene, rdir, seed)
        floor = max(SolverConfig.degenerate_dop, pcfg.get("dop_floor_sigmas", 0.0) * scene.noise_sigma)
        masks = {}
        for mode in modes:
            cfg = PipelineConfig(mode=mode, assumed_n=pcfg.get("assumed_n", 1.5), dop_floor=floor, threads=threads)
            _stage(f"solve[{mode.value}]", solve_dir, rdir, cfg, out / tag / mode.value)
            masks[mode] = read_pfm(out / tag / mode.value / "mask_view0.pfm") > 0.5
        common = np.logical_and.reduce(list(masks.values()))
        entry = {"scene": tag, "sweep_value": val}
        for mode in modes:
            m, diag = _stage("evaluate", evaluate_dirs, out / tag / mode.value, rdir, 0, common,
                             out / tag / mode.value / "previews")
            rows.append(metrics_row(tag, mode.value, m))
            entry[mode.value] = metrics_row(tag, mode.value, m)
            if "status_counts" in diag:
                entry["status_counts"] = diag["status_counts"]
        report.append(entry)
    write_metrics_csv(rows, out / "comparison.csv")
    log(format_table(rows))
    summary = {"preset": preset_name, "seed": seed, "results": report}
    if preset.get("sweep"):
        summary["monotonicity"] = monotonicity_report(
            [e["sweep_value"] for e in report], [e["corrected_mixed"]["index_mae"] for e in report],
            preset.get("tolerance", 0.02))
        log(json.dumps(summary["monotonicity"], indent=2))
    _write_json(out / "experiment.json", _jsonable(summary))
    summary["comparison_sha256"] = _sha256(out / "comparison.csv")
    return summary


def monotonicity_report(xs, ys, tolerance):
    """Whether ``ys`` is non-decreasing in ``xs`` and where it first exceeds ``tolerance``."""
    pairs = sorted(zip(xs, ys))
    steps = [b[1] - a[1] for a, b in zip(pairs, pairs[1:])]
    breaking = next((x for x, y in pairs if not y <= tolerance), None)
    return {
        "field_values": [x for x, _ in pairs],
        "index_mae": [y for _, y in pairs],
        "non_decreasing": all(s >= 0 for s in steps),
        "violations": [pairs[i + 1][0] for i, s in enumerate(steps) if s < 0],
        "tolerance": tolerance,
        "first_value_above_tolerance": breaking,
    }


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, float) and not math.isfinite(obj):
        return None
    return obj


def format_table(rows) -> str:
    head = f"{'scene':<36} {'mode':<22} {'normal_mse':>11} {'ang_err_deg':>11} {'index_mae':>10}"
    lines = [head, "-" * len(head)]
    for r in rows:
        lines.append(f"{r['scene']:<36} {r['mode']:<22} {r['normal_mse']:>11.5f} "
                     f"{r['angular_err_deg']:>11.4f} {r['index_mae']:>10.5f}")
    return "\n".join(lines)


# ---------------------------------------------------------------- argparse

def _mode(s):
    try:
        return Mode(s.replace("-", "_"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"invalid mode {s!r}") from None


def _views(s):
    try:
        return [int(t) for t in s.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"--views expects comma-separated integers, got {s!r}") from None


def build_parser():
    p = argparse.ArgumentParser(prog="polarsfp", description=__doc__.split("\n")[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("render", help="render a scene to polarizer-stack PFMs plus ground truth")
    r.add_argument("scene", help="scene JSON")
    r.add_argument("out_dir")
    r.add_argument("--seed", type=int, default=0)

    s = sub.add_parser("solve", help="recover normals (and index) from a render directory")
    s.add_argument("in_dir")
    s.add_argument("--mode", type=_mode, default=Mode.CORRECTED_MIXED,
                   help="uncorrected-specular | uncorrected-diffuse | corrected-mixed")
    s.add_argument("--assumed-n", type=float, default=1.5)
    s.add_argument("--views", type=_views, default=None, help="comma-separated view indices")
    s.add_argument("--out", default=None, help="output directory (default IN_DIR/solve_<mode>)")
    s.add_argument("--azimuth-convention", choices=("specular_phase", "diffuse_shift"), default="specular_phase")
    s.add_argument("--disambiguation", choices=("convex_outward", "none"), default="convex_outward")
    s.add_argument("--zenith-init", choices=("stereo", "naive"), default="stereo")
    s.add_argument("--dop-floor", type=float, default=None)
    s.add_argument("--max-nonconverged", type=float, default=0.5,
                   help="fraction of solved tracks allowed to hit the iteration cap before exit 1")
    d = SolverConfig()
    g = s.add_argument_group("solver")
    g.add_argument("--n-lo", type=float, default=d.n_box[0])
    g.add_argument("--n-hi", type=float, default=d.n_box[1])
    g.add_argument("--max-outer-iters", type=int, default=d.max_outer_iters)
    g.add_argument("--max-inner-iters", type=int, default=d.max_inner_iters)
    g.add_argument("--inner-tol", type=float, default=d.inner_tol)
    g.add_argument("--outer-tol", type=float, default=d.outer_tol)
    g.add_argument("--zenith-floor-deg", type=float, default=math.degrees(d.zenith_floor))
    g.add_argument("--zenith-ceiling-deg", type=float, default=math.degrees(d.zenith_ceiling))
    g.add_argument("--multistart-count", type=int, default=d.multistart_count)
    g.add_argument("--degenerate-dop", type=float, default=d.degenerate_dop)
    g.add_argument("--branch", choices=("below_brewster", "above_brewster"), default=d.branch)
    g.add_argument("--single-pass", action="store_true", help="skip zenith refinement")

    e = sub.add_parser("evaluate", help="compare a solve directory with ground truth")
    e.add_argument("result_dir")
    e.add_argument("truth_dir")
    e.add_argument("--out", default="metrics.csv")
    e.add_argument("--view", type=int, default=0)
    e.add_argument("--previews", default=None, help="preview directory (default next to --out)")

    x = sub.add_parser("experiment", help="render, solve both modes, evaluate and tabulate")
    x.add_argument("preset", choices=PRESETS)
    x.add_argument("--out", default=None, help="output directory (default runs/<preset>)")
    x.add_argument("--seed", type=int, default=0)

    for sp in (r, s, e, x):
        sp.add_argument("--threads", type=int, default=None,
                        help="worker cap (default $POLARSFP_THREADS or CPU count)")
    return p


def _solver_cfg(a) -> SolverConfig:
    return SolverConfig(
        n_box=(a.n_lo, a.n_hi),
        max_outer_iters=a.max_outer_iters,
        inner_tol=a.inner_tol,
        outer_tol=a.outer_tol,
        zenith_floor=math.radians(a.zenith_floor_deg),
        zenith_ceiling=math.radians(a.zenith_ceiling_deg),
        multistart_count=a.multistart_count,
        max_inner_iters=a.max_inner_iters,
        degenerate_dop=a.degenerate_dop,
        refine_zenith=not a.single_pass,
        branch=a.branch,
    )


def _cmd_render(a):
    scene = read_scene(a.scene)
    man = render_to_dir(scene, a.out_dir, a.seed)
    print(f"rendered {len(man['views'])} views of {man['name']!r} to {a.out_dir} (seed {man['seed']})")
    return EXIT_OK


def _cmd_solve(a):
    cfg = PipelineConfig(
        mode=a.mode, assumed_n=a.assumed_n, azimuth_convention=a.azimuth_convention,
        disambiguation=a.disambiguation, solver=_solver_cfg(a), zenith_init=a.zenith_init,
        dop_floor=a.dop_floor, threads=a.threads,
    )
    out = a.out or os.path.join(a.in_dir, f"solve_{cfg.mode.value}")
    t0 = time.perf_counter()
    diag = solve_dir(a.in_dir, cfg, out, a.views)
    print(f"solved {diag['tracked_pixels']} tracks in {time.perf_counter() - t0:.2f}s -> {out}")
    if "status_counts" in diag:
        print("status: " + ", ".join(f"{k}={v}" for k, v in diag["status_counts"].items()))
    frac = nonconverged_fraction(diag)
    if frac > a.max_nonconverged:
        print(f"error: {frac:.1%} of solved tracks did not converge (limit {a.max_nonconverged:.1%})",
              file=sys.stderr)
        return EXIT_COMPUTE
    return EXIT_OK


def _cmd_evaluate(a):
    previews = a.previews or os.path.join(os.path.dirname(os.path.abspath(a.out)), "previews")
    m, diag = evaluate_dirs(a.result_dir, a.truth_dir, a.view, previews=previews)
    truth_man = Path(a.truth_dir) / "manifest.json"
    scene = _read_json(truth_man).get("name", "scene") if truth_man.exists() else diag.get("scene", "scene")
    row = metrics_row(scene, diag.get("mode", "unknown"), m)
    write_metrics_csv([row], a.out)
    print(format_table([row]))
    return EXIT_OK


def _cmd_experiment(a):
    out = a.out or os.path.join("runs", a.preset)
    s = run_experiment(a.preset, out, seed=a.seed, threads=a.threads)
    print(f"comparison table: {os.path.join(out, 'comparison.csv')} (sha256 {s['comparison_sha256'][:16]})")
    return EXIT_OK


def main(argv=None) -> int:
    parser = build_parser()
    try:
        a = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else EXIT_OK
    if getattr(a, "threads", None) is None and os.environ.get("POLARSFP_THREADS"):
        try:
            a.threads = int(os.environ["POLARSFP_THREADS"])
        except ValueError:
            print("error: POLARSFP_THREADS must be an integer", file=sys.stderr)
            return EXIT_USAGE
    handler = {"render": _cmd_render, "solve": _cmd_solve, "evaluate": _cmd_evaluate,
               "experiment": _cmd_experiment}[a.command]
    try:
        return handler(a)
    except StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        inner = exc.exc
        usage = isinstance(inner, (OSError, SchemaError, MalformedHeader, TruncatedData, UsageError))
        return EXIT_USAGE if usage else EXIT_COMPUTE
    except (UsageError, InsufficientViews, OSError, SchemaError, MalformedHeader, TruncatedData,
            json.JSONDecodeError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (PolarSfPError, ArithmeticError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_COMPUTE


if __name__ == "__main__":
    sys.exit(main())
