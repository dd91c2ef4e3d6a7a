"""Command-line entry point: ``sdforge <gen|render|reconstruct|texture|eval|bench>``.

Exit codes: 0 success, 1 runtime failure, 2 usage or validation error.
Every command writes ``config.json`` (the resolved configuration) into its
output directory.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import camera, generator, mesh as meshlib, metrics, recon, texture
from .errors import FormatError, NoForegroundError, ParameterError
from .raster import render_views
from .sdf import SdfGrid, read_grid

CONFIG_BLOCKS = ("gen", "recon", "bake", "metrics", "render")


class UsageError(Exception):
    pass


# --------------------------------------------------------------------------
# configuration
# --------------------------------------------------------------------------

def load_config(path) -> dict:
    if path is None:
        return {}
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"config file not found: {p}")
    try:
        data = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise UsageError(f"{p}: invalid JSON ({exc})") from exc
    if not isinstance(data, dict):
        raise UsageError(f"{p}: top level must be an object")
    unknown = set(data) - set(CONFIG_BLOCKS)
    if unknown:
        raise UsageError(f"{p}: unknown config blocks {sorted(unknown)}")
    return data


def _merge(block: dict, overrides: dict) -> dict:
    out = dict(block)
    out.update({k: v for k, v in overrides.items() if v is not None})
    return out


def _gen_config(conf: dict, args) -> generator.GenConfig:
    over = {"seed": getattr(args, "seed", None), "grid_dims": getattr(args, "grid_dims", None)}
    return generator.GenConfig.from_dict(_merge(conf.get("gen", {}), over))


def _recon_config(conf: dict, args) -> recon.ReconConfig:
    over = {
        "coarse_iters": getattr(args, "coarse_iters", None),
        "refine_iters": getattr(args, "refine_iters", None),
        "threshold": getattr(args, "threshold", None),
        "image_size": getattr(args, "opt_size", None),
    }
    if getattr(args, "no_init", False):
        over["use_init"] = False
    if getattr(args, "no_fixation", False):
        over["fixation"] = False
    return recon.ReconConfig.from_dict(_merge(conf.get("recon", {}), over))


def _bake_config(conf: dict, args) -> texture.BakeConfig:
    over = {"k": getattr(args, "k", None), "iterations": getattr(args, "bake_iters", None),
            "dims": getattr(args, "tex_dims", None)}
    d = _merge(conf.get("bake", {}), over)
    unknown = set(d) - set(texture.BakeConfig.__dataclass_fields__)
    if unknown:
        raise ParameterError(f"unknown BakeConfig keys: {sorted(unknown)}")
    return texture.BakeConfig(**d)


def _metric_config(conf: dict, args) -> metrics.MetricConfig:
    over = {"samples": getattr(args, "samples", None), "threshold": getattr(args, "fscore_threshold", None)}
    if getattr(args, "no_align", False):
        over["align"] = False
    d = _merge(conf.get("metrics", {}), over)
    unknown = set(d) - set(metrics.MetricConfig.__dataclass_fields__)
    if unknown:
        raise ParameterError(f"unknown MetricConfig keys: {sorted(unknown)}")
    return metrics.MetricConfig(**d)


def _render_settings(conf: dict, args) -> dict:
    d = _merge({"size": 256, "distance": None, "fov": camera.DEFAULT_FOV, "object_radius": 1.0},
               conf.get("render", {}))
    d = _merge(d, {"size": getattr(args, "size", None), "distance": getattr(args, "distance", None)})
    unknown = set(d) - {"size", "distance", "fov", "object_radius"}
    if unknown:
        raise ParameterError(f"unknown render keys: {sorted(unknown)}")
    if d["distance"] is None:
        d["distance"] = camera.default_distance(d["object_radius"])
    return d


def echo_config(out_dir, command: str, blocks: dict) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    payload = {"command": command}
    for k, v in blocks.items():
        payload[k] = v.to_dict() if hasattr(v, "to_dict") else v
    (out / "config.json").write_text(json.dumps(payload, indent=2, sort_keys=True, default=str) + "\n")


# --------------------------------------------------------------------------
# shared helpers
# --------------------------------------------------------------------------

def load_shape(path) -> tuple[meshlib.TriMesh, SdfGrid | None]:
    p = Path(path)
    if not p.is_file():
        raise FileNotFoundError(f"missing input {p}")
    if p.suffix.lower() == ".sdfg":
        g = read_grid(p)
        return meshlib.marching_cubes(g, close_borders=True), g
    return meshlib.read_mesh(p), None


def position_colors(m: meshlib.TriMesh, lo=-1.0, hi=1.0) -> np.ndarray:
    """Deterministic smooth colouring for meshes that carry none: world position mapped to RGB."""
    return np.clip((m.vertices - lo) / (hi - lo), 0.0, 1.0)


def render_shape(m: meshlib.TriMesh, settings: dict) -> camera.ViewSet:
    if m.colors is None:
        m = m.replace(colors=position_colors(m))
    rig = camera.make_rig(settings["distance"], settings["size"], settings["fov"])
    return camera.ViewSet(render_views(m, rig))


def _summ(vals) -> dict:
    a = np.asarray(vals, dtype=np.float64)
    return {"min": float(a.min()), "median": float(np.median(a)), "max": float(a.max())}


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------

def cmd_gen(args, conf) -> int:
    if args.count < 1:
        raise UsageError(f"--count must be >= 1, got {args.count}")
    cfg = _gen_config(conf, args)
    manifest = generator.generate_dataset(cfg, args.count, args.out)
    echo_config(args.out, "gen", {"gen": cfg, "count": args.count})
    occ = [e["occupancy"] for e in manifest["entries"]]
    s = _summ(occ)
    print(f"wrote {args.count} objects to {args.out}; occupancy min {s['min']:.4f} "
          f"median {s['median']:.4f} max {s['max']:.4f}")
    return 0


def cmd_render(args, conf) -> int:
    settings = _render_settings(conf, args)
    m, _ = load_shape(args.input)
    if m.is_empty:
        raise ParameterError(f"{args.input}: shape has no surface")
    views = render_shape(m, settings)
    camera.save_viewset(views, args.out)
    echo_config(args.out, "render", {"render": settings, "input": str(args.input)})
    print(f"rendered 6 views at {settings['size']}x{settings['size']} to {args.out}")
    return 0


def _load_views(path, require=("mask", "normal")) -> camera.ViewSet:
    try:
        return camera.load_viewset(path, require=require)
    except FileNotFoundError as exc:
        raise UsageError(str(exc)) from exc
    except (KeyError, ValueError, OSError) as exc:
        raise UsageError(f"malformed view directory {path}: {exc}") from exc


def cmd_reconstruct(args, conf) -> int:
    cfg = _recon_config(conf, args)
    views = _load_views(args.views)
    out = Path(args.out)
    t0 = time.perf_counter()
    res = recon.reconstruct(views, cfg)
    recon.save_result(res, out)
    coarse = meshlib.marching_cubes(res.coarse, close_borders=True)
    refined = meshlib.marching_cubes(res.final, close_borders=True)
    for name, m in (("coarse", coarse), ("refined", refined)):
        meshlib.write_obj(m, out / f"{name}.obj")
        meshlib.write_ply(m, out / f"{name}.ply")
    echo_config(out, "reconstruct", {"recon": cfg, "views": str(args.views)})
    print(f"reconstructed in {time.perf_counter() - t0:.1f}s; best loss {res.final_loss:.6g}; "
          f"iterations to threshold {res.iters_to_threshold}")
    return 0


def cmd_texture(args, conf) -> int:
    cfg = _bake_config(conf, args)
    views = _load_views(args.views, require=("mask", "color"))
    m, _ = load_shape(args.mesh)
    if args.subdivide:
        m = meshlib.loop_subdivide(m, args.subdivide)
    res = texture.bake(m, views, cfg)
    colored = texture.query_vertex_colors(m, res.texture)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    texture.write_texture(res.texture, out / "texture.texg")
    meshlib.write_ply(colored, out / "textured.ply")
    rerender = []
    ps = []
    for it in views:
        img, hit = texture.render_textured(m, res.texture, it.view)
        rerender.append(camera.ViewImages(it.view, hit.astype(np.float64), None, None, img))
        ps.append(metrics.psnr(img, it.color))
    camera.save_viewset(rerender, out / "rerender", kinds=("mask", "color"))
    summary = {"psnr_per_view": [_finite(p) for p in ps], "psnr_mean": _finite(float(np.mean(ps))),
               "k": cfg.k, "final_loss": res.trace[-1], "observations": res.observations}
    (out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    echo_config(out, "texture", {"bake": cfg, "mesh": str(args.mesh), "views": str(args.views),
                                 "subdivide": args.subdivide})
    print(f"baked texture (k={cfg.k}); re-render PSNR mean {summary['psnr_mean']}")
    return 0


def _finite(x: float):
    return x if math.isfinite(x) else "inf"


def _load_color_images(path) -> list[np.ndarray]:
    vs = camera.load_viewset(path, require=("color",))
    return [it.color for it in vs]


def cmd_eval(args, conf) -> int:
    cfg = _metric_config(conf, args)
    pairs = list(args.pair or [])
    if args.pairs:
        pairs += [tuple(x) for x in json.loads(Path(args.pairs).read_text())]
    img_pairs = list(args.images or [])
    if not pairs and not img_pairs:
        raise UsageError("nothing to evaluate: give --pair PRED GT and/or --images PRED_DIR GT_DIR")
    rows, details, failures = [], {}, []
    for i, (pred, gt) in enumerate(pairs):
        name = f"pair_{i:03d}"
        try:
            pm, _ = load_shape(pred)
            gm, _ = load_shape(gt)
            g = metrics.evaluate_geometry(pm, gm, cfg)
        except (OSError, ValueError) as exc:
            failures.append(f"{pred} vs {gt}: {exc}")
            continue
        img = None
        if i < len(img_pairs):
            img = _eval_images(img_pairs[i], failures)
        rows.append(metrics.report_row(name, g, img, cfg))
        details[name] = {"pred": str(pred), "gt": str(gt), "translation": list(g.translation), "scale": g.scale,
                         "threshold": g.threshold}
    for j in range(len(pairs), len(img_pairs)):
        img = _eval_images(img_pairs[j], failures)
        if img is not None:
            name = f"images_{j:03d}"
            rows.append(metrics.report_row(name, None, img, cfg))
            details[name] = {"pred": img_pairs[j][0], "gt": img_pairs[j][1]}
    metrics.write_reports(rows, details, args.out)
    echo_config(args.out, "eval", {"metrics": cfg})
    for f in failures:
        print(f"failed: {f}", file=sys.stderr)
    med = metrics.summary_medians(rows)
    print(f"evaluated {len(rows)} items; median chamfer {med['chamfer']} iou {med['iou']} fscore {med['fscore']}")
    return 2 if failures else 0


def _eval_images(pair, failures):
    try:
        a = _load_color_images(pair[0])
        b = _load_color_images(pair[1])
        return metrics.evaluate_images(a, b)
    except (OSError, ValueError) as exc:
        failures.append(f"images {pair[0]} vs {pair[1]}: {exc}")
        return None


def cmd_bench(args, conf) -> int:
    if args.count < 1:
        raise UsageError(f"--count must be >= 1, got {args.count}")
    gcfg = _gen_config(conf, args)
    rcfg = _recon_config(conf, args)
    bcfg = _bake_config(conf, args)
    mcfg = replace(_metric_config(conf, args), align=False)
    settings = _render_settings(conf, args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    stages = {"gen": 0.0, "render": 0.0, "reconstruct": 0.0, "texture": 0.0, "eval": 0.0}
    objects = []
    t_total = time.perf_counter()
    for i in range(args.count):
        od = out / f"obj_{i:03d}"
        t = time.perf_counter()
        obj = generator.generate(replace(gcfg, seed=gcfg.seed + i))
        gt_mesh = meshlib.marching_cubes(obj.grid, close_borders=True)
        stages["gen"] += time.perf_counter() - t
        t = time.perf_counter()
        views = render_shape(gt_mesh, settings)
        camera.save_viewset(views, od / "views")
        stages["render"] += time.perf_counter() - t
        t = time.perf_counter()
        res = recon.reconstruct(views, rcfg)
        recon.save_result(res, od / "recon")
        coarse = meshlib.marching_cubes(res.coarse, close_borders=True)
        refined = meshlib.marching_cubes(res.final, close_borders=True)
        meshlib.write_ply(refined, od / "recon" / "refined.ply")
        stages["reconstruct"] += time.perf_counter() - t
        t = time.perf_counter()
        sub = meshlib.loop_subdivide(refined, 1)
        bk = texture.bake(sub, views, bcfg)
        meshlib.write_ply(texture.query_vertex_colors(sub, bk.texture), od / "textured.ply")
        rer = [texture.render_textured(sub, bk.texture, it.view)[0] for it in views]
        stages["texture"] += time.perf_counter() - t
        t = time.perf_counter()
        g_ref = metrics.evaluate_geometry(refined, gt_mesh, mcfg)
        g_coarse = metrics.evaluate_geometry(coarse, gt_mesh, mcfg)
        im = metrics.evaluate_images(rer, [it.color for it in views])
        stages["eval"] += time.perf_counter() - t
        objects.append({
            "seed": gcfg.seed + i,
            "chamfer": g_ref.chamfer, "iou": g_ref.volume_iou, "fscore": g_ref.f_score,
            "coarse_iou": g_coarse.volume_iou, "psnr": _finite(im.psnr), "ssim": im.ssim,
            "iters_to_threshold": res.iters_to_threshold,
            "loss_curve": [row.loss for row in res.trace],
        })
    total = time.perf_counter() - t_total
    report = {
        "note": "CPU wall-clock timings of this implementation; not comparable to GPU figures",
        "count": args.count,
        "total_seconds": total,
        "stage_seconds": stages,
        "medians": {k: float(np.median([o[k] for o in objects])) for k in ("chamfer", "iou", "fscore", "ssim")},
        "objects": objects,
    }
    (out / "bench.json").write_text(json.dumps(report, indent=2) + "\n")
    echo_config(out, "bench", {"gen": gcfg, "recon": rcfg, "bake": bcfg, "metrics": mcfg, "render": settings,
                               "count": args.count})
    print(f"bench: {args.count} objects in {total:.1f}s; median IoU {report['medians']['iou']:.3f}")
    return 0


# --------------------------------------------------------------------------
# argument parsing
# --------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="sdforge", description="SDF reconstruction from six-view priors")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="JSON file with gen/recon/bake/metrics/render blocks")
        return sp

    g = common(sub.add_parser("gen", help="generate random block-union SDF grids"))
    g.add_argument("--count", type=int, required=True)
    g.add_argument("--seed", type=int)
    g.add_argument("--grid-dims", type=int)
    g.add_argument("--out", required=True)

    r = common(sub.add_parser("render", help="render six views of a grid or mesh"))
    r.add_argument("--input", required=True)
    r.add_argument("--out", required=True)
    r.add_argument("--size", type=int)
    r.add_argument("--distance", type=float)

    def recon_flags(sp):
        sp.add_argument("--coarse-iters", type=int)
        sp.add_argument("--refine-iters", type=int)
        sp.add_argument("--threshold", type=float)
        sp.add_argument("--opt-size", type=int, help="optimization image resolution")
        sp.add_argument("--no-init", action="store_true", help="start from a generic sphere instead of carving")
        sp.add_argument("--no-fixation", action="store_true", help="let refinement move the coarse field")

    c = common(sub.add_parser("reconstruct", help="reconstruct an SDF from a view directory"))
    c.add_argument("--views", required=True)
    c.add_argument("--out", required=True)
    recon_flags(c)

    t = common(sub.add_parser("texture", help="bake a texture grid and colour a mesh"))
    t.add_argument("--mesh", required=True)
    t.add_argument("--views", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--k", type=float)
    t.add_argument("--bake-iters", type=int)
    t.add_argument("--tex-dims", type=int)
    t.add_argument("--subdivide", type=int, default=1)

    e = common(sub.add_parser("eval", help="geometry and image metrics"))
    e.add_argument("--pair", nargs=2, action="append", metavar=("PRED", "GT"))
    e.add_argument("--pairs", help="JSON list of [pred, gt] paths")
    e.add_argument("--images", nargs=2, action="append", metavar=("PRED_DIR", "GT_DIR"))
    e.add_argument("--samples", type=int)
    e.add_argument("--fscore-threshold", type=float)
    e.add_argument("--no-align", action="store_true")
    e.add_argument("--out", required=True)

    b = common(sub.add_parser("bench", help="end-to-end timing on seeded objects"))
    b.add_argument("--count", type=int, default=3)
    b.add_argument("--seed", type=int)
    b.add_argument("--grid-dims", type=int)
    b.add_argument("--size", type=int)
    b.add_argument("--distance", type=float)
    b.add_argument("--k", type=float)
    b.add_argument("--bake-iters", type=int)
    b.add_argument("--tex-dims", type=int)
    b.add_argument("--samples", type=int)
    b.add_argument("--fscore-threshold", type=float)
    b.add_argument("--out", required=True)
    recon_flags(b)
    return p


COMMANDS = {
    "gen": cmd_gen,
    "render": cmd_render,
    "reconstruct": cmd_reconstruct,
    "texture": cmd_texture,
    "eval": cmd_eval,
    "bench": cmd_bench,
}


def _apply_threads() -> None:
    val = os.environ.get("SDFORGE_THREADS")
    if not val:
        return
    import numba

    try:
        n = int(val)
    except ValueError:
        raise UsageError(f"SDFORGE_THREADS must be an integer, got {val!r}")
    numba.set_num_threads(max(1, min(n, numba.config.NUMBA_NUM_THREADS)))


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        _apply_threads()
        conf = load_config(args.config)
        return COMMANDS[args.command](args, conf)
    except (UsageError, ParameterError, FormatError, FileNotFoundError, NoForegroundError, TypeError) as exc:
        print(f"sdforge {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - report any runtime failure as exit 1
        print(f"sdforge {args.command}: failed: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
