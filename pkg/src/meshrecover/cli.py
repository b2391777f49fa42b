"""``meshrecover`` command-line entry point.

Exit codes: 0 success, 1 configuration error, 2 degenerate input,
3 I/O or file-format error.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import subprocess
import sys
import time
from pathlib import Path

import numpy as np

from .autograd import NonFiniteError
from .camera import CameraPose, render_depth_uv, visible_vertices
from .config import ConfigError, RunConfig
from .data import (NoMeshesError, frame_from_tensors, is_frame, load_frame, partial_from_tensors,
                   read_frame_sidecar, read_mesh_sequence, save_frame, save_partial, write_mesh_sequence)
from .estimator import frame_to_partial
from .evaluation import baseline_report, evaluate, noise_sweep, predict
from .mae import DegenerateInputError, MAEModel
from .mesh import TemplateError, load_template, read_obj, write_obj
from .tensorio import TensorFormatError, read_archive
from .toy import ASSET_DIR, bundled_template, pose_set
from .training import SampleRejected, SampleSet, generate_samples, train

logger = logging.getLogger("meshrecover")

EXIT_OK, EXIT_CONFIG, EXIT_DEGENERATE, EXIT_IO = 0, 1, 2, 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def git_describe() -> str:
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty"], capture_output=True, text=True,
                             cwd=Path(__file__).parent, timeout=5)
        return out.stdout.strip() or "unknown"
    except (OSError, subprocess.SubprocessError):
        return "unknown"


def _config(args) -> RunConfig:
    return RunConfig.load(args.config) if getattr(args, "config", None) else RunConfig()


def _template(args):
    return load_template(args.template) if getattr(args, "template", None) else bundled_template()


def _write_json(path, obj) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n", encoding="utf-8")


# -- commands -------------------------------------------------------------------

def cmd_toy_poses(args) -> int:
    tpl = _template(args)
    meshes = pose_set(tpl, args.count, args.seed)
    if args.coarse:
        meshes = np.einsum("nf,sfk->snk", tpl.downsample_map, meshes)
    tris = tpl.coarse_triangles if args.coarse else tpl.triangles
    write_mesh_sequence(args.out, meshes, tris, args.format)
    print(f"wrote {len(meshes)} meshes to {args.out}")
    return EXIT_OK


def cmd_render(args) -> int:
    cfg = _config(args)
    tpl = _template(args)
    v, _, _ = read_obj(args.mesh) if args.mesh.endswith(".obj") else (np.asarray(read_archive_or_tensor(args.mesh)), None, None)
    if len(v) != tpl.n_full:
        raise DegenerateInputError(f"mesh has {len(v)} vertices, template has {tpl.n_full}")
    cam = cfg.camera
    pose = CameraPose.frontal(cam["distance"], cam["camera_height"], args.azimuth)
    frame = render_depth_uv(v, tpl.triangles, tpl.uv, pose, cfg.intrinsics, tpl.full_parts)
    save_frame(args.out, frame)
    print(f"rendered {int((frame.depth > 0).sum())} body pixels to {args.out}")
    return EXIT_OK


def read_archive_or_tensor(path):
    from .tensorio import read_any
    arr = read_any(path)
    if isinstance(arr, dict):
        raise TensorFormatError("expected a single tensor, found an archive", 0)
    return arr


def cmd_match(args) -> int:
    cfg = _config(args)
    tpl = _template(args)
    eps = cfg.eps if args.eps is None else args.eps
    if not eps > 0:
        raise ConfigError("--eps must be positive")
    partial = frame_to_partial(load_frame(args.frame), tpl, eps, world_frame=not args.camera_frame)
    save_partial(args.out, partial)
    print(f"matched {partial.n_visible} of {tpl.n_coarse} vertices")
    return EXIT_OK


def cmd_gen_data(args) -> int:
    cfg = _config(args)
    tpl = _template(args)
    ids, meshes = read_mesh_sequence(args.meshes)
    cam = cfg.camera
    seed = cfg.training.seed if args.seed is None else args.seed
    data = generate_samples(tpl, meshes, cfg.intrinsics, cfg.augment, seed, cam["azimuth_jitter_deg"],
                            cam["distance"], cam["camera_height"], ids)
    data.meta.update({"config_hash": cfg.digest(), "version": git_describe()})
    data.save(args.out)
    print(f"wrote {len(data)} samples ({len(meshes) - len(data)} rejected) to {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _config(args)
    tpl = _template(args)
    data = SampleSet.load(args.data)
    model = MAEModel(tpl, cfg.model)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    log = args.log or out / "metrics.jsonl"
    t0 = time.perf_counter()
    result = train(model, data, cfg.training, out, log)
    _write_json(out / "run.json", {"config": cfg.raw, "config_hash": cfg.digest(), "version": git_describe(),
                                   "data_manifest": data.meta.get("config_hash", ""), "halted": result.halted})
    if result.halted:
        print("training halted on a non-finite loss; last good weights saved", file=sys.stderr)
        return EXIT_DEGENERATE
    last = result.log[-1]
    print(f"trained {len(result.log)} steps in {time.perf_counter() - t0:.1f}s; final loss {last['loss_total']:.6f}")
    return EXIT_OK


def _load_model(args, tpl):
    return MAEModel.load(args.ckpt, tpl)


def cmd_infer(args) -> int:
    cfg = _config(args)
    tpl = _template(args)
    model = _load_model(args, tpl)
    tensors = read_archive(args.input)
    if is_frame(tensors):
        partial = frame_to_partial(frame_from_tensors(tensors, read_frame_sidecar(args.input)), tpl, cfg.eps)
    else:
        partial = partial_from_tensors(tensors)
    if partial.vertices.shape[0] != tpl.n_coarse:
        raise DegenerateInputError(f"partial mesh has {partial.vertices.shape[0]} vertices, "
                                   f"template has {tpl.n_coarse}")
    coarse = model.forward(partial)
    full = model.params["upsample"].data.astype(np.float64) @ coarse
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_obj(out, full, tpl.triangles, tpl.uv, comment="completed mesh")
    sidecar = out.with_suffix(".json")
    _write_json(sidecar, {"n_visible": partial.n_visible, "n_vertices": tpl.n_coarse,
                          "visible": partial.mask.astype(int).tolist(),
                          "checkpoint_hash": model.digest()})
    print(f"wrote {out} ({partial.n_visible}/{tpl.n_coarse} vertices visible)")
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = _config(args)
    tpl = _template(args)
    model = _load_model(args, tpl)
    data = SampleSet.load(args.data)
    resolution = args.resolution or cfg.eval["resolution"]
    if resolution == "full" and data.full is None:
        resolution = "coarse"
        logger.warning("sample set has no full-resolution targets; evaluating at coarse resolution")
    report = evaluate(model, data, resolution, cfg.digest())
    out = report.to_dict()
    if args.baseline:
        base = baseline_report(data, tpl, cfg.eval["baseline_iterations"], cfg.eval["baseline_lambda_lap"])
        out["baseline"] = {"pve_mm": base.pve_mm, "mpjpe_mm": base.mpjpe_mm, "resolution": base.resolution}
    _write_json(args.report, out)
    if args.dump_obj:
        _dump_triples(Path(args.dump_obj), model, data, tpl)
    print(f"PVE {report.pve_mm:.3f} mm, MPJPE {report.mpjpe_mm:.3f} mm over {len(data)} samples ({resolution})")
    return EXIT_OK


def _dump_triples(root: Path, model, data, tpl) -> None:
    root.mkdir(parents=True, exist_ok=True)
    coarse, _, _ = predict(model, data)
    tris = tpl.coarse_triangles if tpl.coarse_triangles is not None else tpl.triangles
    for i, sid in enumerate(data.ids):
        write_obj(root / f"{sid}_0_gt.obj", data.targets[i], tris)
        vis = data.masks[i]
        lines = "\n".join(f"v {x:.6f} {y:.6f} {z:.6f}" for x, y, z in data.inputs[i][vis])
        (root / f"{sid}_1_input.obj").write_text(lines + "\n", encoding="utf-8")
        write_obj(root / f"{sid}_2_pred.obj", coarse[i], tris)


def cmd_sweep_noise(args) -> int:
    cfg = _config(args)
    tpl = _template(args)
    model = _load_model(args, tpl)
    data = SampleSet.load(args.data)
    stds = [float(s) for s in args.stds.split(",")] if args.stds else cfg.eval["noise_stds_mm"]
    rows = noise_sweep(model, data, stds, cfg.eval["noise_seed"], args.resolution)
    table = [{"std_mm": s, "pve_mm": p} for s, p in rows]
    if args.report:
        _write_json(args.report, {"resolution": args.resolution, "rows": table, "checkpoint_hash": model.digest()})
    for r in table:
        print(f"std {r['std_mm']:6.1f} mm  PVE {r['pve_mm']:.3f} mm")
    return EXIT_OK


def cmd_selfcheck(args) -> int:
    from .selfcheck import run_selfcheck
    report = run_selfcheck(template_path=args.template, seed=args.seed)
    for name, ok, detail in report:
        print(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")
    return EXIT_OK if all(ok for _, ok, _ in report) else EXIT_DEGENERATE


def cmd_make_template(args) -> int:
    from .mesh import save_template
    from .toy import build_template
    save_template(build_template(args.rings, args.segments), args.out)
    print(f"wrote toy template to {args.out}")
    return EXIT_OK


# -- parser ---------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="meshrecover", description="Complete single-view partial body meshes.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, config=True):
        sp.add_argument("--template", help=f"template directory (default: bundled toy, {ASSET_DIR.name})")
        if config:
            sp.add_argument("--config", help="run configuration JSON")
        return sp

    sp = common(sub.add_parser("toy-poses", help="write randomly posed toy meshes as a mesh-sequence directory"), False)
    sp.add_argument("--count", type=int, default=200)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--coarse", action="store_true", help="write coarse meshes instead of full resolution")
    sp.add_argument("--format", choices=("tens", "obj"), default="tens")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_toy_poses)

    sp = common(sub.add_parser("render", help="render a full-resolution mesh into a depth+UV frame "
                                              "(archive plus .json camera sidecar)"))
    sp.add_argument("--mesh", required=True, help=".obj or single-tensor .tens file")
    sp.add_argument("--azimuth", type=float, default=0.0)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_render)

    sp = common(sub.add_parser("match", help="lift a frame and match it to the template"))
    sp.add_argument("--frame", required=True)
    sp.add_argument("--eps", type=float, help="UV match threshold (default from config)")
    sp.add_argument("--camera-frame", action="store_true", help="keep lifted points in camera coordinates")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_match)

    sp = common(sub.add_parser("gen-data", help="turn a mesh-sequence directory into training pairs"))
    sp.add_argument("--meshes", required=True)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_gen_data)

    sp = common(sub.add_parser("train", help="train a completion model"))
    sp.add_argument("--data", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--log", help="JSON-lines metrics path (default: OUT/metrics.jsonl)")
    sp.set_defaults(func=cmd_train)

    sp = common(sub.add_parser("infer", help="complete one frame or partial mesh"))
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--input", required=True, help="frame archive or partial-mesh archive")
    sp.add_argument("--out", required=True, help="output .obj; a .json visibility sidecar is written next to it")
    sp.set_defaults(func=cmd_infer)

    sp = common(sub.add_parser("eval", help="evaluate a checkpoint on a sample set"))
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--report", required=True)
    sp.add_argument("--resolution", choices=("full", "coarse"))
    sp.add_argument("--baseline", action="store_true", help="also report the direct-fitting baseline")
    sp.add_argument("--dump-obj", help="directory for (ground truth, input, prediction) OBJ triples")
    sp.set_defaults(func=cmd_eval)

    sp = common(sub.add_parser("sweep-noise", help="PVE under increasing input noise"))
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--stds", help="comma-separated per-axis stds in mm (default from config)")
    sp.add_argument("--resolution", choices=("full", "coarse"), default="coarse")
    sp.add_argument("--report")
    sp.set_defaults(func=cmd_sweep_noise)

    sp = common(sub.add_parser("selfcheck", help="run the built-in oracle checks"), False)
    sp.add_argument("--seed", type=int, default=0)
    sp.set_defaults(func=cmd_selfcheck)

    sp = sub.add_parser("make-template", help="write the procedural toy template")
    sp.add_argument("--rings", type=int, default=25)
    sp.add_argument("--segments", type=int, default=24)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_make_template)
    return p


def _run(args) -> int:
    threads = os.environ.get("MESHRECOVER_THREADS")
    if threads:
        try:
            n = int(threads)
            if n < 1:
                raise ValueError
        except ValueError:
            print(f"error: MESHRECOVER_THREADS must be a positive integer, got {threads!r}", file=sys.stderr)
            return EXIT_CONFIG
        from threadpoolctl import threadpool_limits
        with threadpool_limits(limits=n):
            return args.func(args)
    return args.func(args)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return _run(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DegenerateInputError, SampleRejected, NonFiniteError) as exc:
        print(f"degenerate input: {exc}", file=sys.stderr)
        return EXIT_DEGENERATE
    except TensorFormatError as exc:
        print(f"format error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (NoMeshesError, TemplateError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
