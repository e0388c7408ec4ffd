# Main file - command-line interface for octree-latent scene generation
# Every subcommand reads one JSON run config (--config) plus flag overrides,
# writes its outputs atomically and leaves a run manifest next to them.
#
# OCTLAT_THREADS caps the BLAS pools as well, so .env is loaded and the cap
# applied before numpy gets imported anywhere.

import os
import sys

from dotenv import load_dotenv

BLAS_THREAD_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS")


def load_environment(dotenv_path=None):
    """Load .env, then copy OCTLAT_THREADS into the BLAS variables not already set"""
    load_dotenv(dotenv_path)
    threads = os.getenv("OCTLAT_THREADS")
    if threads:
        for var in BLAS_THREAD_VARS:
            os.environ.setdefault(var, threads)


load_environment()

import argparse
import glob
import json
import logging
import time
import traceback

import config as cfg
import numeric_core as nc
from config import RunConfig
from dual_graph import dualize
from errors import FormatError, OctreeLatentError, UsageError
from graph_vae import VaeTrainer
from metrics import MetricsCalculator
from octree import OCT_MAGIC, build_octree, load_octree
from scene_pipeline import CompletionRequest, RunManifest, SceneModels, ScenePipeline, loss_table
from scene_visualizer import SceneVisualizer
from selftest import run_selftest
from voxel_io import (OCC_MAGIC, SVOX_MAGIC, atomic_write_bytes, load_occ, load_scan, load_svox, read_magic,
                      save_occ, save_svox, semantics_to_occupancy, voxelize)

logger = logging.getLogger("octlat")

U64 = 1 << 64


# ---------------------------------------------------------------------------
# argument parsing

def parse_seed(text):
    try:
        seed = int(text, 0)
    except ValueError:
        raise argparse.ArgumentTypeError(f"--seed expects an unsigned 64-bit integer, got {text!r}")
    if not 0 <= seed < U64:
        raise argparse.ArgumentTypeError(f"--seed must be in [0, 2^64), got {seed}")
    return seed


def parse_origin(text):
    parts = text.split(",")
    try:
        values = tuple(float(p) for p in parts)
    except ValueError:
        values = ()
    if len(values) != 3:
        raise UsageError(f"--origin expects X,Y,Z in meters, got {text!r}")
    return values


def build_parser():
    parser = argparse.ArgumentParser(
        prog="octlat", description="Octree-latent semantic 3D scene generation, completion and extension")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")
    sub.required = True

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="run configuration JSON (flags override its values)")
    common.add_argument("--seed", type=parse_seed, metavar="U64", help="seed for every random stream of the run")
    common.add_argument("--out", metavar="PATH", help="output file (or directory for training commands)")

    sampling = argparse.ArgumentParser(add_help=False)
    sampling.add_argument("--steps", type=int, metavar="N", help="number of sampling steps (respaced schedule)")
    sampling.add_argument("--threshold", type=float, metavar="F", help="structure threshold in [-1, 1]")
    sampling.add_argument("--dump-trajectory", metavar="DIR", help="write every intermediate sample to DIR")

    p = sub.add_parser("voxelize", parents=[common], help="LiDAR scan -> OCC1 occupancy grid")
    p.add_argument("--scan", metavar="PATH", required=True, help="packed float32 x,y,z,intensity scan")
    p.add_argument("--origin", metavar="X,Y,Z", help="grid origin in the scan frame (required with --scan)")

    p = sub.add_parser("build-octree", parents=[common], help="SVOX/OCC1 grid -> OCT1 octree")
    p.add_argument("input", metavar="INPUT", help="SVOX or OCC1 file")

    p = sub.add_parser("dualize", parents=[common], help="grid or octree -> dual graph text dump")
    p.add_argument("input", metavar="INPUT", help="SVOX, OCC1 or OCT1 file")

    p = sub.add_parser("train-vae", parents=[common], help="train the patch codec and graph VAE")
    p.add_argument("data_dir", metavar="DATA_DIR", help="directory of .svox training scenes")
    p.add_argument("--steps", type=int, metavar="N", help="optimizer steps")

    p = sub.add_parser("train-diff", parents=[common], help="train a diffusion denoiser")
    p.add_argument("stage", choices=["structure", "latent"], help="which denoiser to train")
    p.add_argument("data_dir", metavar="DATA_DIR", help="directory of .svox training scenes")
    p.add_argument("--steps", type=int, metavar="N", help="optimizer steps")

    sub.add_parser("generate", parents=[common, sampling], help="unconditional scene generation")

    p = sub.add_parser("complete", parents=[common, sampling], help="scene completion from a scan and/or mask")
    p.add_argument("--scan", metavar="PATH", help="packed float32 x,y,z,intensity scan")
    p.add_argument("--origin", metavar="X,Y,Z", help="grid origin in the scan frame (required with --scan)")
    p.add_argument("--mask", metavar="PATH", help="OCC1 occupancy or SVOX partial semantics")

    p = sub.add_parser("extend", parents=[common, sampling], help="outpaint a new window next to a scene")
    p.add_argument("input", metavar="INPUT", help="source SVOX scene")
    p.add_argument("--overlap", type=float, metavar="F", help="fraction of the window shared with the source")

    p = sub.add_parser("metrics", parents=[common], help="FID / KID / MMD / IoU between two scene sets")
    p.add_argument("real_dir", metavar="REAL_DIR", help="directory of reference .svox scenes")
    p.add_argument("gen_dir", metavar="GEN_DIR", help="directory of generated .svox scenes")

    sub.add_parser("selftest", help="run the oracle suites")
    return parser


# ---------------------------------------------------------------------------
# helpers

def load_config(args, **extra):
    overrides = {"seed": getattr(args, "seed", None), **extra}
    if getattr(args, "config", None):
        return RunConfig.load(args.config, **overrides)
    return RunConfig().with_overrides(**overrides)


def scene_files(directory, flag):
    if not os.path.isdir(directory):
        raise UsageError(f"{flag} {directory!r} is not a directory")
    paths = sorted(glob.glob(os.path.join(directory, "*.svox")))
    if not paths:
        raise UsageError(f"no .svox files in {flag} {directory!r}")
    return paths


def require_out(args, default=None):
    out = args.out or default
    if out is None:
        raise UsageError(f"{args.command} needs --out PATH")
    return out


def load_grid_like(path):
    """SVOX -> (grid, occupancy), OCC1 -> (None, occupancy)"""
    magic = read_magic(path) if os.path.exists(path) else b""
    if magic == SVOX_MAGIC:
        grid = load_svox(path)
        return grid, semantics_to_occupancy(grid)
    if magic == OCC_MAGIC:
        return None, load_occ(path)
    if not os.path.exists(path):
        raise FormatError("file not found", path)
    raise FormatError(f"unrecognised magic {magic!r}, expected SVX1 or OCC1", path, 0)


def manifest_path(out):
    if os.path.isdir(out):
        return os.path.join(out, cfg.RESULTS_FILE)
    return f"{out}.manifest.json"


def finish(manifest, out, start):
    manifest.wall_time = round(time.time() - start, 3)
    path = manifest.write(manifest_path(out))
    print(f"💾 Manifest saved to {path}")


# ---------------------------------------------------------------------------
# subcommands

def cmd_voxelize(args):
    if not args.origin:
        raise UsageError("--scan needs --origin X,Y,Z")
    origin = parse_origin(args.origin)
    config = load_config(args)
    out = require_out(args)
    start = time.time()
    cloud = load_scan(args.scan, origin)
    occ, stats = voxelize(cloud, config.grid_dims, config.voxel_size, origin)
    save_occ(occ, out)
    print(f"✓ Voxelized {stats.in_bounds} of {stats.total} points ({stats.dropped} out of bounds)")
    print(f"✓ {occ.count()} occupied cells in a {occ.dims} grid -> {out}")
    manifest = RunManifest(args.command, config.seed, config.to_json_dict(), extra={"origin": list(origin)})
    manifest.add_input(args.scan)
    manifest.add_output(out)
    finish(manifest, out, start)
    return 0


def cmd_build_octree(args):
    out = require_out(args)
    start = time.time()
    grid, occ = load_grid_like(args.input)
    oct_ = build_octree(occ)
    oct_.save(out)
    dense = occ.bits.size * (2 if grid is not None else 1 / 8)
    print(f"✓ Octree depth {oct_.max_depth}: {oct_.node_count()} nodes, {oct_.leaf_count()} leaves")
    print(f"✓ {oct_.nbytes} bytes vs {int(dense)} dense ({100.0 * oct_.nbytes / max(1, dense):.1f}%) -> {out}")
    manifest = RunManifest(args.command, 0, {}, extra={"dims": list(occ.dims)})
    manifest.add_input(args.input)
    manifest.add_output(out)
    finish(manifest, out, start)
    return 0


def cmd_dualize(args):
    start = time.time()
    if os.path.exists(args.input) and read_magic(args.input) == OCT_MAGIC:
        oct_ = load_octree(args.input)
    else:
        oct_ = build_octree(load_grid_like(args.input)[1])
    graph = dualize(oct_)
    status = sys.stdout if args.out else sys.stderr
    print(f"✓ Dual graph: {graph.num_nodes} nodes, {graph.num_edges} edges, {graph.nbytes} bytes", file=status)
    if args.out:
        atomic_write_bytes(args.out, graph.dump().encode("utf-8"))
        print(f"✓ Dump written to {args.out}")
        manifest = RunManifest(args.command, 0, {})
        manifest.add_input(args.input)
        manifest.add_output(args.out)
        finish(manifest, args.out, start)
    else:
        sys.stdout.write(graph.dump())
    return 0


def _save_curves(config, curves, out_dir):
    table = loss_table(curves)
    csv_path = os.path.join(out_dir, "loss_curves.csv")
    atomic_write_bytes(csv_path, table.to_csv(index=False).encode("utf-8"))
    print(f"✓ Loss curves saved to {csv_path}")
    if config.visualize:
        try:
            SceneVisualizer(config, os.path.join(out_dir, cfg.VISUALIZATIONS_DIR)).plot_loss_curves(curves)
            print("  ✓ Generated loss curve chart")
        except Exception as e:
            print(f"  ⚠ Visualization generation failed: {e}")
    return csv_path


def cmd_train_vae(args):
    config = load_config(args, vae_steps=args.steps)
    out = require_out(args, cfg.OUTPUT_DIR)
    start = time.time()
    paths = scene_files(args.data_dir, "DATA_DIR")
    scenes = [load_svox(p) for p in paths]
    print(f"🧠 Training graph VAE on {len(scenes)} scenes for {config.model.vae_steps} steps...")
    pipeline = ScenePipeline(config, SceneModels(config))
    curve = pipeline.train_vae(scenes, nc.Rng(config.seed))
    acc, split_acc = pipeline_accuracy(pipeline, scenes)
    saved = pipeline.models.save(out, names=("vae",))
    print(f"✓ Final loss {curve['loss'].iloc[-1]:.4f}, voxel accuracy {acc:.3f}, split accuracy {split_acc:.3f}")
    print(f"✓ Checkpoint saved to {saved['vae']}")
    _save_curves(config, {"vae": curve}, out)
    manifest = RunManifest(args.command, config.seed, config.to_json_dict(),
                           extra={"voxel_accuracy": acc, "split_accuracy": split_acc})
    for p in paths:
        manifest.add_input(p)
    manifest.add_output(saved["vae"])
    finish(manifest, out, start)
    return 0


def pipeline_accuracy(pipeline, scenes):
    return VaeTrainer(pipeline.config, pipeline.vae).accuracy(scenes, pipeline.models.params)


def cmd_train_diff(args):
    key = "structure_steps" if args.stage == "structure" else "latent_steps"
    config = load_config(args, **{key: args.steps})
    out = require_out(args, cfg.OUTPUT_DIR)
    start = time.time()
    paths = scene_files(args.data_dir, "DATA_DIR")
    scenes = [load_svox(p) for p in paths]
    models = SceneModels.load(config)
    pipeline = ScenePipeline(config, models)
    rng = nc.Rng(config.seed)
    print(f"🌫 Training {args.stage} denoiser on {len(scenes)} scenes for {getattr(config.model, key)} steps...")
    if args.stage == "structure":
        curve = pipeline.train_structure(scenes, rng)
    else:
        curve = pipeline.train_latent(scenes, rng)
        print(f"  latent scale {models.latent_scale:.5f}")
    saved = models.save(out, names=(args.stage,))
    print(f"✓ Final loss {curve['loss'].iloc[-1]:.4f}")
    print(f"✓ Checkpoint saved to {saved[args.stage]}")
    _save_curves(config, {args.stage: curve}, out)
    manifest = RunManifest(args.command, config.seed, config.to_json_dict(), extra={"stage": args.stage})
    for p in paths:
        manifest.add_input(p)
    manifest.add_output(saved[args.stage])
    finish(manifest, out, start)
    return 0


def _sampling_config(args, **extra):
    return load_config(args, steps_override=args.steps, threshold=args.threshold, **extra)


def _write_scene(config, result, out, manifest):
    save_svox(result.grid, out)
    manifest.add_output(out)
    manifest.extra.update({k: v for k, v in result.stats.items() if isinstance(v, (int, float, bool, str))})
    if result.empty:
        print("⚠ Structure stage produced no occupied cells, wrote an empty scene")
    else:
        print(f"✓ {result.stats['coarse_cells']} coarse cells, {result.stats['code_nodes']} code nodes, "
              f"{result.stats['occupied_voxels']} occupied voxels -> {out}")
    if config.visualize:
        try:
            viz = SceneVisualizer(config, os.path.join(os.path.dirname(os.path.abspath(out)), cfg.VISUALIZATIONS_DIR))
            viz.render_bev(result.grid, f"{os.path.basename(out)}.png")
            print("  ✓ Generated bird's-eye-view render")
        except Exception as e:
            print(f"  ⚠ Visualization generation failed: {e}")


def cmd_generate(args):
    config = _sampling_config(args)
    out = require_out(args)
    start = time.time()
    pipeline = ScenePipeline(config, SceneModels.load(config))
    print(f"🎲 Generating a scene with seed {config.seed}...")
    result = pipeline.generate(config.seed, args.dump_trajectory)
    manifest = RunManifest(args.command, config.seed, config.to_json_dict())
    _add_checkpoints(manifest, config)
    _write_scene(config, result, out, manifest)
    finish(manifest, out, start)
    return 0


def _add_checkpoints(manifest, config):
    for path in config.checkpoints.values():
        if path and os.path.exists(path):
            manifest.add_input(path)


def cmd_complete(args):
    if args.scan and not args.origin:
        raise UsageError("--scan needs --origin X,Y,Z (grid origin in the scan frame)")
    origin = parse_origin(args.origin) if args.origin else None
    config = _sampling_config(args)
    out = require_out(args)
    start = time.time()
    manifest = RunManifest(args.command, config.seed, config.to_json_dict())
    _add_checkpoints(manifest, config)
    request = CompletionRequest(seed=config.seed, origin=origin)
    if args.scan:
        request.scan = load_scan(args.scan, origin)
        manifest.add_input(args.scan)
        print(f"📡 Loaded scan with {len(request.scan)} points")
    if args.mask:
        grid, occ = load_grid_like(args.mask)
        if grid is not None:
            request.partial = grid
            print(f"🧩 Partial semantics with {int((grid.labels != 0).sum())} labeled voxels")
        else:
            request.occupancy = occ
            print(f"🧩 Occupancy mask with {occ.count()} occupied cells")
        manifest.add_input(args.mask)
    if not args.scan and not args.mask:
        print("⚠ No --scan or --mask given, running unconditional generation")
    pipeline = ScenePipeline(config, SceneModels.load(config))
    result = pipeline.complete(request, args.dump_trajectory)
    _write_scene(config, result, out, manifest)
    finish(manifest, out, start)
    return 0


def cmd_extend(args):
    config = _sampling_config(args, overlap=args.overlap)
    out = require_out(args)
    start = time.time()
    source = load_svox(args.input)
    pipeline = ScenePipeline(config, SceneModels.load(config))
    print(f"🧭 Extending {args.input} with {100 * config.overlap:.0f}% overlap...")
    ext = pipeline.extend(source, overlap=config.overlap, seed=config.seed, dump_dir=args.dump_trajectory)
    manifest = RunManifest(args.command, config.seed, config.to_json_dict(), extra={"offset": list(ext.offset)})
    manifest.add_input(args.input)
    _add_checkpoints(manifest, config)
    _write_scene(config, ext.result, out, manifest)
    finish(manifest, out, start)
    return 0


def cmd_metrics(args):
    config = load_config(args)
    start = time.time()
    real_paths = scene_files(args.real_dir, "REAL_DIR")
    gen_paths = scene_files(args.gen_dir, "GEN_DIR")
    calc = MetricsCalculator(config, SceneModels.load(config))
    print(f"📏 Scoring {len(gen_paths)} generated scenes against {len(real_paths)} references...")
    report = calc.report([load_svox(p) for p in real_paths], [load_svox(p) for p in gen_paths])
    doc = json.dumps(report.to_json_dict(), indent=2, sort_keys=True)
    print(f"✓ FID {report.fid:.4f}  KID x1e3 {report.kid_x1000:.4f}  MMD {report.mmd:.6f}")
    if report.miou is not None:
        print(f"✓ mIoU {report.miou:.4f}")
    if args.out:
        atomic_write_bytes(args.out, doc.encode("utf-8"))
        print(f"💾 Report saved to {args.out}")
        manifest = RunManifest(args.command, config.seed, config.to_json_dict())
        for p in real_paths + gen_paths:
            manifest.add_input(p)
        _add_checkpoints(manifest, config)
        manifest.add_output(args.out)
        finish(manifest, args.out, start)
    else:
        print(doc)
    return 0


def cmd_selftest(args):
    print("=" * 60)
    print("Self-test")
    print("=" * 60)

    def show(r):
        mark = "✓" if r.passed else "✗"
        print(f"{mark} {r.name}: {r.detail} ({r.seconds:.1f}s)")

    results = run_selftest(progress=show)
    failed = [r for r in results if not r.passed]
    print("=" * 60)
    print(f"{len(results) - len(failed)}/{len(results)} suites passed")
    return 0 if not failed else 5


COMMANDS = {
    "voxelize": cmd_voxelize,
    "build-octree": cmd_build_octree,
    "dualize": cmd_dualize,
    "train-vae": cmd_train_vae,
    "train-diff": cmd_train_diff,
    "generate": cmd_generate,
    "complete": cmd_complete,
    "extend": cmd_extend,
    "metrics": cmd_metrics,
    "selftest": cmd_selftest,
}


def main(argv=None):
    logging.basicConfig(level=cfg.LOG_LEVEL.upper(), stream=sys.stderr,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except OctreeLatentError as e:
        print(f"✗ {type(e).__name__}: {e}", file=sys.stderr)
        return e.exit_code
    except KeyboardInterrupt:
        print("\n\nStopped by user", file=sys.stderr)
        return 130
    except Exception as e:
        print(f"\n\n✗ Unexpected error: {e}", file=sys.stderr)
        # print full error for debugging
        traceback.print_exc()
        return 5


if __name__ == "__main__":
    sys.exit(main())
