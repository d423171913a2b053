"""Command-line entry point: ``adbench <subcommand> ...``.

Set ADBENCH_STRICT=1 to pin numeric libraries to one thread so repeated runs
give byte-identical results and checkpoints.
"""
import argparse
import json
import logging
import os
import sys

import numpy as np

log = logging.getLogger("adbench")


def _strict():
    if os.environ.get("ADBENCH_STRICT", "") == "1":
        from .tensor import kernels

        kernels.enable_strict()


# -- subcommands -----------------------------------------------------------------------
def cmd_synth(args):
    from . import synth

    overrides = {k: getattr(args, k) for k in ("scale", "offset", "noise") if getattr(args, k) is not None}
    if args.mixture:
        overrides["mixture"] = json.loads(args.mixture)
    spec = synth.PRESETS[args.cohort](args.n, **overrides)
    summary = synth.generate_cohort(spec, args.seed, args.out)
    print(f"subjects {summary['subjects']}  scans {summary['scans']}  class mix "
          + ", ".join(f"{k} {v}" for k, v in summary["class_mix"].items()))
    print(f"manifest {summary['manifest']}")
    return 0


def cmd_preprocess(args):
    from .labeling import read_manifest
    from .volume import GlobalStats, NormalizationSpec, load_volume, preprocess, save_preprocessed

    root = os.path.dirname(os.path.abspath(args.manifest))
    visits = read_manifest(args.manifest)
    paths = [os.path.join(root, v.volume_path) for v in visits]
    if args.normalization == "zscore_global":
        if not args.stats:
            raise SystemExit("preprocess: zscore_global needs --stats (a JSON file from a training split)")
        with open(args.stats) as fh:
            spec = NormalizationSpec.from_dict(json.load(fh))
    else:
        spec = NormalizationSpec(args.normalization, provenance="per image", tau=args.tau)
    if args.write_stats:
        stats = GlobalStats()
        for p in paths:
            stats.add(load_volume(p), args.tau, p)
        with open(args.write_stats, "w") as fh:
            json.dump(stats.spec(f"all scans of {args.manifest}").to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")
    for p in paths:
        save_preprocessed(preprocess(load_volume(p), spec), p, spec)
    print(f"preprocessed {len(paths)} scans ({args.normalization})")
    return 0


def cmd_run(args):
    from .experiment import load_config, run_experiment

    cfg = load_config(args.config)
    out = args.out or os.path.dirname(os.path.abspath(args.config))
    n = run_experiment(cfg, out, force=args.force)
    print(f"{n} new rows in {os.path.join(out, 'results.csv')} (config {cfg.config_hash()})")
    return 0


def cmd_ablate(args):
    from .experiment import read_results, render_table, run_ablation

    with open(args.grid) as fh:
        grid = json.load(fh)
    out = args.out or os.path.dirname(os.path.abspath(args.grid))
    written, skipped = run_ablation(grid, out, os.path.dirname(os.path.abspath(args.grid)), force=args.force)
    for combo, reason in skipped:
        print(f"skipped {combo}: {reason}")
    table = render_table(read_results(os.path.join(out, "results.csv")))
    with open(os.path.join(out, "summary.md"), "w") as fh:
        fh.write(table)
    print(table, end="")
    print(f"{written} new rows; {len(skipped)} combinations skipped")
    return 0


def cmd_report(args):
    from .experiment import read_results, render_table

    table = render_table(read_results(args.results))
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(table)
    print(table, end="")
    return 0


def cmd_occlusion(args):
    from .data import stack_from_volume
    from .experiment import build_from_checkpoint
    from .labeling import CLASS_NAMES
    from .occlusion import OcclusionConfig, export_heatmap, occlusion_map, occlusion_volume
    from .volume import UNIFORM_GRID, Volume, load_volume, make_grid_montage, montage_cells, read_sidecar, SliceSet

    model, header = build_from_checkpoint(args.checkpoint)
    mcfg = model.config
    label = None
    if args.target == "given":
        if args.label is None:
            raise SystemExit("occlusion: --class given needs --label")
        names = CLASS_NAMES["visit953" if mcfg.num_classes == 2 else "last"]
        if args.label not in names:
            raise SystemExit(f"occlusion: label {args.label!r} not among model classes {names}")
        label = names.index(args.label)
    cfg = OcclusionConfig(args.patch, args.stride, args.baseline, args.target, label)
    os.makedirs(args.out, exist_ok=True)
    for path in args.sample:
        meta = read_sidecar(path)
        if "normalization" not in meta:
            raise SystemExit(f"occlusion: {path} is not a preprocessed sample (run 'adbench preprocess')")
        vol = load_volume(path)
        if vol.dims != UNIFORM_GRID:
            raise SystemExit(f"occlusion: {path} has dims {vol.dims}, expected the uniform grid {UNIFORM_GRID}")
        name = os.path.basename(path).split(".")[0]
        if mcfg.slices == 16:
            stack = stack_from_volume(vol, 16, mcfg.image_size)
            montage = make_grid_montage(SliceSet(stack, np.arange(16)))
            if montage.shape != (4 * mcfg.image_size, 4 * mcfg.image_size):
                raise SystemExit(f"occlusion: montage {montage.shape} does not match the model input")
            to_input = (lambda m: m[None]) if mcfg.kind == "inception_grid" else montage_cells
            rmap = occlusion_map(model, montage, cfg, to_input, name, header["model_id"])
            values = rmap.pixels
        else:
            def build(v):
                return stack_from_volume(Volume(vol.dims, vol.spacing, v), 77, mcfg.image_size)

            slices = args.slices if args.slices else None
            maps = occlusion_volume(model, vol.voxels, build, cfg, slices, name, header["model_id"])
            values = np.concatenate([m.pixels for m in maps], axis=0)
        csv_path, pgm_path = export_heatmap(values, os.path.join(args.out, name))
        print(f"{csv_path}\n{pgm_path}")
    return 0


def cmd_describe(args):
    from .models import ModelConfig, build_model, describe

    cfg = ModelConfig(args.model, args.classes, args.slices, width=args.width, image_size=args.image_size)
    print(describe(build_model(cfg)))
    return 0


# -- parser -----------------------------------------------------------------------------
def build_parser():
    from .experiment import MODEL_ALIASES
    from .volume import NORMALIZATION_MODES

    p = argparse.ArgumentParser(prog="adbench", description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a synthetic phantom cohort")
    s.add_argument("--cohort", required=True, choices=["adni-like", "fleni-like"])
    s.add_argument("-n", type=int, required=True, help="number of subjects")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True, help="output directory (volumes + manifest.csv)")
    s.add_argument("--scale", type=float, help="global intensity scale")
    s.add_argument("--offset", type=float, help="global intensity offset")
    s.add_argument("--noise", type=float, help="Gaussian noise sigma")
    s.add_argument("--mixture", help='class mixture as JSON, e.g. \'{"CN": 0.5, "AD": 0.5}\'')
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("preprocess", help="resample, mask and normalize every scan of a manifest")
    s.add_argument("--manifest", required=True)
    s.add_argument("--normalization", required=True, choices=NORMALIZATION_MODES)
    s.add_argument("--stats", help="NormalizationSpec JSON holding training-split mean/std (zscore_global)")
    s.add_argument("--write-stats", help="also write pooled masked mean/std of this manifest to this JSON path")
    s.add_argument("--tau", type=float, default=0.1, help="brain-mask threshold fraction")
    s.set_defaults(func=cmd_preprocess)

    s = sub.add_parser("run", help="cross-validate one experiment config and evaluate externally")
    s.add_argument("config", help="experiment config JSON")
    s.add_argument("--out", help="results directory (default: the config's directory)")
    s.add_argument("--force", action="store_true", help="replace earlier rows of the same config")
    s.set_defaults(func=cmd_run)

    s = sub.add_parser("ablate", help="run every valid combination of an ablation grid")
    s.add_argument("grid", help="grid JSON: axis lists for model/labeling/slices/normalization/selection plus base fields")
    s.add_argument("--out", help="results directory (default: the grid's directory)")
    s.add_argument("--force", action="store_true")
    s.set_defaults(func=cmd_ablate)

    s = sub.add_parser("occlusion", help="occlusion relevance maps for preprocessed samples")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--sample", required=True, nargs="+", help="preprocessed volume(s) (*.prep.vol.json)")
    s.add_argument("--out", required=True, help="directory for <sample>.relevance.csv/.pgm")
    s.add_argument("--class", dest="target", choices=["predicted", "given"], default="predicted")
    s.add_argument("--label", help="class name when --class given (e.g. AD)")
    s.add_argument("--patch", type=int, default=16)
    s.add_argument("--stride", type=int, default=8)
    s.add_argument("--baseline", choices=["zero", "mean"], default="zero")
    s.add_argument("--slices", type=int, nargs="*", help="axial slices to scan in 77-slice mode (default all)")
    s.set_defaults(func=cmd_occlusion)

    s = sub.add_parser("report", help="render results.csv as a Markdown table")
    s.add_argument("results")
    s.add_argument("--out", help="write the table here as well")
    s.set_defaults(func=cmd_report)

    s = sub.add_parser("describe", help="print a model's parameter table")
    s.add_argument("--model", required=True, type=lambda m: MODEL_ALIASES.get(m.lower(), m))
    s.add_argument("--classes", type=int, default=2)
    s.add_argument("--slices", type=int, default=16)
    s.add_argument("--width", type=float, default=1.0)
    s.add_argument("--image-size", type=int, default=128)
    s.set_defaults(func=cmd_describe)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    _strict()
    from .experiment import ConfigSchemaError

    try:
        return args.func(args)
    except ConfigSchemaError as e:
        print(f"adbench {args.command}: {e}", file=sys.stderr)
        return 2
    except (ValueError, OSError, RuntimeError) as e:
        print(f"adbench {args.command}: error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
