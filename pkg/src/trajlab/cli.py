"""``trajlab`` command line.

Exit codes: 0 success, 1 usage or configuration error, 2 I/O error,
3 numerical failure (also used when an ablation cell diverged).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from trajlab import harness
from trajlab.errors import ConfigurationError, NumericalError
from trajlab.harness import EXIT_IO, EXIT_NUMERICAL, EXIT_OK, EXIT_USAGE, RunConfig, UsageError
from trajlab.raster import RasterConfig, build_stack, ppm_name, specs_for_subset, write_ppm
from trajlab.scenegen import FAMILIES, GenerationConfig, generate_dataset, read_dataset, write_dataset

log = logging.getLogger("trajlab")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _int_list(text: str) -> tuple:
    try:
        return tuple(int(t) for t in text.split(",") if t.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _str_list(text: str) -> list:
    return [t.strip() for t in text.split(",") if t.strip()]


def _common() -> argparse.ArgumentParser:
    # accepted before or after the verb
    p = _Parser(add_help=False)
    p.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="global seed (data and init)")
    p.add_argument("--config", type=Path, default=argparse.SUPPRESS, help="JSON config file")
    p.add_argument("--out", type=Path, default=argparse.SUPPRESS, help="output directory (default: runs)")
    p.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS)
    return p


def _raster_flags(p):
    p.add_argument("--raster-size", type=int, help="raster side in pixels")
    p.add_argument("--extent", type=float, help="raster side in meters")


def _train_flags(p):
    p.add_argument("--lr", type=float, help="learning rate (default 1e-4)")
    p.add_argument("--batch-size", type=int, help="mini-batch size (default 100)")
    p.add_argument("--epochs", type=int, help="epochs (default 20)")
    p.add_argument("--steps", type=int, help="stop after this many optimizer steps")
    p.add_argument("--loss", choices=("mtp", "angle_scaled"))
    p.add_argument("--modes", type=int, help="fused output modes M")
    p.add_argument("--modes-per-head", type=int, help="hypotheses per backbone K")
    p.add_argument("--layers", type=_int_list, help="layer subset, e.g. 1,2,4")
    p.add_argument("--dtype", choices=("float32", "float64"))


def build_parser() -> argparse.ArgumentParser:
    common = _common()
    parser = _Parser(prog="trajlab", description="Synthetic trajectory-prediction lab.", parents=[common])
    sub = parser.add_subparsers(dest="verb", metavar="VERB")
    sub.required = True

    p = sub.add_parser("gen-data", parents=[common], help="generate a synthetic dataset file")
    p.add_argument("--count", type=int, default=100)
    p.add_argument("--families", type=_str_list, help=f"comma-separated subset of {','.join(FAMILIES)}")
    p.add_argument("--horizon-s", type=float)
    p.add_argument("--frequency-hz", type=float)
    p.add_argument("--name", default="dataset.jsonl", help="file name inside --out")

    p = sub.add_parser("rasterize", parents=[common], help="write PPM rasters for dataset samples")
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--ids", type=_str_list)
    p.add_argument("--limit", type=int, default=10)
    p.add_argument("--layers", type=_int_list, default=(1, 2, 3, 4))
    _raster_flags(p)

    p = sub.add_parser("train", parents=[common], help="train a model and write a run manifest")
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--val", type=Path, help="validation file (default: id-hash split of --data)")
    p.add_argument("--test", type=Path, help="evaluation file (default: validation data)")
    _train_flags(p)
    _raster_flags(p)

    p = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint")
    p.add_argument("--manifest", type=Path)
    p.add_argument("--checkpoint", type=Path)
    p.add_argument("--data", type=Path)
    _raster_flags(p)

    p = sub.add_parser("ablate", parents=[common], help="run the loss and/or layer ablation study")
    p.add_argument("--study", choices=("loss", "layer", "both"), default="both")
    p.add_argument("--train", type=Path, required=True)
    p.add_argument("--val", type=Path)
    p.add_argument("--test", type=Path, required=True)
    _train_flags(p)
    _raster_flags(p)

    p = sub.add_parser("plot-data", parents=[common], help="emit plot-ready JSON for trained runs")
    p.add_argument("manifests", nargs="*", type=Path)
    p.add_argument("--ids", type=_str_list)
    p.add_argument("--limit", type=int, default=5)
    return parser


# ---------------------------------------------------------------------------


def _load_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if getattr(args, "config", None) else RunConfig()
    train = cfg.train.to_dict()
    for flag, key in (("lr", "learning_rate"), ("batch_size", "batch_size"), ("epochs", "epochs"),
                      ("steps", "steps"), ("loss", "loss_variant"), ("modes", "modes"),
                      ("modes_per_head", "modes_per_head"), ("layers", "layer_subset"), ("dtype", "dtype")):
        value = getattr(args, flag, None)
        if value is not None:
            train[key] = value
    if getattr(args, "seed", None) is not None:
        train["seed"] = args.seed
    cfg.train = type(cfg.train).from_dict(train)
    cfg.train.validate()
    raster = cfg.raster.to_dict()
    if getattr(args, "raster_size", None) is not None:
        raster["size_px"] = args.raster_size
    if getattr(args, "extent", None) is not None:
        raster["extent_m"] = args.extent
    cfg.raster = RasterConfig.from_dict(raster)
    gen = cfg.generation.to_dict()
    if getattr(args, "families", None):
        unknown = set(args.families) - set(FAMILIES)
        if unknown:
            raise UsageError(f"unknown families: {sorted(unknown)}")
        gen["family_weights"] = {f: 1.0 for f in args.families}
    if getattr(args, "horizon_s", None) is not None:
        gen["horizon_s"] = args.horizon_s
    if getattr(args, "frequency_hz", None) is not None:
        gen["frequency_hz"] = args.frequency_hz
    cfg.generation = GenerationConfig.from_dict(gen)
    return cfg


def _out(args) -> Path:
    out = getattr(args, "out", None) or Path("runs")
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_gen_data(args) -> int:
    if args.count < 1:
        raise UsageError("--count must be at least 1")
    cfg = _load_config(args)
    cfg.generation.validate()
    seed = getattr(args, "seed", 0)
    samples = generate_dataset(args.count, seed, cfg.generation)
    path = _out(args) / args.name
    write_dataset(path, samples, header={"count": args.count, "seed": seed,
                                        "generation": cfg.generation.to_dict()})
    print(harness.dataset_summary(samples), end="")
    print(f"wrote {len(samples)} samples to {path}")
    return EXIT_OK


def cmd_rasterize(args) -> int:
    cfg = _load_config(args)
    _, samples = read_dataset(args.data)
    if args.ids:
        wanted = set(args.ids)
        samples = [s for s in samples if s.sample_id in wanted]
        missing = wanted - {s.sample_id for s in samples}
        if missing:
            raise UsageError(f"sample ids not in {args.data}: {sorted(missing)}")
    else:
        samples = samples[: args.limit]
    specs = specs_for_subset(args.layers)
    out = _out(args) / "rasters"
    out.mkdir(parents=True, exist_ok=True)
    count = 0
    for s in samples:
        stack = build_stack(s.scene, specs, cfg.raster)
        for spec, grid in zip(stack.specs, stack.grids):
            write_ppm(out / ppm_name(s.sample_id, spec), grid)
            count += 1
    print(f"wrote {count} rasters to {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _load_config(args)
    manifest = harness.run_training(cfg, args.data, _out(args), eval_path=args.test, val_path=args.val)
    report = manifest.metrics
    print(",".join(report.header()))
    print(report.row())
    print(f"manifest: {_out(args) / 'manifest.json'}")
    return EXIT_OK


def cmd_eval(args) -> int:
    out = _out(args)
    if args.manifest:
        if args.checkpoint or args.data:
            raise UsageError("--manifest cannot be combined with --checkpoint/--data")
        manifest = harness.RunManifest.load(args.manifest)
        report = harness.evaluate_manifest(manifest)
        if report.to_dict() != manifest.report:
            log.warning("report differs from the one stored in %s", args.manifest)
    else:
        if not (args.checkpoint and args.data):
            raise UsageError("eval needs --manifest, or both --checkpoint and --data")
        from trajlab.train import evaluate, load_checkpoint

        ck = load_checkpoint(args.checkpoint)
        raster = None
        if args.raster_size is not None or args.extent is not None or getattr(args, "config", None):
            raster = _load_config(args).raster
        report = evaluate(ck, read_dataset(args.data)[1], raster)
    harness.write_report(report, out, stem="eval_report")
    print(",".join(report.header()))
    print(report.row())
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg = _load_config(args)
    _, train_samples = read_dataset(args.train)
    _, test_samples = read_dataset(args.test)
    if args.val:
        val_samples = read_dataset(args.val)[1]
    else:
        train_samples, val_samples = harness.split_by_id(train_samples)
        if not train_samples or not val_samples:
            raise ConfigurationError("id-hash split produced an empty partition; pass --val")
    studies = ("loss", "layer") if args.study == "both" else (args.study,)
    status = EXIT_OK
    for study in studies:
        spec = harness.AblationSpec(study, cfg.train, cfg.raster, _out(args))
        table = harness.run_ablation(spec, train_samples, val_samples, test_samples)
        print(table.to_text())
        for row in table.failed:
            print(f"FAILED {row.label}: {row.error}", file=sys.stderr)
            code = EXIT_NUMERICAL if row.error.startswith("NumericalError") else EXIT_USAGE
            status = max(status, code)
    return status


def cmd_plot_data(args) -> int:
    if not args.manifests:
        raise UsageError("plot-data needs at least one manifest")
    root = _out(args) / "plots"
    for i, path in enumerate(args.manifests):
        manifest = harness.RunManifest.load(path)
        target = root / f"{i:02d}_{manifest.config_hash[:8]}"
        written = harness.plot_data(manifest, target, args.ids, args.limit)
        print(f"{path}: wrote {len(written)} files to {target}")
    return EXIT_OK


COMMANDS = {
    "gen-data": cmd_gen_data,
    "rasterize": cmd_rasterize,
    "train": cmd_train,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "plot-data": cmd_plot_data,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.verb](args)
    except (UsageError, ConfigurationError, ValueError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
