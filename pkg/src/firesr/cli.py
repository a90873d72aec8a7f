"""Command-line interface: the pipeline as reproducible subcommands.

Subcommands: synth, build-dataset, train, evaluate, infer, export-filters.
Every run merges flag values over an optional JSON config file (flags win),
echoes the merged config to ``<out>/config.json``, and writes a
machine-readable ``run_manifest.json`` (command, config, config hash, inputs,
outputs). Outputs land only under the requested output directory, nothing is
timestamped, so identical runs produce byte-identical directories.

Exit codes: 0 success, 1 usage, 2 data/format, 3 numeric, 4 I/O.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import dataset as ds
from . import evaluation as ev
from . import model as mdl
from . import raster as rst
from . import report as rpt
from . import training as trn
from .errors import DataError, FireSrError, UsageError

log = logging.getLogger("firesr")


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse default exits 2; usage errors are 1
        raise UsageError(message)


def _canonical(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def _load_config_file(path: str | None) -> dict:
    if not path:
        return {}
    with open(path) as f:
        cfg = json.load(f)
    if not isinstance(cfg, dict):
        raise UsageError(f"{path}: config file must hold a JSON object")
    return cfg


def _merge_params(args, schema: dict) -> dict:
    """schema defaults <- config file <- explicit flags."""
    file_cfg = _load_config_file(getattr(args, "config", None))
    unknown = set(file_cfg) - set(schema)
    if unknown:
        raise UsageError(f"unknown config keys: {sorted(unknown)}")
    params = dict(schema)
    params.update(file_cfg)
    for key in schema:
        flag_val = getattr(args, key, None)
        if flag_val is not None:
            params[key] = flag_val
    return params


def _write_run_manifest(out_dir: Path, command: str, params: dict, inputs: list[str]) -> None:
    with open(out_dir / "config.json", "w") as f:
        f.write(_canonical(params) + "\n")
    outputs = sorted(
        str(p.relative_to(out_dir))
        for p in out_dir.rglob("*")
        if p.is_file() and p.name != "run_manifest.json"
    )
    manifest = {
        "command": command,
        "config": params,
        "config_hash": hashlib.sha256(_canonical(params).encode()).hexdigest(),
        "inputs": sorted(inputs),
        "outputs": outputs,
    }
    with open(out_dir / "run_manifest.json", "w") as f:
        f.write(_canonical(manifest) + "\n")


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _parse_dims(text: str) -> tuple[int, int]:
    try:
        w, h = text.lower().split("x")
        return int(w), int(h)
    except ValueError as exc:
        raise UsageError(f"expected WIDTHxHEIGHT, got {text!r}") from exc


# ---------------------------------------------------------------------------
# synth

def cmd_synth(args) -> int:
    schema = {
        "seed": 0,
        "months": 60,
        "scale": 4,
        "hr_size": "128x64",
        "regions": "SYN",
        "start": "2005-01",
        "val_fraction": 0.15,
    }
    params = _merge_params(args, schema)
    out = _out_dir(args)
    width, height = _parse_dims(params["hr_size"])
    start_year, start_month = (int(p) for p in params["start"].split("-"))
    regions = tuple(params["regions"].split(","))
    samples = ds.synth_generate(
        seed=int(params["seed"]),
        n_months=int(params["months"]),
        hr_width=width,
        hr_height=height,
        scale=int(params["scale"]),
        regions=regions,
        start_year=start_year,
        start_month=start_month,
    )
    manifest = ds.split_manifest(
        samples, float(params["val_fraction"]), seed=int(params["seed"])
    )
    manifest.generator = {
        "kind": "synthetic",
        "seed": int(params["seed"]),
        "n_months": int(params["months"]),
        "hr_width": width,
        "hr_height": height,
        "scale": int(params["scale"]),
        "regions": list(regions),
        "start": params["start"],
    }
    manifest.save(out)
    _write_run_manifest(out, "synth", params, inputs=[])
    print(f"wrote {len(manifest.entries)} samples to {out}")
    return 0


# ---------------------------------------------------------------------------
# build-dataset

def _read_channel_raster(root: Path, entry: dict) -> rst.Raster:
    path = root / entry["path"]
    if path.suffix == ".csv":
        if "width" not in entry or "height" not in entry:
            raise DataError(f"{path}: CSV raster entries need width/height")
        return rst.raster_from_csv(
            path,
            int(entry["width"]),
            int(entry["height"]),
            origin_lon=float(entry.get("origin_lon", 0.0)),
            origin_lat=float(entry.get("origin_lat", 0.0)),
            pixel_size=float(entry.get("pixel_size", 1.0)),
        )
    return rst.read_raster(path)


def _load_mapping(root: Path, spec) -> dict[int, int]:
    if isinstance(spec, dict):
        return {int(k): int(v) for k, v in spec.items()}
    with open(root / spec) as f:
        return {int(k): int(v) for k, v in json.load(f).items()}


def cmd_build_dataset(args) -> int:
    if not args.config:
        raise UsageError("build-dataset requires --config describing the inputs")
    with open(args.config) as f:
        spec = json.load(f)
    root = Path(args.config).parent
    out = _out_dir(args)

    scale = int(args.scale if args.scale is not None else spec.get("scale", 4))
    val_fraction = float(
        args.val_fraction if args.val_fraction is not None else spec.get("val_fraction", 0.15)
    )
    norm = (
        ds.NormalizationSpec.from_json(spec["norm"]) if "norm" in spec else ds.NormalizationSpec()
    )
    exclude = [
        (r, int(y), int(m)) for r, y, m in spec.get("exclude_months", [])
    ]
    climatology = spec.get("climatology_years")
    if climatology is not None:
        climatology = (int(climatology[0]), int(climatology[1]))
    per_month = bool(spec.get("per_calendar_month", True))

    samples = []
    for region, rspec in spec["regions"].items():
        fire_series = {
            (int(e["year"]), int(e["month"])): _read_channel_raster(root, e)
            for e in rspec["fire"]
        }
        temp_series = [
            (int(e["year"]), int(e["month"]), _read_channel_raster(root, e))
            for e in rspec["temperature"]
        ]
        deviations = {
            (y, m): r
            for y, m, r in ds.temp_deviation(temp_series, climatology, per_month)
        }
        any_fire = next(iter(fire_series.values()))
        landcover = _read_channel_raster(root, {"path": rspec["landcover"]})
        mapping = _load_mapping(root, rspec["mapping"])
        burnable = ds.burnable_index(landcover, mapping, (any_fire.width, any_fire.height))
        burnable = rst.Raster(
            values=burnable.values,
            origin_lon=any_fire.origin_lon,
            origin_lat=any_fire.origin_lat,
            pixel_size=any_fire.pixel_size,
        )
        for (year, month), fire in sorted(fire_series.items()):
            if (year, month) not in deviations:
                raise DataError(
                    f"{region}: no temperature for {year}-{month:02d}"
                )
            samples.append(
                ds.build_sample(
                    fire, deviations[(year, month)], burnable, scale, norm,
                    year, month, region,
                )
            )
    manifest = ds.split_manifest(
        samples,
        val_fraction,
        norm=norm,
        seed=int(args.seed) if args.seed is not None else None,
        region=args.region,
        exclude_months=exclude,
    )
    manifest.save(out)
    params = {
        "config": str(args.config),
        "scale": scale,
        "val_fraction": val_fraction,
        "region": args.region,
    }
    _write_run_manifest(out, "build-dataset", params, inputs=[str(args.config)])
    print(f"wrote {len(manifest.entries)} samples to {out}")
    return 0


# ---------------------------------------------------------------------------
# train

def cmd_train(args) -> int:
    schema = {
        "seed": 0,
        "scale": None,
        "learning_rate": 1e-3,
        "batch_size": 8,
        "max_epochs": 500,
        "patience": 20,
        "crop_size": None,
        "channels": "16,8,8",
        "checkpoint_every": None,
    }
    params = _merge_params(args, schema)
    manifest = ds.load_manifest(args.dataset)
    scale = int(params["scale"]) if params["scale"] is not None else manifest.scale
    out = _out_dir(args)
    channels = tuple(int(c) for c in str(params["channels"]).split(","))
    config = trn.TrainConfig(
        learning_rate=float(params["learning_rate"]),
        batch_size=int(params["batch_size"]),
        max_epochs=int(params["max_epochs"]),
        patience=int(params["patience"]),
        crop_size=None if params["crop_size"] is None else int(params["crop_size"]),
        seed=int(params["seed"]),
        channel_config=channels,  # type: ignore[arg-type]
        checkpoint_every=(
            None if params["checkpoint_every"] is None else int(params["checkpoint_every"])
        ),
    )
    if args.resume is not None:
        config = trn.load_checkpoint(args.resume).config
    net, log_rows = trn.train(manifest, scale, config, out_dir=out, resume_from=args.resume)
    best = min(row.val_loss for row in log_rows)
    mdl.save_weights(
        net,
        out / "weights.fsw",
        metadata={"best_val_loss": best, "epochs": log_rows[-1].epoch, "seed": config.seed},
    )
    rpt.save_loss_curve(log_rows, out / "loss_curve.png")
    params["scale"] = scale
    _write_run_manifest(out, "train", params, inputs=[str(args.dataset)])
    print(f"trained scale {scale}: best val MSE {best:.6g} over {log_rows[-1].epoch} epochs")
    return 0


# ---------------------------------------------------------------------------
# evaluate

def cmd_evaluate(args) -> int:
    schema = {"threshold": ev.DEFAULT_THRESHOLD, "region": None, "names": None}
    params = _merge_params(args, schema)
    manifest = ds.load_manifest(args.dataset)
    out = _out_dir(args)
    threshold = float(params["threshold"])

    reports = []
    if args.weights:
        nets = [mdl.load_weights(w) for w in args.weights]
        names = params["names"].split(",") if params["names"] else None
        reports.extend(
            ev.evaluate_models(manifest, nets, threshold, names=names, region=params["region"])
        )
    if args.predictions:
        preds, targets = [], []
        pred_root = Path(args.predictions)
        for entry in manifest.entries_for("test", params["region"]):
            pred_path = pred_root / f"{entry.sample_id}.fsr"
            if not pred_path.exists():
                raise DataError(f"missing prediction raster {pred_path}")
            preds.append(rst.read_raster(pred_path))
            targets.append(manifest.load_sample(entry).hr_target)
        reports.append(
            ev.evaluate_predictions(
                preds, targets, threshold, model="external", scale=manifest.scale
            )
        )
    if not reports:
        raise UsageError("evaluate needs --weights and/or --predictions")

    rpt.write_report_csv(reports, out / "report.csv")
    rpt.write_report_text(reports, out / "report.txt")
    figures = out / "figures"
    maps = out / "maps"
    figures.mkdir(exist_ok=True)
    maps.mkdir(exist_ok=True)
    rpt.save_metrics_figure(reports, figures / "metrics.png")

    if args.weights:
        net = mdl.load_weights(args.weights[0])
        entries = manifest.entries_for("test", params["region"])
        case = max(
            entries, key=lambda e: float(manifest.load_sample(e).hr_target.values.sum())
        )
        sample = manifest.load_sample(case)
        target = sample.hr_target
        pred = mdl.forward(net, sample.lr_input)
        baseline = rst.bicubic_resample(
            sample.lr_input.channels[0], target.width, target.height
        )
        tag = f"case_{case.sample_id}"
        rpt.write_triptych_pgm(target, pred, baseline, maps / f"{tag}.pgm")
        rpt.write_triptych_ppm(target, pred, baseline, maps / f"{tag}.ppm")
        rpt.save_triptych_figure(
            target, pred, baseline, figures / f"{tag}.png",
            title=f"{case.region} {case.year}-{case.month:02d} ({manifest.scale}x)",
        )

    inputs = [str(args.dataset)] + [str(w) for w in (args.weights or [])]
    if args.predictions:
        inputs.append(str(args.predictions))
    _write_run_manifest(out, "evaluate", params, inputs=inputs)
    print((out / "report.txt").read_text(), end="")
    return 0


# ---------------------------------------------------------------------------
# infer

def cmd_infer(args) -> int:
    schema = {"lr_size": None, "fire_divisor": None, "mode": "coarse"}
    params = _merge_params(args, schema)
    net = mdl.load_weights(args.weights)
    out = _out_dir(args)
    fire = rst.read_raster(args.fire)
    temp = rst.read_raster(args.temp)
    burnable = rst.read_raster(args.burnable)

    if params["mode"] == "coarse":
        if params["lr_size"] is None:
            raise UsageError("coarse mode requires --lr-size WIDTHxHEIGHT")
        lr_dims = _parse_dims(params["lr_size"])
        divisor = None if params["fire_divisor"] is None else float(params["fire_divisor"])
        sr = ev.infer_coarse(net, fire, temp, burnable, lr_dims, fire_divisor=divisor)
    elif params["mode"] == "direct":
        stack = rst.ChannelStack([fire, temp, burnable], rst.INPUT_ROLES)
        sr = mdl.forward(net, stack)
    else:
        raise UsageError(f"unknown mode {params['mode']!r} (coarse or direct)")

    rst.write_raster(sr, out / "sr.fsr")
    rst.write_pgm(sr.values, out / "sr.pgm")
    rpt.save_triptych_figure(
        rst.bilinear_resample(fire, sr.width, sr.height),
        sr,
        rst.bicubic_resample(fire, sr.width, sr.height),
        out / "sr.png",
        title=f"{net.scale}x inference",
        labels=("input (bilinear regrid)", "FireSRnet", "Bicubic"),
    )
    _write_run_manifest(
        out, "infer", params,
        inputs=[str(args.weights), str(args.fire), str(args.temp), str(args.burnable)],
    )
    print(f"wrote SR raster {sr.width}x{sr.height} to {out / 'sr.fsr'}")
    return 0


# ---------------------------------------------------------------------------
# export-filters

def cmd_export_filters(args) -> int:
    net = mdl.load_weights(args.weights)
    out = _out_dir(args)
    paths = mdl.export_layer1_filters(net, out, per_channel=bool(args.per_channel))
    rpt.save_filter_grid_figure(net.layers[0].kernels, out / "filters.png")
    _write_run_manifest(
        out, "export-filters",
        {"per_channel": bool(args.per_channel)},
        inputs=[str(args.weights)],
    )
    print(f"wrote {len(paths)} filter images to {out}")
    return 0


# ---------------------------------------------------------------------------

def build_parser() -> _Parser:
    parser = _Parser(prog="firesr", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out_required=True):
        p.add_argument("--config", help="JSON config file; flags override its values")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--out", required=out_required, help="output directory")
        p.add_argument("--threads", type=int, default=None, help="cap on worker threads")
        p.add_argument("-v", "--verbose", action="store_true", default=None)

    p = sub.add_parser("synth", help="generate a seeded synthetic dataset")
    common(p)
    p.add_argument("--months", type=int, default=None)
    p.add_argument("--scale", type=int, choices=(2, 4, 8), default=None)
    p.add_argument("--hr-size", dest="hr_size", default=None, help="HR dims, WIDTHxHEIGHT")
    p.add_argument("--regions", default=None, help="comma-separated region labels")
    p.add_argument("--start", default=None, help="first month, YYYY-MM")
    p.add_argument("--val-fraction", dest="val_fraction", type=float, default=None)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("build-dataset", help="build a dataset from raw FSR/CSV rasters")
    common(p)
    p.add_argument("--scale", type=int, choices=(2, 4, 8), default=None)
    p.add_argument("--val-fraction", dest="val_fraction", type=float, default=None)
    p.add_argument("--region", default=None, help="keep only this region")
    p.set_defaults(func=cmd_build_dataset)

    p = sub.add_parser("train", help="train a network on a dataset")
    common(p)
    p.add_argument("--dataset", required=True)
    p.add_argument("--scale", type=int, choices=(2, 4, 8), default=None)
    p.add_argument("--learning-rate", dest="learning_rate", type=float, default=None)
    p.add_argument("--batch-size", dest="batch_size", type=int, default=None)
    p.add_argument("--max-epochs", dest="max_epochs", type=int, default=None)
    p.add_argument("--patience", type=int, default=None)
    p.add_argument("--crop-size", dest="crop_size", type=int, default=None)
    p.add_argument("--channels", default=None, help="conv widths, e.g. 16,8,8")
    p.add_argument("--checkpoint-every", dest="checkpoint_every", type=int, default=None)
    p.add_argument("--resume", default=None, help="checkpoint file to resume from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="benchmark weights against bicubic on the test split")
    common(p)
    p.add_argument("--dataset", required=True)
    p.add_argument("--weights", action="append", default=None, help="repeatable")
    p.add_argument("--names", default=None, help="comma-separated row names for --weights")
    p.add_argument("--threshold", type=float, default=None)
    p.add_argument("--region", default=None)
    p.add_argument("--predictions", default=None, help="directory of <sample_id>.fsr SR maps")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("infer", help="super-resolve coarse or LR inputs")
    common(p)
    p.add_argument("--weights", required=True)
    p.add_argument("--fire", required=True, help="fire-like channel raster")
    p.add_argument("--temp", required=True, help="temperature-deviation raster")
    p.add_argument("--burnable", required=True, help="burnable-index raster")
    p.add_argument("--mode", choices=("coarse", "direct"), default=None)
    p.add_argument("--lr-size", dest="lr_size", default=None, help="LR dims, WIDTHxHEIGHT")
    p.add_argument("--fire-divisor", dest="fire_divisor", type=float, default=None)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("export-filters", help="export first-layer filters as PGM images")
    common(p)
    p.add_argument("--weights", required=True)
    p.add_argument("--per-channel", dest="per_channel", action="store_true", default=None)
    p.set_defaults(func=cmd_export_filters)

    return parser


def _apply_thread_cap(threads: int | None) -> None:
    if threads is None:
        return
    try:
        import threadpoolctl

        threadpoolctl.threadpool_limits(threads)
    except ImportError:  # pragma: no cover
        log.warning("threadpoolctl unavailable; --threads ignored for BLAS pools")


def main(argv=None) -> int:
    try:
        parser = build_parser()
        args = parser.parse_args(argv)
        logging.basicConfig(
            level=logging.DEBUG if getattr(args, "verbose", None) else logging.INFO,
            format="%(levelname)s %(name)s: %(message)s",
        )
        _apply_thread_cap(getattr(args, "threads", None))
        return args.func(args)
    except UsageError as exc:
        print(f"error[usage]: {exc}", file=sys.stderr)
        return 1
    except FireSrError as exc:
        kind = {2: "data", 3: "numeric"}.get(exc.exit_code, "data")
        print(f"error[{kind}]: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error[io]: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
