"""Command-line front end: ``goldendie <command> [options]``.

Commands: gen, quantize, train, simulate, detect, eval, report. Global
options go before the command. Settings may come from an INI-style config
file with sections ``[synth]``, ``[palette]``, ``[train]``, ``[detect]`` and
``[report]``; explicit flags override file values and unknown keys are
rejected. Failures exit with the ``exit_code`` of the raised error class.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import defectmap as D
from . import metrics as M
from .errors import ConfigError, DataError, EvaluationError, GoldenDieError
from .palette import Palette, fit_palette, quantize, reconstruct
from .raster import (PatchRegion, default_output_root, load_dataset, load_photo, load_quantized,
                     save_binary, save_photo, save_quantized, split_patches, write_dataset)
from .synth import SynthConfig, generate

log = logging.getLogger("goldendie")

SECTIONS = {
    "synth": {f for f in SynthConfig.__dataclass_fields__},
    "palette": {"k", "sample_size", "seed", "max_iter", "tol"},
    "train": None,  # validated by TrainConfig.from_mapping
    "detect": {"threshold", "metric", "window", "stride", "max_shift", "smooth"},
    "report": {"metrics"},
}


# ---------------------------------------------------------------------------
# config handling


def read_config(path) -> dict:
    """Parse an INI file into ``{section: {key: str}}``, rejecting unknown names."""
    if path is None:
        return {}
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    try:
        parser.read(path, encoding="utf-8")
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    out = {}
    for section in parser.sections():
        if section not in SECTIONS:
            raise ConfigError(f"{path}: unknown section [{section}]")
        values = dict(parser[section])
        allowed = SECTIONS[section]
        if allowed is not None:
            unknown = set(values) - allowed
            if unknown:
                raise ConfigError(f"{path}: unknown [{section}] keys {sorted(unknown)}")
        out[section] = values
    if "train" in out:
        from .simulators.training import TrainConfig
        TrainConfig.from_mapping(out["train"])  # fail fast on unknown keys
    return out


def _merged(args, section: str, flags: dict) -> dict:
    """File values for ``section`` overridden by flags that were actually given."""
    values = dict(args.config_values.get(section, {}))
    values.update({k: v for k, v in flags.items() if v is not None})
    return values


def _out_dir(args, *parts) -> Path:
    out = Path(args.out) if args.out else default_output_root()
    out = out.joinpath(*parts)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataError(f"cannot create output directory {out}: {exc}") from exc
    return out


def _parse_region(text):
    if not text:
        return None
    try:
        x0, y0, w, h = (int(v) for v in text.split(","))
    except ValueError as exc:
        raise ConfigError(f"region must be x0,y0,w,h, got {text!r}") from exc
    return PatchRegion(x0, y0, w, h)


def _load_palette(path) -> Palette:
    if not Path(path).is_file():
        raise DataError(f"missing palette file: {path}")
    return Palette.load(path)


def _palette_for(args, ds, out: Path) -> Palette:
    """Explicit --palette, else the manifest's palette, else fit and save one."""
    if getattr(args, "palette", None):
        return _load_palette(args.palette)
    if ds.palette_path() is not None and ds.palette_path().is_file():
        return Palette.load(ds.palette_path())
    values = _merged(args, "palette", {})
    pal = fit_palette(ds.photo, k=int(values.get("k", 64)),
                      sample_size=int(values["sample_size"]) if "sample_size" in values else None,
                      seed=int(values.get("seed", args.seed)))
    pal.save(out / "palette.txt")
    return pal


# ---------------------------------------------------------------------------
# commands


def cmd_gen(args) -> int:
    flags = {"size": args.size, "seed": args.seed_override, "rate_dust": args.rate_dust,
             "rate_nitride": args.rate_nitride, "rate_resist": args.rate_resist,
             "letter_defect_fraction": args.letter_defect_fraction,
             "noise_sigma": args.noise_sigma, "misalignment_px": args.misalignment_px}
    values = _merged(args, "synth", flags)
    values.setdefault("seed", args.seed)
    config = SynthConfig.from_mapping(values)
    name = args.name or f"synth_{config.size}_s{config.seed}"
    out = _out_dir(args, name)
    result = generate(config)
    manifest = write_dataset(out, name, result.photo, result.cad, result.labels,
                             split_seed=config.seed, split_fraction=0.7)
    save_photo(out / "golden.png", result.golden)
    (out / "scene_report.json").write_text(json.dumps(
        {"size": config.size, "seed": config.seed, "defects": result.report.defects,
         "glyphs": result.report.glyphs, "misalignment_px": config.misalignment_px}, indent=2)
        + "\n", encoding="utf-8")
    print(result.report)
    print(f"dataset written to {manifest}")
    return 0


def cmd_quantize(args) -> int:
    ds = load_dataset(args.dataset)
    values = _merged(args, "palette", {"k": args.k, "sample_size": args.sample_size})
    pal = fit_palette(ds.photo, k=int(values.get("k", 64)),
                      sample_size=int(values["sample_size"]) if values.get("sample_size") else None,
                      seed=int(values.get("seed", args.seed)),
                      max_iter=int(values.get("max_iter", 100)), tol=float(values.get("tol", 1e-6)))
    out = _out_dir(args)
    pal.save(out / "palette.txt")
    q = quantize(ds.photo, pal)
    save_quantized(out / "quantized.png", q)
    err = M.l2(reconstruct(q, pal), ds.photo)
    print(f"palette k={pal.k} path cost {pal.order_cost:.4f}; reconstruction l2 {err:.6f}")
    return 0


def _train_config(args):
    from .simulators.training import TrainConfig
    flags = {"loss": args.loss, "epochs": args.epochs, "batch_size": args.batch_size,
             "gamma": args.gamma, "optimizer": args.optimizer, "momentum": args.momentum,
             "variance_threshold": args.variance_threshold, "widths": args.widths,
             "seed": args.seed_override}
    values = _merged(args, "train", flags)
    values.setdefault("seed", args.seed)
    return TrainConfig.from_mapping(values)


def cmd_train(args) -> int:
    from .simulators.checkpoint import save_checkpoint
    from .simulators.training import infer, lr_schedule, select_best, train_unet
    from .simulators.tree import DEFAULT_SAMPLES, predict_tree, train_tree

    ds = load_dataset(args.dataset)
    out = _out_dir(args)
    pal = _palette_for(args, ds, out)
    q = quantize(ds.photo, pal)
    config = _train_config(args)
    split_seed = ds.manifest.split_seed if ds.manifest else config.split_seed
    train_r, val_r = split_patches(ds.photo.shape, config.patch_size, config.split_fraction,
                                   split_seed)

    if args.model == "tree":
        model = train_tree(q, ds.cad, k_out=pal.k, seed=config.seed, regions=train_r,
                           n_samples=args.n_samples or DEFAULT_SAMPLES,
                           palette_hash=pal.sha256())
        model.save(out / "tree.json")
        sim = predict_tree(model, ds.cad, pal)
        wafer_l2, val_l2 = M.l2(sim, ds.photo), M.evaluate_regions(sim, ds.photo, val_r, ("l2",))["l2"].mean
        with open(out / "train_log.csv", "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["model", "nodes", "leaves", "wafer_l2", "val_l2"])
            w.writerow(["tree", model.n_nodes, model.n_leaves, f"{wafer_l2:.8f}", f"{val_l2:.8f}"])
        (out / "best").write_text("tree.json\n", encoding="utf-8")
        print(f"tree: {model.n_nodes} nodes, whole-wafer l2 {wafer_l2:.6f}, val l2 {val_l2:.6f}")
        return 0

    schedule = lr_schedule(config)
    rows = []

    def on_epoch(ck):
        path = out / f"epoch_{ck.epoch:03d}.ckpt"
        save_checkpoint(path, ck)
        rows.append(ck)
        print(f"epoch {ck.epoch:3d} lr {ck.lr:.6g} loss {ck.train_loss:.6f} "
              f"val {json.dumps(ck.scores)}", flush=True)

    checkpoints = train_unet(ds.photo, ds.cad, config, quantized=q, palette=pal,
                             train_regions=train_r, val_regions=val_r, callback=on_epoch)
    with open(out / "train_log.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "lr", "train_loss", "val_l2", "val_ce"])
        for ck, lr in zip(checkpoints, schedule):
            w.writerow([ck.epoch, f"{lr:.15g}", f"{ck.train_loss:.8f}",
                        f"{ck.scores.get('l2', float('nan')):.8f}",
                        f"{ck.scores.get('ce', float('nan')):.8f}"])
    best = select_best(checkpoints, "l2")
    (out / "best").write_text(f"epoch_{best.epoch:03d}.ckpt\n", encoding="utf-8")
    if args.simulate:
        sim = infer(best, ds.cad, pal)
        save_photo(out / "simulation.png", sim)
    print(f"best epoch {best.epoch} (val l2 {best.scores['l2']:.6f})")
    return 0


def _resolve_checkpoint(path) -> Path:
    path = Path(path)
    if path.is_dir():
        marker = path / "best"
        if not marker.is_file():
            raise DataError(f"{path} has no 'best' marker")
        path = path / marker.read_text(encoding="utf-8").strip()
    if not path.is_file():
        raise DataError(f"missing checkpoint: {path}")
    return path


def _simulate(args, ds):
    """RGB simulation from --simulation, --oracle or --checkpoint."""
    if getattr(args, "simulation", None):
        sim = load_photo(args.simulation)
        name = Path(args.simulation).stem
    elif getattr(args, "oracle", False):
        golden = Path(args.dataset).parent / "golden.png"
        sim, name = load_photo(golden), "oracle"
    elif getattr(args, "checkpoint", None):
        from .simulators.checkpoint import load_checkpoint
        from .simulators.training import infer
        from .simulators.tree import TreeModel, predict_tree
        path = _resolve_checkpoint(args.checkpoint)
        pal = _load_palette(args.palette) if args.palette else (
            _load_palette(path.parent / "palette.txt") if (path.parent / "palette.txt").is_file()
            else None)
        if path.suffix == ".json":
            model = TreeModel.load(path)
            if pal is None:
                raise ConfigError("tree simulation needs --palette")
            sim = predict_tree(model, ds.cad, pal)
        else:
            ck = load_checkpoint(path, pal)
            sim = infer(ck, ds.cad, pal, tile=args.tile, batch=args.batch)
        name = path.stem
    else:
        raise ConfigError("give --simulation, --oracle or --checkpoint")
    if sim.shape != ds.photo.shape:
        raise DataError(f"simulation {sim.shape} does not match photo {ds.photo.shape}")
    return sim, name


def cmd_simulate(args) -> int:
    ds = load_dataset(args.dataset)
    sim, name = _simulate(args, ds)
    out = _out_dir(args)
    save_photo(out / "simulation.png", sim)
    print(f"simulation from {name} written to {out / 'simulation.png'} "
          f"(whole-wafer l2 {M.l2(sim, ds.photo):.6f})")
    return 0


def cmd_detect(args) -> int:
    ds = load_dataset(args.dataset)
    if ds.labels is None:
        raise DataError("detection needs a labeled dataset")
    sim, name = _simulate(args, ds)
    values = _merged(args, "detect", {"threshold": args.threshold, "metric": args.metric,
                                      "window": args.window, "stride": args.stride})
    threshold = float(values.get("threshold", D.DEFAULT_THRESHOLD))
    metric = values.get("metric", "l2")
    region = _parse_region(args.region)
    photo, labels = ds.photo, ds.labels.mask
    if region is not None:
        if not region.fits(*photo.shape[:2]):
            from .errors import RegionError
            raise RegionError(f"{region} does not fit the wafer")
        photo, sim, labels = photo[region.slices], sim[region.slices], labels[region.slices]
    if values.get("window"):
        smap = D.score_windowed(photo, sim, metric, int(values["window"]),
                                int(values.get("stride", 1)))
    else:
        smap = D.score_pixelwise(photo, sim, metric)
    mask = D.binarize(smap, threshold)
    out = _out_dir(args)
    D.export_score_png(out / "score.png", smap)
    save_binary(out / "mask.png", np.where(mask, 1, -1))
    D.save_heatmap(out / "heatmap.png", smap)
    D.save_triptych(out / "triptych.png", photo, sim, mask)
    pr = D.precision_recall(smap, labels)
    with open(out / "pr.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["simulation", "metric", "threshold", "average_precision", "n_positive",
                    "detected", "dice"])
        w.writerow([name, smap.metric, threshold, f"{pr.average_precision:.6f}", pr.n_positive,
                    int(mask.sum()), f"{M.dice(mask, labels):.6f}"])
    with open(out / "pr_curve.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["threshold", "precision", "recall"])
        for t, p, r in zip(pr.thresholds, pr.precision, pr.recall):
            w.writerow([f"{t:.8g}", f"{p:.8f}", f"{r:.8f}"])
    print(f"AP {pr.average_precision:.4f} ({pr.n_positive} labeled pixels, "
          f"{int(mask.sum())} detections at threshold {threshold})")
    return 0


def cmd_eval(args) -> int:
    ds = load_dataset(args.dataset)
    sim, name = _simulate(args, ds)
    model = args.model_name or name
    split_seed = ds.manifest.split_seed if ds.manifest else 0
    split_fraction = ds.manifest.split_fraction if ds.manifest else 0.7
    train_r, val_r = split_patches(ds.photo.shape, args.patch_size, split_fraction, split_seed)
    regions = val_r if args.split == "val" else train_r + val_r
    names = tuple(args.metrics.split(","))
    reports = M.evaluate_regions(sim, ds.photo, regions, names)
    out = _out_dir(args)
    rows = [{"dataset": ds.name, "model": model, "loss": args.loss or "", "epoch": args.epoch or "",
             "metric": n, "mean": f"{r.mean:.8g}", "sd": f"{r.sd:.8g}", "n_patches": r.n}
            for n, r in reports.items()]
    M.write_metric_csv(out / f"eval_{model}.csv", rows)
    with open(out / f"eval_{model}_patches.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["model", "patch"] + list(reports))
        for i in range(len(regions)):
            w.writerow([model, i] + [f"{reports[n].values[i]:.8g}" for n in reports])
    for n, r in reports.items():
        print(f"{model} {n}: {r.mean:.6g} +- {r.sd:.6g} over {r.n} patches")
    return 0


def cmd_report(args) -> int:
    root = Path(args.input) if args.input else (Path(args.out) if args.out else default_output_root())
    files = sorted(p for p in root.rglob("eval_*.csv") if not p.stem.endswith("_patches"))
    if not files:
        raise EvaluationError(f"no evaluation files under {root}")
    rows = [row for f in files for row in M.read_metric_csv(f)]
    out = _out_dir(args)
    M.write_metric_csv(out / "metrics_table.csv", rows)
    scores = {}
    for row in rows:
        key = f"{row['dataset']}/{row['model']}"
        scores.setdefault(key, {})[row["metric"]] = row["mean"]
    wanted = _merged(args, "report", {"metrics": args.metrics}).get("metrics")
    if wanted:
        keep = set(wanted.split(","))
        scores = {k: {m: v for m, v in s.items() if m in keep} for k, s in scores.items()}
    # raw per-patch points for external plots
    for f in sorted(root.rglob("eval_*_patches.csv")):
        target = out / f"points_{f.stem[5:-8]}.csv"
        if f.resolve() != target.resolve():
            target.write_text(f.read_text(encoding="utf-8"), encoding="utf-8")
    if len(scores) >= 2:
        table = M.correlate(scores)
        M.write_matrix_csv(out / "correlation_pearson.csv", table.names, table.pearson)
        M.write_matrix_csv(out / "correlation_spearman.csv", table.names, table.spearman)
        M.write_matrix_csv(out / "correlation_combined.csv", table.names, table.combined())
        print(f"correlation over {table.n_models} models: {', '.join(table.names)}")
    else:
        print("single model: correlation tables skipped")
    for key, s in scores.items():
        print(key + ": " + ", ".join(f"{m}={v:.6g}" for m, v in sorted(s.items())))
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="goldendie", description=__doc__.splitlines()[0])
    p.add_argument("--config", help="INI config file")
    p.add_argument("--seed", type=int, default=0, help="global seed (default 0)")
    p.add_argument("--out", help="output directory (default $GOLDENDIE_OUT or ./goldendie_out)")
    p.add_argument("--threads", type=int, help="cap BLAS/worker threads; 1 is bit-deterministic")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate a synthetic wafer dataset")
    g.add_argument("--size", type=int)
    g.add_argument("--name")
    g.add_argument("--rate-dust", type=float)
    g.add_argument("--rate-nitride", type=float)
    g.add_argument("--rate-resist", type=float)
    g.add_argument("--letter-defect-fraction", type=float)
    g.add_argument("--noise-sigma", type=float)
    g.add_argument("--misalignment-px", type=int)
    g.set_defaults(func=cmd_gen, seed_override=None)

    q = sub.add_parser("quantize", help="fit a palette and quantize the photo")
    q.add_argument("--dataset", required=True, help="manifest.json")
    q.add_argument("--k", type=int)
    q.add_argument("--sample-size", type=int)
    q.set_defaults(func=cmd_quantize)

    t = sub.add_parser("train", help="train a tree or U-Net simulator")
    t.add_argument("--dataset", required=True)
    t.add_argument("--model", choices=("tree", "unet"), default="unet")
    t.add_argument("--palette")
    t.add_argument("--loss", choices=("l2", "cross_entropy", "focal"))
    t.add_argument("--epochs", type=int)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--gamma", type=float)
    t.add_argument("--optimizer", choices=("sgd", "adam"))
    t.add_argument("--momentum", type=float)
    t.add_argument("--variance-threshold", type=float)
    t.add_argument("--widths", help="four comma-separated channel counts")
    t.add_argument("--n-samples", type=int, help="tree training pixels (default 5e6)")
    t.add_argument("--simulate", action="store_true", help="also write the best simulation")
    t.set_defaults(func=cmd_train, seed_override=None)

    def sim_source(sp):
        sp.add_argument("--dataset", required=True)
        sp.add_argument("--checkpoint", help="checkpoint file, tree.json or a training run directory")
        sp.add_argument("--simulation", help="precomputed simulation PNG")
        sp.add_argument("--oracle", action="store_true", help="use the clean render (golden.png)")
        sp.add_argument("--palette")
        sp.add_argument("--tile", type=int, default=256)
        sp.add_argument("--batch", type=int, default=20)

    s = sub.add_parser("simulate", help="simulate a whole wafer")
    sim_source(s)
    s.set_defaults(func=cmd_simulate)

    d = sub.add_parser("detect", help="score map, binarized mask and average precision")
    sim_source(d)
    d.add_argument("--threshold", type=float)
    d.add_argument("--metric")
    d.add_argument("--window", type=int)
    d.add_argument("--stride", type=int)
    d.add_argument("--region", help="x0,y0,w,h crop")
    d.set_defaults(func=cmd_detect)

    e = sub.add_parser("eval", help="patchwise similarity metrics")
    sim_source(e)
    e.add_argument("--model-name")
    e.add_argument("--loss")
    e.add_argument("--epoch")
    e.add_argument("--metrics", default="l1,l2,psnr,ssim")
    e.add_argument("--split", choices=("val", "all"), default="val")
    e.add_argument("--patch-size", type=int, default=64)
    e.set_defaults(func=cmd_eval)

    r = sub.add_parser("report", help="metric and correlation tables")
    r.add_argument("--input", help="directory searched for eval_*.csv (default: --out)")
    r.add_argument("--metrics", help="comma-separated subset")
    r.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.config_values = read_config(args.config)
        if "--seed" in (argv if argv is not None else sys.argv[1:]):
            args.seed_override = args.seed
        if args.threads is not None:
            if args.threads < 1:
                raise ConfigError("--threads must be at least 1")
            from threadpoolctl import threadpool_limits
            with threadpool_limits(limits=args.threads):
                return args.func(args)
        return args.func(args)
    except GoldenDieError as exc:
        print(f"goldendie: error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
