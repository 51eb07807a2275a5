"""Command-line entry point: ``lakdnet <subcommand> ...``.

Exit codes: 0 success, 2 config error, 3 data error, 4 numerical failure.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from typing import List, Optional

import numpy as np

from .data import BlurSpec, DataError, PairDataset, procedural_source, synth_dataset
from .erf import extract_scanline, load_erf, probe_lakdnet, save_erf
from .erfmeter import erfm, fit_gnd, params_from_report, read_fit_report, pearson_r, write_curve_csv, write_fit_report
from .imageio import FormatError, load_image_dir, read_pnm, write_pnm
from .model import ConfigError, LAYER_NAMES
from .train import NumericalError, evaluate, infer_image, load_model, split_config, train

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4

logger = logging.getLogger("lakdnet")

METRICS_SUFFIX = ".metrics.json"


def _load_config(path: Optional[str]):
    if path is None:
        return split_config({})
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    return split_config(doc)


def _sharp_images(args) -> List[np.ndarray]:
    if args.data:
        images = load_image_dir(args.data)
        if not images:
            raise DataError(f"no PGM/PPM images in {args.data}")
        return images
    return procedural_source(args.synthetic, args.size, 3, args.seed)


def cmd_train(args) -> int:
    net, tc = _load_config(args.config)
    images = _sharp_images(args)
    spec = BlurSpec(kind=args.blur, size=args.blur_min, size_max=args.blur_max, rng_seed=args.seed)
    pairs = synth_dataset(images, spec, len(images))
    if net.input_mode == "dual_pixel":
        pairs.blurry = [np.concatenate([b, b]) for b in pairs.blurry]
    held = min(args.holdout, len(pairs) - 1)
    train_set = PairDataset(pairs.blurry[:len(pairs) - held], pairs.sharp[:len(pairs) - held])
    trace = args.trace or f"{args.out}.loss.csv"
    result = train(net, tc, train_set, out_path=args.out, trace_path=trace, log_every=args.log_every)
    metrics = {"iterations": len(result.losses), "final_loss": result.losses[-1] if result.losses else None}
    if held:
        test_set = PairDataset(pairs.blurry[-held:], pairs.sharp[-held:])
        metrics.update(evaluate(result.params, net, test_set))
        metrics["psnr"] = metrics["psnr_restored"]
    with open(f"{args.out}{METRICS_SUFFIX}", "w") as fh:
        json.dump(metrics, fh, indent=2)
    print(json.dumps(metrics))
    return EXIT_OK


def cmd_infer(args) -> int:
    params, net, _ = load_model(args.ckpt)
    img = read_pnm(args.inp)
    if net.input_mode == "dual_pixel" and img.shape[0] == 3:
        raise DataError("dual-pixel networks need a 6-channel input; pass --right for the second view")
    if args.right:
        img = np.concatenate([img, read_pnm(args.right)])
    out = infer_image(params, net, img, tile=args.tile, overlap=args.overlap)
    write_pnm(args.out, np.clip(out, 0.0, 1.0))
    return EXIT_OK


def cmd_erf(args) -> int:
    params, net, _ = load_model(args.ckpt)
    erf_map = probe_lakdnet(params, net, layer=args.layer, patch=args.size, n_patches=args.patches,
                            input_source=args.inputs, rng_seed=args.seed)
    save_erf(erf_map, args.out)
    print(json.dumps({"layer": args.layer, "max_value": erf_map.max_value, "patch_count": erf_map.patch_count}))
    return EXIT_OK


def cmd_fitgnd(args) -> int:
    erf_map = load_erf(args.erf)
    profile = extract_scanline(erf_map)
    if not np.ptp(profile.ys) > 0:
        raise DataError("ERF scanline is constant; nothing to fit")
    params = fit_gnd(profile)
    report = write_fit_report(args.out, params, profile.max_value, profile.layer_name)
    if args.curve:
        write_curve_csv(args.curve, profile.xs, profile.ys, params)
    print(json.dumps(report))
    if not params.converged:
        logger.error("fit did not converge; best-so-far parameters written to %s", args.out)
        return EXIT_NUMERIC
    return EXIT_OK


def cmd_erfm(args) -> int:
    report = read_fit_report(args.fit)
    score = erfm(params_from_report(report), report["max_value"])
    print(repr(score.value))
    return EXIT_OK


def _read_columns(path, names):
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = [n for n in names if n not in (reader.fieldnames or [])]
        if missing:
            raise DataError(f"{path} lacks columns {missing}")
        cols = {n: [] for n in names}
        for line, row in enumerate(reader, start=2):
            for n in names:
                try:
                    cols[n].append(float(row[n]))
                except (TypeError, ValueError) as exc:
                    raise DataError(f"{path}:{line}: bad {n} value {row[n]!r}") from exc
    return cols


def cmd_correlate(args) -> int:
    cols = _read_columns(args.pairs, ("erfm", "psnr"))
    try:
        res = pearson_r(cols["erfm"], cols["psnr"])
    except ValueError as exc:
        raise DataError(str(exc)) from exc
    print(repr(res.r))
    return EXIT_OK


REPORT_COLUMNS = ("run", "layer", "sigma", "beta", "mu", "c1", "c2", "r_squared", "psnr", "erfm", "max_value")


def collect_runs(runs_dir) -> List[dict]:
    """One row per fit report found under ``runs_dir``.

    PSNR is taken from a ``*.metrics.json`` in the same directory when present.
    """
    if not os.path.isdir(runs_dir):
        raise DataError(f"not a directory: {runs_dir}")
    rows = []
    for root, _, files in sorted(os.walk(runs_dir)):
        psnr = ""
        for name in sorted(files):
            if name.endswith(METRICS_SUFFIX):
                with open(os.path.join(root, name)) as fh:
                    psnr = json.load(fh).get("psnr", "")
        for name in sorted(files):
            if not name.endswith(".json") or name.endswith(METRICS_SUFFIX):
                continue
            path = os.path.join(root, name)
            with open(path) as fh:
                try:
                    doc = json.load(fh)
                except json.JSONDecodeError:
                    continue
            if not isinstance(doc, dict) or "sigma" not in doc or "r_squared" not in doc:
                continue
            doc = read_fit_report(path)
            row = {k: doc[k] for k in REPORT_COLUMNS if k in doc}
            row["run"] = os.path.relpath(path, runs_dir)
            row["psnr"] = doc.get("psnr", psnr)
            rows.append(row)
    return rows


def cmd_report(args) -> int:
    rows = collect_runs(args.runs)
    if not rows:
        raise DataError(f"no fit reports under {args.runs}")
    fh = open(args.out, "w", newline="") if args.out else sys.stdout
    try:
        writer = csv.DictWriter(fh, fieldnames=REPORT_COLUMNS)
        writer.writeheader()
        writer.writerows(rows)
    finally:
        if args.out:
            fh.close()
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="lakdnet", description="Large-kernel deblurring network and ERF analysis.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train on synthetically blurred images")
    t.add_argument("--config", help="flat JSON of network and training fields")
    t.add_argument("--data", help="directory of sharp PGM/PPM images")
    t.add_argument("--synthetic", type=int, default=200, help="procedural images to use when --data is absent")
    t.add_argument("--size", type=int, default=64, help="procedural image size")
    t.add_argument("--blur", choices=("gaussian", "disk"), default="gaussian")
    t.add_argument("--blur-min", type=float, default=1.0)
    t.add_argument("--blur-max", type=float, default=2.0)
    t.add_argument("--holdout", type=int, default=0, help="pairs held out for PSNR evaluation")
    t.add_argument("--seed", type=int, default=0, help="data seed")
    t.add_argument("--trace", help="loss trace CSV (default <out>.loss.csv)")
    t.add_argument("--log-every", type=int, default=100)
    t.add_argument("--out", required=True, help="checkpoint path")
    t.set_defaults(func=cmd_train)

    i = sub.add_parser("infer", help="deblur one image")
    i.add_argument("--ckpt", required=True)
    i.add_argument("--in", dest="inp", required=True)
    i.add_argument("--right", help="second dual-pixel view")
    i.add_argument("--out", required=True)
    i.add_argument("--tile", type=int, default=256)
    i.add_argument("--overlap", type=int, default=16)
    i.set_defaults(func=cmd_infer)

    e = sub.add_parser("erf", help="probe the effective receptive field")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--layer", default="bt_neck", choices=LAYER_NAMES)
    e.add_argument("--patches", type=int, default=32)
    e.add_argument("--size", type=int, default=64)
    e.add_argument("--inputs", help="directory of images to crop patches from (default: uniform noise)")
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_erf)

    f = sub.add_parser("fitgnd", help="fit a generalized normal curve to an ERF scanline")
    f.add_argument("--erf", required=True)
    f.add_argument("--out", required=True)
    f.add_argument("--curve", help="optional CSV of (x, y, f(x))")
    f.set_defaults(func=cmd_fitgnd)

    m = sub.add_parser("erfm", help="ERFM score of a fit report")
    m.add_argument("--fit", required=True)
    m.set_defaults(func=cmd_erfm)

    c = sub.add_parser("correlate", help="Pearson r between erfm and psnr columns")
    c.add_argument("--pairs", required=True)
    c.set_defaults(func=cmd_correlate)

    r = sub.add_parser("report", help="aggregate fit reports into one CSV")
    r.add_argument("--runs", required=True)
    r.add_argument("--out")
    r.set_defaults(func=cmd_report)
    return p


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        logger.error("config error: %s", exc)
        return EXIT_CONFIG
    except NumericalError as exc:
        logger.error("numerical failure: %s", exc)
        return EXIT_NUMERIC
    except (DataError, FormatError, FileNotFoundError, ValueError) as exc:
        logger.error("data error: %s", exc)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
