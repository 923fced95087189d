"""Command-line entry point.

Subcommands::

    crowdtrack simulate  --preset crowded --out-dir scene/
    crowdtrack refine    --det scene/det.txt --density scene/density.cmdg --out refined.txt
    crowdtrack track     --det scene/det.txt [--density ...] [--embeddings ...] --out results.txt
    crowdtrack eval      --gt scene/gt.txt --res results.txt [--csv metrics.csv]
    crowdtrack gradcheck --loss all --trials 100 --tol 1e-4
    crowdtrack sweep     --param window --values 1,7,19,31 --preset crowded --out sweep.csv

Exit status is 0 on success, 1 when a computation or input file fails and 2
on bad usage.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import sys
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np

from . import io as fio
from . import sim
from .gradcheck import CHECKS, run_gradcheck
from .metrics import CSV_COLUMNS, counting_eval, csv_row, evaluate, format_table
from .model import EMBEDDING_DIM, Detection, GeometryError, GridGeometry
from .refine import RefineReport, refine_frame
from .track import Tracker, TrackOutput

SWEEP_COLUMNS = ["value", "MOTA", "IDF1", "FP", "FN", "IDS", "MAE", "SSIM"]


class UsageError(Exception):
    """Raised for flag combinations argparse cannot express; exit code 2."""


# ------------------------------------------------------------------ pipeline


def run_pipeline(frames: Sequence[Sequence[Detection]], densities=None,
                 cfg: fio.RunConfig = fio.RunConfig()) -> Tuple[List[TrackOutput], List[RefineReport]]:
    """Track a sequence, refining each frame against its density map first."""
    if densities is not None and len(densities) != len(frames):
        raise GeometryError(f"{len(densities)} density frames for {len(frames)} detection frames")
    tracker = Tracker(cfg.assoc_config())
    rcfg = cfg.refine_config() if densities is not None else None
    outputs, reports = [], []
    for f, dets in enumerate(frames):
        if rcfg is not None:
            dets, report = refine_frame(dets, densities[f], rcfg)
            reports.append(report)
        outputs.extend(tracker.step(dets, frame=f + 1))
    return outputs, reports


def result_records(outputs: Sequence[TrackOutput]) -> List[fio.MotRecord]:
    return [fio.MotRecord(t.frame, t.id, *t.bbox.to_tuple(), 1.0) for t in outputs]


def _check_density_geometry(densities, cfg: fio.RunConfig, image_size=None):
    if not densities:
        return
    geom = densities[0].geom
    if geom.r != cfg.r:
        raise GeometryError(f"density grid stride r={geom.r} does not match config r={cfg.r}")
    if image_size is not None:
        want = GridGeometry(image_size[0], image_size[1], cfg.r).shape
        if geom.shape != want:
            raise GeometryError(
                f"density grid is {geom.shape[0]}x{geom.shape[1]} (rows x cols) but a "
                f"{image_size[0]}x{image_size[1]} image at r={cfg.r} needs {want[0]}x{want[1]}"
            )


def _load_inputs(args, cfg: fio.RunConfig):
    emb = fio.read_embeddings(args.embeddings, EMBEDDING_DIM) if args.embeddings else None
    densities = fio.read_density(args.density) if args.density else None
    _check_density_geometry(densities, cfg, args.image_size)
    n_frames = len(densities) if densities is not None else None
    records = fio.read_mot(args.det)
    if densities is not None and records and max(r.frame for r in records) > len(densities):
        raise GeometryError(
            f"{args.det} has frames up to {max(r.frame for r in records)} "
            f"but {args.density} holds only {len(densities)}"
        )
    if densities:
        geom = densities[0].geom
        cx = max((r.bb_left + r.bb_width / 2 for r in records), default=0.0)
        cy = max((r.bb_top + r.bb_height / 2 for r in records), default=0.0)
        if cx >= geom.in_w or cy >= geom.in_h:
            raise GeometryError(
                f"detections reach ({cx:g}, {cy:g}) px, outside the {geom.shape[0]}x{geom.shape[1]} "
                f"density grid ({geom.in_w}x{geom.in_h} px at r={geom.r})"
            )
    frames = fio.detections_by_frame(records, n_frames, emb)
    return frames, densities


def _write_report(path, reports: Sequence[RefineReport]):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for f, rep in enumerate(reports, 1):
            fh.write(json.dumps(rep.to_json(f), sort_keys=True) + "\n")


def _run_config(path) -> fio.RunConfig:
    return fio.read_config(path) if path else fio.RunConfig()


# ------------------------------------------------------------------ commands


def _sim_config(args) -> sim.SimConfig:
    base = sim.preset(args.preset) if args.preset else sim.SimConfig()
    overrides = {}
    if args.config:
        text = Path(args.config).read_text(encoding="utf-8")
        types = {f.name: f.type for f in dataclasses.fields(sim.SimConfig) if f.name != "sigma"}
        for lineno, key, raw in fio.parse_key_values(text, args.config):
            if key not in types:
                raise fio.ConfigError(f"{args.config}:{lineno}: unknown key {key!r}")
            try:
                if types[key].startswith("Tuple"):
                    lo, hi = (float(p) for p in raw.split(","))
                    overrides[key] = (lo, hi)
                elif types[key] == "int":
                    overrides[key] = int(raw)
                else:
                    overrides[key] = float(raw)
            except ValueError:
                raise fio.ConfigError(f"{args.config}:{lineno}: {key}: cannot parse {raw!r}") from None
    if args.seed is not None:
        overrides["seed"] = args.seed
    try:
        return dataclasses.replace(base, **overrides)
    except ValueError as exc:
        raise fio.ConfigError(str(exc)) from None


def cmd_simulate(args) -> int:
    cfg = _sim_config(args)
    scene = sim.generate(cfg)
    try:
        scene.write(args.out_dir)
    except OSError as exc:
        raise fio.FormatError(f"cannot write to {args.out_dir}: {exc.strerror or exc}") from None
    print(
        f"agents={cfg.n_agents} frames={cfg.n_frames} "
        f"miss_rate={scene.miss_rate():.4f} fp_per_frame={scene.fp_per_frame():.4f}"
    )
    return 0


def cmd_refine(args) -> int:
    cfg = _run_config(args.config)
    frames, densities = _load_inputs(args, cfg)
    rcfg = cfg.refine_config()
    records, reports = [], []
    for f, (dets, dens) in enumerate(zip(frames, densities), 1):
        refined, rep = refine_frame(dets, dens, rcfg)
        reports.append(rep)
        records.extend(fio.MotRecord(f, -1, *d.bbox.to_tuple(), d.confidence) for d in refined)
    # keep the within-frame order so embedding indices stay meaningful
    with open(args.out, "w", encoding="utf-8", newline="\n") as fh:
        for rec in records:
            fh.write(fio.format_mot_line(rec) + "\n")
    if args.report:
        _write_report(args.report, reports)
    added = sum(len(r.added) for r in reports)
    removed = sum(len(r.removed) for r in reports)
    print(f"frames={len(reports)} added={added} removed={removed}")
    return 0


def cmd_track(args) -> int:
    cfg = _run_config(args.config)
    frames, densities = _load_inputs(args, cfg)
    outputs, reports = run_pipeline(frames, densities, cfg)
    fio.write_mot(args.out, result_records(outputs))
    if densities is not None:
        report = args.report or str(Path(args.out).with_suffix(".refine.jsonl"))
        _write_report(report, reports)
    n_ids = len({t.id for t in outputs})
    print(f"frames={len(frames)} tracks={n_ids} boxes={len(outputs)}")
    return 0


def cmd_eval(args) -> int:
    gt = fio.read_mot(args.gt)
    res = fio.read_mot(args.res)
    gt_last = max((r.frame for r in gt), default=0)
    res_last = max((r.frame for r in res), default=0)
    if res_last > gt_last:
        raise fio.FormatError(f"{args.res} has frames up to {res_last} but {args.gt} ends at {gt_last}")
    cfg = _run_config(args.config)
    ev = evaluate(gt, res, cfg.iou_match)
    if (args.density_pred is None) != (args.density_gt is None):
        raise UsageError("--density-pred and --density-gt must be given together")
    if args.density_pred:
        pred = fio.read_density(args.density_pred)
        gtd = fio.read_density(args.density_gt, pred[0].geom.shape if pred else None)
        if len(pred) != len(gtd):
            raise fio.DimensionError(f"{len(pred)} predicted density frames but {len(gtd)} ground-truth frames")
        counts = np.zeros(len(gtd), dtype=int)
        for r in gt:
            if r.frame > len(gtd):
                raise fio.DimensionError(f"{args.gt} has frame {r.frame} beyond the {len(gtd)} density frames")
            counts[r.frame - 1] += 1
        ev.counting_mae, ev.counting_ssim = counting_eval(pred, counts.tolist(), gtd)
    print(format_table({args.name: ev}))
    row = csv_row(args.name, ev)
    if args.csv:
        with open(args.csv, "w", encoding="utf-8", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(CSV_COLUMNS)
            w.writerow(row)
    else:
        print(",".join(row))
    return 0


def cmd_gradcheck(args) -> int:
    names = list(CHECKS) if args.loss == "all" else [args.loss]
    results = run_gradcheck(names, args.trials, args.tol, args.seed)
    for res in results:
        status = "PASS" if res.passed else "FAIL"
        print(f"{res.name:<24} max_rel_err={res.max_rel_error:.3e} tol={res.tol:.1e} {status}")
    failed = [r.name for r in results if not r.passed]
    if failed:
        print(f"gradcheck failed: {', '.join(failed)}", file=sys.stderr)
        return 1
    return 0


def parse_values(text: str, param: str) -> List[float]:
    """Comma-separated sweep values, deduplicated in first-seen order."""
    parts = [p.strip() for p in text.split(",") if p.strip()]
    if not parts:
        raise UsageError("--values needs at least one value")
    out = []
    for p in parts:
        try:
            v = float(p)
        except ValueError:
            raise UsageError(f"--values: cannot parse {p!r}") from None
        if param == "window" and (v != int(v) or v < 1 or int(v) % 2 == 0):
            raise UsageError(f"--values: window must be a positive odd integer, got {p}")
        if param == "mu" and not v > 0:
            raise UsageError(f"--values: mu must be > 0, got {p}")
        if v in out:
            print(f"warning: duplicate value {p} ignored", file=sys.stderr)
            continue
        out.append(v)
    return out


OUTPUT_STEP = 1e-3


def amplified_roundtrip(dens, mu: float, step: float = OUTPUT_STEP) -> np.ndarray:
    """Stand-in for a density head trained against ``mu * D``.

    The output is taken to resolve values only down to a fixed absolute
    ``step``; dividing by ``mu`` afterwards shows how amplification keeps
    small per-cell densities from being rounded away.
    """
    d = np.asarray(dens, dtype=np.float64)
    return np.round(mu * d / step) * step / mu


def sweep_rows(param: str, values: Sequence[float], scene: sim.Scene,
               cfg: fio.RunConfig = fio.RunConfig()) -> List[dict]:
    gt = scene.gt_records()
    counts = scene.gt_counts()
    rows = []
    for v in values:
        if param == "window":
            run_cfg = dataclasses.replace(cfg, window=int(v))
            pred = scene.densities
        else:
            run_cfg = dataclasses.replace(cfg, mu=v)
            pred = [amplified_roundtrip(d, v) for d in scene.densities]
        outputs, _ = run_pipeline(scene.detections, scene.densities, run_cfg)
        ev = evaluate(gt, result_records(outputs), cfg.iou_match)
        mae, ssim_mean = counting_eval(pred, counts, scene.densities)
        label = str(int(v)) if param == "window" else repr(v)
        rows.append({"value": label, "MOTA": ev.mota, "IDF1": ev.idf1, "FP": ev.fp,
                     "FN": ev.fn, "IDS": ev.ids, "MAE": mae, "SSIM": ssim_mean})
    return rows


def _sweep_csv(path, rows):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SWEEP_COLUMNS)
        for r in rows:
            w.writerow([r["value"], f"{r['MOTA']:.6f}", f"{r['IDF1']:.6f}", r["FP"], r["FN"],
                        r["IDS"], f"{r['MAE']:.6f}", f"{r['SSIM']:.6f}"])


def sweep_svg(rows, param: str, width: int = 480, height: int = 300) -> str:
    """A plain line chart of MOTA and IDF1 against the swept value."""
    pad = 48
    xs = [float(r["value"]) for r in rows]
    series = {"MOTA": "#1f77b4", "IDF1": "#d62728"}
    ys = [r[k] for r in rows for k in series]
    x0, x1 = min(xs), max(xs)
    y0, y1 = min(ys), max(ys)
    if x1 == x0:
        x0, x1 = x0 - 1, x1 + 1
    if y1 - y0 < 1e-9:
        y0, y1 = y0 - 0.05, y1 + 0.05

    def px(x):
        return pad + (x - x0) / (x1 - x0) * (width - 2 * pad)

    def py(y):
        return height - pad - (y - y0) / (y1 - y0) * (height - 2 * pad)

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="11">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<line x1="{pad}" y1="{height - pad}" x2="{width - pad}" y2="{height - pad}" stroke="black"/>',
        f'<line x1="{pad}" y1="{pad}" x2="{pad}" y2="{height - pad}" stroke="black"/>',
        f'<text x="{width / 2:.1f}" y="{height - 12}" text-anchor="middle">{param}</text>',
        f'<text x="{pad - 6}" y="{py(y1):.1f}" text-anchor="end">{y1:.3f}</text>',
        f'<text x="{pad - 6}" y="{py(y0):.1f}" text-anchor="end">{y0:.3f}</text>',
    ]
    for r, x in zip(rows, xs):
        out.append(f'<text x="{px(x):.1f}" y="{height - pad + 14}" text-anchor="middle">{r["value"]}</text>')
    order = np.argsort(xs, kind="stable")
    for i, (key, color) in enumerate(series.items()):
        pts = " ".join(f"{px(xs[j]):.1f},{py(rows[j][key]):.1f}" for j in order)
        out.append(f'<polyline points="{pts}" fill="none" stroke="{color}" stroke-width="2"/>')
        for j in order:
            out.append(f'<circle cx="{px(xs[j]):.1f}" cy="{py(rows[j][key]):.1f}" r="3" fill="{color}"/>')
        out.append(f'<text x="{width - pad + 4}" y="{pad + 14 * i}" fill="{color}">{key}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def cmd_sweep(args) -> int:
    values = parse_values(args.values, args.param)
    cfg = _run_config(args.config)
    overrides = {"seed": args.seed} if args.seed is not None else {}
    scene = sim.generate(sim.preset(args.preset, **overrides))
    rows = sweep_rows(args.param, values, scene, cfg)
    _sweep_csv(args.out, rows)
    svg = args.svg or str(Path(args.out).with_suffix(".svg"))
    Path(svg).write_text(sweep_svg(rows, args.param), encoding="utf-8")
    for r in rows:
        print(f"{args.param}={r['value']} MOTA={r['MOTA']:.4f} IDF1={r['IDF1']:.4f} "
              f"FP={r['FP']} FN={r['FN']} IDS={r['IDS']}")
    return 0


# -------------------------------------------------------------------- parser


def _image_size(text: str) -> Tuple[int, int]:
    try:
        w, h = (int(p) for p in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected WIDTHxHEIGHT, got {text!r}") from None
    if w <= 0 or h <= 0:
        raise argparse.ArgumentTypeError("image size must be positive")
    return w, h


def _positive_int(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError("must be >= 1")
    return v


def _non_negative_float(text: str) -> float:
    v = float(text)
    if not v >= 0:
        raise argparse.ArgumentTypeError("must be >= 0")
    return v


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="crowdtrack", description="Density-guided multi-object tracking toolkit.")
    sub = p.add_subparsers(dest="command", required=True, metavar="command")

    s = sub.add_parser("simulate", help="write a seeded synthetic scene")
    src = s.add_mutually_exclusive_group(required=True)
    src.add_argument("--preset", choices=sorted(sim.PRESETS))
    src.add_argument("--config", help="key = value file overriding the default scene settings")
    s.add_argument("--out-dir", required=True)
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("refine", help="refine detections against density maps")
    s.add_argument("--det", required=True)
    s.add_argument("--density", required=True)
    s.add_argument("--embeddings")
    s.add_argument("--config")
    s.add_argument("--out", required=True, help="refined detections in MOT format")
    s.add_argument("--report", help="JSON-lines refinement report")
    s.add_argument("--image-size", type=_image_size, metavar="WxH")
    s.set_defaults(func=cmd_refine)

    s = sub.add_parser("track", help="track detections, optionally refining them first")
    s.add_argument("--det", required=True)
    s.add_argument("--density")
    s.add_argument("--embeddings")
    s.add_argument("--config")
    s.add_argument("--out", required=True)
    s.add_argument("--report", help="refinement report path (default: OUT with .refine.jsonl)")
    s.add_argument("--image-size", type=_image_size, metavar="WxH",
                   help="check the density grid against this image size")
    s.set_defaults(func=cmd_track)

    s = sub.add_parser("eval", help="score a result file against ground truth")
    s.add_argument("--gt", required=True)
    s.add_argument("--res", required=True)
    s.add_argument("--density-pred")
    s.add_argument("--density-gt")
    s.add_argument("--config")
    s.add_argument("--name", default="sequence")
    s.add_argument("--csv", help=f"write a CSV with columns {','.join(CSV_COLUMNS)}")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("gradcheck", help="compare analytic loss gradients with finite differences")
    s.add_argument("--loss", default="all", choices=["all", *CHECKS])
    s.add_argument("--trials", type=_positive_int, default=100)
    s.add_argument("--tol", type=_non_negative_float, default=1e-4)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_gradcheck)

    s = sub.add_parser(
        "sweep", help="metrics against one parameter on a simulated scene",
        description=(
            "Track a seeded scene once per value and write one CSV row each. "
            "window changes the refinement window. mu only affects the MAE and "
            "SSIM columns: with no network to train, the predicted density is "
            "the ground truth scaled by mu, rounded to a fixed output step of "
            f"{OUTPUT_STEP:g} and scaled back."
        ),
    )
    s.add_argument("--param", required=True, choices=["window", "mu"])
    s.add_argument("--values", required=True, help="comma-separated list, e.g. 1,7,19,31")
    s.add_argument("--preset", default="crowded", choices=sorted(sim.PRESETS))
    s.add_argument("--seed", type=int)
    s.add_argument("--config")
    s.add_argument("--out", required=True, help=f"CSV with columns {','.join(SWEEP_COLUMNS)}")
    s.add_argument("--svg", help="chart path (default: OUT with .svg)")
    s.set_defaults(func=cmd_sweep)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        parser.error(str(exc))
    except (fio.FormatError, fio.ConfigError, GeometryError, RuntimeError, ValueError, KeyError, OSError) as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        print(f"error: {msg}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
