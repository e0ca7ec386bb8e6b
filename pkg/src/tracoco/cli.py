"""``tracoco`` command line: ``synth | train | infer | eval``.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric error.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import sys
from pathlib import Path

import numpy as np

from .config import ExperimentConfig
from .data import VolumeRecord, load_dataset, make_split, read_volume, synth_generate, write_dataset, write_volume
from .errors import DataError, TracocoError
from .inference import CCT_FRACTION, binarize, cct_filter, plan_windows, sliding_window_infer
from .metrics import confidence_histogram, evaluate
from .model import checkpoint_load, init_pair
from .trainer import run

log = logging.getLogger("tracoco")

METRIC_FIELDS = ["case_id", "dice", "jaccard", "asd", "hd95", "post_processed"]


def _triple_arg(text):
    try:
        parts = [int(p) for p in text.split(",")]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a,b,c integers, got {text!r}") from None
    if len(parts) == 1:
        parts *= 3
    if len(parts) != 3:
        raise argparse.ArgumentTypeError(f"expected 3 comma-separated integers, got {text!r}")
    return parts


def _on_off(text):
    if text not in ("on", "off"):
        raise argparse.ArgumentTypeError("expected 'on' or 'off'")
    return text == "on"


def _split_records(records, split, which):
    ids = getattr(split, which)
    missing = [i for i in ids if i not in records]
    if missing:
        raise DataError(f"split lists ids without volume files: {', '.join(missing[:5])}")
    return [records[i] for i in ids]


def cmd_synth(cfg: ExperimentConfig) -> Path:
    out = Path(cfg.get("data.dir") or cfg.output_dir / "data")
    n = int(cfg.get("data.n", 40))
    records = synth_generate(cfg.synth(), n)
    split = make_split([r.id for r in records], **cfg.split_args())
    write_dataset(records, out, split)
    cfg.echo(out)
    log.info("wrote %d volumes to %s", n, out)
    return out


def cmd_train(cfg: ExperimentConfig, resume=None):
    cfg.require_paths("data.dir")
    records, split = load_dataset(cfg.get("data.dir"))
    if split is None:
        raise DataError(f"no split.json in {cfg.get('data.dir')}")
    tcfg = cfg.train()
    pair = init_pair(cfg.net(), *cfg.model_seeds())
    out = cfg.output_dir
    cfg.echo(out)
    result = run(
        tcfg,
        pair,
        _split_records(records, split, "labelled"),
        _split_records(records, split, "unlabelled"),
        out,
        validation=_split_records(records, split, "validation"),
        resume=resume,
        config_echo=cfg.raw,
    )
    log.info("finished at step %d; best val dice %.2f at step %d", result.final_step, result.best_dice, result.best_step)
    return result


def cmd_infer(cfg: ExperimentConfig):
    cfg.require_paths("infer.checkpoint", "infer.inputs")
    pair, _, step, _ = checkpoint_load(cfg.get("infer.checkpoint"))
    model = pair.model1 if int(cfg.get("infer.model", 1)) == 1 else pair.model2
    window = cfg.get("infer.window") or list(cfg.train().crop_size)
    strides = cfg.get("infer.strides") or [max(1, w // 2) for w in window]
    use_cct = bool(cfg.get("infer.cct", True))
    fraction = float(cfg.get("infer.cct_fraction", CCT_FRACTION))
    connectivity = int(cfg.get("infer.connectivity", 26))

    inputs = Path(cfg.get("infer.inputs"))
    records, split = load_dataset(inputs) if inputs.is_dir() else ({inputs.name.split(".")[0]: read_volume(inputs)}, None)
    ids = cfg.get("infer.ids")
    if ids is None:
        ids = split.test if split is not None and split.test else sorted(records)
    elif isinstance(ids, str):
        ids = getattr(split, ids) if split is not None and hasattr(split, ids) else [ids]
    out = cfg.output_dir / "predictions"
    out.mkdir(parents=True, exist_ok=True)
    cfg.echo(cfg.output_dir)
    plans = {}
    for rid in ids:
        if rid not in records:
            raise DataError(f"no input volume for id {rid}")
        rec = records[rid]
        plan = plan_windows(rec.image.shape, window, strides)
        plans[rid] = plan.describe()
        field = sliding_window_infer(model, rec.image, plan)
        mask = binarize(field)
        if use_cct:
            mask = cct_filter(mask, fraction, connectivity)
        write_volume(VolumeRecord(rid, field[1].astype(np.float32), mask, rec.spacing), out / f"{rid}.trcc")
        log.info("predicted %s with %d windows (strides %s)", rid, len(plan), tuple(plan.strides))
    manifest = {"checkpoint": str(cfg.get("infer.checkpoint")), "step": step, "post_processed": use_cct,
                "cct_fraction": fraction, "connectivity": connectivity, "plans": plans}
    (out / "predictions.json").write_text(json.dumps(manifest, indent=2))
    return out


def _fmt(v):
    return "nan" if isinstance(v, float) and math.isnan(v) else v


def cmd_eval(cfg: ExperimentConfig) -> int:
    cfg.require_paths("eval.predictions", "eval.ground_truth")
    pred_dir, gt_dir = Path(cfg.get("eval.predictions")), Path(cfg.get("eval.ground_truth"))
    bins = int(cfg.get("eval.bins", 10))
    manifest_path = pred_dir / "predictions.json"
    post = json.loads(manifest_path.read_text()).get("post_processed", False) if manifest_path.exists() else False
    out = cfg.output_dir
    out.mkdir(parents=True, exist_ok=True)
    rows, reports, hist, failures = [], [], None, 0
    for path in sorted(pred_dir.glob("*.trcc")):
        rid = path.name[:-5]
        gt_path = gt_dir / f"{rid}.trcc"
        if not gt_path.exists():
            failures += 1
            log.error("case %s: missing ground truth %s", rid, gt_path)
            rows.append({"case_id": rid, "dice": "error", "jaccard": "error", "asd": "error", "hd95": "error",
                         "post_processed": "missing_ground_truth"})
            continue
        pred = read_volume(path)
        gt = read_volume(gt_path)
        if gt.label is None:
            raise DataError(f"ground truth {gt_path} has no label section")
        mask = pred.label if pred.label is not None else (pred.image > 0.5).astype(np.uint8)
        rep = evaluate(mask, gt.label, post_processed=post)
        reports.append(rep)
        rows.append({k: _fmt(v) for k, v in rep.as_row(rid).items()})
        if pred.image is not None:
            h = confidence_histogram(pred.image, gt.label, bins)
            hist = h if hist is None else hist + h
    if reports:
        rows.append({
            "case_id": "mean",
            "dice": float(np.mean([r.dice_pct for r in reports])),
            "jaccard": float(np.mean([r.jaccard_pct for r in reports])),
            "asd": _fmt(_nanmean([r.asd_voxels for r in reports])),
            "hd95": _fmt(_nanmean([r.hd95_voxels for r in reports])),
            "post_processed": int(post),
        })
    with open(out / "metrics.csv", "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=METRIC_FIELDS)
        w.writeheader()
        w.writerows(rows)
    if hist is not None:
        hist.write_csv(out / "histogram.csv")
    if failures:
        raise DataError(f"{failures} case(s) could not be evaluated")
    return 0


def _nanmean(values):
    finite = [v for v in values if not math.isnan(v)]
    return float(np.mean(finite)) if finite else math.nan


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="tracoco", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="YAML experiment config")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--output-dir")
        return sp

    common(sub.add_parser("synth", help="generate a synthetic dataset"))
    t = common(sub.add_parser("train", help="co-train a model pair"))
    t.add_argument("--lambda-max", type=float)
    t.add_argument("--max-iter", type=int)
    t.add_argument("--data-dir")
    t.add_argument("--resume", help="checkpoint to continue from")
    i = common(sub.add_parser("infer", help="sliding-window inference"))
    i.add_argument("--checkpoint")
    i.add_argument("--inputs")
    i.add_argument("--cct", type=_on_off)
    i.add_argument("--strides", type=_triple_arg)
    e = common(sub.add_parser("eval", help="score predictions"))
    e.add_argument("--predictions")
    e.add_argument("--ground-truth")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    log.setLevel(logging.DEBUG if args.verbose else logging.INFO)
    overrides = {"seed": args.seed, "output_dir": args.output_dir}
    extra = {
        "lambda_max": "train.lambda_max", "max_iter": "train.max_iter", "data_dir": "data.dir",
        "checkpoint": "infer.checkpoint", "inputs": "infer.inputs", "cct": "infer.cct", "strides": "infer.strides",
        "predictions": "eval.predictions", "ground_truth": "eval.ground_truth",
    }
    for attr, key in extra.items():
        if hasattr(args, attr):
            overrides[key] = getattr(args, attr)
    try:
        cfg = ExperimentConfig.load(args.config, overrides)
        if args.command == "synth":
            cmd_synth(cfg)
        elif args.command == "train":
            cmd_train(cfg, resume=args.resume)
        elif args.command == "infer":
            cmd_infer(cfg)
        else:
            cmd_eval(cfg)
    except TracocoError as e:
        log.error("%s", e)
        return e.exit_code
    except OSError as e:
        log.error("I/O error: %s", e)
        return DataError.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
