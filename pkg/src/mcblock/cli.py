"""Experiment driver: data generation, training, ID/OOD evaluation, reports.

Configuration is line-oriented ``key = value`` with dotted sections; CLI
``--set key=value`` flags override file values, and the fully resolved
config is echoed into every run directory (config.resolved) and report.
Everything an invocation emits is a pure function of (config, seed) except
the single ``timestamp`` field in metrics.json.

Exit behavior: any failure prints ``MCBLOCK-ERROR <code>`` as its first
stderr line, then a human-readable message, and exits nonzero.
"""

from __future__ import annotations

import argparse
import datetime as _dt
import json
import math
import sys
from pathlib import Path

import numpy as np

from .errors import ConfigError, McblockError, ReportError, TrainingError
from .mc_inference import McConfig, mc_detect
from .metrics import (
    MetricsReport,
    average_precision,
    detection_brier,
    dump_report,
    load_report,
)
from .model import (
    check_compatible,
    detector_forward,
    detector_hyper,
    init_detector_params,
    load_params,
    save_params,
    total_loss,
)
from .ppm import write_ppm
from .rng import Rng
from .shapes import generate, images_to_input, load_split
from .tensor import Sgd, Tensor
from .viz import draw_detections

# purpose indices for deriving independent streams from the experiment seed
STREAM_INIT, STREAM_MASK, STREAM_SHUFFLE, STREAM_EVAL = 1, 2, 3, 4

DEFAULTS = {
    "seed": 0,
    "data.root": "data",
    "data.n_train": 2000,
    "data.n_val": 200,
    "data.n_test_id": 300,
    "data.n_test_ood": 300,
    "model.classes": 3,
    "dropblock.p": 0.1,
    "dropblock.block_size": 3,
    "dropblock.per_channel": False,
    "dropout.p": 0.5,
    "train.epochs": 30,
    "train.batch_size": 8,
    "train.lr": 0.01,
    "train.momentum": 0.9,
    "train.clip_norm": 5.0,
    "train.mode": "training",
    "loss.lambda_box": 1.0,
    "loss.lambda_obj": 1.0,
    "loss.lambda_cls": 1.0,
    "loss.lambda_wd": 5e-4,
    "loss.use_gaussian": True,
    "loss.use_giou": True,
    "mc.samples": 30,
    "mc.merge_iou": 0.5,
    "mc.min_support_frac": 0.3,
    "mc.method": "dropblock",
    "eval.conf_thresh": 0.25,
    "eval.nms_iou": 0.45,
    "eval.iou_thresh": 0.5,
    "eval.overlays": False,
}


# -- configuration -----------------------------------------------------------------


def _parse_value(key: str, text: str):
    default = DEFAULTS[key]
    text = text.strip()
    if isinstance(default, bool):
        if text.lower() in ("true", "1", "yes"):
            return True
        if text.lower() in ("false", "0", "no"):
            return False
        raise ConfigError(f"{key}: expected a boolean, got {text!r}")
    try:
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
    except ValueError as e:
        raise ConfigError(f"{key}: {e}") from e
    return text


def parse_config_file(path) -> dict:
    values = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
        key, _, value = stripped.partition("=")
        key = key.strip()
        if key not in DEFAULTS:
            raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
        values[key] = _parse_value(key, value)
    return values


def resolve_config(config_path=None, overrides=()) -> dict:
    cfg = dict(DEFAULTS)
    if config_path:
        cfg.update(parse_config_file(config_path))
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, _, value = item.partition("=")
        key = key.strip()
        if key not in DEFAULTS:
            raise ConfigError(f"unknown key {key!r}")
        cfg[key] = _parse_value(key, value)
    validate_config(cfg)
    return cfg


def validate_config(cfg: dict) -> None:
    if cfg["train.epochs"] < 1 or cfg["train.batch_size"] < 1:
        raise ConfigError("train.epochs and train.batch_size must be >= 1")
    if not 0.0 <= cfg["dropblock.p"] < 1.0:
        raise ConfigError("dropblock.p must lie in [0, 1)")
    if cfg["dropblock.block_size"] % 2 == 0 or cfg["dropblock.block_size"] < 1:
        raise ConfigError("dropblock.block_size must be odd and positive")
    if not 0.0 <= cfg["dropout.p"] < 1.0:
        raise ConfigError("dropout.p must lie in [0, 1)")
    if cfg["mc.method"] not in ("dropblock", "dropout", "none"):
        raise ConfigError(f"mc.method {cfg['mc.method']!r} invalid")
    if cfg["train.mode"] not in ("training", "disabled"):
        raise ConfigError("train.mode must be 'training' or 'disabled'")
    if not 0.0 <= cfg["eval.conf_thresh"] <= 1.0:
        raise ConfigError("eval.conf_thresh must lie in [0, 1]")
    McConfig(cfg["mc.samples"], cfg["mc.merge_iou"], cfg["mc.min_support_frac"],
             cfg["mc.method"], cfg["dropout.p"]).validate()


def format_config(cfg: dict) -> str:
    def fmt(v):
        if isinstance(v, bool):
            return "true" if v else "false"
        return repr(v) if isinstance(v, float) else str(v)

    return "\n".join(f"{k} = {fmt(cfg[k])}" for k in sorted(cfg)) + "\n"


def _mc_config(cfg: dict, method=None) -> McConfig:
    return McConfig(
        samples=cfg["mc.samples"],
        merge_iou=cfg["mc.merge_iou"],
        min_support_frac=cfg["mc.min_support_frac"],
        method=method or cfg["mc.method"],
        dropout_p=cfg["dropout.p"],
    )


def _hyper_from_config(cfg: dict) -> dict:
    return detector_hyper(
        classes=cfg["model.classes"],
        dropblock_p=cfg["dropblock.p"],
        dropblock_block_size=cfg["dropblock.block_size"],
        dropblock_per_channel=cfg["dropblock.per_channel"],
    )


def _timestamp() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat()


# -- training ------------------------------------------------------------------------


def run_training(cfg: dict, run_dir: Path, log=print):
    """SGD training loop; writes config.resolved, log.jsonl, weights files."""
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "config.resolved").write_text(format_config(cfg), encoding="utf-8")
    images, gts = load_split(cfg["data.root"], "train")
    val_images, val_gts = load_split(cfg["data.root"], "val")

    seed = cfg["seed"]
    params = init_detector_params(Rng(seed).split(STREAM_INIT), _hyper_from_config(cfg))
    opt = Sgd(params.all_tensors(), lr=cfg["train.lr"], momentum=cfg["train.momentum"])
    mask_rng = Rng(seed).split(STREAM_MASK)
    shuffle_rng = Rng(seed).split(STREAM_SHUFFLE)
    lambdas = dict(
        lambda_wd=cfg["loss.lambda_wd"],
        lambda_box=cfg["loss.lambda_box"],
        lambda_obj=cfg["loss.lambda_obj"],
        lambda_cls=cfg["loss.lambda_cls"],
        use_gaussian=cfg["loss.use_gaussian"],
        use_giou=cfg["loss.use_giou"],
    )
    batch_size = cfg["train.batch_size"]
    inputs = images_to_input(images)
    val_inputs = images_to_input(val_images)
    best_val, best_snapshot = math.inf, None
    step = 0
    log_lines = []
    for epoch in range(cfg["train.epochs"]):
        order = list(range(len(inputs)))
        shuffle_rng.split(epoch).shuffle(order)
        epoch_terms: dict[str, float] = {}
        n_batches = 0
        for lo in range(0, len(order), batch_size):
            idx = order[lo : lo + batch_size]
            batch = Tensor(inputs[idx])
            raw = detector_forward(
                batch, params, cfg["train.mode"], mask_rng.split(step), "dropblock"
            )
            loss, terms = total_loss(raw, [gts[i] for i in idx], params, **lambdas)
            if not math.isfinite(terms["total"]):
                raise TrainingError(
                    f"non-finite loss at epoch {epoch} batch {lo // batch_size}: {terms}"
                )
            loss.backward()
            _clip_grad_norm(params.all_tensors(), cfg["train.clip_norm"])
            opt.step()
            opt.zero_grad()
            step += 1
            n_batches += 1
            for k, v in terms.items():
                epoch_terms[k] = epoch_terms.get(k, 0.0) + v
        means = {k: v / n_batches for k, v in epoch_terms.items()}
        val_loss = _dataset_loss(val_inputs, val_gts, params, lambdas, batch_size)
        record = {"epoch": epoch, "val_loss": val_loss}
        record.update({f"train_{k}": v for k, v in sorted(means.items())})
        log_lines.append(json.dumps(record, sort_keys=True))
        log(f"epoch {epoch}: train {means['total']:.4f} val {val_loss:.4f}")
        if val_loss < best_val:
            best_val = val_loss
            best_snapshot = {n: t.data.copy() for n, t in params.tensors.items()}
    (run_dir / "log.jsonl").write_text("\n".join(log_lines) + "\n", encoding="utf-8")
    save_params(run_dir / "weights.mcbk", params)
    if best_snapshot is not None:
        for name, data in best_snapshot.items():
            params.tensors[name].data = data
    save_params(run_dir / "weights.best.mcbk", params)
    return params


def _clip_grad_norm(tensors, max_norm: float) -> None:
    """Rescale gradients so their global L2 norm is at most max_norm.

    The Gaussian box head's 1/sigma^2 error scaling makes occasional hard
    batches produce huge gradients once sigmas have adapted down; clipping
    keeps momentum SGD out of the runaway regime.  0 disables.
    """
    if max_norm <= 0:
        return
    total = 0.0
    for t in tensors:
        if t.grad is not None:
            total += float((t.grad.astype(np.float64) ** 2).sum())
    norm = math.sqrt(total)
    if norm > max_norm:
        factor = np.float32(max_norm / norm)
        for t in tensors:
            if t.grad is not None:
                t.grad *= factor


def _dataset_loss(inputs, gts, params, lambdas, batch_size) -> float:
    total, n = 0.0, 0
    for lo in range(0, len(inputs), batch_size):
        batch = Tensor(inputs[lo : lo + batch_size])
        _, terms = total_loss(
            detector_forward(batch, params, "disabled", None),
            gts[lo : lo + batch_size],
            params,
            **lambdas,
        )
        total += terms["total"]
        n += 1
    return total / max(n, 1)


# -- evaluation ------------------------------------------------------------------------


def evaluate_split(cfg: dict, params, split: str, method=None):
    """Run MC detection over one split and aggregate metrics."""
    images, gts = load_split(cfg["data.root"], split)
    inputs = images_to_input(images)
    mc = _mc_config(cfg, method)
    classes = params.hyper["classes"]
    eval_rng = Rng(cfg["seed"]).split(STREAM_EVAL)
    per_image_dets = []
    for i in range(len(inputs)):
        dets = mc_detect(
            Tensor(inputs[i : i + 1]),
            params,
            mc,
            eval_rng.split(i),
            conf_thresh=cfg["eval.conf_thresh"],
            nms_iou=cfg["eval.nms_iou"],
        )
        per_image_dets.append(dets)

    ap_dets = [
        [(int(np.argmax(d.class_probs)), d.confidence, d.box) for d in dets]
        for dets in per_image_dets
    ]
    gt_pairs = [[(g.cls, g.box) for g in img_gts] for img_gts in gts]
    per_class, map_50 = average_precision(ap_dets, gt_pairs, cfg["eval.iou_thresh"])

    brier_dets = [
        [(int(np.argmax(d.class_probs)), d.confidence, d.box, d.class_probs) for d in dets]
        for dets in per_image_dets
    ]
    brier_val = detection_brier(brier_dets, gt_pairs, cfg["eval.iou_thresh"], classes)

    all_entropies = [d.entropy for dets in per_image_dets for d in dets]
    max_h = math.log(classes)
    per_image_h = [
        float(np.mean([d.entropy for d in dets])) if dets else max_h
        for dets in per_image_dets
    ]
    return {
        "map_50": map_50,
        "per_class_ap": per_class,
        "brier": brier_val if brier_val is not None else 2.0,
        "mean_entropy": (
            float(np.mean(all_entropies)) if all_entropies else max_h
        ),
        "mean_entropy_per_image": float(np.mean(per_image_h)),
        "n_detections": len(all_entropies),
        "n_images": len(inputs),
        "detections": per_image_dets,
        "images": images,
    }


def _load_and_check(cfg: dict, weights: Path):
    params = load_params(weights)
    reference = init_detector_params(Rng(0), _hyper_from_config(cfg))
    check_compatible(params, reference)
    # mask settings are inference-time knobs: the active config wins over
    # whatever the weights were trained with
    params.hyper["dropblock_p"] = cfg["dropblock.p"]
    params.hyper["dropblock_block_size"] = cfg["dropblock.block_size"]
    params.hyper["dropblock_per_channel"] = cfg["dropblock.per_channel"]
    return params


def run_eval(cfg: dict, weights: Path, split: str, out_dir: Path, log=print) -> dict:
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.resolved").write_text(format_config(cfg), encoding="utf-8")
    params = _load_and_check(cfg, weights)
    res = evaluate_split(cfg, params, split)
    report = MetricsReport(
        map_50=res["map_50"],
        mean_entropy=res["mean_entropy"],
        brier=res["brier"],
        per_class_ap=res["per_class_ap"],
        n_images=res["n_images"],
        config=dict(sorted(cfg.items())),
        extra={
            "split": split,
            "mean_entropy_per_image": res["mean_entropy_per_image"],
            "n_detections": res["n_detections"],
            "timestamp": _timestamp(),
        },
    )
    doc = report.to_dict()
    (out_dir / "metrics.json").write_text(dump_report(doc), encoding="utf-8")
    if cfg["eval.overlays"]:
        overlay_dir = out_dir / "overlays"
        overlay_dir.mkdir(exist_ok=True)
        for i, dets in enumerate(res["detections"]):
            write_ppm(overlay_dir / f"{i:06d}.ppm", draw_detections(res["images"][i], dets))
    log(f"{split}: mAP@0.5 {res['map_50']:.4f} brier {res['brier']:.4f} "
        f"entropy {res['mean_entropy']:.4f}")
    return doc


def run_ood_eval(cfg: dict, weights: Path, out_dir: Path, methods=None, log=print) -> dict:
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.resolved").write_text(format_config(cfg), encoding="utf-8")
    params = _load_and_check(cfg, weights)

    def one(method):
        rid = evaluate_split(cfg, params, "test-id", method)
        rood = evaluate_split(cfg, params, "test-ood", method)
        return {
            "mean_entropy_id": rid["mean_entropy_per_image"],
            "mean_entropy_ood": rood["mean_entropy_per_image"],
            "entropy_ratio": rood["mean_entropy_per_image"] / rid["mean_entropy_per_image"],
            "mean_detection_entropy_id": rid["mean_entropy"],
            "mean_detection_entropy_ood": rood["mean_entropy"],
            "n_detections_id": rid["n_detections"],
            "n_detections_ood": rood["n_detections"],
            "map_50_id": rid["map_50"],
            "n_images_id": rid["n_images"],
            "n_images_ood": rood["n_images"],
        }

    doc = one(methods[0] if methods else None)
    if methods and len(methods) > 1:
        doc["per_method"] = {methods[0]: {k: v for k, v in doc.items()}}
        for method in methods[1:]:
            doc["per_method"][method] = one(method)
    doc["config"] = dict(sorted(cfg.items()))
    doc["timestamp"] = _timestamp()
    (out_dir / "metrics.json").write_text(dump_report(doc), encoding="utf-8")
    log(f"entropy id {doc['mean_entropy_id']:.4f} ood {doc['mean_entropy_ood']:.4f} "
        f"ratio {doc['entropy_ratio']:.3f}")
    return doc


# -- report comparison -------------------------------------------------------------------


_NUMERIC_KEYS = (
    "map_50", "brier", "mean_entropy", "mean_entropy_per_image", "n_images",
    "n_detections", "mean_entropy_id", "mean_entropy_ood", "entropy_ratio",
    "mean_detection_entropy_id", "mean_detection_entropy_ood",
    "n_detections_id", "n_detections_ood", "map_50_id", "n_images_id", "n_images_ood",
)
_ALLOWED_KEYS = set(_NUMERIC_KEYS) | {"per_class_ap", "config", "timestamp",
                                      "split", "per_method"}


def validate_report(path, doc: dict) -> None:
    for key in doc:
        if key not in _ALLOWED_KEYS:
            raise ReportError(f"{path}: unknown key {key!r}")
    for key in _NUMERIC_KEYS:
        if key in doc and not isinstance(doc[key], (int, float)):
            raise ReportError(f"{path}: key {key!r} is not numeric")


def build_comparison(paths) -> dict:
    rows = []
    for path in sorted(str(p) for p in paths):
        doc = load_report(path)
        validate_report(path, doc)
        row = {"path": path}
        for key in _NUMERIC_KEYS:
            if key in doc:
                row[key] = doc[key]
        rows.append(row)
    return {"rows": rows}


def format_comparison(comparison: dict) -> str:
    rows = comparison["rows"]
    cols = ["path"] + [k for k in _NUMERIC_KEYS if any(k in r for r in rows)]
    cells = [[str(r.get(c, "")) if c == "path" else
              (f"{r[c]:.6g}" if c in r else "-") for c in cols] for r in rows]
    widths = [max(len(c), *(len(row[i]) for row in cells)) for i, c in enumerate(cols)]
    lines = ["  ".join(c.ljust(w) for c, w in zip(cols, widths))]
    for row in cells:
        lines.append("  ".join(c.ljust(w) for c, w in zip(row, widths)))
    return "\n".join(lines) + "\n"


# -- entry points ---------------------------------------------------------------------------


def _add_common(sub):
    sub.add_argument("--config", type=Path, default=None, help="key = value config file")
    sub.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                     help="override one config key")


def _cmd_gen_data(args) -> int:
    cfg = resolve_config(args.config, args.set)
    for split, key in (("train", "data.n_train"), ("val", "data.n_val"),
                       ("test-id", "data.n_test_id"), ("test-ood", "data.n_test_ood")):
        generate(cfg["data.root"], split, cfg[key], cfg["seed"])
        print(f"wrote {split} ({cfg[key]} images) under {cfg['data.root']}")
    return 0


def _cmd_train(args) -> int:
    cfg = resolve_config(args.config, args.set)
    run_training(cfg, Path(args.out))
    print(f"weights saved to {args.out}/weights.mcbk")
    return 0


def _cmd_eval(args) -> int:
    cfg = resolve_config(args.config, args.set)
    if args.method:
        cfg["mc.method"] = args.method
        validate_config(cfg)
    run_eval(cfg, Path(args.weights), args.split, Path(args.out))
    return 0


def _cmd_ood_eval(args) -> int:
    cfg = resolve_config(args.config, args.set)
    methods = args.methods.split(",") if args.methods else None
    if methods:
        for m in methods:
            if m not in ("dropblock", "dropout", "none"):
                raise ConfigError(f"unknown method {m!r} in --methods")
    run_ood_eval(cfg, Path(args.weights), Path(args.out), methods)
    return 0


def _cmd_report(args) -> int:
    comparison = build_comparison(args.reports)
    sys.stdout.write(format_comparison(comparison))
    if args.json:
        Path(args.json).write_text(
            json.dumps(comparison, indent=2, sort_keys=True) + "\n", encoding="utf-8"
        )
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mcblock",
        description="Train and evaluate the masked toy detector on synthetic shapes.",
    )
    subs = parser.add_subparsers(dest="command", required=True)

    p = subs.add_parser("gen-data", help="generate all four dataset splits")
    _add_common(p)
    p.set_defaults(func=_cmd_gen_data)

    p = subs.add_parser("train", help="train the detector")
    _add_common(p)
    p.add_argument("--out", required=True, help="run directory")
    p.set_defaults(func=_cmd_train)

    p = subs.add_parser("eval", help="evaluate weights on one split")
    _add_common(p)
    p.add_argument("--weights", required=True)
    p.add_argument("--split", default="test-id",
                   choices=["train", "val", "test-id", "test-ood"])
    p.add_argument("--method", default=None, choices=["dropblock", "dropout", "none"])
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_eval)

    p = subs.add_parser("ood-eval", help="paired ID vs OOD entropy report")
    _add_common(p)
    p.add_argument("--weights", required=True)
    p.add_argument("--methods", default=None,
                   help="comma-separated sweep, e.g. none,dropout,dropblock")
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_ood_eval)

    p = subs.add_parser("report", help="tabulate one or more metrics.json files")
    p.add_argument("reports", nargs="+")
    p.add_argument("--json", default=None, help="also write the table as JSON")
    p.set_defaults(func=_cmd_report)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except McblockError as e:
        print(f"MCBLOCK-ERROR {e.code}", file=sys.stderr)
        print(str(e), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
