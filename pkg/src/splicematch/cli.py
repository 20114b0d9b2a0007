"""Command-line entry point.

Subcommands: gen | pretrain | advtrain | eval | infer | gradcheck.
Values resolve as flag > config file (--config, JSON) > built-in default;
every output directory receives a run manifest with the merged
configuration so any artifact can be regenerated from it.  Exit codes:
0 success, 1 validation error, 2 runtime/numeric error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np
from PIL import Image

from . import datagen, metrics, training, verify
from .errors import (CheckpointError, DimensionError, GenerationError,
                     MetricError, NumericError, ParameterError,
                     SpliceMatchError, ValidationError)

OUT_ENV = "SPLICEMATCH_OUT"

_VALIDATION_ERRORS = (ParameterError, ValidationError, DimensionError,
                      CheckpointError, GenerationError, MetricError,
                      FileNotFoundError)


def _default_out() -> str:
    return os.environ.get(OUT_ENV, ".")


def _write_run_manifest(out_dir: str, command: str, merged: dict) -> None:
    os.makedirs(out_dir, exist_ok=True)
    manifest = {"command": command, "config": merged, "package": "splicematch 0.1.0"}
    with open(os.path.join(out_dir, "run_manifest.json"), "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, sort_keys=True, indent=2)


def _merge(args: argparse.Namespace, defaults: dict) -> dict:
    """flag > config file > default."""
    file_cfg = {}
    if getattr(args, "config", None):
        with open(args.config, encoding="utf-8") as fh:
            file_cfg = json.load(fh)
    merged = {}
    for key, default in defaults.items():
        flag = getattr(args, key, None)
        merged[key] = flag if flag is not None else file_cfg.get(key, default)
    return merged


def _train_config(merged: dict) -> training.TrainConfig:
    fields = {k: merged[k] for k in (
        "preset", "batch_size", "iterations", "adv_iterations", "k", "lr_g",
        "lr_adv", "lambda_det", "lambda_dis", "loss_variant", "seed", "dtype",
        "checkpoint_every") if k in merged}
    return training.TrainConfig(**fields)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_gen(args) -> int:
    defaults = dict(kind="combination", counts="10,10,10", seed=0,
                    size=256, pool=24, out=None)
    merged = _merge(args, defaults)
    out_dir = merged["out"] or os.path.join(_default_out(),
                                            f"set_{merged['kind']}")
    counts = [int(x) for x in str(merged["counts"]).split(",")]
    if len(counts) != 3:
        raise ValidationError("--counts needs three comma-separated numbers")
    merged["out"] = out_dir
    _write_run_manifest(out_dir, "gen", merged)
    manifest = datagen.generate_set(merged["kind"], counts, int(merged["seed"]),
                                    out_dir, size=int(merged["size"]),
                                    pool_size=int(merged["pool"]))
    print(f"wrote {len(manifest.rows)} pairs to {manifest.path}")
    return 0


def cmd_pretrain(args) -> int:
    defaults = dict(data=None, out=None, preset="toy", batch_size=8,
                    iterations=500, seed=0, dtype="float32",
                    checkpoint_every=0, resume=None)
    merged = _merge(args, defaults)
    if not merged["data"]:
        raise ValidationError("--data manifest is required")
    out_dir = merged["out"] or os.path.join(_default_out(), "pretrain")
    merged["out"] = out_dir
    _write_run_manifest(out_dir, "pretrain", merged)
    dataset = datagen.dataset_from_manifest(merged["data"])
    config = _train_config(merged)
    resume = training.load_checkpoint(merged["resume"]) if merged["resume"] else None
    result = training.pretrain(dataset, config, out_dir=out_dir, resume=resume)
    print(f"final loss {result.history[-1]['loss_ce']:.4f}  "
          f"train IoU {result.final_train_iou:.4f}")
    print(f"checkpoint: {out_dir}/ckpt_final.splck")
    return 0


def cmd_advtrain(args) -> int:
    defaults = dict(checkpoint=None, data=None, out=None, adv_iterations=200,
                    batch_size=8, k=1, lr_g=1e-5, lr_adv=2e-4,
                    lambda_det=0.01, lambda_dis=0.01, loss_variant="bce",
                    seed=0, dtype="float32", checkpoint_every=0, resume=None)
    merged = _merge(args, defaults)
    if not merged["data"]:
        raise ValidationError("--data manifest is required")
    if not merged["checkpoint"] and not merged["resume"]:
        raise ParameterError("adversarial training needs a pretrained --checkpoint")
    out_dir = merged["out"] or os.path.join(_default_out(), "advtrain")
    merged["out"] = out_dir
    _write_run_manifest(out_dir, "advtrain", merged)
    dataset = datagen.dataset_from_manifest(merged["data"])
    base = training.load_checkpoint(merged["checkpoint"]) if merged["checkpoint"] else None
    resume = training.load_checkpoint(merged["resume"]) if merged["resume"] else None
    config = _train_config(merged)
    config.preset = (base or resume).config.get("preset", config.preset)
    config.dtype = (base or resume).config.get("dtype", config.dtype)
    result = training.adversarial_train(base, dataset, config,
                                        out_dir=out_dir, resume=resume)
    last = result.history[-1]
    print(f"final ce {last['loss_ce']:.4f}  total {last['loss_total']:.4f}  "
          f"max SN sigma {last['max_sn_sigma']:.4f}")
    print(f"checkpoint: {out_dir}/adv_ckpt_final.splck")
    return 0


def cmd_eval(args) -> int:
    defaults = dict(checkpoint=None, manifest=None, out=None, threshold=0.5,
                    dump_masks=False)
    merged = _merge(args, defaults)
    if not merged["checkpoint"] or not merged["manifest"]:
        raise ValidationError("--checkpoint and --manifest are required")
    out_dir = merged["out"] or os.path.join(_default_out(), "eval")
    merged["out"] = out_dir
    _write_run_manifest(out_dir, "eval", merged)
    dump = os.path.join(out_dir, "masks") if merged["dump_masks"] else None
    report = metrics.evaluate_set(
        merged["checkpoint"], merged["manifest"],
        threshold=float(merged["threshold"]), dump_dir=dump,
        report_path=os.path.join(out_dir, "report.jsonl"))
    _print_summary(report.summary)
    errors = report.summary.get("errors", 0)
    if errors:
        print(f"warning: {errors} pair(s) failed to evaluate", file=sys.stderr)
    return 0


def _print_summary(summary: dict) -> None:
    print(f"pairs evaluated: {summary['pairs']}  (errors: {summary['errors']})")
    loc = summary.get("localization", {})
    if loc:
        print(f"{'bucket':<12}{'IoU':>8}{'MCC':>8}{'NMM':>8}")
        for bucket, vals in loc.items():
            print(f"{bucket:<12}{vals['iou']:>8.4f}{vals['mcc']:>8.4f}"
                  f"{vals['nmm']:>8.4f}")
    det = summary.get("detection")
    if det:
        print(f"detection: P {det['precision']:.4f}  R {det['recall']:.4f}  "
              f"F1 {det['f1']:.4f}  AUC {det['auc']:.4f}  EER {det['eer']:.4f}")


def cmd_infer(args) -> int:
    defaults = dict(probe=None, donor=None, checkpoint=None, out=None)
    merged = _merge(args, defaults)
    for key in ("probe", "donor", "checkpoint"):
        if not merged[key]:
            raise ValidationError(f"--{key} is required")
    out_dir = merged["out"] or os.path.join(_default_out(), "infer")
    merged["out"] = out_dir
    _write_run_manifest(out_dir, "infer", merged)

    ckpt = training.load_checkpoint(merged["checkpoint"])
    matcher, config = training.matcher_from_checkpoint(ckpt)
    size = matcher.config.input_size
    images, originals = [], []
    for key in ("probe", "donor"):
        img = Image.open(merged[key]).convert("RGB")
        originals.append(img.size)
        arr = np.asarray(img.resize((size, size), Image.BILINEAR))
        images.append(arr.transpose(2, 0, 1))
    from . import autodiff as ad

    with ad.no_grad():
        masks = matcher(matcher.preprocess(images[0]),
                        matcher.preprocess(images[1]))
    score = metrics.detection_score(masks)
    outputs = {}
    for name, mask_t, (ow, oh) in (("probe", masks.y_a, originals[0]),
                                   ("donor", masks.y_b, originals[1])):
        up = ad.bilinear_upsample(ad.Tensor(mask_t.data[0]), oh, ow)
        arr = np.clip(up.data[1] * 255.0, 0, 255).astype(np.uint8)
        path = os.path.join(out_dir, f"mask_{name}.png")
        datagen.save_mask_png_gray(arr, path)
        outputs[name] = path
    with open(os.path.join(out_dir, "score.json"), "w", encoding="utf-8") as fh:
        json.dump({"detection_score": score}, fh)
    print(f"detection score: {score:.4f}")
    print(f"masks: {outputs['probe']}  {outputs['donor']}")
    return 0


def cmd_gradcheck(args) -> int:
    defaults = dict(seeds=100, quick=False)
    merged = _merge(args, defaults)
    seeds = 10 if merged["quick"] else int(merged["seeds"])
    results = verify.run_all(seeds=seeds)
    width = max(len(r.name) for r in results)
    failed = 0
    for r in results:
        status = "ok" if r.passed else "FAIL"
        print(f"{r.name:<{width}}  {r.value:>12.3e}  tol {r.tolerance:>9.1e}  "
              f"{status}  {r.detail}")
        failed += not r.passed
    if failed:
        print(f"{failed} check(s) failed", file=sys.stderr)
        return 2
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="splicematch",
        description="constrained splicing detection: data generation, "
                    "training, evaluation, inference and self-verification")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON config file; flags override it")
        p.add_argument("--out", help=f"output directory (default from ${OUT_ENV})")
        p.add_argument("--seed", type=int)

    p = sub.add_parser("gen", help="generate a pair set")
    common(p)
    p.add_argument("--kind", choices=datagen.SET_KINDS)
    p.add_argument("--counts", help="foreground pairs per bucket: D,N,E")
    p.add_argument("--size", type=int)
    p.add_argument("--pool", type=int, help="source-image pool size")
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("pretrain", help="cross-entropy training")
    common(p)
    p.add_argument("--data", help="training-set manifest")
    p.add_argument("--preset", choices=("toy", "paper"))
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--iterations", type=int)
    p.add_argument("--dtype", choices=("float32", "float64"))
    p.add_argument("--checkpoint-every", dest="checkpoint_every", type=int)
    p.add_argument("--resume", help="checkpoint to resume from")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("advtrain", help="adversarial refinement")
    common(p)
    p.add_argument("--checkpoint", help="pretrained checkpoint")
    p.add_argument("--data")
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--iterations", dest="adv_iterations", type=int)
    p.add_argument("--k", type=int)
    p.add_argument("--lr-g", dest="lr_g", type=float)
    p.add_argument("--lr-adv", dest="lr_adv", type=float)
    p.add_argument("--lambda-det", dest="lambda_det", type=float)
    p.add_argument("--lambda-dis", dest="lambda_dis", type=float)
    p.add_argument("--variant", dest="loss_variant", choices=("bce", "hinge"))
    p.add_argument("--checkpoint-every", dest="checkpoint_every", type=int)
    p.add_argument("--resume")
    p.set_defaults(func=cmd_advtrain)

    p = sub.add_parser("eval", help="score a checkpoint over a set")
    common(p)
    p.add_argument("--checkpoint")
    p.add_argument("--manifest")
    p.add_argument("--threshold", type=float)
    p.add_argument("--dump-masks", dest="dump_masks", action="store_const",
                   const=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("infer", help="single-pair inference")
    common(p)
    p.add_argument("--probe")
    p.add_argument("--donor")
    p.add_argument("--checkpoint")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("gradcheck", help="run the verification suite")
    common(p)
    p.add_argument("--seeds", type=int)
    p.add_argument("--quick", action="store_const", const=True)
    p.set_defaults(func=cmd_gradcheck)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except _VALIDATION_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (NumericError, SpliceMatchError, OSError) as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
