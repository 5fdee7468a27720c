"""Command-line entry point: ``acsseg <command> ...``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import data
from .metrics import LabelVolume, evaluate_case, summarize, write_summary, write_table
from .network import build, build_classifier, build_jcs, count_parameters, make_rng
from .plan import CONV_KINDS, DEFAULT_CHANNELS, NORM_KINDS, VARIANTS, default_plan, load_plan, save_plan
from .postproc import PROFILES, PostprocConfig, et_count, threshold_et
from .tensor import sigmoid
from .train import (
    LossConfig, NumericError, TrainConfig, load_config, pos_weight_from_grades, regions_to_labels,
    train_classifier, train_segmenter,
)
from .transfer import (
    StoreError, load_checkpoint, load_store, resnet18_store, save_checkpoint, transfer_all,
    transfer_matching,
)

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
log = logging.getLogger("acsseg")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _ints(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def _load_net(plan_path, weights=None, seed=0):
    plan = load_plan(plan_path)
    net = build(plan, seed)
    if weights:
        load_checkpoint(net, weights)
    return plan, net


# ---------------------------------------------------------------- commands

def cmd_build(args) -> int:
    plan = default_plan(args.variant, args.conv_kind, args.norm, args.channels)
    save_plan(plan, args.out)
    print(f"plan {plan.variant} ({plan.conv_kind}, {plan.norm_kind}) channels "
          f"{','.join(map(str, plan.channels))} -> {args.out}")
    if args.weights:
        net = build(plan, args.seed)
        save_checkpoint(net, args.weights)
        print(f"initial weights ({count_parameters(net):,} parameters) -> {args.weights}")
    return EXIT_OK


def _param_lines(plan) -> tuple[int, list[str]]:
    net = build(plan, 0)
    total = count_parameters(net)
    trainable = count_parameters(net, trainable_only=True)
    lines = [f"plan\t{plan.variant}\t{plan.conv_kind}",
             f"total\t{total}", f"trainable\t{trainable}"]
    return total, lines


def cmd_params(args) -> int:
    plan = load_plan(args.plan)
    total, lines = _param_lines(plan)
    print("\n".join(lines))
    if args.baseline:
        base_total, _ = _param_lines(load_plan(args.baseline))
        print(f"baseline\t{base_total}")
        print(f"ratio\t{total / base_total:.4f}")
    return EXIT_OK


def cmd_make_store(args) -> int:
    store = resnet18_store(args.seed)
    store.save(args.out)
    print(f"{len(store)} entries ({store.origin}) -> {args.out}")
    return EXIT_OK


def cmd_transfer(args) -> int:
    plan, net = _load_net(args.plan, seed=args.seed)
    store = load_store(args.store)
    strategy = transfer_matching if args.strategy == "exact" else transfer_all
    report = strategy(net, store, seed=args.init_seed)
    print(report.format())
    if args.out:
        save_checkpoint(net, args.out)
    return EXIT_OK


def _config(args) -> tuple[TrainConfig, LossConfig]:
    if args.config:
        return load_config(args.config)
    return TrainConfig(), LossConfig()


def cmd_train(args) -> int:
    plan = load_plan(args.plan)
    cases = data.load_dataset(args.data)
    images, labels, cases = data.load_arrays(args.data, cases)
    cfg, loss_cfg = _config(args)
    if args.seed is not None:
        cfg.seed = args.seed
    if args.task == "classifier":
        grades = [c.grade for c in cases]
        if None in grades:
            raise data.DataError("classifier training needs a grade for every case")
        net = build_classifier(plan, seed=cfg.seed)
        if not args.config:
            cfg = TrainConfig.classifier(seed=cfg.seed)
            loss_cfg = LossConfig(pos_weight=pos_weight_from_grades(grades))
        result = train_classifier(net, images, grades, cfg, loss_cfg)
    else:
        if labels is None:
            raise data.DataError("segmenter training needs a label for every case")
        if plan.variant == "jcs":
            if not args.classifier:
                raise UsageError("a jcs plan needs --classifier <checkpoint>")
            clf = build_classifier(plan, seed=cfg.seed)
            load_checkpoint(clf, args.classifier)
            net = build_jcs(plan, clf, seed=cfg.seed)
        else:
            net = build(plan, cfg.seed)
        if args.init:
            load_checkpoint(net, args.init)
        result = train_segmenter(net, images, labels, cfg, loss_cfg)
    save_checkpoint(net, args.out)
    if args.curve:
        result.write_curve(args.curve)
    print(f"trained {len(result.losses)} iterations; final loss {result.losses[-1]:.6f} -> {args.out}")
    return EXIT_OK


def _predict_case(net, images, batch_threshold=0.5):
    return regions_to_labels(sigmoid(net.forward(images)), batch_threshold)


def cmd_infer(args) -> int:
    plan = load_plan(args.plan)
    if plan.variant == "jcs":
        clf = build_classifier(plan)
        net = build_jcs(plan, clf)
    else:
        net = build(plan, 0)
    load_checkpoint(net, args.weights)
    cases = data.load_dataset(args.data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg = _post_config(args) if args.et_threshold is not None or args.profile else None
    for case in sorted(cases, key=lambda c: c.case_id):
        images, _, spacing = data.load_case(case, args.data)
        pred = _predict_case(net, images)
        if cfg is not None:
            pred = threshold_et(pred, cfg)
        data.write_volume(out / f"{case.case_id}.acsv", pred, spacing)
        print(f"{case.case_id}\tET {et_count(pred)}")
    return EXIT_OK


def _label_files(directory) -> dict[str, Path]:
    """Map case id to label volume: ``dataset.json`` labels, else ``*.acsv`` files."""
    directory = Path(directory)
    if (directory / "dataset.json").exists():
        cases = data.load_dataset(directory, validate=False)
        return {c.case_id: directory / c.label for c in cases if c.label}
    return {p.stem: p for p in sorted(directory.glob("*.acsv"))}


def _eval_one(item):
    case_id, pred_path, gt_path = item
    pred, gt = data.read_volume(pred_path), data.read_volume(gt_path)
    if pred.data.shape != gt.data.shape:
        raise data.DataError(f"{case_id}: prediction {pred.data.shape} vs truth {gt.data.shape}")
    return evaluate_case(LabelVolume(pred.data, pred.spacing),
                         LabelVolume(gt.data, gt.spacing), case_id)


def cmd_eval(args) -> int:
    preds, gts = _label_files(args.pred), _label_files(args.gt)
    missing = sorted(set(gts) - set(preds))
    if missing:
        raise data.DataError(f"no prediction for cases {missing}")
    if not gts:
        raise data.DataError(f"no label volumes found in {args.gt}")
    items = [(cid, preds[cid], gts[cid]) for cid in sorted(gts)]
    if args.workers > 1:
        with ProcessPoolExecutor(args.workers) as pool:
            reports = list(pool.map(_eval_one, items))
    else:
        reports = [_eval_one(it) for it in items]
    write_table(reports, args.out)
    summary = summarize(reports)
    if args.summary:
        write_summary(summary, args.summary)
    print(f"{len(reports)} cases; mean dice {summary.mean['dice_mean']:.4f}; "
          f"mean hd95 {summary.mean['hd95_mean']:.4f} -> {args.out}")
    return EXIT_OK


def _post_config(args) -> PostprocConfig:
    if args.profile and args.et_threshold is not None:
        raise UsageError("use either --profile or --et-threshold, not both")
    if args.profile:
        return PostprocConfig.profile(args.profile)
    threshold = PROFILES["brats2018"] if args.et_threshold is None else args.et_threshold
    return PostprocConfig(threshold, args.relabel)


def cmd_post(args) -> int:
    cfg = _post_config(args)
    vol = data.read_volume(args.input)
    out = threshold_et(vol.data, cfg)
    n = et_count(vol.data)
    if n < cfg.et_threshold:
        print(f"ET suppressed ({n} < {cfg.et_threshold})")
    else:
        print(f"ET kept ({n} >= {cfg.et_threshold})")
    data.write_volume(args.out, out, vol.spacing)
    return EXIT_OK


def cmd_bench(args) -> int:
    plan, net = _load_net(args.plan, seed=0)
    x = make_rng(args.seed).standard_normal(
        (args.batch, plan.in_channels) + tuple(args.size)).astype(np.float32)
    net.forward(x)
    times = []
    for _ in range(args.reps):
        t = time.perf_counter()
        net.forward(x)
        times.append(time.perf_counter() - t)
    print(f"forward {plan.variant} {tuple(x.shape)}: mean {np.mean(times):.4f}s "
          f"min {np.min(times):.4f}s over {args.reps} reps")
    return EXIT_OK


def cmd_synth(args) -> int:
    cases = data.synth_dataset(args.out, args.n, args.dims, args.seed, args.hgg_fraction)
    n_hgg = sum(c.grade == "HGG" for c in cases)
    print(f"{len(cases)} cases ({n_hgg} HGG, {len(cases) - n_hgg} LGG) -> {args.out}")
    return EXIT_OK


# ------------------------------------------------------------------ parser

def make_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="acsseg", description="ACS / 3D U-Net brain tumor segmentation toolkit")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("build", help="write a network plan (and optional initial weights)")
    s.add_argument("--variant", choices=VARIANTS, default="baseline")
    s.add_argument("--conv-kind", choices=CONV_KINDS)
    s.add_argument("--norm", choices=NORM_KINDS, default="instance")
    s.add_argument("--channels", type=_ints, default=DEFAULT_CHANNELS)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--weights", help="also write Kaiming-initialized weights here")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_build)

    s = sub.add_parser("params", help="count parameters of a plan")
    s.add_argument("--plan", required=True)
    s.add_argument("--baseline", help="second plan; prints plan/baseline ratio")
    s.set_defaults(func=cmd_params)

    s = sub.add_parser("make-store", help="write the ResNet18-shaped fixture weight store")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_make_store)

    s = sub.add_parser("transfer", help="initialize a plan from a 2D weight store")
    s.add_argument("--plan", required=True)
    s.add_argument("--store", required=True)
    s.add_argument("--strategy", choices=("exact", "all"), required=True)
    s.add_argument("--seed", type=int, default=0, help="build seed")
    s.add_argument("--init-seed", type=int, help="re-draw unmatched layers with this seed")
    s.add_argument("--out", help="write the initialized checkpoint")
    s.set_defaults(func=cmd_transfer)

    s = sub.add_parser("train", help="train a segmenter or grade classifier")
    s.add_argument("--plan", required=True)
    s.add_argument("--data", default=None)
    s.add_argument("--config", help="JSON with 'train' and 'loss' sections")
    s.add_argument("--task", choices=("segmenter", "classifier"), default="segmenter")
    s.add_argument("--init", help="starting checkpoint (e.g. from transfer)")
    s.add_argument("--classifier", help="classifier checkpoint for jcs plans")
    s.add_argument("--seed", type=int)
    s.add_argument("--curve", help="write the per-iteration loss curve (TSV)")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("infer", help="predict label volumes for a dataset")
    s.add_argument("--plan", required=True)
    s.add_argument("--weights", required=True)
    s.add_argument("--data", default=None)
    s.add_argument("--et-threshold", type=int)
    s.add_argument("--profile", choices=sorted(PROFILES))
    s.add_argument("--relabel", type=int, default=1)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_infer)

    s = sub.add_parser("eval", help="Dice/HD95 report of predictions against ground truth")
    s.add_argument("--pred", required=True)
    s.add_argument("--gt", required=True)
    s.add_argument("--out", required=True, help="per-case TSV report")
    s.add_argument("--summary", help="JSON summary")
    s.add_argument("--workers", type=int, default=1)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("post", help="suppress small enhancing-tumor predictions")
    s.add_argument("input")
    s.add_argument("--et-threshold", type=int)
    s.add_argument("--profile", choices=sorted(PROFILES))
    s.add_argument("--relabel", type=int, default=1)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_post)

    s = sub.add_parser("bench", help="time forward passes")
    s.add_argument("--plan", required=True)
    s.add_argument("--size", type=_ints, default=(32, 32, 32))
    s.add_argument("--batch", type=int, default=1)
    s.add_argument("--reps", type=int, default=3)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_bench)

    s = sub.add_parser("synth", help="generate a synthetic phantom dataset")
    s.add_argument("--n", type=int, default=10)
    s.add_argument("--dims", type=_ints, default=(32, 32, 32))
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--hgg-fraction", type=float, default=0.5)
    s.add_argument("--out", default=None)
    s.set_defaults(func=cmd_synth)
    return p


def main(argv=None) -> int:
    try:
        args = make_parser().parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    for attr in ("data", "out"):
        if getattr(args, attr, "") is None:
            setattr(args, attr, str(data.default_data_dir()))
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (data.DataError, StoreError, ValueError, OSError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
