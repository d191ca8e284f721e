"""Command line entry point: ``bireal {train,eval,analyze,capability,ablate}``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import fields, replace
from pathlib import Path

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_IO = 3
EXIT_RUNTIME = 4
EXIT_CHECKSUM = 5
EXIT_SHAPE = 6

log = logging.getLogger("bireal")

WEIGHT_FLAGS = {"original": "original_ste", "magnitude-aware": "magnitude_aware"}
ACT_FLAGS = {"clip": "clip_ste", "poly": "piecewise_poly"}


class UsageError(Exception):
    pass


def _load_spec(text, variant=None, input_size=None):
    from .model import NetworkSpec, SpecError, get_preset

    path = Path(text)
    if path.suffix == ".json" or path.is_file():
        try:
            spec = NetworkSpec.from_dict(json.loads(path.read_text()))
        except (OSError, ValueError, TypeError, KeyError) as exc:
            raise SpecError(f"cannot read spec file {text}: {exc}") from exc
    else:
        spec = get_preset(text)
    if variant:
        spec = spec.with_variant(variant)
    if input_size:
        try:
            h, w = (int(v) for v in input_size.lower().split("x"))
        except ValueError:
            raise UsageError(f"--input-size must look like 224x224, got {input_size!r}") from None
        spec = spec.with_input(h, w)
    return spec.validate()


def _emit(records, fmt, table, stream=None):
    stream = stream or sys.stdout
    if fmt in ("table", "both"):
        print(table, file=stream)
    if fmt in ("jsonl", "both"):
        for r in records:
            print(json.dumps(r, sort_keys=True), file=stream)


# --- subcommands -------------------------------------------------------------


def cmd_train(args):
    from .io import parse_data_source, save_model, write_report
    from .trainer import TrainConfig, train

    cfg_kw = {}
    if args.config:
        cfg_kw.update(json.loads(Path(args.config).read_text()))
    flag_map = {
        "init_kind": args.init,
        "weight_update": WEIGHT_FLAGS.get(args.weight_update),
        "activation_backward": ACT_FLAGS.get(args.act_backward),
        "epochs": args.epochs,
        "batch_size": args.batch,
        "lr": args.lr,
        "seed": args.seed,
        "pretrain_epochs": args.pretrain_epochs,
        "pretrain_lr": args.pretrain_lr,
        "max_train": args.max_train,
        "augment_shift": args.augment_shift,
        "bn_lr": args.bn_lr,
    }
    cfg_kw.update({k: v for k, v in flag_map.items() if v is not None})
    known = {f.name for f in fields(TrainConfig)}
    unknown = set(cfg_kw) - known
    if unknown:
        raise UsageError(f"unknown config keys: {sorted(unknown)}")
    try:
        cfg = TrainConfig(**cfg_kw)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc

    spec = _load_spec(args.spec, args.variant)
    data = parse_data_source(args.data)
    spec = replace(spec, input_shape=data.input_shape, num_classes=data.num_classes).validate()
    params, report = train(spec, data, cfg)
    save_model(params, args.out)
    report_path = args.report or str(args.out) + ".report.jsonl"
    records = list(report.records())
    records[-1]["data"] = data.source
    write_report(report_path, records)
    result = {"top1": report.final_top1, "top5": report.final_top5, "model": str(args.out), "seed": cfg.seed}
    print(json.dumps(result, sort_keys=True))
    return EXIT_OK


def cmd_eval(args):
    from .io import load_model, parse_data_source
    from .model import Mode, forward
    from .trainer import evaluate

    params = load_model(args.model)
    data = parse_data_source(args.data)
    if data.input_shape != params.spec.input_shape:
        raise ValueError(f"data shape {data.input_shape} does not match model input {params.spec.input_shape}")
    if data.num_classes > params.spec.num_classes:
        raise ValueError(f"data has {data.num_classes} classes, model {params.spec.num_classes}")
    mode = Mode.BINARY_INFER if params.absorbed else Mode.BINARY_TRAIN
    res = evaluate(params, data.test_x, data.test_y, mode)
    if args.logits:
        import numpy as np

        np.save(args.logits, forward(params, data.test_x, mode))
    print(json.dumps({"top1": res["top1"], "top5": res["top5"], "mode": mode.value}, sort_keys=True))
    return EXIT_OK


def cmd_analyze(args):
    from .analysis import analyze

    spec = _load_spec(args.spec, args.variant, args.input_size)
    if args.baseline == "full-precision":
        rep = analyze(spec)
    elif args.baseline == "self":
        rep = analyze(spec, baseline=spec, baseline_name=f"{spec.name} (self)")
    else:
        base = _load_spec(args.baseline, None, args.input_size)
        rep = analyze(spec, baseline=base)
    _emit(rep.records(), args.format, rep.table())
    return EXIT_OK


def cmd_capability(args):
    from .model import capability_report

    spec = _load_spec(args.spec, args.variant, args.input_size)
    rows = capability_report(spec)
    records = []
    lines = [f"representational capability: {spec.name}", f"{'tensor':<16}{'values/entry':>14}{'entries':>10}{'log2 R':>16}"]
    for r in rows:
        exact = r.log2_exact
        records.append(
            {
                "tensor": r.tensor,
                "values_per_entry": r.values_per_entry,
                "num_entries": r.num_entries,
                "log2_capability": exact if exact is not None else r.log2,
            }
        )
        shown = f"{exact}" if exact is not None else f"{r.log2:.3f}"
        lines.append(f"{r.tensor:<16}{r.values_per_entry:>14}{r.num_entries:>10}{shown:>16}")
    _emit(records, args.format, "\n".join(lines))
    return EXIT_OK


def cmd_ablate(args):
    from .io import parse_data_source, write_report
    from .trainer import TrainConfig, ablation_grid, run_ablation

    spec = _load_spec(args.spec)
    data = parse_data_source(args.data)
    spec = replace(spec, input_shape=data.input_shape, num_classes=data.num_classes).validate()
    kw = {"epochs": args.epochs, "batch_size": args.batch, "lr": args.lr, "seed": args.seed,
          "pretrain_epochs": args.pretrain_epochs, "pretrain_lr": args.pretrain_lr, "max_train": args.max_train,
          "augment_shift": args.augment_shift}
    try:
        base = TrainConfig(**{k: v for k, v in kw.items() if v is not None})
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    rows = run_ablation(ablation_grid(base), spec, data, variants=args.variants.split(","))
    records = [{k: v for k, v in r.items() if k != "report"} for r in rows]
    if args.out:
        write_report(args.out, records)
    lines = [f"{'variant':<8}{'init':<6}{'weight':<17}{'act backward':<16}{'top1':>8}"]
    for r in records:
        top1 = "failed" if r["top1"] is None else f"{r['top1']:.4f}"
        lines.append(f"{r['variant']:<8}{r['init']:<6}{r['weight_update']:<17}{r['activation_backward']:<16}{top1:>8}")
    _emit(records, args.format, "\n".join(lines))
    return EXIT_OK


# --- parser ------------------------------------------------------------------


def build_parser():
    p = argparse.ArgumentParser(prog="bireal", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="pretrain, binary training, BN absorption, evaluation")
    t.add_argument("--spec", default="tiny", help="preset name or spec JSON file")
    t.add_argument("--variant", choices=["bireal", "resnet", "plain"])
    t.add_argument("--data", required=True, help="IDX directory or synthetic[:k=v,...]")
    t.add_argument("--init", choices=["clip", "relu", "random"])
    t.add_argument("--weight-update", choices=sorted(WEIGHT_FLAGS))
    t.add_argument("--act-backward", choices=sorted(ACT_FLAGS))
    t.add_argument("--epochs", type=int)
    t.add_argument("--batch", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--pretrain-epochs", type=int)
    t.add_argument("--pretrain-lr", type=float)
    t.add_argument("--max-train", type=int, help="use only the first N training samples")
    t.add_argument("--augment-shift", type=int, help="random translation of up to N pixels per axis")
    t.add_argument("--bn-lr", type=float, help="learning rate of the BN-only retraining step")
    t.add_argument("--seed", type=int)
    t.add_argument("--config", help="JSON file of training options (flags override it)")
    t.add_argument("--out", required=True, help="model file to write")
    t.add_argument("--report", help="run report path (default: OUT.report.jsonl)")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a saved model")
    e.add_argument("--model", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--logits", help="also save test-set logits (.npy)")
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("analyze", help="memory and FLOPs report")
    a.add_argument("--spec", required=True)
    a.add_argument("--variant", choices=["bireal", "resnet", "plain"])
    a.add_argument("--input-size", help="HxW, e.g. 224x224")
    a.add_argument("--baseline", default="full-precision", help="full-precision, self, or a preset/spec file")
    a.add_argument("--format", choices=["table", "jsonl", "both"], default="both")
    a.set_defaults(func=cmd_analyze)

    c = sub.add_parser("capability", help="representational capability per tensor")
    c.add_argument("--spec", required=True)
    c.add_argument("--variant", choices=["bireal", "resnet", "plain"], default="bireal")
    c.add_argument("--input-size")
    c.add_argument("--format", choices=["table", "jsonl", "both"], default="both")
    c.set_defaults(func=cmd_capability)

    b = sub.add_parser("ablate", help="init x weight update x activation backward grid")
    b.add_argument("--spec", default="tiny")
    b.add_argument("--data", required=True)
    b.add_argument("--variants", default="bireal,plain")
    b.add_argument("--epochs", type=int)
    b.add_argument("--batch", type=int)
    b.add_argument("--lr", type=float)
    b.add_argument("--pretrain-epochs", type=int)
    b.add_argument("--pretrain-lr", type=float)
    b.add_argument("--max-train", type=int)
    b.add_argument("--augment-shift", type=int)
    b.add_argument("--seed", type=int)
    b.add_argument("--out")
    b.add_argument("--format", choices=["table", "jsonl", "both"], default="table")
    b.set_defaults(func=cmd_ablate)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")

    from .io import ChecksumError, FormatError
    from .model import ModeError, SpecError
    from .conv import ShapeError
    from .trainer import DivergenceError

    try:
        return args.func(args)
    except UsageError as exc:
        parser.error(str(exc))
    except SpecError as exc:
        print(f"bireal: invalid spec: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ChecksumError as exc:
        print(f"bireal: checksum error: {exc}", file=sys.stderr)
        return EXIT_CHECKSUM
    except FormatError as exc:
        print(f"bireal: format error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ShapeError, ModeError, ValueError) as exc:
        print(f"bireal: shape mismatch: {exc}", file=sys.stderr)
        return EXIT_SHAPE
    except OSError as exc:
        print(f"bireal: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (DivergenceError, FloatingPointError) as exc:
        print(f"bireal: runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
