"""Command-line entry point: ``atcl <subcommand> [flags] [--dotted.path value ...]``.

Every subcommand builds a RunConfig from ``--config`` (JSON), ``--preset``,
the shortcut flags below and any number of ``--section.key value``
overrides, in that order of precedence (later wins).
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from atcl import __version__
from atcl.attack import AttackBudget, AttackObjective, pgd
from atcl.config import PRESETS, ConfigError, build_config, config_hash, parse_config, parse_override_value, with_overrides
from atcl.data import (complementary_from_config, load_complementary, load_dataset, save_complementary,
                       write_idx_images, write_idx_labels)
from atcl.diagnostics import DiagnosticRecord, attack_quality, first_layer_cov_trace, robust_eval, write_records_csv
from atcl.losses import COMPLEMENTARY, KINDS, PLA, LossSpec, per_sample_losses
from atcl.persist import MetricsLog, load_checkpoint
from atcl.tensor import Tensor
from atcl.train import (TrainState, eval_budget, train_atcl, train_direct, train_oracle, train_two_stage)

log = logging.getLogger("atcl")

SUBCOMMANDS = ("train", "train-direct", "train-two-stage", "train-oracle", "eval", "diagnose", "synth-data", "relabel")


def _value_range(text: str) -> list:
    lo, hi = (float(v) for v in text.split(","))
    return [lo, hi]


def _common(p: argparse.ArgumentParser, attack_section: str = "attack"):
    p.add_argument("--config", help="JSON config file")
    p.add_argument("--preset", choices=sorted(PRESETS))
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--eps", type=float, help=f"{attack_section}.eps")
    p.add_argument("--alpha", type=float, help=f"{attack_section}.alpha")
    p.add_argument("--steps", type=int, help=f"{attack_section}.steps")
    p.add_argument("--attack-init", choices=("natural", "random"), help=f"{attack_section}.init")
    p.add_argument("--value-range", type=_value_range, help="lo,hi input clipping range")
    p.add_argument("--out", help="output directory (output.dir)")
    p.add_argument("-v", "--verbose", action="store_true")
    p.set_defaults(attack_section=attack_section)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="atcl", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"atcl {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="{" + ",".join(SUBCOMMANDS) + "}")

    p = sub.add_parser("train", help="warm-up + pseudo-label attack training")
    _common(p)
    p.add_argument("--loss", choices=sorted(PLA))
    p.add_argument("--cdata", help="complementary dataset file (else built from data.*)")
    p.add_argument("--resume", help="checkpoint to resume from")

    p = sub.add_parser("train-direct", help="AT with a complementary loss in both loops")
    _common(p)
    p.add_argument("--loss", choices=sorted(COMPLEMENTARY), required=True)
    p.add_argument("--cdata")
    p.add_argument("--resume")

    p = sub.add_parser("train-two-stage", help="complementary learning, relabel, ordinary AT")
    _common(p)
    p.add_argument("--loss", choices=sorted(COMPLEMENTARY), help="stage-1 loss")
    p.add_argument("--cdata")

    p = sub.add_parser("train-oracle", help="standard AT with ordinary labels")
    _common(p)
    p.add_argument("--resume")

    p = sub.add_parser("eval", help="natural and PGD accuracy of a checkpoint")
    _common(p, "eval")
    p.add_argument("--ckpt", required=True)

    p = sub.add_parser("diagnose", help="gradient and attack-quality diagnostics as CSV")
    _common(p)
    p.add_argument("--oracle-ckpt", nargs="+", required=True, help="one checkpoint per epoch")
    p.add_argument("--losses", default="log,ure_ce,ce", help="comma-separated loss kinds")
    p.add_argument("--gamma", type=float, default=0.5, help="gamma for PLA kinds")
    p.add_argument("--n-samples", type=int, default=512)
    p.add_argument("--all-steps", action="store_true", help="average sign cosine over all PGD steps")
    p.add_argument("--csv", help="output CSV (default: stdout)")

    p = sub.add_parser("synth-data", help="write the configured dataset as IDX files plus a complementary file")
    _common(p)

    p = sub.add_parser("relabel", help="relabel a complementary dataset with a checkpoint")
    _common(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--cdata", help="complementary dataset file (else built from data.*)")
    p.add_argument("--labels-out", help="IDX label file for the new labels")
    return parser


def _split_overrides(extra: list) -> dict:
    out, i = {}, 0
    while i < len(extra):
        key = extra[i]
        if not key.startswith("--"):
            raise ConfigError(f"unrecognised argument {key!r} (overrides look like --section.key value)")
        if "=" in key:
            key, value = key.split("=", 1)
            i += 1
        else:
            if i + 1 >= len(extra):
                raise ConfigError(f"{key}: missing value")
            value = extra[i + 1]
            i += 2
        out[key[2:]] = parse_override_value(value)
    return out


def resolve_config(args, extra: list):
    cfg = parse_config(args.config) if args.config else build_config(preset=args.preset)
    if args.config and args.preset:
        raise ConfigError("give either --config or --preset, not both")
    sec = args.attack_section
    flags = {
        "seed": args.seed, "epochs": args.epochs, "output.dir": args.out,
        f"{sec}.eps": args.eps, f"{sec}.alpha": args.alpha, f"{sec}.steps": args.steps,
        f"{sec}.init": args.attack_init, "attack.value_range": args.value_range,
    }
    loss = getattr(args, "loss", None)
    if loss is not None:
        flags["two_stage.stage1_loss" if args.command == "train-two-stage" else "loss"] = loss
    overrides = {k: v for k, v in flags.items() if v is not None}
    overrides.update(_split_overrides(extra))
    return with_overrides(cfg, overrides)


def _datasets(cfg, cdata_path=None):
    data = load_dataset(cfg.data, cfg.seed)
    if cdata_path:
        train = load_complementary(cdata_path)
    else:
        train = complementary_from_config(*data["train"], cfg.data, cfg.seed)
    return train, data["test"], data["source"]


def _default_out(cfg, name: str):
    if cfg.output.dir is None:
        return replace(cfg, output=replace(cfg.output, dir=str(Path("runs") / f"{name}-{config_hash(cfg)}")))
    return cfg


def _summary(state, mlog) -> dict:
    last = mlog[-1] if len(mlog) else {}
    return {"epochs": len(mlog), "final_nat_acc": last.get("nat_acc"), "final_pgd_acc": last.get("pgd_acc"),
            "best_metric": state.best_metric, "best_epoch": state.best_epoch, **state.extra}


def cmd_train(args, cfg) -> int:
    cfg = _default_out(cfg, args.command)
    train, test, source = _datasets(cfg, getattr(args, "cdata", None))
    log.info("data: %s, %d train samples", source, len(train))
    state = mlog = None
    if getattr(args, "resume", None):
        state = TrainState.load(args.resume, cfg, train.cl_mask if args.command == "train" else None)
        mpath = Path(cfg.output.dir) / "metrics.jsonl"
        mlog = MetricsLog.read_jsonl(mpath) if mpath.exists() else MetricsLog()
        mlog = MetricsLog(mpath, mlog.records[: state.epoch])
        mpath.write_text("".join(json.dumps(r) + "\n" for r in mlog.records))
    if args.command == "train":
        state, mlog = train_atcl(cfg, train, test, state, mlog)
    elif args.command == "train-direct":
        state, mlog = train_direct(cfg.loss, cfg, train, test, state, mlog)
    elif args.command == "train-oracle":
        state, mlog = train_oracle(cfg, train.x, train.y, test, state, mlog)
    else:
        state, mlog = train_two_stage(cfg, train, test)
    print(json.dumps({"out": cfg.output.dir, **_summary(state, mlog)}))
    return 0


def cmd_eval(args, cfg) -> int:
    model = load_checkpoint(args.ckpt, np.dtype(cfg.model.dtype))["model"]
    data = load_dataset(cfg.data, cfg.seed)
    xt, yt = data["test"]
    if model.dims[0] != xt.shape[1]:
        raise ConfigError(f"checkpoint expects {model.dims[0]} features, test data has {xt.shape[1]}")
    budget = eval_budget(cfg)
    from atcl.rng import stream

    rng = stream(cfg.seed, "eval_cli") if budget.init == "random" else None
    res = robust_eval(model, xt, yt, budget, cfg.eval.batch_size, rng)
    print(json.dumps({"ckpt": args.ckpt, "eps": budget.epsilon, "steps": budget.steps, **res}))
    return 0


def diagnose_records(model, x, cl_mask, y, budget: AttackBudget, kinds, epoch: int, gamma=0.5,
                     all_steps=False) -> list:
    """Trace, sign-cosine, L1 and prediction-gap records for each loss kind."""
    records = []
    quality = attack_quality(model, x, cl_mask, y, budget, kinds, gamma, all_steps=all_steps)
    pseudo = np.argmax(np.where(cl_mask, -np.inf, model.predict_proba(x)), axis=1)
    for kind in kinds:
        spec = LossSpec(kind, gamma if kind in PLA else None)
        objective = AttackObjective(spec, cl_mask=None if kind == "ce" else cl_mask,
                                    pseudo=pseudo if kind in PLA else None, y=y if kind == "ce" else None)
        xa = pgd(model, x, objective, budget)
        _, pre = model.frozen().forward_trace(Tensor(xa, requires_grad=True))
        per_sample_losses(spec, pre[-1], objective.cl_mask, objective.pseudo, objective.y).sum().backward()
        records.append(DiagnosticRecord(epoch, "grad_trace_first", first_layer_cov_trace(xa, pre[0].grad), kind))
        for metric, value in quality[kind].items():
            records.append(DiagnosticRecord(epoch, metric, value, kind))
    return records


def cmd_diagnose(args, cfg) -> int:
    kinds = [k.strip() for k in args.losses.split(",") if k.strip()]
    bad = [k for k in kinds if k not in KINDS]
    if bad:
        raise ConfigError(f"--losses: unknown kinds {bad}")
    data = load_dataset(cfg.data, cfg.seed)
    train = complementary_from_config(*data["train"], cfg.data, cfg.seed)
    if cfg.data.cl_mode != "scl" and any(k in ("forward", "free", "nn", "scl_nl", "scl_exp", "ure_ce") for k in kinds):
        raise ConfigError("SCL-only loss kinds need data.cl_mode scl")
    n = min(args.n_samples, len(train))
    x, cl, y = train.x[:n], train.cl_mask[:n], train.y[:n]
    from atcl.train import full_budget

    budget = full_budget(cfg)
    records = []
    for i, path in enumerate(args.oracle_ckpt):
        ck = load_checkpoint(path, np.dtype(cfg.model.dtype))
        epoch = ck["state"].get("epoch", i)
        records.extend(diagnose_records(ck["model"], x, cl, y, budget, kinds, epoch, args.gamma, args.all_steps))
    if args.csv:
        write_records_csv(args.csv, records)
    else:
        print("epoch,metric,loss_kind,value")
        for r in records:
            print(f"{r.epoch},{r.metric},{r.loss_kind},{float(r.value)!r}")
    return 0


def _image_shape(d: int) -> tuple:
    side = math.isqrt(d)
    return (side, side) if side * side == d else (1, d)


def cmd_synth_data(args, cfg) -> int:
    out = Path(cfg.output.dir or "data")
    out.mkdir(parents=True, exist_ok=True)
    data = load_dataset(cfg.data, cfg.seed)
    for split, stem in (("train", "train"), ("test", "t10k")):
        x, y = data[split]
        shape = _image_shape(x.shape[1])
        pixels = np.rint(x * 255).astype(np.uint8).reshape(len(x), *shape)
        write_idx_images(out / f"{stem}-images-idx3-ubyte", pixels)
        write_idx_labels(out / f"{stem}-labels-idx1-ubyte", y)
    train = complementary_from_config(*data["train"], cfg.data, cfg.seed)
    save_complementary(out / "train.cdat", train)
    print(json.dumps({"out": str(out), "source": data["source"], "n_train": len(train), "d": train.d}))
    return 0


def cmd_relabel(args, cfg) -> int:
    model = load_checkpoint(args.ckpt, np.dtype(cfg.model.dtype))["model"]
    train, _, _ = _datasets(cfg, args.cdata)
    labels = model.predict(train.x)
    acc = float((labels == train.y).mean())
    violations = int(train.cl_mask[np.arange(len(train)), labels].sum())
    if args.labels_out:
        write_idx_labels(args.labels_out, labels)
    print(json.dumps({"relabel_acc": acc, "cl_violations": violations, "n": len(train)}))
    return 0


HANDLERS = {
    "train": cmd_train, "train-direct": cmd_train, "train-two-stage": cmd_train, "train-oracle": cmd_train,
    "eval": cmd_eval, "diagnose": cmd_diagnose, "synth-data": cmd_synth_data, "relabel": cmd_relabel,
}


def main(argv=None) -> int:
    parser = build_parser()
    argv = list(sys.argv[1:] if argv is None else argv)
    if not argv or argv[0] not in SUBCOMMANDS:
        if argv and argv[0] in ("-h", "--help", "--version"):
            parser.parse_args(argv)
        parser.print_usage(sys.stderr)
        print(f"atcl: expected a subcommand, one of {', '.join(SUBCOMMANDS)}", file=sys.stderr)
        return 2
    args, extra = parser.parse_known_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        cfg = resolve_config(args, extra)
        return HANDLERS[args.command](args, cfg)
    except (ConfigError, FileNotFoundError, ValueError) as exc:
        print(f"atcl {args.command}: error: {exc}", file=sys.stderr)
        return 2
