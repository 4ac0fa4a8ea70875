"""Command-line driver.

Every failure prints exactly one line ``edp: error[<kind>]: <message>`` to
stderr and exits with the kind's code (see ``EXIT_CODES``).
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import sys
from pathlib import Path

import numpy as np

from . import config as configmod
from . import data, federation, io, nncore, privacy
from .errors import ContractError, EdpError, FormatError, StageError

EXIT_CODES = {"usage": 2, "config": 3, "contract": 4, "stage": 5, "format": 6, "io": 7, "internal": 1}


class CliError(Exception):
    def __init__(self, kind, message):
        super().__init__(message)
        self.kind = kind


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError("usage", message)


def _common(p, *, config_required=True):
    p.add_argument("--config", required=config_required, help="experiment JSON file")
    p.add_argument("--seed", type=int)
    p.add_argument("--nm", type=float, help="noise multiplier")
    p.add_argument("--nc", type=float, help="clipping threshold")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch", type=int)
    p.add_argument("--participants", type=int)
    p.add_argument("--out")


def build_parser():
    parser = _Parser(prog="edp", description="Private ensemble learning simulator")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    _common(sub.add_parser("partition", help="write slice index files"))
    _common(sub.add_parser("train-initial", help="train the initial model on public data"))
    p = sub.add_parser("train-private", help="fine-tune one participant's backbone with DP-SGD")
    _common(p)
    p.add_argument("--initial", required=True, help="initial model file")
    p.add_argument("--participant", type=int, required=True, help="participant id, 1-based")

    p = sub.add_parser("ensemble", help="ensemble backbones with the initial head and evaluate")
    _common(p, config_required=False)
    p.add_argument("--initial", required=True)
    p.add_argument("--backbones", nargs="+", required=True)

    p = sub.add_parser("evaluate", help="accuracy of a model file on one slice")
    _common(p)
    p.add_argument("--model", required=True)
    p.add_argument("--initial", help="supplies the head when --model is a backbone")
    p.add_argument("--slice", default="validation", help="validation, public, train_<i> or test_<i>")

    p = sub.add_parser("accountant", help="privacy spent by a DP-SGD run")
    p.add_argument("--nm", type=float, required=True)
    p.add_argument("--nc", type=float, default=1.0)
    p.add_argument("--mb", type=int, required=True)
    p.add_argument("--N", type=int, required=True, dest="n")
    p.add_argument("--epochs", type=int, required=True)
    p.add_argument("--delta", type=float, required=True)
    p.add_argument("--json", action="store_true", help="print the report as JSON")

    _common(sub.add_parser("experiment", help="run the whole pipeline and write metrics CSV"))
    return parser


def _load_config(args):
    try:
        cfg = configmod.load(args.config)
    except OSError as exc:
        raise CliError("config", f"cannot read config {args.config}: {exc.strerror or exc}") from None
    except ContractError as exc:
        raise CliError("config", str(exc)) from None
    try:
        return configmod.with_overrides(cfg, seed=args.seed, nm=args.nm, nc=args.nc, epochs=args.epochs,
                                        batch=args.batch, participants=args.participants, out=args.out)
    except ContractError as exc:
        raise CliError("config", str(exc)) from None


def _splits(cfg):
    dataset = configmod.load_dataset(cfg)
    return data.partition(dataset, configmod.partition_plan(cfg, len(dataset))), dataset


def _outdir(cfg) -> Path:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_partition(args):
    cfg = _load_config(args)
    dataset = configmod.load_dataset(cfg)
    plan = configmod.partition_plan(cfg, len(dataset))
    idx = data.partition_indices(len(dataset), plan)
    out = _outdir(cfg) / "slices"
    out.mkdir(exist_ok=True)
    for name, indices in idx.slices():
        np.savetxt(out / f"{name}.txt", indices, fmt="%d")
    print(f"wrote {2 + 2 * plan.participant_count} slice files to {out}")


def cmd_train_initial(args):
    cfg = _load_config(args)
    splits, _ = _splits(cfg)
    model = federation.train_initial(splits["public"], cfg.initial, cfg.seed, cfg.layer_specs())
    path = _outdir(cfg) / "initial.edpm"
    io.save_model(model, path)
    acc = federation.evaluate(lambda x: nncore.predict(model, x), splits["validation"])
    print(f"initial model -> {path}; validation accuracy {acc:.4f}")


def cmd_train_private(args):
    cfg = _load_config(args)
    splits, _ = _splits(cfg)
    if not 1 <= args.participant <= cfg.participants:
        raise CliError("contract", f"participant must be in 1..{cfg.participants}")
    m_init = io.load_model(args.initial).model
    participant = federation.make_participants(splits, cfg)[args.participant - 1]
    pm = federation.train_private(m_init, participant)
    path = _outdir(cfg) / f"private_{args.participant}.edpm"
    io.save_model(pm, path)
    print(f"private model {args.participant} -> {path}; epsilon {io.fmt(pm.epsilon)}")


def cmd_ensemble(args):
    m_init = io.load_model(args.initial).model
    members = []
    for i, path in enumerate(args.backbones, start=1):
        loaded = io.load_model(path)
        pid = loaded.provenance.participant_id if loaded.provenance else i
        eps = loaded.provenance.epsilon if loaded.provenance else math.nan
        members.append(federation.PrivateModel(loaded.model, pid, 0, None, eps))
    ens = federation.build_ensemble(members, m_init)
    print(f"ensemble of {len(members)} backbones ready")
    if args.config:
        cfg = _load_config(args)
        splits, _ = _splits(cfg)
        acc = federation.evaluate(lambda x: federation.ensemble_forward(ens, x), splits["validation"])
        print(f"ensemble validation accuracy {acc:.4f}")


def _slice(splits, name):
    if name in ("validation", "public"):
        return splits[name]
    kind, _, num = name.partition("_")
    if kind in ("train", "test") and num.isdigit() and 1 <= int(num) <= len(splits[kind]):
        return splits[kind][int(num) - 1]
    raise CliError("contract", f"unknown slice {name!r}")


def cmd_evaluate(args):
    cfg = _load_config(args)
    splits, _ = _splits(cfg)
    loaded = io.load_model(args.model)
    model = loaded.model
    if loaded.is_backbone:
        if not args.initial:
            raise CliError("contract", "model file holds a backbone; pass --initial for the head")
        _, head = nncore.split_model(io.load_model(args.initial).model)
        model = nncore.compose(model, head)
    acc = federation.evaluate(lambda x: nncore.predict(model, x), _slice(splits, args.slice))
    print(f"accuracy on {args.slice}: {acc:.4f}")


def cmd_accountant(args):
    report = privacy.dp_sgd_epsilon(args.nm, args.n, args.mb, args.epochs, args.delta)
    if args.json:
        print(json.dumps({"epsilon": io.fmt(report.epsilon), "delta": report.delta, "q": report.sampling_rate,
                          "steps": report.steps, "optimal_order": report.optimal_order,
                          "noise_multiplier": args.nm, "clip_threshold": args.nc}))
        return
    print(f"noise_multiplier={args.nm} clip_threshold={args.nc} q={report.sampling_rate:.6g} "
          f"steps={report.steps} delta={report.delta:g}")
    print(f"epsilon={io.fmt(report.epsilon)} optimal_order={report.optimal_order:g}")


def cmd_experiment(args):
    cfg = _load_config(args)
    out = _outdir(cfg)
    report = federation.run_pipeline(cfg)
    (out / "config.json").write_text(configmod.emit(cfg) + "\n")
    curves = out / "curves.csv" if cfg.record_curves else None
    io.write_metrics(report, out / "metrics.csv", curves)
    print(",".join(io.METRICS_HEADER))
    print(",".join(io.metrics_row(report)))


COMMANDS = {
    "partition": cmd_partition,
    "train-initial": cmd_train_initial,
    "train-private": cmd_train_private,
    "ensemble": cmd_ensemble,
    "evaluate": cmd_evaluate,
    "accountant": cmd_accountant,
    "experiment": cmd_experiment,
}


def _fail(kind, message) -> int:
    text = " ".join(str(message).split())
    print(f"edp: error[{kind}]: {text}", file=sys.stderr)
    return EXIT_CODES[kind]


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except CliError as exc:
        return _fail(exc.kind, exc)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        COMMANDS[args.command](args)
    except CliError as exc:
        return _fail(exc.kind, exc)
    except StageError as exc:
        return _fail("stage", exc)
    except FormatError as exc:
        return _fail("format", exc)
    except ContractError as exc:
        return _fail("contract", exc)
    except EdpError as exc:
        return _fail("stage", exc)
    except OSError as exc:
        return _fail("io", exc)
    except Exception as exc:  # noqa: BLE001 - last-resort diagnostic
        return _fail("internal", f"{type(exc).__name__}: {exc}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
