"""Command-line entry point.

Exit status: 0 on success, 1 on a usage error, 2 when the command itself
fails. Diagnostics go to stderr; results are written to files only.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
from pathlib import Path

from . import experiments as E
from . import grpo as G
from . import metrics as X
from . import model as M
from ._io import atomic_write_text, read_json, write_json
from .data import DataError, LabelPartition, SplitSpec, partition_by_frequency, split_dataset


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _override(text: str) -> tuple[str, object]:
    key, sep, value = text.partition("=")
    if not sep or not key:
        raise argparse.ArgumentTypeError(f"expected key=value, got {text!r}")
    try:
        return key, json.loads(value)
    except json.JSONDecodeError:
        return key, value


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="fairpo", description="Fair preference optimisation for multi-label heads.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def with_overrides(sp):
        sp.add_argument("--set", dest="overrides", action="append", type=_override, default=[],
                        metavar="KEY=VALUE",
                        help="override a hyperparameter in the plan defaults (JSON value)")
        return sp

    g = sub.add_parser("gen-data", help="write the plan's dataset as CSV files")
    g.add_argument("--config", required=True)
    g.add_argument("--out", required=True)

    r = with_overrides(sub.add_parser("train-ref", help="train the BCE reference model"))
    r.add_argument("--data", required=True)
    r.add_argument("--config", required=True)
    r.add_argument("--out", required=True)
    r.add_argument("--seed", type=int, default=None)

    t = with_overrides(sub.add_parser("train", help="train one arm for one seed"))
    t.add_argument("--data", required=True)
    t.add_argument("--ref", default=None)
    t.add_argument("--arm", required=True)
    t.add_argument("--config", required=True)
    t.add_argument("--seed", type=int, required=True)
    t.add_argument("--out", required=True)

    e = sub.add_parser("eval", help="evaluate a checkpoint on the test split")
    e.add_argument("--data", required=True)
    e.add_argument("--model", required=True)
    e.add_argument("--partition", required=True)
    e.add_argument("--baseline", default=None)
    e.add_argument("--out", required=True)

    rp = with_overrides(sub.add_parser("run-plan", help="run the whole experiment grid"))
    rp.add_argument("--config", default=None, help="plan JSON (default: the shipped plan)")
    rp.add_argument("--out", default=None, help="output directory (default: the plan's out_dir)")
    rp.add_argument("--jobs", type=int, default=1)

    rep = sub.add_parser("report", help="re-render the aggregate table of a finished plan")
    rep.add_argument("--in", dest="in_dir", required=True)
    return p


def _plan(path, overrides=()) -> E.ExperimentPlan:
    plan = E.default_plan() if path is None else E.load_plan(path)
    if overrides:
        d = plan.to_dict()
        d["defaults"] = {**d["defaults"], **dict(overrides)}
        plan = E.ExperimentPlan.from_dict(d)
    return plan


def _digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()[:16]


def _splits(data_dir):
    ds, meta = E.load_data_dir(data_dir)
    train, test = split_dataset(ds, SplitSpec(**meta["split"]))
    part = partition_by_frequency(train, meta["partition_fraction"])
    return train, test, part, meta


def cmd_gen_data(a) -> None:
    plan = _plan(a.config)
    ds = E.build_dataset(plan)
    train, _ = split_dataset(ds, plan.split_spec())
    E.write_data_dir(a.out, ds, plan)
    write_json(Path(a.out) / "partition.json",
               partition_by_frequency(train, plan.partition_fraction).to_dict())


def cmd_train_ref(a) -> None:
    plan = _plan(a.config, a.overrides)
    train, test, part, meta = _splits(a.data)
    seed = plan.seeds[0] if a.seed is None else a.seed
    cfg = plan.train_config(plan.reference_arm, seed)
    _, report, run = E.train_reference(train, test, part, cfg)
    prov = {"arm": plan.reference_arm.name, "config": cfg.to_dict(),
            "data_fingerprint": meta["fingerprint"]}
    M.save_checkpoint(a.out, run.params, seed, prov)


def cmd_train(a) -> None:
    plan = _plan(a.config, a.overrides)
    arm = plan.arm(a.arm)
    train, test, part, meta = _splits(a.data)
    if arm.mode == "reference":
        cfg = plan.train_config(arm, a.seed)
        _, _, run = E.train_reference(train, test, part, cfg)
    else:
        cfg = plan.train_config(arm, a.seed)
        ref = None
        if a.ref is not None:
            ref = M.snapshot_reference(M.load_checkpoint(a.ref)[0])
        elif cfg.needs_reference:
            raise UsageError(f"arm {arm.name!r} needs --ref")
        run = E.run_single(arm.name, cfg, train, test, part, ref)
    E.write_run(a.out, run, {"data_fingerprint": meta["fingerprint"],
                             "reference_sha256": _digest(a.ref) if a.ref else None})


def cmd_eval(a) -> None:
    _, test, _, meta = _splits(a.data)
    params, doc = M.load_checkpoint(a.model)
    part = LabelPartition.from_dict(read_json(a.partition))
    baseline = X.load_report(a.baseline) if a.baseline else None
    report = X.evaluate(params, test, part, baseline, "baseline" if baseline else None)
    X.save_report(a.out, report, {"model_sha256": _digest(a.model), "partition": part.to_dict(),
                                  "baseline_sha256": _digest(a.baseline) if a.baseline else None,
                                  "data_fingerprint": meta["fingerprint"],
                                  "model_config": doc.get("meta", {}).get("config")})


def cmd_run_plan(a) -> None:
    if a.jobs < 1:
        raise UsageError("--jobs must be >= 1")
    plan = _plan(a.config, a.overrides)
    E.run_plan(plan, a.out, jobs=a.jobs)


def cmd_report(a) -> None:
    results, plan = E.collect_results(a.in_dir)
    table, summary = E.aggregate(results, plan.baselines)
    summary["plan"] = plan.to_dict()
    atomic_write_text(Path(a.in_dir) / "aggregate.txt", table)
    write_json(Path(a.in_dir) / "aggregate.json", summary)


COMMANDS = {"gen-data": cmd_gen_data, "train-ref": cmd_train_ref, "train": cmd_train,
            "eval": cmd_eval, "run-plan": cmd_run_plan, "report": cmd_report}

RUNTIME_ERRORS = (DataError, M.ModelError, E.PlanError, G.TrainingError, OSError,
                  ValueError, KeyError, json.JSONDecodeError)


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        COMMANDS[args.command](args)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return 1
    except RUNTIME_ERRORS as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    return 0

