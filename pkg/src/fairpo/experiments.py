"""Experiment grid: reference (BCE-SFT) training, baselines, FairPO variants,
ablation arms, multi-seed runs and cross-arm aggregation.

A plan is a JSON document::

    {"dataset": {"synthetic": {...}} | {"features": path, "labels": path},
     "split": {"train_fraction": 0.8, "seed": 0},
     "partition_fraction": 0.2,
     "model": {"head_kind": "linear", "hidden": [16, 8]},
     "defaults": {<hyperparameters shared by every arm>},
     "arms": [{"name", "mode", "variant", "flags", "hyperparameters"}],
     "baselines": {"P": "BCE-SFT", "NP": "BCE-SFT"},
     "seeds": [0, 1, 2],
     "out_dir": "runs/default"}

Arm ``mode`` is one of ``reference``, ``single_loss``, ``fairpo``, ``fixed``
or ``global_preference``. Each seed s trains its own reference, and every
dependent arm run with seed s starts from (or is constrained by) that
reference.
"""

from __future__ import annotations

import json
import re
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, fields
from importlib import resources
from pathlib import Path

import numpy as np

from . import grpo as G
from . import losses as L
from . import metrics as X
from . import model as M
from ._io import FORMAT_VERSION, atomic_write_text, read_json, write_json
from .data import (Dataset, LabelPartition, SplitSpec, SyntheticConfig, generate_synthetic,
                   load_dataset, partition_by_frequency, split_dataset, write_dataset)

REFERENCE_ARM = "BCE-SFT"

_LOSS_KEYS = {f.name for f in fields(L.LossConfig)}
_TRAIN_KEYS = {"eta_theta", "eta_alpha", "max_iterations", "batch_size", "fixed_weight_p",
               "pointwise_loss", "init", "ema_decay", "warmup_steps", "eval_every"}
_FLAG_KEYS = {"no_preference", "np_constraint_off", "only_confusing_negatives", "no_bce_fallback"}
_MODEL_KEYS = {"head_kind", "hidden"}


class PlanError(ValueError):
    pass


@dataclass(frozen=True)
class ArmSpec:
    name: str
    mode: str = "fairpo"
    variant: str = "CPO"
    flags: dict = field(default_factory=dict)
    hyperparameters: dict = field(default_factory=dict)
    reference: str | None = REFERENCE_ARM

    def to_dict(self) -> dict:
        return {"name": self.name, "mode": self.mode, "variant": self.variant,
                "flags": dict(self.flags), "hyperparameters": dict(self.hyperparameters),
                "reference": self.reference}

    @classmethod
    def from_dict(cls, d: dict) -> "ArmSpec":
        unknown = set(d) - {"name", "mode", "variant", "flags", "hyperparameters", "reference"}
        if unknown:
            raise PlanError(f"arm {d.get('name')!r}: unknown keys {sorted(unknown)}")
        if "name" not in d:
            raise PlanError("every arm needs a name")
        ref = d.get("reference", None if d.get("mode") == "reference" else REFERENCE_ARM)
        return cls(d["name"], d.get("mode", "fairpo"), d.get("variant", "CPO"),
                   dict(d.get("flags", {})), dict(d.get("hyperparameters", {})), ref)


def default_arms() -> list[ArmSpec]:
    """Baselines, the three variants and the ablation arms."""
    cpo = "CPO"
    return [
        ArmSpec(REFERENCE_ARM, mode="reference", reference=None),
        ArmSpec("GDRO + BCE", flags={"no_preference": True, "np_constraint_off": True},
                hyperparameters={"init": "scratch"}),
        ArmSpec("Focal Loss", mode="single_loss",
                hyperparameters={"init": "scratch", "pointwise_loss": "focal"}),
        ArmSpec("FairPO-DPO", variant="DPO"),
        ArmSpec("FairPO-SimPO", variant="SimPO"),
        ArmSpec("FairPO-CPO", variant=cpo),
        ArmSpec("w/o Preference Loss", variant=cpo, flags={"no_preference": True}),
        ArmSpec("w/o P̄ Constraint", variant=cpo, flags={"np_constraint_off": True}),
        ArmSpec("w/o GRPO", mode="fixed", variant=cpo, hyperparameters={"fixed_weight_p": 0.5}),
        ArmSpec("Global CPO", mode="global_preference", variant=cpo),
        ArmSpec("Only Confusing Negatives", variant=cpo, flags={"only_confusing_negatives": True}),
        ArmSpec("w/o BCE Fallback", variant=cpo, flags={"no_bce_fallback": True}),
    ]


@dataclass
class ExperimentPlan:
    dataset: dict = field(default_factory=lambda: {"synthetic": SyntheticConfig().to_dict()})
    split: dict = field(default_factory=lambda: {"train_fraction": 0.8, "seed": 0})
    partition_fraction: float = 0.2
    model: dict = field(default_factory=lambda: {"head_kind": "linear", "hidden": [16, 8]})
    defaults: dict = field(default_factory=dict)
    arms: list[ArmSpec] = field(default_factory=default_arms)
    baselines: dict = field(default_factory=lambda: {"P": REFERENCE_ARM, "NP": REFERENCE_ARM})
    seeds: list[int] = field(default_factory=lambda: [0, 1, 2])
    out_dir: str = "runs/default"

    def __post_init__(self):
        self.arms = [a if isinstance(a, ArmSpec) else ArmSpec.from_dict(a) for a in self.arms]
        self.validate()

    def validate(self) -> None:
        names = [a.name for a in self.arms]
        if len(set(names)) != len(names):
            raise PlanError(f"arm names must be unique: {names}")
        if not self.seeds:
            raise PlanError("plan needs at least one seed")
        if not 0.0 < self.partition_fraction < 1.0:
            raise PlanError("partition_fraction must be in (0, 1)")
        if set(self.model) - _MODEL_KEYS:
            raise PlanError(f"unknown model keys {sorted(set(self.model) - _MODEL_KEYS)}")
        if "synthetic" not in self.dataset and not {"features", "labels"} <= set(self.dataset):
            raise PlanError("dataset needs a 'synthetic' config or 'features' and 'labels' paths")
        by_name = {a.name: a for a in self.arms}
        for arm in self.arms:
            cfg = self.train_config(arm, self.seeds[0])
            if arm.mode == "reference":
                continue
            if arm.reference is None:
                if cfg.needs_reference:
                    raise PlanError(f"arm {arm.name!r} needs a reference but declares none")
            elif arm.reference not in by_name or by_name[arm.reference].mode != "reference":
                raise PlanError(f"arm {arm.name!r}: missing reference arm {arm.reference!r}")
        for group, name in self.baselines.items():
            if name not in by_name:
                raise PlanError(f"baseline for {group} names unknown arm {name!r}")

    def train_config(self, arm: ArmSpec, seed: int) -> G.TrainConfig:
        hp = {**self.defaults, **arm.hyperparameters}
        unknown = set(hp) - _TRAIN_KEYS - _LOSS_KEYS
        if unknown:
            raise PlanError(f"arm {arm.name!r}: unknown hyperparameters {sorted(unknown)}")
        if set(arm.flags) - _FLAG_KEYS:
            raise PlanError(f"arm {arm.name!r}: unknown flags {sorted(set(arm.flags) - _FLAG_KEYS)}")
        loss = L.LossConfig(**{k: v for k, v in hp.items() if k in _LOSS_KEYS})
        kw = {k: v for k, v in hp.items() if k in _TRAIN_KEYS}
        if arm.mode == "reference":
            kw.update(mode="single_loss", init="scratch")
            kw.setdefault("pointwise_loss", "bce")
        else:
            kw["mode"] = arm.mode
        try:
            return G.TrainConfig(variant=arm.variant, loss=loss, seed=int(seed),
                                 head_kind=self.model.get("head_kind", "linear"),
                                 hidden=tuple(self.model.get("hidden", (16, 8))),
                                 **kw, **{k: bool(v) for k, v in arm.flags.items()})
        except ValueError as e:
            raise PlanError(f"arm {arm.name!r}: {e}") from None

    def to_dict(self) -> dict:
        return {"format_version": FORMAT_VERSION, "dataset": self.dataset, "split": self.split,
                "partition_fraction": self.partition_fraction, "model": self.model,
                "defaults": self.defaults, "arms": [a.to_dict() for a in self.arms],
                "baselines": self.baselines, "seeds": list(self.seeds), "out_dir": self.out_dir}

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentPlan":
        d = {k: v for k, v in d.items() if k != "format_version"}
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise PlanError(f"unknown plan keys {sorted(unknown)}")
        try:
            return cls(**d)
        except TypeError as e:
            raise PlanError(str(e)) from None

    def arm(self, name: str) -> ArmSpec:
        for a in self.arms:
            if a.name == name:
                return a
        raise PlanError(f"no arm named {name!r} in the plan")

    @property
    def reference_arm(self) -> ArmSpec:
        refs = [a for a in self.arms if a.mode == "reference"]
        return refs[0] if refs else ArmSpec(REFERENCE_ARM, mode="reference", reference=None)

    def split_spec(self) -> SplitSpec:
        return SplitSpec(**self.split)


def load_plan(path) -> ExperimentPlan:
    try:
        return ExperimentPlan.from_dict(read_json(path))
    except json.JSONDecodeError as e:
        raise PlanError(f"{path}: invalid JSON ({e})") from None


def default_plan() -> ExperimentPlan:
    text = resources.files("fairpo").joinpath("default_plan.json").read_text()
    return ExperimentPlan.from_dict(json.loads(text))


def build_dataset(plan: ExperimentPlan) -> Dataset:
    if "synthetic" in plan.dataset:
        return generate_synthetic(SyntheticConfig(**plan.dataset["synthetic"]))
    return load_dataset(plan.dataset["features"], plan.dataset["labels"])


def slug(name: str) -> str:
    s = name.replace("P̄", "Pbar").replace("+", "plus")
    return re.sub(r"[^A-Za-z0-9]+", "-", s).strip("-").lower()


# -- runs --------------------------------------------------------------------


@dataclass
class RunOutput:
    arm: str
    seed: int
    params: M.ModelParams
    trace: G.TrainTrace
    state: G.TrainState
    report: X.MetricsReport
    config: G.TrainConfig


def train_reference(train: Dataset, test: Dataset, partition: LabelPartition,
                    cfg: G.TrainConfig) -> tuple[M.ReferenceParams, X.MetricsReport, RunOutput]:
    """Plain BCE training from a seeded small-uniform init."""
    if cfg.mode != "single_loss" or cfg.init != "scratch":
        raise PlanError("reference training uses single_loss mode from scratch")
    params, trace, state = G.train(train, partition, None, cfg)
    ref = M.snapshot_reference(params)
    report = X.evaluate(ref, test, partition)
    return ref, report, RunOutput(REFERENCE_ARM, cfg.seed, params, trace, state, report, cfg)


def run_single(name: str, cfg: G.TrainConfig, train: Dataset, test: Dataset,
               partition: LabelPartition, reference) -> RunOutput:
    params, trace, state = G.train(train, partition, reference, cfg)
    return RunOutput(name, cfg.seed, params, trace, state, X.evaluate(params, test, partition), cfg)


def write_run(run_dir, run: RunOutput, provenance: dict | None = None) -> None:
    run_dir = Path(run_dir)
    meta = {"arm": run.arm, "config": run.config.to_dict()}
    if provenance:
        meta.update(provenance)
    M.save_checkpoint(run_dir / "model.json", run.params, run.seed, meta)
    G.save_optimizer_state(run_dir / "optimizer.json", run.state, run.config)
    run.trace.write_csv(run_dir / "trace.csv")
    X.save_report(run_dir / "report.json", run.report, meta)
    write_json(run_dir / "run.json", {"format_version": FORMAT_VERSION, **meta})


@dataclass
class ArmResult:
    name: str
    seeds: list[int]
    reports: list[X.MetricsReport]
    mean: dict = field(default_factory=dict)
    std: dict = field(default_factory=dict)
    delta_map_p: float | None = None
    delta_map_np: float | None = None

    def __post_init__(self):
        if not self.reports:
            raise PlanError(f"arm {self.name!r} has no reports")
        if not self.mean:
            for _, key in X.COLUMNS:
                vals = np.array([getattr(r, key) for r in self.reports], dtype=np.float64)
                self.mean[key] = float(vals.mean())
                self.std[key] = float(vals.std(ddof=1)) if vals.size > 1 else 0.0

    def to_dict(self) -> dict:
        return {"name": self.name, "seeds": self.seeds, "mean": self.mean, "std": self.std,
                "delta_map_p": self.delta_map_p, "delta_map_np": self.delta_map_np,
                "reports": [r.to_dict() for r in self.reports]}


def run_arm(arm: ArmSpec, plan: ExperimentPlan, train: Dataset, test: Dataset,
            partition: LabelPartition, references: dict, seeds=None) -> tuple[ArmResult, list[RunOutput]]:
    """One run per seed; ``references`` maps seed -> (ReferenceParams, MetricsReport, RunOutput)."""
    seeds = list(plan.seeds if seeds is None else seeds)
    runs = []
    for s in seeds:
        if arm.mode == "reference":
            runs.append(references[s][2])
            continue
        cfg = plan.train_config(arm, s)
        if s not in references and cfg.needs_reference:
            raise PlanError(f"arm {arm.name!r}: no reference for seed {s}")
        ref = references[s][0] if s in references else None
        runs.append(run_single(arm.name, cfg, train, test, partition, ref))
    return ArmResult(arm.name, seeds, [r.report for r in runs]), runs


def aggregate(results: list[ArmResult], baselines: dict | None = None) -> tuple[str, dict]:
    """Cross-arm table (text) and machine-readable summary.

    ``baselines`` maps "P" / "NP" to the arm the mAP deltas are taken
    against; by default both use the first arm.
    """
    if not results:
        raise PlanError("nothing to aggregate")
    prints = {r.test_fingerprint for res in results for r in res.reports}
    if len(prints) > 1:
        raise PlanError("arms were evaluated on different test splits; refusing to aggregate")
    by_name = {r.name: r for r in results}
    baselines = baselines or {"P": results[0].name, "NP": results[0].name}
    for g, name in baselines.items():
        if name not in by_name:
            raise PlanError(f"baseline arm {name!r} for {g} not among the results")
    bp, bnp = by_name[baselines["P"]], by_name[baselines["NP"]]
    rows, std = [], {}
    for res in results:
        res.delta_map_p = res.mean["map_p"] - bp.mean["map_p"]
        res.delta_map_np = res.mean["map_np"] - bnp.mean["map_np"]
        rows.append((res.name, {**res.mean, "delta_map_p": res.delta_map_p,
                                "delta_map_np": res.delta_map_np}))
        std[res.name] = res.std
    table = X.render_table(rows, std)
    table += f"mean±std over seeds; dmAP P vs {baselines['P']}, dmAP NP vs {baselines['NP']}; * = best\n"
    best = {key: max(results, key=lambda r: r.mean[key]).name for _, key in X.COLUMNS}
    summary = {"format_version": FORMAT_VERSION, "baselines": baselines, "best": best,
               "arms": [r.to_dict() for r in results]}
    return table, summary


def _job(args):
    name, cfg, train, test, partition, ref = args
    return run_single(name, cfg, train, test, partition, ref)


def run_plan(plan: ExperimentPlan, out_dir=None, jobs: int = 1) -> tuple[list[ArmResult], str]:
    """Run every arm for every seed and write all artefacts under ``out_dir``."""
    out = Path(out_dir or plan.out_dir)
    dataset = build_dataset(plan)
    train, test = split_dataset(dataset, plan.split_spec())
    partition = partition_by_frequency(train, plan.partition_fraction)
    provenance = {"plan": plan.to_dict()}

    write_json(out / "plan.json", plan.to_dict())
    write_json(out / "partition.json", partition.to_dict())
    write_data_dir(out / "data", dataset, plan)

    ref_arm = plan.reference_arm
    references = {}
    for s in plan.seeds:
        ref, rep, run = train_reference(train, test, partition, plan.train_config(ref_arm, s))
        references[s] = (ref, rep, run)
        write_run(out / "arms" / slug(ref_arm.name) / f"seed_{s}", run, provenance)

    tasks = []
    for arm in plan.arms:
        if arm.mode == "reference":
            continue
        for s in plan.seeds:
            cfg = plan.train_config(arm, s)
            ref = references[s][0] if arm.reference is not None else None
            tasks.append((arm.name, cfg, train, test, partition, ref))
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            outputs = list(pool.map(_job, tasks))
    else:
        outputs = [_job(t) for t in tasks]
    runs = {(o.arm, o.seed): o for o in outputs}
    for s in plan.seeds:
        runs[(ref_arm.name, s)] = references[s][2]

    results = []
    for arm in plan.arms if any(a.mode == "reference" for a in plan.arms) else [ref_arm] + plan.arms:
        arm_runs = [runs[(arm.name, s)] for s in plan.seeds]
        for r in arm_runs:
            if arm.mode != "reference":
                write_run(out / "arms" / slug(arm.name) / f"seed_{r.seed}", r, provenance)
        results.append(ArmResult(arm.name, list(plan.seeds), [r.report for r in arm_runs]))
    table, summary = aggregate(results, plan.baselines)
    summary["plan"] = plan.to_dict()
    atomic_write_text(out / "aggregate.txt", table)
    write_json(out / "aggregate.json", summary)
    return results, table


def write_data_dir(path, dataset: Dataset, plan: ExperimentPlan) -> None:
    path = Path(path)
    write_dataset(dataset, path / "features.csv", path / "labels.csv")
    write_json(path / "meta.json", {
        "format_version": FORMAT_VERSION,
        "dataset": plan.dataset,
        "split": plan.split,
        "partition_fraction": plan.partition_fraction,
        "label_names": list(dataset.label_names),
        "fingerprint": dataset.fingerprint(),
    })


def load_data_dir(path) -> tuple[Dataset, dict]:
    path = Path(path)
    meta = read_json(path / "meta.json")
    ds = load_dataset(path / "features.csv", path / "labels.csv", meta.get("label_names", ()))
    return ds, meta


def collect_results(run_dir) -> tuple[list[ArmResult], ExperimentPlan]:
    """Rebuild ArmResults from the per-seed report files of a finished plan."""
    run_dir = Path(run_dir)
    plan = ExperimentPlan.from_dict(read_json(run_dir / "plan.json"))
    arms = plan.arms if any(a.mode == "reference" for a in plan.arms) else [plan.reference_arm] + plan.arms
    results = []
    for arm in arms:
        reports = [X.load_report(run_dir / "arms" / slug(arm.name) / f"seed_{s}" / "report.json")
                   for s in plan.seeds]
        results.append(ArmResult(arm.name, list(plan.seeds), reports))
    return results, plan
