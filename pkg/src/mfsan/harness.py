"""Experiment orchestration: method comparisons, ablations, sweeps, exports.

Six methods form the comparison set.  ``no_adapt`` trains the full
architecture with both alignment coefficients at zero.  ``single_best``
trains one single-branch model per source and reports the best target
accuracy.  ``source_combine`` pools all sources into one and trains a
single-branch model with the alignment loss in that one shared feature
space.  ``mfsan_mmd`` drops the classifier-consistency term, ``mfsan_disc``
drops the feature-alignment term, and ``mfsan`` keeps both.

Each (method, seed) run regenerates the synthetic task with that seed (or
reuses the file-loaded task), trains, and evaluates on the target through
the quarantined-label path.  All outputs are plain files: JSON-lines logs,
a JSON summary per method, and CSV series for the per-classifier table,
the coefficient sweep, convergence curves, and latent-feature exports.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .data import (
    AffineMap,
    Domain,
    MultiSourceTask,
    SyntheticSpec,
    generate_synthetic,
    load_task,
)
from .errors import ValidationError
from .metrics import MetricsRecord, evaluate_on_target
from .model import MfsanModel
from .trainer import TrainConfig, Trainer, config_from_dict

METHODS = ("no_adapt", "single_best", "source_combine", "mfsan_mmd", "mfsan_disc", "mfsan")

LAMBDA_GRID = (0.01, 0.02, 0.05, 0.1, 0.2, 0.5, 1.0, 2.0)


@dataclass
class ModelConfig:
    """Architecture knobs for the perceptron blocks."""

    common_dims: tuple = (32, 32)
    branch_dims: tuple = (32, 16)

    def build(self, task: MultiSourceTask, num_sources: int, seed: int) -> MfsanModel:
        return MfsanModel(input_dim=task.feature_dim, num_classes=task.num_classes,
                          num_sources=num_sources, common_dims=self.common_dims,
                          branch_dims=self.branch_dims, seed=seed)


@dataclass
class ExperimentSpec:
    """One experiment: a method, a task source, overrides, and seeds."""

    method: str = "mfsan"
    synthetic: SyntheticSpec | None = None
    manifest: str | None = None
    train: TrainConfig = field(default_factory=TrainConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    seeds: tuple = (0, 1, 2, 3, 4)
    outdir: str | None = None

    def validate(self) -> "ExperimentSpec":
        problems = []
        if self.method not in METHODS:
            problems.append(f"unknown method {self.method!r}; valid: {METHODS}")
        if not self.seeds:
            problems.append("need at least one seed")
        if self.synthetic is None and self.manifest is None:
            problems.append("need a synthetic spec or a manifest path")
        if problems:
            raise ValidationError(problems)
        return self


_SPEC_KEYS = ("method", "synthetic", "manifest", "train", "model", "seeds", "outdir")


def experiment_spec_from_dict(data: dict) -> ExperimentSpec:
    """Build a spec from parsed JSON, rejecting unknown keys by name."""
    unknown = set(data) - set(_SPEC_KEYS)
    if unknown:
        raise ValidationError(f"unknown experiment keys {sorted(unknown)}; "
                              f"valid keys: {sorted(_SPEC_KEYS)}")
    synthetic = data.get("synthetic")
    if isinstance(synthetic, dict):
        synthetic = dict(synthetic)
        rotations = synthetic.pop("rotations", None)
        known = set(SyntheticSpec.__dataclass_fields__) - {"domain_transforms", "class_means"}
        bad = set(synthetic) - known
        if bad:
            raise ValidationError(f"unknown synthetic keys {sorted(bad)}; "
                                  f"valid keys: {sorted(known | {'rotations'})}")
        synthetic = replace(SyntheticSpec(), **synthetic)
        if rotations is not None:
            transforms = [AffineMap(rotation_deg=float(angle)) for angle in rotations]
            synthetic = replace(synthetic, domain_transforms=transforms)
    train = data.get("train", {})
    if isinstance(train, dict):
        train = config_from_dict({**train})
    model = data.get("model", {})
    if isinstance(model, dict):
        bad = set(model) - set(ModelConfig.__dataclass_fields__)
        if bad:
            raise ValidationError(f"unknown model keys {sorted(bad)}; valid keys: "
                                  f"{sorted(ModelConfig.__dataclass_fields__)}")
        model = ModelConfig(**{k: tuple(v) if isinstance(v, list) else v
                               for k, v in model.items()})
    return ExperimentSpec(method=data.get("method", "mfsan"), synthetic=synthetic,
                          manifest=data.get("manifest"), train=train, model=model,
                          seeds=tuple(data.get("seeds", (0, 1, 2, 3, 4))),
                          outdir=data.get("outdir")).validate()


def load_experiment_spec(path) -> ExperimentSpec:
    return experiment_spec_from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


@dataclass
class SeedResult:
    """Everything one (method, seed) run produced."""

    seed: int
    records: list
    final: MetricsRecord
    error: str | None = None


@dataclass
class MethodResult:
    """Per-seed results plus the mean and standard deviation summary."""

    method: str
    seed_results: list
    summary: dict
    models: list | None = None


def _task_for_seed(spec: ExperimentSpec, seed: int) -> MultiSourceTask:
    if spec.manifest is not None:
        return load_task(spec.manifest)
    return generate_synthetic(replace(spec.synthetic, seed=seed))


def _pool_sources(task: MultiSourceTask) -> MultiSourceTask:
    pooled = Domain(features=np.concatenate([d.features for d in task.sources]),
                    labels=np.concatenate([d.labels for d in task.sources]))
    return MultiSourceTask(sources=[pooled], target_features=task.target_features,
                           target_labels_eval=task.target_labels_eval,
                           num_classes=task.num_classes, feature_dim=task.feature_dim)


def _single_source(task: MultiSourceTask, j: int) -> MultiSourceTask:
    return MultiSourceTask(sources=[task.sources[j]], target_features=task.target_features,
                           target_labels_eval=task.target_labels_eval,
                           num_classes=task.num_classes, feature_dim=task.feature_dim)


def method_coefficients(method: str, config: TrainConfig) -> TrainConfig:
    """The configured bases with the method's ablation applied."""
    if method == "no_adapt":
        return replace(config, lambda_base=0.0, gamma_base=0.0)
    if method == "mfsan_mmd":
        return replace(config, gamma_base=0.0)
    if method == "mfsan_disc":
        return replace(config, lambda_base=0.0)
    return config


def _train_once(task: MultiSourceTask, config: TrainConfig, model_cfg: ModelConfig,
                seed: int) -> tuple:
    config = replace(config, seed=seed)
    model = model_cfg.build(task, task.num_sources, seed)
    trainer = Trainer(model, task, config)
    records = trainer.run()
    if records:
        final = records[-1]
    else:
        # zero-iteration runs still evaluate the initialized model
        evaluation = evaluate_on_target(model, task)
        final = MetricsRecord(iteration=0, progress=0.0, lr=None, lambda_eff=0.0,
                              gamma_eff=0.0, cls_loss=math.nan, mmd_loss=math.nan,
                              disc_loss=math.nan, total_loss=math.nan, **evaluation)
    return model, records, final


def run_seed(spec: ExperimentSpec, seed: int) -> tuple:
    """One (method, seed) run; returns (model, SeedResult)."""
    task = _task_for_seed(spec, seed)
    if task.target_labels_eval is None:
        raise ValidationError("experiments need target labels for evaluation; "
                              "this task has none")
    config = method_coefficients(spec.method, spec.train)
    if spec.method in ("no_adapt", "mfsan", "mfsan_mmd", "mfsan_disc"):
        model, records, final = _train_once(task, config, spec.model, seed)
    elif spec.method == "source_combine":
        model, records, final = _train_once(_pool_sources(task), config, spec.model, seed)
    elif spec.method == "single_best":
        best = None
        for j in range(task.num_sources):
            candidate = _train_once(_single_source(task, j), config, spec.model, seed)
            if best is None or candidate[2].average_vote_accuracy > best[2].average_vote_accuracy:
                best = candidate
        model, records, final = best
    else:
        raise ValidationError(f"unknown method {spec.method!r}")
    return model, SeedResult(seed=seed, records=records, final=final)


def summarize(seed_results: list) -> dict:
    """Mean and population standard deviation of the headline accuracy."""
    accs = [r.final.average_vote_accuracy for r in seed_results if r.error is None]
    out = {
        "seeds": [r.seed for r in seed_results],
        "errors": {r.seed: r.error for r in seed_results if r.error is not None},
        "per_seed_accuracy": accs,
    }
    if accs:
        out["mean_accuracy"] = float(np.mean(accs))
        out["std_accuracy"] = float(np.std(accs))
    return out


def run_method(spec: ExperimentSpec, keep_models: bool = False) -> MethodResult:
    """Train every seed of one method; write logs and a summary if outdir set.

    A failing seed is recorded in the summary and the run continues.
    """
    spec.validate()
    seed_results = []
    models = []
    for seed in spec.seeds:
        try:
            model, result = run_seed(spec, seed)
        except Exception as exc:  # noqa: BLE001 - per-seed isolation is the contract
            result = SeedResult(seed=seed, records=[], final=None, error=str(exc))
            model = None
        seed_results.append(result)
        if keep_models:
            models.append(model)
        if spec.outdir is not None and result.error is None:
            seed_dir = Path(spec.outdir) / spec.method / str(seed)
            seed_dir.mkdir(parents=True, exist_ok=True)
            write_jsonl(seed_dir / "log.jsonl", result.records)
    summary = summarize(seed_results)
    summary["method"] = spec.method
    if spec.outdir is not None:
        method_dir = Path(spec.outdir) / spec.method
        method_dir.mkdir(parents=True, exist_ok=True)
        (method_dir / "summary.json").write_text(json.dumps(summary, indent=2) + "\n",
                                                 encoding="utf-8")
    result = MethodResult(method=spec.method, seed_results=seed_results, summary=summary)
    if keep_models:
        result.models = models
    return result


def write_jsonl(path, records: list) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for record in records:
            fh.write(json.dumps(record.to_json_dict()) + "\n")


def read_jsonl(path) -> list:
    records = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                records.append(MetricsRecord.from_json_dict(json.loads(line)))
    return records


# -- reports ----------------------------------------------------------------


def table4_report(results: dict, outdir=None) -> list:
    """Per-classifier accuracy rows for runs with and without the disc term.

    ``results`` maps method name to MethodResult; rows cover S1..SN, the
    average vote, and the max inter-classifier gap, as mean over seeds.
    """
    rows = []
    for method, result in results.items():
        finals = [r.final for r in result.seed_results if r.error is None]
        if not finals:
            continue
        n = len(finals[0].per_classifier_accuracy)
        if n < 2:
            raise ValidationError("per-classifier table needs >= 2 branches")
        per = np.array([f.per_classifier_accuracy for f in finals])
        for j in range(n):
            rows.append({"method": method, "row": f"S{j + 1}",
                         "accuracy_mean": float(per[:, j].mean()),
                         "accuracy_std": float(per[:, j].std())})
        votes = [f.average_vote_accuracy for f in finals]
        rows.append({"method": method, "row": "Avg",
                     "accuracy_mean": float(np.mean(votes)),
                     "accuracy_std": float(np.std(votes))})
        gaps = per.max(axis=1) - per.min(axis=1)
        rows.append({"method": method, "row": "MaxGap",
                     "accuracy_mean": float(gaps.mean()),
                     "accuracy_std": float(gaps.std())})
    if outdir is not None:
        _write_csv_rows(Path(outdir) / "table4.csv",
                        ["method", "row", "accuracy_mean", "accuracy_std"], rows)
    return rows


def sweep_lambda(spec: ExperimentSpec, values=LAMBDA_GRID, outdir=None) -> list:
    """One full multi-seed run per coefficient value, gamma tied to lambda.

    Returns one row per value (mean and std accuracy over seeds); per-value
    failures are recorded in the row and the sweep continues.
    """
    if any(v <= 0 for v in values):
        raise ValidationError("sweep values must be positive")
    rows = []
    for value in values:
        tuned = replace(spec, train=replace(spec.train, lambda_base=float(value),
                                            gamma_base=float(value)),
                        method="mfsan", outdir=None)
        try:
            result = run_method(tuned)
            rows.append({"lambda": float(value),
                         "accuracy_mean": result.summary.get("mean_accuracy"),
                         "accuracy_std": result.summary.get("std_accuracy"),
                         "error": ""})
        except Exception as exc:  # noqa: BLE001 - sweep must survive bad points
            rows.append({"lambda": float(value), "accuracy_mean": None,
                         "accuracy_std": None, "error": str(exc)})
    if outdir is not None:
        _write_csv_rows(Path(outdir) / "sweep_lambda.csv",
                        ["lambda", "accuracy_mean", "accuracy_std", "error"], rows)
    return rows


def convergence_log(spec: ExperimentSpec, methods=("mfsan", "mfsan_mmd"), outdir=None) -> list:
    """Accuracy-vs-iteration series, aligned across methods on one grid.

    Rows carry per-classifier and average-vote accuracy at every evaluation
    point, mean and std over seeds, one block per method.
    """
    rows = []
    iteration_grid = None
    for method in methods:
        result = run_method(replace(spec, method=method, outdir=None))
        ok = [r for r in result.seed_results if r.error is None]
        if not ok:
            raise ValidationError(f"every seed of {method} failed")
        grid = [rec.iteration for rec in ok[0].records]
        if iteration_grid is None:
            iteration_grid = grid
        elif grid != iteration_grid:
            raise ValidationError("methods produced misaligned evaluation grids")
        n = len(ok[0].records[0].per_classifier_accuracy)
        for t, iteration in enumerate(grid):
            series = {}
            for j in range(n):
                series[f"s{j + 1}"] = [r.records[t].per_classifier_accuracy[j] for r in ok]
            series["avg"] = [r.records[t].average_vote_accuracy for r in ok]
            for label, values in series.items():
                rows.append({"method": method, "iteration": iteration, "classifier": label,
                             "accuracy_mean": float(np.mean(values)),
                             "accuracy_std": float(np.std(values))})
    if outdir is not None:
        _write_csv_rows(Path(outdir) / "convergence.csv",
                        ["method", "iteration", "classifier", "accuracy_mean", "accuracy_std"],
                        rows)
    return rows


def export_embeddings(model: MfsanModel, task: MultiSourceTask, outdir) -> list:
    """Dump each branch's latent features for every domain to CSV.

    Per branch j: one file with the branch's feature columns, a domain tag
    (source_1..source_N or target), and the true label (target labels
    included; this is evaluation tooling).  Unlabeled targets get -1.
    """
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    paths = []
    domains = [(f"source_{j + 1}", d.features, d.labels) for j, d in enumerate(task.sources)]
    target_labels = task.target_labels_eval
    if target_labels is None:
        target_labels = np.full(task.target_features.shape[0], -1, dtype=np.int64)
    domains.append(("target", task.target_features, target_labels))
    for j in range(model.num_sources):
        width = model.branch_dims[-1]
        header = [f"feature_{i}" for i in range(width)] + ["domain", "label"]
        path = outdir / f"embeddings_branch{j}.csv"
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(",".join(header) + "\n")
            for tag, features, labels in domains:
                feats, _ = model.forward_source(j, features)
                for row, label in zip(feats.values, labels):
                    cells = [repr(float(v)) for v in row] + [tag, str(int(label))]
                    fh.write(",".join(cells) + "\n")
        paths.append(path)
    return paths


def _write_csv_rows(path, fieldnames, rows) -> None:
    import csv

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=fieldnames)
        writer.writeheader()
        for row in rows:
            writer.writerow(row)
