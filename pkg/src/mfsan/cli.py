"""Command-line entry point.

Subcommands: ``generate`` (synthetic task to CSVs + manifest), ``train``
(one training run to checkpoint + JSON-lines log), ``experiment`` (method
comparison, per-classifier table, or convergence series from a spec file),
``sweep`` (accuracy vs the alignment coefficient), and ``export-embeddings``
(per-branch latent features to CSV).

Every run prints its fully resolved configuration as JSON before any
computation.  Overrides use repeatable ``--set key=value`` flags on top of
the dedicated options; unknown keys are rejected along with the list of
valid ones.  ``MFSAN_SEED`` provides a default seed, overridden by
``--seed``.

Exit codes: 0 success, 2 validation or parse failure, 3 output location
already in use (pass ``--force``), 4 numeric divergence.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import replace
from pathlib import Path

from .data import AffineMap, SyntheticSpec, generate_synthetic, load_task, write_task
from .errors import DivergenceError, MfsanError, OutputConflictError
from .harness import (
    LAMBDA_GRID,
    ModelConfig,
    ExperimentSpec,
    convergence_log,
    export_embeddings,
    load_experiment_spec,
    run_method,
    sweep_lambda,
    table4_report,
    write_jsonl,
)
from .kernels import KernelSpec
from .model import load_model, save_model
from .trainer import TrainConfig, Trainer, config_from_dict, config_to_dict
from .errors import ValidationError

TRAIN_METHODS = ("no_adapt", "mfsan", "mfsan_mmd", "mfsan_disc", "source_combine")

_KERNEL_KEYS = ("kernel_mode", "kernel_bandwidths", "kernel_ladder_size",
                "kernel_step_multiplier")


def _coerce(text: str, sample):
    """Parse a --set value string to the type of the field's default."""
    if isinstance(sample, bool):
        return text.lower() in ("1", "true", "yes")
    if isinstance(sample, int):
        return int(text)
    if isinstance(sample, float):
        return float(text)
    if isinstance(sample, tuple):
        return tuple(float(v) if "." in v or "e" in v.lower() else int(v)
                     for v in text.split(",") if v)
    return text


def parse_overrides(pairs, valid: dict) -> dict:
    """Turn KEY=VALUE strings into typed overrides against a defaults dict."""
    out = {}
    for pair in pairs or ():
        if "=" not in pair:
            raise ValidationError(f"override {pair!r} is not of the form key=value")
        key, _, value = pair.partition("=")
        if key not in valid:
            raise ValidationError(f"unknown override key {key!r}; valid keys: "
                                  f"{sorted(valid)}")
        try:
            out[key] = _coerce(value, valid[key])
        except ValueError as exc:
            raise ValidationError(f"bad value for {key!r}: {exc}") from None
    return out


def resolve_seed(args) -> int | None:
    if getattr(args, "seed", None) is not None:
        return args.seed
    env = os.environ.get("MFSAN_SEED")
    if env is not None:
        try:
            return int(env)
        except ValueError:
            raise ValidationError(f"MFSAN_SEED must be an integer, got {env!r}") from None
    return None


def claim_outdir(path, force: bool) -> Path:
    """Refuse to reuse a non-empty output directory unless forced."""
    path = Path(path)
    if path.exists() and any(path.iterdir()) and not force:
        raise OutputConflictError(f"{path} already has contents; pass --force to overwrite")
    path.mkdir(parents=True, exist_ok=True)
    return path


def echo_config(kind: str, payload: dict) -> None:
    print(json.dumps({"resolved_config": {"command": kind, **payload}}, default=str))


def _kernel_from_overrides(config: TrainConfig, overrides: dict) -> TrainConfig:
    if not any(k in overrides for k in _KERNEL_KEYS):
        return config
    mode = overrides.pop("kernel_mode", config.kernel.bandwidth_mode)
    if mode == "fixed":
        bandwidths = overrides.pop("kernel_bandwidths", config.kernel.bandwidths)
        if not bandwidths:
            raise ValidationError("kernel_mode=fixed needs kernel_bandwidths")
        kernel = KernelSpec.fixed(bandwidths)
        overrides.pop("kernel_ladder_size", None)
        overrides.pop("kernel_step_multiplier", None)
    else:
        kernel = KernelSpec.median(
            overrides.pop("kernel_ladder_size", config.kernel.ladder_size),
            overrides.pop("kernel_step_multiplier", config.kernel.step_multiplier))
        overrides.pop("kernel_bandwidths", None)
    return replace(config, kernel=kernel)


# -- generate ----------------------------------------------------------------


def cmd_generate(args) -> int:
    stock = SyntheticSpec()
    valid = {name: getattr(stock, name)
             for name in ("num_classes", "feature_dim", "samples_per_domain",
                          "noise_std", "class_cov_scale", "class_mean_scale", "seed")}
    overrides = parse_overrides(args.set, valid)
    if args.num_classes is not None:
        overrides["num_classes"] = args.num_classes
    if args.feature_dim is not None:
        overrides["feature_dim"] = args.feature_dim
    if args.samples_per_domain is not None:
        overrides["samples_per_domain"] = args.samples_per_domain
    seed = resolve_seed(args)
    if seed is not None:
        overrides["seed"] = seed
    spec = replace(SyntheticSpec(), **overrides)
    if args.rotations is not None:
        angles = [float(v) for v in args.rotations.split(",") if v]
        spec = replace(spec, domain_transforms=[AffineMap(rotation_deg=a) for a in angles])
    spec.validate()
    outdir = claim_outdir(args.out, args.force)
    echo_config("generate", {"outdir": str(outdir), **_synthetic_dict(spec)})
    task = generate_synthetic(spec)
    manifest = write_task(task, outdir)
    print(f"seed {spec.seed}: wrote {task.num_sources} source domains, 1 target domain, "
          f"manifest {manifest}")
    return 0


def _synthetic_dict(spec: SyntheticSpec) -> dict:
    return {
        "num_classes": spec.num_classes,
        "feature_dim": spec.feature_dim,
        "samples_per_domain": spec.samples_per_domain,
        "class_cov_scale": spec.class_cov_scale,
        "class_mean_scale": spec.class_mean_scale,
        "noise_std": spec.noise_std,
        "seed": spec.seed,
        "rotations_deg": [t.rotation_deg for t in spec.domain_transforms],
    }


# -- train -------------------------------------------------------------------


def cmd_train(args) -> int:
    task = load_task(args.manifest)
    defaults = config_to_dict(TrainConfig())
    defaults.pop("kernel")
    valid = {**defaults, "kernel_mode": "median_heuristic", "kernel_bandwidths": (),
             "kernel_ladder_size": 5, "kernel_step_multiplier": 2.0,
             "common_dims": (32, 32), "branch_dims": (32, 16)}
    overrides = parse_overrides(args.set, valid)
    model_cfg = ModelConfig(
        common_dims=tuple(int(v) for v in overrides.pop("common_dims", (32, 32))),
        branch_dims=tuple(int(v) for v in overrides.pop("branch_dims", (32, 16))))
    config = TrainConfig()
    config = _kernel_from_overrides(config, overrides)
    config = replace(config, **{k: v for k, v in overrides.items()
                                if k in TrainConfig.__dataclass_fields__})
    if args.iterations is not None:
        config = replace(config, iterations=args.iterations)
    seed = resolve_seed(args)
    if seed is not None:
        config = replace(config, seed=seed)

    from .harness import _pool_sources, method_coefficients

    config = method_coefficients(args.method, config)
    if args.method == "source_combine":
        task = _pool_sources(task)
    config.validate()
    outdir = claim_outdir(args.out, args.force)
    echo_config("train", {"method": args.method, "outdir": str(outdir),
                          "manifest": str(args.manifest),
                          "model": {"common_dims": model_cfg.common_dims,
                                    "branch_dims": model_cfg.branch_dims},
                          **config.resolved()})
    model = model_cfg.build(task, task.num_sources, config.seed)
    trainer = Trainer(model, task, config)
    try:
        log = trainer.run()
    finally:
        write_jsonl(outdir / "log.jsonl", trainer.log)
    trainer.save_checkpoint(outdir / "trainer.ckpt")
    save_model(model, outdir / "model.ckpt")
    final = log[-1] if log else None
    if final is not None:
        print(f"iteration {final.iteration}: total loss {final.total_loss:.6f}, "
              f"target accuracy {final.average_vote_accuracy}")
    print(f"wrote {outdir / 'trainer.ckpt'}, {outdir / 'model.ckpt'}, "
          f"{outdir / 'log.jsonl'}")
    return 0


# -- experiment / sweep / export ----------------------------------------------


def _load_spec_file(args) -> tuple:
    """Parse the experiment spec file; returns (mode, ExperimentSpec)."""
    from .errors import ParseError
    from .harness import experiment_spec_from_dict

    spec_path = Path(args.spec)
    if not spec_path.exists():
        raise ValidationError(f"spec file {spec_path} does not exist")
    try:
        raw = json.loads(spec_path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ParseError(f"{spec_path}: invalid JSON ({exc})") from None
    if not isinstance(raw, dict):
        raise ParseError(f"{spec_path}: expected a JSON object")
    mode = raw.pop("mode", "method")
    spec = experiment_spec_from_dict(raw)
    if args.out is not None:
        spec = replace(spec, outdir=str(args.out))
    if spec.outdir is None:
        raise ValidationError("no output directory: set outdir in the spec or pass --out")
    return mode, spec


def cmd_experiment(args) -> int:
    mode, spec = _load_spec_file(args)
    outdir = claim_outdir(spec.outdir, args.force)
    echo_config("experiment", {"mode": mode, "method": spec.method,
                               "seeds": list(spec.seeds), "outdir": str(outdir),
                               "train": spec.train.resolved()})
    if mode == "method":
        result = run_method(spec)
        print(json.dumps(result.summary))
    elif mode == "table4":
        results = {m: run_method(replace(spec, method=m, outdir=spec.outdir))
                   for m in ("mfsan_mmd", "mfsan")}
        rows = table4_report(results, outdir=outdir)
        print(json.dumps(rows))
    elif mode == "convergence":
        rows = convergence_log(spec, outdir=outdir)
        print(f"wrote {outdir / 'convergence.csv'} ({len(rows)} rows)")
    else:
        raise ValidationError(f"unknown experiment mode {mode!r}; "
                              f"valid: method, table4, convergence")
    return 0


def cmd_sweep(args) -> int:
    _, spec = _load_spec_file(args)
    values = tuple(float(v) for v in args.values.split(",")) if args.values else LAMBDA_GRID
    outdir = claim_outdir(spec.outdir, args.force)
    echo_config("sweep", {"values": list(values), "seeds": list(spec.seeds),
                          "outdir": str(outdir), "train": spec.train.resolved()})
    rows = sweep_lambda(spec, values=values, outdir=outdir)
    print(json.dumps(rows))
    return 0


def cmd_export_embeddings(args) -> int:
    model = load_model(args.model)
    task = load_task(args.manifest)
    outdir = claim_outdir(args.out, args.force)
    echo_config("export-embeddings", {"model": str(args.model),
                                      "manifest": str(args.manifest),
                                      "outdir": str(outdir)})
    paths = export_embeddings(model, task, outdir)
    print(f"wrote {len(paths)} embedding files under {outdir}")
    return 0


# -- wiring --------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mfsan",
        description="Multi-source domain adaptation experiments on synthetic or CSV data")
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("generate", help="write a synthetic task as CSVs plus manifest")
    gen.add_argument("--out", required=True, help="output directory")
    gen.add_argument("--seed", type=int, default=None)
    gen.add_argument("--num-classes", type=int, default=None)
    gen.add_argument("--feature-dim", type=int, default=None)
    gen.add_argument("--samples-per-domain", type=int, default=None)
    gen.add_argument("--rotations", default=None,
                     help="comma list of per-domain rotation angles in degrees; "
                          "the last entry is the target domain")
    gen.add_argument("--set", action="extend", nargs="+", metavar="KEY=VALUE",
                     help="override a synthetic-spec field")
    gen.add_argument("--force", action="store_true")
    gen.set_defaults(func=cmd_generate)

    tr = sub.add_parser("train", help="train one model from a task manifest")
    tr.add_argument("--manifest", required=True)
    tr.add_argument("--out", required=True)
    tr.add_argument("--method", choices=TRAIN_METHODS, default="mfsan")
    tr.add_argument("--iterations", type=int, default=None)
    tr.add_argument("--seed", type=int, default=None)
    tr.add_argument("--set", action="extend", nargs="+", metavar="KEY=VALUE",
                    help="override a train-config or model field")
    tr.add_argument("--force", action="store_true")
    tr.set_defaults(func=cmd_train)

    ex = sub.add_parser("experiment", help="run a method/table4/convergence experiment spec")
    ex.add_argument("--spec", required=True, help="experiment spec JSON file")
    ex.add_argument("--out", default=None, help="output directory (overrides the spec)")
    ex.add_argument("--force", action="store_true")
    ex.set_defaults(func=cmd_experiment)

    sw = sub.add_parser("sweep", help="accuracy versus the alignment coefficient")
    sw.add_argument("--spec", required=True)
    sw.add_argument("--values", default=None, help="comma list; default "
                    + ",".join(str(v) for v in LAMBDA_GRID))
    sw.add_argument("--out", default=None)
    sw.add_argument("--force", action="store_true")
    sw.set_defaults(func=cmd_sweep)

    exp = sub.add_parser("export-embeddings", help="dump per-branch latent features to CSV")
    exp.add_argument("--model", required=True, help="model checkpoint file")
    exp.add_argument("--manifest", required=True)
    exp.add_argument("--out", required=True)
    exp.add_argument("--force", action="store_true")
    exp.set_defaults(func=cmd_export_embeddings)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except OutputConflictError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except DivergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 4
    except MfsanError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
