"""Minibatch SGD training loop with annealed learning rate and ramped coefficients.

Per step: sample one target minibatch and either one source minibatch
(``round_robin``, source j = iteration mod N, the per-iteration reading of
the training procedure) or one per source (``all_sources``, the full sums).
The objective's alignment and consistency coefficients are the configured
base values scaled by a ramp rising from 0 toward 1 over training progress
p = iteration / T:

    lr(p)   = eta0 / (1 + alpha * p) ** beta
    ramp(p) = 2 / (1 + exp(-theta * p)) - 1

The published form of the ramp (2 / exp(-theta p) - 1) starts at 1 and
diverges, contradicting its stated 0-to-1 behavior, so the sigmoid form
above is used; the resolved config echoes the formula in force.  Updates
are velocity = momentum * velocity - lr * grad; param += velocity, with a
separate learning-rate multiplier for the unshared (from scratch) layers.

Training is bit-deterministic in (seed, config, task), and a checkpoint
carries parameters, velocities, sampler states and the log, so a resumed
run reproduces the uninterrupted trajectory exactly.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .checkpoint import read_container, write_container
from .data import SHUFFLE_EPOCH, WITH_REPLACEMENT, BatchSampler, MultiSourceTask
from .errors import CheckpointError, DivergenceError, ValidationError
from .kernels import KernelSpec
from .metrics import MetricsRecord, evaluate_on_target
from .model import LossBreakdown, MfsanModel, total_loss

ROUND_ROBIN = "round_robin"
ALL_SOURCES = "all_sources"

LR_FORMULA = "eta0 / (1 + alpha*p)**beta"
RAMP_FORMULA = "2 / (1 + exp(-theta*p)) - 1"


def lr_at(p: float, eta0: float = 0.01, alpha: float = 10.0, beta: float = 0.75) -> float:
    """Annealed learning rate at progress p in [0, 1]."""
    return eta0 / (1.0 + alpha * p) ** beta


def ramp_at(p: float, theta: float = 10.0) -> float:
    """Coefficient multiplier at progress p: 0 at p=0, rising toward 1."""
    return 2.0 / (1.0 + math.exp(-theta * p)) - 1.0


@dataclass
class TrainConfig:
    """Everything the optimizer, schedules, and loss weighting need."""

    iterations: int = 3000
    batch_size: int = 32
    eta0: float = 0.01
    alpha: float = 10.0
    beta: float = 0.75
    momentum: float = 0.9
    theta: float = 10.0
    lambda_base: float = 0.5
    gamma_base: float = 0.5
    lr_multiplier_scratch: float = 10.0
    source_mode: str = ROUND_ROBIN
    estimator_kind: str = "biased_v"
    sampler_mode: str = SHUFFLE_EPOCH
    kernel: KernelSpec = field(default_factory=KernelSpec.median)
    disc_reduction: str = "mean"
    eval_every: int = 100
    seed: int = 0

    def violations(self) -> list:
        problems = []
        if self.iterations < 0:
            problems.append("iterations must be >= 0")
        if self.batch_size < 2:
            problems.append("batch_size must be >= 2")
        for name in ("eta0", "alpha", "beta", "theta", "lr_multiplier_scratch"):
            if getattr(self, name) <= 0:
                problems.append(f"{name} must be positive")
        if not 0.0 <= self.momentum < 1.0:
            problems.append("momentum must lie in [0, 1)")
        if self.lambda_base < 0 or self.gamma_base < 0:
            problems.append("lambda_base and gamma_base must be >= 0")
        if self.source_mode not in (ROUND_ROBIN, ALL_SOURCES):
            problems.append(f"unknown source_mode {self.source_mode!r}")
        if self.estimator_kind not in ("biased_v", "unbiased_u"):
            problems.append(f"unknown estimator_kind {self.estimator_kind!r}")
        if self.sampler_mode not in (SHUFFLE_EPOCH, WITH_REPLACEMENT):
            problems.append(f"unknown sampler_mode {self.sampler_mode!r}")
        if self.disc_reduction not in ("mean", "sum"):
            problems.append(f"unknown disc_reduction {self.disc_reduction!r}")
        if self.eval_every < 1:
            problems.append("eval_every must be >= 1")
        return problems

    def validate(self) -> "TrainConfig":
        problems = self.violations()
        if problems:
            raise ValidationError(problems)
        return self

    def resolved(self) -> dict:
        """Every effective value, including the schedule formulas in force."""
        out = asdict(self)
        out["lr_formula"] = LR_FORMULA
        out["ramp_formula"] = RAMP_FORMULA
        return out


def config_to_dict(config: TrainConfig) -> dict:
    return asdict(config)


def config_from_dict(data: dict) -> TrainConfig:
    data = dict(data)
    data.pop("lr_formula", None)
    data.pop("ramp_formula", None)
    kernel = data.pop("kernel", None)
    known = set(TrainConfig.__dataclass_fields__)
    unknown = set(data) - known
    if unknown:
        raise ValidationError(f"unknown config keys {sorted(unknown)}; "
                              f"valid keys: {sorted(known)}")
    config = TrainConfig(**data)
    if kernel is not None:
        if isinstance(kernel, dict):
            kernel = KernelSpec(bandwidth_mode=kernel["bandwidth_mode"],
                                bandwidths=tuple(kernel.get("bandwidths", ())),
                                weights=tuple(kernel.get("weights", ())),
                                ladder_size=int(kernel.get("ladder_size", 5)),
                                step_multiplier=float(kernel.get("step_multiplier", 2.0)))
        config = replace(config, kernel=kernel)
    return config.validate()


class SgdMomentum:
    """Velocity-based SGD over named parameter groups with lr multipliers."""

    def __init__(self, groups, momentum: float):
        # groups: list of (name, [(param_name, Tensor), ...], lr_multiplier)
        self.groups = groups
        self.momentum = float(momentum)
        self.velocities = {name: np.zeros_like(p.values)
                           for _, params, _ in groups for name, p in params}

    def step(self, lr: float) -> None:
        for _, params, multiplier in self.groups:
            eff = lr * multiplier
            for name, p in params:
                grad = p.grad if p.grad is not None else 0.0
                v = self.momentum * self.velocities[name] - eff * grad
                self.velocities[name] = v
                p.values += v

    def zero_grad(self) -> None:
        for _, params, _ in self.groups:
            for _, p in params:
                p.zero_grad()


class Trainer:
    """Owns one model, one optimizer state, and one set of samplers."""

    def __init__(self, model: MfsanModel, task: MultiSourceTask, config: TrainConfig):
        config.validate()
        if model.num_sources != task.num_sources:
            raise ValidationError(f"model has {model.num_sources} branches but the task "
                                  f"has {task.num_sources} sources")
        if model.input_dim != task.feature_dim:
            raise ValidationError(f"model input width {model.input_dim} does not match "
                                  f"task feature dim {task.feature_dim}")
        if model.num_classes != task.num_classes:
            raise ValidationError(f"model has {model.num_classes} classes but the task "
                                  f"has {task.num_classes}")
        self.model = model
        self.task = task
        self.config = config
        seeds = np.random.SeedSequence(config.seed).spawn(task.num_sources + 1)
        self.source_samplers = [
            BatchSampler(d.features, d.labels, config.batch_size, config.sampler_mode, seeds[j])
            for j, d in enumerate(task.sources)
        ]
        self.target_sampler = BatchSampler(task.target_features, None, config.batch_size,
                                           config.sampler_mode, seeds[-1])
        groups = model.parameter_groups()
        self.optimizer = SgdMomentum(
            [(gname, params, 1.0 if gname == "common" else config.lr_multiplier_scratch)
             for gname, params in groups],
            momentum=config.momentum)
        self.iteration = 0
        self.log: list[MetricsRecord] = []
        self.last_lr = None
        self.last_breakdown: LossBreakdown | None = None

    # -- stepping ---------------------------------------------------------

    def _progress(self) -> float:
        return self.iteration / self.config.iterations if self.config.iterations else 0.0

    def step(self) -> LossBreakdown:
        """One optimization step; returns the step's loss breakdown."""
        cfg = self.config
        p = self._progress()
        lr = lr_at(p, cfg.eta0, cfg.alpha, cfg.beta)
        ramp = ramp_at(p, cfg.theta)
        lam, gam = cfg.lambda_base * ramp, cfg.gamma_base * ramp

        target_batch = self.target_sampler.next_batch()
        if cfg.source_mode == ROUND_ROBIN:
            j = self.iteration % self.task.num_sources
            batches = [self.source_samplers[j].next_batch()]
            sources = [j]
        else:
            batches = [s.next_batch() for s in self.source_samplers]
            sources = None
        breakdown = total_loss(self.model, batches, target_batch, cfg.kernel,
                               lam, gam, cfg.estimator_kind, cfg.disc_reduction,
                               sources=sources)

        for name, tensor in (("cls", breakdown.cls), ("mmd", breakdown.mmd),
                             ("disc", breakdown.disc), ("total", breakdown.total)):
            if not tensor.all_finite():
                raise self._diverged(f"loss component {name!r} is not finite "
                                     f"at iteration {self.iteration}")
        self.optimizer.zero_grad()
        breakdown.total.backward()
        for name, param in self.model.named_parameters():
            if param.grad is not None and not np.isfinite(param.grad).all():
                raise self._diverged(f"gradient of {name!r} is not finite "
                                     f"at iteration {self.iteration}")
        self.optimizer.step(lr)
        self.iteration += 1
        self.last_lr = lr
        self.last_breakdown = breakdown
        return breakdown

    def _diverged(self, message: str) -> DivergenceError:
        error = DivergenceError(message)
        error.log = list(self.log)
        return error

    def _snapshot(self) -> MetricsRecord:
        b = self.last_breakdown
        evaluation = evaluate_on_target(self.model, self.task)
        return MetricsRecord(
            iteration=self.iteration,
            progress=self._progress(),
            lr=self.last_lr,
            lambda_eff=b.effective_lambda,
            gamma_eff=b.effective_gamma,
            cls_loss=b.cls.item(),
            mmd_loss=b.mmd.item(),
            disc_loss=b.disc.item(),
            total_loss=b.total.item(),
            **evaluation,
        )

    def run(self) -> list[MetricsRecord]:
        """Train to the configured iteration count, logging on the way."""
        cfg = self.config
        while self.iteration < cfg.iterations:
            self.step()
            if self.iteration % cfg.eval_every == 0 or self.iteration == cfg.iterations:
                self.log.append(self._snapshot())
        return self.log

    # -- persistence --------------------------------------------------------

    def save_checkpoint(self, path) -> None:
        model = self.model
        arrays = {f"param/{name}": p.values for name, p in model.named_parameters()}
        arrays.update({f"velocity/{name}": v for name, v in self.optimizer.velocities.items()})
        meta = {
            "kind": "trainer-checkpoint",
            "iteration": self.iteration,
            "last_lr": self.last_lr,
            "config": config_to_dict(self.config),
            "model": {
                "input_dim": model.input_dim,
                "num_classes": model.num_classes,
                "num_sources": model.num_sources,
                "common_dims": list(model.common_dims),
                "branch_dims": list(model.branch_dims),
            },
            "samplers": {
                "sources": [s.state_dict() for s in self.source_samplers],
                "target": self.target_sampler.state_dict(),
            },
            "log": [r.to_json_dict() for r in self.log],
        }
        write_container(path, meta, arrays)

    @classmethod
    def load_checkpoint(cls, path, task: MultiSourceTask) -> "Trainer":
        meta, arrays = read_container(path)
        if meta.get("kind") != "trainer-checkpoint":
            raise CheckpointError(f"{path}: not a trainer checkpoint "
                                  f"(kind={meta.get('kind')!r})")
        config = config_from_dict(meta["config"])
        spec = meta["model"]
        model = MfsanModel(input_dim=spec["input_dim"], num_classes=spec["num_classes"],
                           num_sources=spec["num_sources"], common_dims=spec["common_dims"],
                           branch_dims=spec["branch_dims"], seed=config.seed)
        trainer = cls(model, task, config)
        for name, p in model.named_parameters():
            key = f"param/{name}"
            if key not in arrays:
                raise CheckpointError(f"{path}: missing array {key!r}")
            if arrays[key].shape != p.values.shape:
                raise CheckpointError(f"{path}: shape mismatch for {key!r}")
            p.values[...] = arrays[key]
            if name in trainer.optimizer.velocities:
                vkey = f"velocity/{name}"
                if vkey not in arrays:
                    raise CheckpointError(f"{path}: missing array {vkey!r}")
                trainer.optimizer.velocities[name] = arrays[vkey].copy()
        for sampler, state in zip(trainer.source_samplers, meta["samplers"]["sources"]):
            sampler.load_state_dict(state)
        trainer.target_sampler.load_state_dict(meta["samplers"]["target"])
        trainer.iteration = int(meta["iteration"])
        trainer.last_lr = meta.get("last_lr")
        trainer.log = [MetricsRecord.from_json_dict(r) for r in meta["log"]]
        return trainer


def train(model: MfsanModel, task: MultiSourceTask, config: TrainConfig):
    """Convenience wrapper: build a Trainer, run it, return (log, model)."""
    trainer = Trainer(model, task, config)
    log = trainer.run()
    return log, trainer.model
