"""The adaptation network and its losses.

One shared extractor maps inputs to a common representation; per source
there is an unshared extractor (all branches use identical layer widths but
independent parameters) and a linear softmax classifier operating in that
branch's own feature space.  The training objective combines

* a classification term: summed per-source mean cross entropy,
* an alignment term: per-branch two-sample MMD between that branch's
  features of its own source batch and of the target batch, averaged over
  branches,
* a consistency term: mean absolute difference between the probability
  outputs of every classifier pair on target samples, averaged over pairs
  with coefficient 2/(N(N-1)).

Target predictions average all classifier outputs and take the arg max,
ties resolved toward the lowest class index.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, softmax
from .errors import LabelError, ShapeError, ValidationError
from .kernels import KernelSpec, mmd_biased, mmd_unbiased


def _xavier_uniform(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


class MlpBlock:
    """Fully connected stack with relu between layers, none after the last."""

    def __init__(self, layer_dims, rng: np.random.Generator):
        dims = [int(d) for d in layer_dims]
        if len(dims) < 2 or any(d < 1 for d in dims):
            raise ValidationError(f"layer_dims needs >= 2 positive entries, got {dims}")
        self.layer_dims = dims
        self.weights = [Tensor(_xavier_uniform(rng, a, b), requires_grad=True)
                        for a, b in zip(dims, dims[1:])]
        self.biases = [Tensor(np.zeros(b), requires_grad=True) for b in dims[1:]]

    @property
    def input_dim(self) -> int:
        return self.layer_dims[0]

    @property
    def output_dim(self) -> int:
        return self.layer_dims[-1]

    def forward(self, x: Tensor) -> Tensor:
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            x = x @ w + b
            if i < last:
                x = x.relu()
        return x

    def named_parameters(self, prefix: str = ""):
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            yield f"{prefix}layer{i}.weight", w
            yield f"{prefix}layer{i}.bias", b


@dataclass
class Branch:
    """One source's unshared extractor plus its softmax classifier."""

    extractor: MlpBlock
    classifier: MlpBlock


class MfsanModel:
    """Shared extractor, N branch extractors, N classifiers."""

    def __init__(self, input_dim: int, num_classes: int, num_sources: int,
                 common_dims=(32, 32), branch_dims=(32, 16), seed: int = 0):
        if num_sources < 1:
            raise ValidationError("num_sources must be >= 1")
        if num_classes < 2:
            raise ValidationError("num_classes must be >= 2")
        rng = np.random.default_rng(seed)
        self.input_dim = int(input_dim)
        self.num_classes = int(num_classes)
        self.num_sources = int(num_sources)
        self.common_dims = tuple(int(d) for d in common_dims)
        self.branch_dims = tuple(int(d) for d in branch_dims)
        self.common = MlpBlock([input_dim, *self.common_dims], rng)
        width = self.common.output_dim
        self.branches = [
            Branch(extractor=MlpBlock([width, *self.branch_dims], rng),
                   classifier=MlpBlock([self.branch_dims[-1], num_classes], rng))
            for _ in range(num_sources)
        ]

    # -- forwards ---------------------------------------------------------

    def _check_input(self, x: Tensor) -> Tensor:
        x = x if isinstance(x, Tensor) else Tensor(x)
        if x.ndim != 2 or x.shape[1] != self.input_dim:
            raise ShapeError(f"expected input of shape (m, {self.input_dim}), got {x.shape}")
        return x

    def forward_common(self, x) -> Tensor:
        return self.common.forward(self._check_input(x))

    def forward_branch(self, j: int, common: Tensor) -> tuple[Tensor, Tensor]:
        branch = self.branches[j]
        features = branch.extractor.forward(common)
        probs = softmax(branch.classifier.forward(features))
        return features, probs

    def forward_source(self, j: int, x) -> tuple[Tensor, Tensor]:
        """Features and class probabilities of branch ``j`` for inputs ``x``."""
        if not 0 <= j < self.num_sources:
            raise IndexError(f"source index {j} out of range [0, {self.num_sources})")
        return self.forward_branch(j, self.forward_common(x))

    def forward_target(self, x) -> list[tuple[Tensor, Tensor]]:
        """Every branch's (features, probabilities), sharing one common pass."""
        common = self.forward_common(x)
        return [self.forward_branch(j, common) for j in range(self.num_sources)]

    # -- parameters --------------------------------------------------------

    def named_parameters(self):
        params = list(self.common.named_parameters("common."))
        for j, branch in enumerate(self.branches):
            params.extend(branch.extractor.named_parameters(f"branch{j}.extractor."))
            params.extend(branch.classifier.named_parameters(f"branch{j}.classifier."))
        return params

    def named_parameters_values(self):
        return [(name, p.values) for name, p in self.named_parameters()]

    def parameter_groups(self):
        """(name, params) pairs for the shared trunk vs the unshared parts.

        The unshared parts are the ones trained from scratch in the original
        setting and get the boosted learning rate.
        """
        common = list(self.common.named_parameters("common."))
        scratch = []
        for j, branch in enumerate(self.branches):
            scratch.extend(branch.extractor.named_parameters(f"branch{j}.extractor."))
            scratch.extend(branch.classifier.named_parameters(f"branch{j}.classifier."))
        return [("common", common), ("scratch", scratch)]

    def zero_grad(self) -> None:
        for _, p in self.named_parameters():
            p.zero_grad()


@dataclass
class LossBreakdown:
    """All loss components of one objective evaluation, kept differentiable."""

    cls: Tensor
    mmd: Tensor
    disc: Tensor
    total: Tensor
    effective_lambda: float
    effective_gamma: float

    def component_values(self) -> dict:
        return {"cls": self.cls.item(), "mmd": self.mmd.item(),
                "disc": self.disc.item(), "total": self.total.item()}


def _check_labels(y: np.ndarray, num_classes: int) -> np.ndarray:
    y = np.asarray(y)
    if y.size and (y.min() < 0 or y.max() >= num_classes):
        raise LabelError(f"labels must lie in [0, {num_classes}), got range "
                         f"[{y.min()}, {y.max()}]")
    return y.astype(np.int64)

def _one_hot(y: np.ndarray, num_classes: int) -> np.ndarray:
    out = np.zeros((len(y), num_classes))
    out[np.arange(len(y)), y] = 1.0
    return out


def cls_loss(model: MfsanModel, batches, sources=None) -> Tensor:
    """Summed per-source mean cross entropy.

    ``batches`` holds one (x, y) pair per entry of ``sources`` (defaults to
    all branches in order).  A subset computes the partial sum for exactly
    those branches, which is what round-robin training steps use.
    """
    if sources is None:
        sources = range(model.num_sources)
    sources = list(sources)
    if len(batches) != len(sources):
        raise ValidationError(f"got {len(batches)} batches for {len(sources)} sources")
    total = None
    for j, (x, y) in zip(sources, batches):
        y = _check_labels(y, model.num_classes)
        _, probs = model.forward_source(j, x)
        picked = (probs * Tensor(_one_hot(y, model.num_classes))).sum(axis=1)
        term = picked.log().mean().mul_scalar(-1.0)
        total = term if total is None else total + term
    return total


def mmd_loss(model: MfsanModel, source_batches, target_batch, spec: KernelSpec,
             estimator_kind: str = "biased_v", sources=None) -> Tensor:
    """Mean over branches of the feature-space MMD to the target batch.

    Each pair is estimated on branch-j features of the j-th source batch and
    of the target batch.  With a median-mode spec the bandwidth ladder is
    re-derived per pair from the pooled feature values and carries no
    gradient.
    """
    if sources is None:
        sources = range(model.num_sources)
    sources = list(sources)
    if len(source_batches) != len(sources):
        raise ValidationError(f"got {len(source_batches)} batches for {len(sources)} sources")
    estimator = {"biased_v": mmd_biased, "unbiased_u": mmd_unbiased}.get(estimator_kind)
    if estimator is None:
        raise ValidationError(f"unknown estimator_kind {estimator_kind!r}")
    target_all = model.forward_target(target_batch)
    total = None
    for j, x in zip(sources, source_batches):
        fs, _ = model.forward_source(j, x)
        ft, _ = target_all[j]
        term = estimator(fs, ft, spec).value
        total = term if total is None else total + term
    return total.mul_scalar(1.0 / len(sources))


def disc_loss(model: MfsanModel, target_batch, class_reduction: str = "mean") -> Tensor:
    """Pairwise mean absolute difference of classifier outputs on the target.

    Reduction over the class axis is the mean by default (comparable across
    class counts) or the sum.  Exactly zero by definition when N = 1.
    """
    if class_reduction not in ("mean", "sum"):
        raise ValidationError(f"unknown class_reduction {class_reduction!r}")
    n = model.num_sources
    if n == 1:
        return Tensor(0.0)
    outputs = [probs for _, probs in model.forward_target(target_batch)]
    total = None
    for j in range(n - 1):
        for i in range(j + 1, n):
            diff = (outputs[i] - outputs[j]).abs()
            term = diff.mean() if class_reduction == "mean" else diff.sum(axis=1).mean()
            total = term if total is None else total + term
    return total.mul_scalar(2.0 / (n * (n - 1)))


def total_loss(model: MfsanModel, source_batches, target_batch, spec: KernelSpec,
               effective_lambda: float, effective_gamma: float,
               estimator_kind: str = "biased_v", class_reduction: str = "mean",
               sources=None) -> LossBreakdown:
    """Classification + lambda * alignment + gamma * consistency."""
    if effective_lambda < 0 or effective_gamma < 0:
        raise ValidationError("loss coefficients must be >= 0")
    cls = cls_loss(model, source_batches, sources=sources)
    xs = [x for x, _ in source_batches]
    mmd = mmd_loss(model, xs, target_batch, spec, estimator_kind, sources=sources)
    disc = disc_loss(model, target_batch, class_reduction)
    total = cls + mmd.mul_scalar(effective_lambda) + disc.mul_scalar(effective_gamma)
    return LossBreakdown(cls=cls, mmd=mmd, disc=disc, total=total,
                         effective_lambda=float(effective_lambda),
                         effective_gamma=float(effective_gamma))


@dataclass
class Prediction:
    """Average-vote labels plus per-branch detail."""

    labels: np.ndarray
    avg_probs: Tensor
    per_branch_labels: np.ndarray  # shape (num_sources, n)


def predict(model: MfsanModel, x) -> Prediction:
    """Average all classifiers' probabilities, arg max each row.

    Ties go to the lowest class index.  Per-branch arg max labels are
    returned alongside for per-classifier accuracy reports.
    """
    outputs = model.forward_target(x)
    probs = [p for _, p in outputs]
    avg = probs[0]
    for p in probs[1:]:
        avg = avg + p
    avg = avg.mul_scalar(1.0 / model.num_sources)
    labels = np.argmax(avg.values, axis=1)
    per_branch = np.stack([np.argmax(p.values, axis=1) for p in probs])
    return Prediction(labels=labels, avg_probs=avg, per_branch_labels=per_branch)


def save_model(model: MfsanModel, path) -> None:
    """Persist architecture and every parameter buffer to one container file."""
    from .checkpoint import write_container

    meta = {
        "kind": "model",
        "input_dim": model.input_dim,
        "num_classes": model.num_classes,
        "num_sources": model.num_sources,
        "common_dims": list(model.common_dims),
        "branch_dims": list(model.branch_dims),
    }
    write_container(path, meta, dict(model.named_parameters_values()))


def load_model(path) -> MfsanModel:
    """Rebuild a model from a container written by ``save_model``."""
    from .checkpoint import read_container
    from .errors import CheckpointError

    meta, arrays = read_container(path)
    if meta.get("kind") != "model":
        raise CheckpointError(f"{path}: not a model checkpoint (kind={meta.get('kind')!r})")
    model = MfsanModel(input_dim=meta["input_dim"], num_classes=meta["num_classes"],
                       num_sources=meta["num_sources"], common_dims=meta["common_dims"],
                       branch_dims=meta["branch_dims"])
    for name, p in model.named_parameters():
        if name not in arrays:
            raise CheckpointError(f"{path}: missing parameter {name!r}")
        if arrays[name].shape != p.values.shape:
            raise CheckpointError(f"{path}: shape mismatch for {name!r}: "
                                  f"{arrays[name].shape} vs {p.values.shape}")
        p.values[...] = arrays[name]
    return model
