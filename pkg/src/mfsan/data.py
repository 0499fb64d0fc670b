"""Synthetic multi-domain task generation, CSV ingestion, batch sampling.

A task holds N labeled source domains and one unlabeled target domain.  When
target labels are known (synthetic data, benchmark files) they are stored in
a field reserved for evaluation; training code never names it, which a test
asserts by scanning the training modules' source.

The synthetic family draws class-balanced Gaussian samples around shared
class means and pushes each domain through its own affine map (block-planar
rotation, scale, translation), then adds isotropic noise.  Labels are
untouched by the map, so domains share p(y) and class-conditional structure
while their feature marginals drift apart.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import ParseError, ValidationError

LABEL_COLUMN = "label"


@dataclass(frozen=True)
class AffineMap:
    """Rotation (degrees, per coordinate plane), uniform scale, translation.

    A scalar rotation applies the same angle in every plane (0,1), (2,3), ...
    A tuple gives per-plane angles; missing planes stay fixed.  The map is
    invertible whenever scale is nonzero.
    """

    rotation_deg: float | tuple = 0.0
    scale: float = 1.0
    translation: float | tuple = 0.0

    def matrix(self, dim: int) -> np.ndarray:
        angles = self.rotation_deg
        if np.isscalar(angles):
            angles = (float(angles),) * (dim // 2)
        if len(angles) > dim // 2:
            raise ValidationError(f"{len(angles)} rotation angles for {dim // 2} planes")
        rot = np.eye(dim)
        for plane, deg in enumerate(angles):
            i, j = 2 * plane, 2 * plane + 1
            c, s = math.cos(math.radians(deg)), math.sin(math.radians(deg))
            rot[i, i], rot[i, j] = c, -s
            rot[j, i], rot[j, j] = s, c
        return self.scale * rot

    def offset(self, dim: int) -> np.ndarray:
        t = self.translation
        return np.full(dim, float(t)) if np.isscalar(t) else np.asarray(t, dtype=np.float64)

    def apply(self, x: np.ndarray) -> np.ndarray:
        return x @ self.matrix(x.shape[1]).T + self.offset(x.shape[1])


@dataclass
class Domain:
    """Feature matrix plus labels when the domain is labeled."""

    features: np.ndarray
    labels: np.ndarray | None = None

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)

    def __len__(self) -> int:
        return self.features.shape[0]


@dataclass
class MultiSourceTask:
    """N labeled sources and one unlabeled target.

    ``target_labels_eval`` exists solely for evaluation; it is set when the
    generating process or file happens to know the target labels.
    """

    sources: list
    target_features: np.ndarray
    num_classes: int
    feature_dim: int
    target_labels_eval: np.ndarray | None = None

    @property
    def num_sources(self) -> int:
        return len(self.sources)


@dataclass
class SyntheticSpec:
    """Recipe for one synthetic multi-source task.

    ``domain_transforms`` lists N+1 affine maps; the last one produces the
    target domain.  ``class_means`` may be None, in which case means are
    drawn once from the seeded generator with per-coordinate scale
    ``class_mean_scale``.
    """

    num_classes: int = 4
    feature_dim: int = 8
    class_means: np.ndarray | None = None
    class_cov_scale: float = 1.0
    domain_transforms: list = field(default_factory=lambda: [
        AffineMap(rotation_deg=0.0),
        AffineMap(rotation_deg=25.0),
        AffineMap(rotation_deg=50.0),
    ])
    samples_per_domain: int = 400
    noise_std: float = 0.1
    seed: int = 0
    class_mean_scale: float = 2.0

    def violations(self) -> list:
        problems = []
        if self.num_classes < 2:
            problems.append("num_classes must be >= 2")
        if self.feature_dim < 1:
            problems.append("feature_dim must be >= 1")
        if self.class_cov_scale <= 0:
            problems.append("class_cov_scale must be positive")
        if self.noise_std < 0:
            problems.append("noise_std must be >= 0")
        if len(self.domain_transforms) < 2:
            problems.append("need at least one source transform plus the target transform")
        if any(t.scale == 0 for t in self.domain_transforms):
            problems.append("domain transforms must be invertible (nonzero scale)")
        if self.samples_per_domain < self.num_classes:
            problems.append("samples_per_domain must be >= num_classes")
        elif self.num_classes >= 2 and self.samples_per_domain % self.num_classes != 0:
            problems.append("samples_per_domain must be divisible by num_classes "
                            "(domains are exactly class-balanced)")
        if self.class_means is not None:
            means = np.asarray(self.class_means)
            if means.shape != (self.num_classes, self.feature_dim):
                problems.append(f"class_means must have shape "
                                f"({self.num_classes}, {self.feature_dim}), got {means.shape}")
        return problems

    def validate(self) -> "SyntheticSpec":
        problems = self.violations()
        if problems:
            raise ValidationError(problems)
        return self


def default_task_spec(seed: int = 0, **overrides) -> SyntheticSpec:
    """The stock two-source task: K=4, d=8, rotations 0/25/50 degrees."""
    return replace(SyntheticSpec(seed=seed), **overrides)


def generate_synthetic(spec: SyntheticSpec) -> MultiSourceTask:
    """Draw every domain of a task from the spec, deterministically in seed."""
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    k, d = spec.num_classes, spec.feature_dim
    if spec.class_means is None:
        means = rng.normal(scale=spec.class_mean_scale, size=(k, d))
    else:
        means = np.asarray(spec.class_means, dtype=np.float64)

    per_class = spec.samples_per_domain // k
    labels = np.repeat(np.arange(k), per_class)
    domains = []
    for transform in spec.domain_transforms:
        base = means[labels] + rng.normal(size=(len(labels), d)) * math.sqrt(spec.class_cov_scale)
        x = transform.apply(base)
        if spec.noise_std > 0:
            x = x + rng.normal(size=x.shape) * spec.noise_std
        domains.append(Domain(features=x, labels=labels.copy()))

    target = domains[-1]
    return MultiSourceTask(sources=domains[:-1],
                           target_features=target.features,
                           target_labels_eval=target.labels,
                           num_classes=k, feature_dim=d)


# -- CSV and manifest ------------------------------------------------------


def write_csv(path, features: np.ndarray, labels=None) -> None:
    """Write a domain as feature_0..feature_{d-1}[,label] with full precision."""
    features = np.asarray(features, dtype=np.float64)
    d = features.shape[1]
    header = [f"feature_{i}" for i in range(d)] + ([LABEL_COLUMN] if labels is not None else [])
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for i, row in enumerate(features):
            out = [repr(float(v)) for v in row]
            if labels is not None:
                out.append(str(int(labels[i])))
            writer.writerow(out)


def load_csv(path, expect_features: int | None = None) -> Domain:
    """Parse a domain file; labeled iff a label column is present.

    Non-numeric or non-finite cells, missing columns, and ragged rows raise
    ParseError naming the file and 1-based line.
    """
    path = Path(path)
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError(f"{path}: empty file, header row required") from None
        expected = [f"feature_{i}" for i in range(len(header))]
        has_label = header and header[-1] == LABEL_COLUMN
        feature_names = header[:-1] if has_label else header
        if feature_names != expected[:len(feature_names)] or not feature_names:
            raise ParseError(f"{path}: line 1: header must be feature_0..feature_{{d-1}}"
                             f"[,{LABEL_COLUMN}], got {header}")
        d = len(feature_names)
        if expect_features is not None and d != expect_features:
            raise ParseError(f"{path}: expected {expect_features} feature columns, found {d}")
        rows, labels = [], []
        for line_no, row in enumerate(reader, start=2):
            if len(row) != len(header):
                raise ParseError(f"{path}: line {line_no}: expected {len(header)} cells, got {len(row)}")
            try:
                values = [float(cell) for cell in row[:d]]
            except ValueError as exc:
                raise ParseError(f"{path}: line {line_no}: non-numeric cell ({exc})") from None
            if not all(math.isfinite(v) for v in values):
                raise ParseError(f"{path}: line {line_no}: non-finite value rejected")
            rows.append(values)
            if has_label:
                cell = row[d]
                if not cell.isdigit():
                    raise ParseError(f"{path}: line {line_no}: label must be a nonnegative "
                                     f"integer, got {cell!r}")
                labels.append(int(cell))
    features = np.array(rows, dtype=np.float64).reshape(len(rows), d)
    return Domain(features=features, labels=np.array(labels, dtype=np.int64) if has_label else None)


def write_task(task: MultiSourceTask, outdir) -> Path:
    """Write per-domain CSVs plus a manifest; returns the manifest path."""
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    source_files = []
    for j, domain in enumerate(task.sources):
        name = f"source_{j}.csv"
        write_csv(outdir / name, domain.features, domain.labels)
        source_files.append(name)
    write_csv(outdir / "target.csv", task.target_features, task.target_labels_eval)
    manifest = {
        "num_classes": task.num_classes,
        "feature_dim": task.feature_dim,
        "sources": source_files,
        "target": "target.csv",
    }
    manifest_path = outdir / "manifest.json"
    manifest_path.write_text(json.dumps(manifest, indent=2) + "\n", encoding="utf-8")
    return manifest_path


def load_task(manifest_path) -> MultiSourceTask:
    """Load a task from a manifest; target labels, if present, go to eval."""
    manifest_path = Path(manifest_path)
    try:
        manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ParseError(f"{manifest_path}: no such manifest") from None
    except json.JSONDecodeError as exc:
        raise ParseError(f"{manifest_path}: invalid JSON ({exc})") from None
    for key in ("num_classes", "sources", "target"):
        if key not in manifest:
            raise ParseError(f"{manifest_path}: missing required key {key!r}")
    base = manifest_path.parent
    expect = manifest.get("feature_dim")
    sources = []
    for name in manifest["sources"]:
        domain = load_csv(base / name, expect_features=expect)
        if domain.labels is None:
            raise ParseError(f"{base / name}: source domains need a label column")
        sources.append(domain)
    target = load_csv(base / manifest["target"], expect_features=expect)
    k = int(manifest["num_classes"])
    for domain in sources + ([target] if target.labels is not None else []):
        if domain.labels is not None and domain.labels.size and domain.labels.max() >= k:
            raise ParseError(f"{manifest_path}: label {domain.labels.max()} outside "
                             f"[0, {k})")
    dim = sources[0].features.shape[1] if sources else target.features.shape[1]
    return MultiSourceTask(sources=sources,
                           target_features=target.features,
                           target_labels_eval=target.labels,
                           num_classes=k, feature_dim=dim)


# -- batch sampling ---------------------------------------------------------

SHUFFLE_EPOCH = "shuffle_epoch"
WITH_REPLACEMENT = "with_replacement"


class BatchSampler:
    """Seeded minibatch stream over one domain.

    ``shuffle_epoch`` visits every sample exactly once per epoch (the final
    batch of an epoch may be short when the batch size does not divide the
    domain).  ``with_replacement`` draws i.i.d. uniform indices.  The full
    sampler state round-trips through ``state_dict``.
    """

    def __init__(self, features, labels=None, batch_size: int = 32,
                 mode: str = SHUFFLE_EPOCH, seed=0):
        self.features = np.asarray(features, dtype=np.float64)
        self.labels = None if labels is None else np.asarray(labels, dtype=np.int64)
        self.batch_size = int(batch_size)
        self.mode = mode
        n = self.features.shape[0]
        if n == 0:
            raise ValidationError("cannot sample from an empty domain")
        if self.batch_size < 1:
            raise ValidationError("batch_size must be >= 1")
        if mode == SHUFFLE_EPOCH and self.batch_size > n:
            raise ValidationError(f"batch_size {self.batch_size} exceeds domain size {n} "
                                  f"in {SHUFFLE_EPOCH} mode")
        if mode not in (SHUFFLE_EPOCH, WITH_REPLACEMENT):
            raise ValidationError(f"unknown sampler mode {mode!r}")
        self._rng = np.random.default_rng(seed)
        self._order = None
        self._pos = 0

    def __len__(self) -> int:
        return self.features.shape[0]

    def next_batch(self):
        """The next (features, labels) pair, or features alone if unlabeled."""
        n = len(self)
        if self.mode == WITH_REPLACEMENT:
            idx = self._rng.integers(0, n, size=self.batch_size)
        else:
            if self._order is None or self._pos >= n:
                self._order = self._rng.permutation(n)
                self._pos = 0
            take = min(self.batch_size, n - self._pos)
            idx = self._order[self._pos:self._pos + take]
            self._pos += take
        x = self.features[idx]
        if self.labels is None:
            return x
        return x, self.labels[idx]

    def state_dict(self) -> dict:
        return {
            "mode": self.mode,
            "pos": self._pos,
            "order": None if self._order is None else self._order.tolist(),
            "rng_state": self._rng.bit_generator.state,
        }

    def load_state_dict(self, state: dict) -> None:
        self.mode = state["mode"]
        self._pos = state["pos"]
        self._order = None if state["order"] is None else np.asarray(state["order"])
        self._rng.bit_generator.state = state["rng_state"]
