"""Evaluation records and the one sanctioned path to target labels."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .model import MfsanModel, predict


@dataclass
class MetricsRecord:
    """One evaluation snapshot taken during or after training."""

    iteration: int
    progress: float
    lr: float
    lambda_eff: float
    gamma_eff: float
    cls_loss: float
    mmd_loss: float
    disc_loss: float
    total_loss: float
    per_classifier_accuracy: list = field(default_factory=list)
    average_vote_accuracy: float | None = None
    max_pairwise_disagreement_rate: float | None = None

    def __post_init__(self):
        for acc in self.per_classifier_accuracy:
            if acc is not None and not 0.0 <= acc <= 1.0:
                raise ValueError(f"accuracy out of [0, 1]: {acc}")
        d = self.max_pairwise_disagreement_rate
        if d is not None and not 0.0 <= d <= 1.0:
            raise ValueError(f"disagreement rate out of [0, 1]: {d}")

    def to_json_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json_dict(cls, data: dict) -> "MetricsRecord":
        return cls(**data)


def accuracy(predicted: np.ndarray, truth: np.ndarray) -> float:
    return float(np.mean(predicted == truth))


def evaluate_on_target(model: MfsanModel, task) -> dict:
    """Per-classifier and average-vote target accuracy plus disagreement.

    This is the evaluation interface: the only place target labels are read.
    With no labels on the target, accuracies come back None but the
    disagreement rate (label-free) is still computed.
    """
    result = predict(model, task.target_features)
    n = result.per_branch_labels.shape[1]
    if model.num_sources > 1:
        conflict = np.any(result.per_branch_labels != result.per_branch_labels[0], axis=0)
        disagreement = float(np.mean(conflict))
    else:
        disagreement = 0.0
    labels = task.target_labels_eval
    if labels is None:
        return {"per_classifier_accuracy": [None] * model.num_sources,
                "average_vote_accuracy": None,
                "max_pairwise_disagreement_rate": disagreement}
    labels = np.asarray(labels)
    assert labels.shape[0] == n
    return {
        "per_classifier_accuracy": [accuracy(row, labels) for row in result.per_branch_labels],
        "average_vote_accuracy": accuracy(result.labels, labels),
        "max_pairwise_disagreement_rate": disagreement,
    }


def evaluate_on_sources(model: MfsanModel, task) -> float:
    """Average-vote accuracy over the pooled labeled source data."""
    pooled_x = np.concatenate([d.features for d in task.sources])
    pooled_y = np.concatenate([d.labels for d in task.sources])
    result = predict(model, pooled_x)
    return accuracy(result.labels, pooled_y)
