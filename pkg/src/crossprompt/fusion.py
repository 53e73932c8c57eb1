"""Coordinator-weighted fusion of modality features and the task losses."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import torch
import torch.nn as nn

from .validation import ValidationError

LOG_EPS = 1e-12


@dataclass
class FusionState:
    """Coordinator outputs and the fused representation for one batch."""

    omega: torch.Tensor  # [n, m] raw coordinator scores
    omega_bar: torch.Tensor  # [n, m] softmaxed weights
    fused: torch.Tensor  # [n, m*d] weighted concatenation
    y_prime: torch.Tensor  # [n, num_classes] probabilities or [n] scalars


class Coordinator(nn.Module):
    """Small network scoring how much each modality should contribute per sample."""

    def __init__(self, latent_dim: int, num_modalities: int = 3):
        super().__init__()
        from .encoders import Mlp

        self.net = Mlp(num_modalities * latent_dim, latent_dim, num_modalities)

    def forward(self, features: Sequence[torch.Tensor]):
        omega = self.net(torch.cat(list(features), dim=1))
        return omega, normalize_weights(omega)


def normalize_weights(omega: torch.Tensor) -> torch.Tensor:
    """Row-softmax of the raw coordinator scores."""
    return torch.softmax(omega, dim=1)


def coordinator_weights(features: Sequence[torch.Tensor], coordinator: Coordinator):
    ns = {f.shape[0] for f in features}
    ds = {f.shape[1] for f in features}
    if len(ns) != 1 or len(ds) != 1:
        raise ValidationError("coordinator expects features with one shared [n, d] shape")
    return coordinator(features)


def fuse(features: Sequence[torch.Tensor], omega_bar: torch.Tensor | None) -> torch.Tensor:
    """Concatenate per-modality features, scaled per sample by the coordinator weights.

    ``omega_bar=None`` is the coordinator-ablated path: plain concatenation
    with implicit unit weights.
    """
    if omega_bar is None:
        return torch.cat(list(features), dim=1)
    if omega_bar.shape[1] != len(features):
        raise ValidationError(
            f"got weights for {omega_bar.shape[1]} modalities but {len(features)} features"
        )
    parts = [omega_bar[:, j : j + 1] * f for j, f in enumerate(features)]
    return torch.cat(parts, dim=1)


def fuse_and_classify(
    features: Sequence[torch.Tensor],
    omega_bar: torch.Tensor | None,
    classifier: nn.Module,
    task: str = "classification",
) -> tuple[torch.Tensor, torch.Tensor]:
    """Weighted concatenation followed by the shared classifier.

    Returns ``(y_prime, fused)`` where y_prime holds class probabilities for
    classification and raw scalars for regression.
    """
    fused = fuse(features, omega_bar)
    scores = classifier(fused)
    if task == "classification":
        return torch.softmax(scores, dim=1), fused
    return scores.squeeze(-1), fused


def task_loss(
    y: torch.Tensor,
    y_prime: torch.Tensor,
    task: str,
    reduction: str = "mean",
    eps: float = LOG_EPS,
) -> torch.Tensor:
    """Cross-entropy on probabilities (classification) or squared error (regression).

    Probabilities are clamped at ``eps`` inside the log so an exactly-zero
    probability at the true class yields a large finite loss.
    """
    if reduction not in ("mean", "sum"):
        raise ValidationError(f"unknown reduction {reduction!r}")
    if task == "classification":
        if y_prime.dim() != 2:
            raise ValidationError("classification predictions must be [n, num_classes]")
        at_truth = y_prime.gather(1, y.long().view(-1, 1)).squeeze(1)
        losses = -at_truth.clamp_min(eps).log()
    elif task == "regression":
        diff = y - y_prime
        losses = diff * diff
    else:
        raise ValidationError(f"unknown task {task!r}")
    return losses.sum() if reduction == "sum" else losses.mean()
