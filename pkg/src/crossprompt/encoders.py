"""Per-modality encoder/decoder/classifier stacks and the stage-1 objective."""

from __future__ import annotations

import logging

import torch
import torch.nn as nn

from .validation import ValidationError

logger = logging.getLogger(__name__)


class Mlp(nn.Module):
    """Two-layer perceptron with a GeLU in between."""

    def __init__(self, in_dim: int, hidden: int, out_dim: int):
        super().__init__()
        self.net = nn.Sequential(nn.Linear(in_dim, hidden), nn.GELU(), nn.Linear(hidden, out_dim))

    def forward(self, x):
        return self.net(x)


class ModalityEncoderStack(nn.Module):
    """Encoder, reconstruction decoder, feature updater, and classifier head for one modality.

    All modality stacks emit latents of the same width so the downstream fusion
    can concatenate them.
    """

    def __init__(self, in_dim: int, latent_dim: int, out_dim: int):
        super().__init__()
        self.in_dim = in_dim
        self.latent_dim = latent_dim
        self.out_dim = out_dim
        self.encoder = Mlp(in_dim, latent_dim, latent_dim)
        self.decoder = Mlp(latent_dim, latent_dim, in_dim)
        self.updater = Mlp(latent_dim, latent_dim, latent_dim)
        self.head = nn.Linear(latent_dim, out_dim)

    def encode(self, x_hat: torch.Tensor) -> torch.Tensor:
        """Map zero-imputed features to latents; rejects non-finite input."""
        if not torch.isfinite(x_hat).all():
            raise ValidationError("encoder input contains non-finite values")
        return self.encoder(x_hat)

    def decode(self, z: torch.Tensor) -> torch.Tensor:
        return self.decoder(z)

    def predict(self, z: torch.Tensor) -> torch.Tensor:
        """Modality-specific raw scores from a latent (feature updater then head)."""
        return self.head(self.updater(z))


def encode(batch_x_hat: torch.Tensor, stack: ModalityEncoderStack) -> torch.Tensor:
    return stack.encode(batch_x_hat)


def masked_mse(pred: torch.Tensor, target: torch.Tensor, row_mask: torch.Tensor) -> torch.Tensor:
    """Mean squared error over the rows selected by ``row_mask``.

    The mean runs over all entries of the selected rows; with no selected rows
    the contribution is zero.
    """
    sel = row_mask.bool()
    if not sel.any():
        return pred.new_zeros(())
    diff = pred[sel] - target[sel]
    return (diff * diff).mean()


def stage1_loss(
    zs: dict[str, torch.Tensor],
    x_hats: dict[str, torch.Tensor],
    observed: dict[str, torch.Tensor],
    scores: dict[str, torch.Tensor],
    labels: torch.Tensor,
    stacks: dict[str, ModalityEncoderStack],
    task: str = "classification",
    loss_reduction: str = "mean",
) -> torch.Tensor:
    """Joint per-modality objective: reconstruction plus task loss, observed rows only.

    A modality with no observed instance in the batch contributes zero to both
    sums (logged, since it usually signals a degenerate mask).
    """
    from .fusion import task_loss

    total = None
    for u, z in zs.items():
        row_mask = observed[u].bool()
        if not row_mask.any():
            logger.warning("stage-1 loss: modality %r has no observed instance in this batch", u)
            continue
        l_enc = masked_mse(stacks[u].decode(z), x_hats[u], row_mask)
        if task == "classification":
            probs = torch.softmax(scores[u], dim=1)
        else:
            probs = scores[u].squeeze(-1)
        l_task = task_loss(labels[row_mask], probs[row_mask], task, reduction=loss_reduction)
        term = l_enc + l_task
        total = term if total is None else total + term
    if total is None:
        ref = next(iter(zs.values()))
        return ref.new_zeros(())
    return total
