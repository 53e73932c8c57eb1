"""Cross-modal knowledge propagation: masked self-attention blocks that mix a
modality's features with the prompts delivered by the other modalities."""

from __future__ import annotations

import logging
from typing import Mapping, Sequence

import torch
import torch.nn as nn

from .prompting import PrototypeBank, PromptGenerator, momentum_update, prototype_attention
from .validation import ValidationError

logger = logging.getLogger(__name__)


class MaskedSelfAttention(nn.Module):
    """Multi-head scaled dot-product self-attention across the instance axis.

    Missing instances are excluded as keys (their attention logits get
    ``mask_neg`` added) but still issue queries, which is what lets them borrow
    content from observed instances. If no instance is observed the layer
    degrades to identity.
    """

    def __init__(self, dim: int, heads: int):
        super().__init__()
        if dim % heads:
            raise ValidationError(f"dim {dim} not divisible by heads {heads}")
        self.dim = dim
        self.heads = heads
        self.query = nn.Linear(dim, dim)
        self.key = nn.Linear(dim, dim)
        self.value = nn.Linear(dim, dim)
        self.out = nn.Linear(dim, dim)

    def forward(
        self,
        g: torch.Tensor,
        observed: torch.Tensor,
        mask_neg: float = -1e9,
        need_weights: bool = False,
    ):
        n = g.shape[0]
        obs = observed.bool()
        if not obs.any():
            logger.warning("masked self-attention: all %d instances missing, passing through", n)
            return (g, None) if need_weights else g
        head_dim = self.dim // self.heads
        # [heads, n, head_dim]
        q = self.query(g).view(n, self.heads, head_dim).transpose(0, 1)
        k = self.key(g).view(n, self.heads, head_dim).transpose(0, 1)
        v = self.value(g).view(n, self.heads, head_dim).transpose(0, 1)
        logits = q @ k.transpose(1, 2) / head_dim**0.5  # [heads, n, n]
        logits = logits + torch.where(obs, 0.0, mask_neg).to(g.dtype).view(1, 1, n)
        attn = torch.softmax(logits, dim=2)
        mixed = (attn @ v).transpose(0, 1).reshape(n, self.dim)
        out = self.out(mixed)
        return (out, attn) if need_weights else out


def masked_self_attention(
    g: torch.Tensor, observed: torch.Tensor, layer: MaskedSelfAttention, mask_neg: float = -1e9
) -> torch.Tensor:
    return layer(g, observed, mask_neg=mask_neg)


class KnowledgeBlock(nn.Module):
    """One propagation block for one modality.

    Down-projects [feature, prompt from first peer, prompt from second peer]
    to the latent width, runs a stack of masked self-attention layers with
    residuals, and up-projects back, splitting into the renewed feature and the
    two returned prompts. Peer prompts arrive in canonical modality order.
    """

    def __init__(self, latent_dim: int, prompt_dim: int, msa_layers: int, heads: int):
        super().__init__()
        self.latent_dim = latent_dim
        self.prompt_dim = prompt_dim
        wide = latent_dim + 2 * prompt_dim
        self.down = nn.Linear(wide, latent_dim)
        self.layers = nn.ModuleList(MaskedSelfAttention(latent_dim, heads) for _ in range(msa_layers))
        self.up = nn.Linear(latent_dim, wide)

    def forward(
        self,
        z: torch.Tensor,
        prompt_first: torch.Tensor,
        prompt_second: torch.Tensor,
        observed: torch.Tensor,
        mask_neg: float = -1e9,
    ):
        d, p = self.latent_dim, self.prompt_dim
        if z.shape[1] != d or prompt_first.shape[1] != p or prompt_second.shape[1] != p:
            raise ValidationError(
                f"block expects widths ({d}, {p}, {p}), got "
                f"({z.shape[1]}, {prompt_first.shape[1]}, {prompt_second.shape[1]})"
            )
        g = self.down(torch.cat([z, prompt_first, prompt_second], dim=1))
        for layer in self.layers:
            g = g + layer(g, observed, mask_neg=mask_neg)
        wide = self.up(g)
        return wide[:, :d], wide[:, d : d + p], wide[:, d + p :]


def kp_block(
    z: torch.Tensor,
    prompt_first: torch.Tensor,
    prompt_second: torch.Tensor,
    observed: torch.Tensor,
    block: KnowledgeBlock,
    mask_neg: float = -1e9,
):
    return block(z, prompt_first, prompt_second, observed, mask_neg=mask_neg)


def peers(order: Sequence[str], u: str) -> tuple[str, ...]:
    """The other modalities, in canonical order."""
    return tuple(m for m in order if m != u)


def run_pipeline(
    zs: Mapping[str, torch.Tensor],
    observed: Mapping[str, torch.Tensor],
    banks: Mapping[str, PrototypeBank],
    blocks: Mapping[str, Sequence[KnowledgeBlock]],
    generators: Mapping[str, Sequence[PromptGenerator]],
    momentum: float = 0.5,
    use_kp: bool = True,
    use_pg: bool = True,
    mask_neg: float = -1e9,
    trace: list | None = None,
) -> dict[str, torch.Tensor]:
    """Run the stacked propagation blocks, interleaved with prompt generation.

    Per level, every modality generates one fresh prompt from its current
    feature; the prompt delivered on stream v->u blends the fresh prompt of the
    source v with the stream's prompt returned by u's previous block. With
    ``use_pg`` off, prompts are direct feature projections (no prototypes, no
    momentum). With ``use_kp`` off the inputs pass through unchanged. When a
    ``trace`` list is given, per-level prototype snapshots are appended to it.
    """
    order = list(zs)
    if not use_kp:
        return {u: zs[u] for u in order}
    current = {u: zs[u] for u in order}
    returned: dict[tuple[str, str], torch.Tensor] = {}
    num_levels = len(blocks[order[0]])
    for level in range(num_levels):
        if use_pg:
            fresh = {}
            for u in order:
                protos = banks[u].prototypes
                attn = prototype_attention(current[u], protos, observed[u], mask_neg=mask_neg)
                fresh[u] = generators[u][level](attn, protos, current[u])
            if trace is not None:
                trace.append({u: banks[u].prototypes.detach().clone() for u in order})
            delivered = {}
            for dst in order:
                for src in peers(order, dst):
                    prev = returned.get(
                        (src, dst), torch.zeros_like(fresh[src])
                    )
                    delivered[(src, dst)] = momentum_update(prev, fresh[src], momentum)
        else:
            fresh = {u: generators[u][level].direct(current[u]) for u in order}
            delivered = {
                (src, dst): fresh[src] for dst in order for src in peers(order, dst)
            }
        next_feats = {}
        for u in order:
            first, second = peers(order, u)
            z_out, ret_first, ret_second = blocks[u][level](
                current[u], delivered[(first, u)], delivered[(second, u)], observed[u],
                mask_neg=mask_neg,
            )
            next_feats[u] = z_out
            returned[(first, u)] = ret_first
            returned[(second, u)] = ret_second
        current = next_feats
    return current
