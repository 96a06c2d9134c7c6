"""Small building blocks shared by both decoders."""

from __future__ import annotations

import math

import torch
import torch.nn.functional as F
from torch import Tensor, nn


PRIOR_PROB = 0.01


def class_head(d_model: int, prior: float = PRIOR_PROB) -> nn.Linear:
    """Single-logit classifier whose initial sigmoid output is ``prior``."""
    head = nn.Linear(d_model, 1)
    nn.init.constant_(head.bias, -math.log((1 - prior) / prior))
    return head


class MLP(nn.Module):
    def __init__(self, in_dim: int, hidden: int, out_dim: int, num_layers: int):
        super().__init__()
        dims = [in_dim] + [hidden] * (num_layers - 1)
        self.layers = nn.ModuleList(nn.Linear(a, b) for a, b in zip(dims, dims[1:] + [out_dim]))

    def forward(self, x: Tensor) -> Tensor:
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = F.relu(x)
        return x

    def init_small_output(self, std: float = 1e-3) -> "MLP":
        """Near-zero last layer, so a fresh refinement head starts close to the identity."""
        nn.init.normal_(self.layers[-1].weight, std=std)
        nn.init.zeros_(self.layers[-1].bias)
        return self


class MaskedMultiHeadAttention(nn.Module):
    """Self-attention ``softmax(f(Q+PE) f(Q+PE)^T / sqrt(d) + mask) f(Q)``.

    ``allowed`` is a boolean [L, L] matrix; disallowed pairs get an additive
    -inf before the softmax and therefore exactly zero weight.
    """

    def __init__(self, d_model: int, n_heads: int):
        super().__init__()
        if d_model % n_heads:
            raise ValueError("d_model must be divisible by n_heads")
        self.d_model = d_model
        self.n_heads = n_heads
        self.q_proj = nn.Linear(d_model, d_model)
        self.k_proj = nn.Linear(d_model, d_model)
        self.v_proj = nn.Linear(d_model, d_model)
        self.out_proj = nn.Linear(d_model, d_model)

    def _split(self, x: Tensor) -> Tensor:
        B, L, _ = x.shape
        return x.view(B, L, self.n_heads, -1).transpose(1, 2)

    def attention_weights(self, content: Tensor, pos: Tensor,
                          allowed: Tensor | None = None) -> Tensor:
        """Explicit [B, heads, L, L] weight tensor."""
        qk_in = content + pos
        q = self._split(self.q_proj(qk_in))
        k = self._split(self.k_proj(qk_in))
        scores = q @ k.transpose(-1, -2) / math.sqrt(q.shape[-1])
        if allowed is not None:
            if not bool(allowed.any(-1).all()):
                raise ValueError("attention mask has a row with no allowed column")
            bias = torch.zeros(allowed.shape, dtype=scores.dtype, device=scores.device)
            bias = bias.masked_fill(~allowed, float("-inf"))
            scores = scores + bias
        return scores.softmax(-1)

    def forward(self, content: Tensor, pos: Tensor, allowed: Tensor | None = None,
                need_weights: bool = False):
        v = self._split(self.v_proj(content))
        if need_weights:
            w = self.attention_weights(content, pos, allowed)
            out = w @ v
        else:
            qk_in = content + pos
            q = self._split(self.q_proj(qk_in))
            k = self._split(self.k_proj(qk_in))
            out = F.scaled_dot_product_attention(q, k, v, attn_mask=allowed)
            w = None
        B, _, L, _ = out.shape
        out = self.out_proj(out.transpose(1, 2).reshape(B, L, self.d_model))
        return (out, w) if need_weights else out
