"""Transformer building blocks shared by the encoder, projector and LM."""

import math
from contextlib import contextmanager

import torch
import torch.nn.functional as F
from torch import nn

DTYPE = torch.float64


@contextmanager
def seeded(seed):
    """Run module construction under a private torch RNG state."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        yield


class MultiHeadAttention(nn.Module):
    """Scaled dot-product attention with an optional additive per-head bias.

    ``mask`` is boolean, True where attention is allowed, and must broadcast
    to ``(B, H, Lq, Lk)``. Every query row needs at least one allowed key.
    """

    def __init__(self, dim, heads, kv_dim=None, bias=True):
        super().__init__()
        if dim % heads:
            raise ValueError(f"dim {dim} not divisible by heads {heads}")
        kv_dim = dim if kv_dim is None else kv_dim
        self.heads = heads
        self.head_dim = dim // heads
        self.q_proj = nn.Linear(dim, dim, bias=bias)
        self.k_proj = nn.Linear(kv_dim, dim, bias=bias)
        self.v_proj = nn.Linear(kv_dim, dim, bias=bias)
        self.o_proj = nn.Linear(dim, dim, bias=bias)

    def _split(self, x):
        b, n, _ = x.shape
        return x.view(b, n, self.heads, self.head_dim).transpose(1, 2)

    def forward(self, x, context=None, attn_bias=None, mask=None):
        context = x if context is None else context
        q = self._split(self.q_proj(x))
        k = self._split(self.k_proj(context))
        v = self._split(self.v_proj(context))
        scores = q @ k.transpose(-1, -2) / math.sqrt(self.head_dim)
        if attn_bias is not None:
            scores = scores + attn_bias
        if mask is not None:
            scores = scores.masked_fill(~mask, float("-inf"))
        weights = torch.softmax(scores, dim=-1)
        out = (weights @ v).transpose(1, 2).reshape(x.shape[0], x.shape[1], -1)
        return self.o_proj(out)


class FeedForward(nn.Module):
    def __init__(self, dim, hidden, bias=True):
        super().__init__()
        self.ffn_up = nn.Linear(dim, hidden, bias=bias)
        self.ffn_down = nn.Linear(hidden, dim, bias=bias)

    def forward(self, x):
        return self.ffn_down(F.gelu(self.ffn_up(x)))


def causal_mask(n, device=None):
    return torch.tril(torch.ones(n, n, dtype=torch.bool, device=device))


def freeze(module, frozen=True):
    """Toggle ``requires_grad`` on every parameter and record the flag."""
    for p in module.parameters():
        p.requires_grad_(not frozen)
    module.frozen = frozen
    return module


def count_parameters(module, trainable_only=False):
    seen = set()
    total = 0
    for p in module.parameters():
        if id(p) in seen:
            continue
        seen.add(id(p))
        if trainable_only and not p.requires_grad:
            continue
        total += p.numel()
    return total
