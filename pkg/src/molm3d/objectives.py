"""Training losses for the alignment and generation stages."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .errors import DegenerateBatch, EmptyResponseMask
from .textlm import BOS, EOS, PAD, build_vocab

DEFAULT_TEMPERATURE = 0.1


@dataclass
class BatchPair:
    """Positive molecule-text pairs: ``molecules[i]`` goes with ``texts[i]``."""

    molecules: Sequence
    texts: Sequence

    def __post_init__(self):
        if len(self.molecules) != len(self.texts):
            raise ValueError("molecules and texts must have equal length")

    def __len__(self):
        return len(self.molecules)


@dataclass
class EncodedBatch:
    """Tensor form of a :class:`BatchPair` with encoder outputs precomputed.

    ``text_ids`` feed the contrastive and matching streams, ``caption_ids``
    (BOS + text + EOS) feed the captioning stream.
    """

    X: torch.Tensor
    x_mask: torch.Tensor
    text_ids: torch.Tensor
    text_mask: torch.Tensor
    caption_ids: torch.Tensor
    caption_mask: torch.Tensor

    def __len__(self):
        return self.X.shape[0]

    def subset(self, idx):
        idx = torch.as_tensor(idx, dtype=torch.long)
        return EncodedBatch(*(t[idx] for t in (self.X, self.x_mask, self.text_ids,
                                                self.text_mask, self.caption_ids,
                                                self.caption_mask)))


def pad_ids(seqs, pad=PAD):
    n = max(len(s) for s in seqs)
    ids = torch.full((len(seqs), n), pad, dtype=torch.long)
    mask = torch.zeros(len(seqs), n, dtype=torch.bool)
    for i, s in enumerate(seqs):
        ids[i, :len(s)] = torch.as_tensor(s, dtype=torch.long)
        mask[i, :len(s)] = True
    return ids, mask


def encode_batch(encoder, batch, vocab=None):
    """Run the (frozen) encoder and tokenise texts of a :class:`BatchPair`."""
    vocab = vocab or build_vocab()
    with torch.no_grad():
        X, x_mask = encoder.encode_batch(list(batch.molecules))
    toks = [vocab.encode_text(t) if isinstance(t, str) else list(t) for t in batch.texts]
    text_ids, text_mask = pad_ids(toks)
    cap_ids, cap_mask = pad_ids([[BOS] + t + [EOS] for t in toks])
    return EncodedBatch(X, x_mask, text_ids, text_mask, cap_ids, cap_mask)


# ---------------------------------------------------------------------------
# contrastive


def mtc_similarity(query_outputs, text_cls, temperature=DEFAULT_TEMPERATURE):
    """``s[i, j] = max_k cos(m_k^i, t^j) / temperature`` for (B, K, d) x (B, d)."""
    q = F.normalize(query_outputs, dim=-1)
    t = F.normalize(text_cls, dim=-1)
    cos = torch.einsum("ikd,jd->ijk", q, t)
    return cos.max(dim=-1).values / temperature


def symmetric_infonce(sim):
    """Mean of row-wise and column-wise cross-entropy against the diagonal."""
    b = sim.shape[0]
    if b < 2:
        raise DegenerateBatch("contrastive loss needs at least 2 pairs")
    target = torch.arange(b)
    return 0.5 * (F.cross_entropy(sim, target) + F.cross_entropy(sim.T, target))


def mtc_loss(query_outputs, text_cls, temperature=DEFAULT_TEMPERATURE):
    if query_outputs.shape[0] < 2:
        raise DegenerateBatch("contrastive loss needs at least 2 pairs")
    return symmetric_infonce(mtc_similarity(query_outputs, text_cls, temperature))


# ---------------------------------------------------------------------------
# matching


def seeded_derangement(n, seed):
    """Uniformly drawn permutation of ``range(n)`` without fixed points."""
    if n < 2:
        raise DegenerateBatch("a derangement needs at least 2 elements")
    rng = np.random.default_rng(seed)
    while True:
        perm = rng.permutation(n)
        if not np.any(perm == np.arange(n)):
            return perm


NegativeSampler = Callable[[int, int], np.ndarray]


def matching_logits(projector, heads, X, x_mask, text_ids, text_mask):
    fused = projector.fuse(X, text_ids, x_mask=x_mask, text_mask=text_mask)
    return heads.itm_head(fused.mean(dim=-2))


def mtm_loss(projector, heads, batch: EncodedBatch, seed,
             negative_sampler: Optional[NegativeSampler] = None):
    """Binary matched/unmatched cross-entropy over B positives and B negatives.

    Negative ``i`` pairs molecule ``i`` with text ``perm[i]``; ``perm`` comes
    from ``negative_sampler(B, seed)`` (a seeded derangement by default; swap
    in a hard-negative miner here).
    """
    b = len(batch)
    if b < 2:
        raise DegenerateBatch("matching loss needs at least 2 pairs")
    perm = (negative_sampler or seeded_derangement)(b, seed)
    perm = torch.as_tensor(perm, dtype=torch.long)
    X = torch.cat([batch.X, batch.X])
    x_mask = torch.cat([batch.x_mask, batch.x_mask])
    ids = torch.cat([batch.text_ids, batch.text_ids[perm]])
    mask = torch.cat([batch.text_mask, batch.text_mask[perm]])
    logits = matching_logits(projector, heads, X, x_mask, ids, mask)
    labels = torch.cat([torch.ones(b, dtype=torch.long), torch.zeros(b, dtype=torch.long)])
    return F.cross_entropy(logits, labels)


# ---------------------------------------------------------------------------
# captioning / generation


def masked_token_ce(logits, targets, mask):
    """Mean cross-entropy over positions where ``mask`` is True."""
    flat = F.cross_entropy(logits.reshape(-1, logits.shape[-1]), targets.reshape(-1).clamp(min=0),
                           reduction="none")
    m = mask.reshape(-1).to(flat.dtype)
    return (flat * m).sum() / m.sum()


def stage1_caption_loss(projector, X, tokens, x_mask=None, token_mask=None):
    """Captioning cross-entropy over positions 1..end of ``tokens``."""
    tokens = torch.as_tensor(tokens, dtype=torch.long)
    if tokens.shape[-1] < 2:
        raise ValueError("caption needs at least 2 tokens")
    logits = projector.caption_logits(X, tokens, x_mask=x_mask, text_mask=token_mask)
    if token_mask is None:
        token_mask = torch.ones(tokens.shape, dtype=torch.bool)
    return masked_token_ce(logits[..., 1:, :], tokens[..., 1:], token_mask[..., 1:])


def conditional_lm_loss(logits, Z=None, *, token_ids=None, response_mask=None):
    """Next-token cross-entropy on response targets only.

    The target at position ``p`` is ``token_ids[p]``, predicted from the
    logits at ``p - 1``; only positions with ``response_mask`` True count.
    Accepts a single :class:`MixedSequence` or batched ids and mask.
    """
    if Z is not None:
        token_ids, response_mask = Z.token_ids, Z.response_mask
    if not bool(response_mask[..., 1:].any()):
        raise EmptyResponseMask("no response positions to score")
    return masked_token_ce(logits[..., :-1, :], token_ids[..., 1:], response_mask[..., 1:])


# ---------------------------------------------------------------------------
# stage 1 total


def stage1_losses(projector, heads, batch: EncodedBatch, seed=0, weights=(1.0, 1.0, 1.0),
                  temperature=DEFAULT_TEMPERATURE, negative_sampler=None):
    """Weighted sum of contrastive, matching and captioning losses.

    Returns ``(total, {"mtc": ..., "mtm": ..., "caption": ...})``. Each term
    runs its own forward pass. Terms with weight 0 are skipped.
    """
    w_mtc, w_mtm, w_cap = weights
    parts = {}
    if w_mtc:
        q = projector.project(batch.X, batch.x_mask)
        t = projector.encode_text(batch.text_ids, batch.text_mask)
        parts["mtc"] = mtc_loss(heads.mol_proj(q), heads.text_proj(t), temperature)
    if w_mtm:
        parts["mtm"] = mtm_loss(projector, heads, batch, seed, negative_sampler)
    if w_cap:
        parts["caption"] = stage1_caption_loss(projector, batch.X, batch.caption_ids,
                                               batch.x_mask, batch.caption_mask)
    total = torch.zeros((), dtype=batch.X.dtype)
    for w, key in zip(weights, ("mtc", "mtm", "caption")):
        if key in parts:
            total = total + w * parts[key]
    return total, parts


def stage1_total(projector, heads, batch, **kw):
    return stage1_losses(projector, heads, batch, **kw)[0]


def uniform_ce(vocab_size):
    return math.log(vocab_size)
