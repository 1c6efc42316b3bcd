"""Querying transformer that turns atomic representations into K tokens.

One stack of blocks serves two streams. The molecule stream starts from K
learnable query vectors and cross-attends into the encoder output; the text
stream is a BERT-like encoder over characters. Both streams go through the
same self-attention modules in every block, but keep separate feed-forward
layers. How the two streams see each other inside the shared self-attention
is set by a mask mode:

``unimodal``
    queries and text are invisible to each other (contrastive objective).
``fused_bidirectional``
    everything attends to everything (matching objective).
``multimodal_causal``
    text attends to all queries and to earlier text; queries never see
    text (captioning objective).
"""

from dataclasses import asdict, dataclass

import torch
from torch import nn

from .errors import SequenceTooLong, TokenOutOfVocab
from .layers import DTYPE, FeedForward, MultiHeadAttention, seeded

MASK_MODES = ("unimodal", "fused_bidirectional", "multimodal_causal")


@dataclass(frozen=True)
class ProjectorConfig:
    num_queries: int = 8
    blocks: int = 2
    dim: int = 32
    heads: int = 4
    cross_attention_every: int = 1
    text_vocab_size: int = 99
    mol_dim: int = 32
    max_text_len: int = 128
    ffn_mult: int = 2
    embed_dim: int = 32

    def __post_init__(self):
        if self.dim % self.heads:
            raise ValueError("dim must be divisible by heads")
        for name in ("num_queries", "blocks", "dim", "heads", "cross_attention_every",
                     "text_vocab_size", "mol_dim", "max_text_len", "embed_dim"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")

    def to_dict(self):
        return asdict(self)


class QFormerBlock(nn.Module):
    def __init__(self, cfg, with_cross):
        super().__init__()
        hidden = cfg.ffn_mult * cfg.dim
        self.self_norm = nn.LayerNorm(cfg.dim)
        self.self_attn = MultiHeadAttention(cfg.dim, cfg.heads)
        self.with_cross = with_cross
        if with_cross:
            self.cross_norm = nn.LayerNorm(cfg.dim)
            self.cross_attn = MultiHeadAttention(cfg.dim, cfg.heads, kv_dim=cfg.mol_dim)
        self.query_ffn_norm = nn.LayerNorm(cfg.dim)
        self.query_ffn = FeedForward(cfg.dim, hidden)
        self.text_ffn_norm = nn.LayerNorm(cfg.dim)
        self.text_ffn = FeedForward(cfg.dim, hidden)

    def forward(self, q, t, X, x_mask, attn_mask):
        k = 0 if q is None else q.shape[1]
        h = t if q is None else (q if t is None else torch.cat([q, t], dim=1))
        h = h + self.self_attn(self.self_norm(h), mask=attn_mask)
        q, t = (None if k == 0 else h[:, :k]), (None if h.shape[1] == k else h[:, k:])
        if q is not None:
            if self.with_cross:
                q = q + self.cross_attn(self.cross_norm(q), context=X,
                                        mask=x_mask[:, None, None, :])
            q = q + self.query_ffn(self.query_ffn_norm(q))
        if t is not None:
            t = t + self.text_ffn(self.text_ffn_norm(t))
        return q, t


def build_mask(mode, k, text_mask):
    """Boolean (B, 1, K+T, K+T) self-attention mask for a joint sequence."""
    b, n_text = text_mask.shape
    n = k + n_text
    key_ok = torch.cat([torch.ones(b, k, dtype=torch.bool), text_mask], dim=1)
    is_query = torch.arange(n) < k
    if mode == "fused_bidirectional":
        allowed = torch.ones(n, n, dtype=torch.bool)
    elif mode == "unimodal":
        allowed = is_query[:, None] == is_query[None, :]
    elif mode == "multimodal_causal":
        allowed = torch.tril(torch.ones(n, n, dtype=torch.bool))
        allowed[:, :k] = True
        allowed[:k, k:] = False
    else:
        raise ValueError(f"unknown mask mode {mode!r}")
    return (allowed[None] & key_ok[:, None, :])[:, None]


class QFormer(nn.Module):
    def __init__(self, cfg=None):
        super().__init__()
        self.cfg = cfg = cfg or ProjectorConfig()
        self.query_tokens = nn.Parameter(torch.randn(cfg.num_queries, cfg.dim) * 0.02)
        self.tok_embed = nn.Embedding(cfg.text_vocab_size, cfg.dim)
        self.pos_embed = nn.Embedding(cfg.max_text_len + 1, cfg.dim)
        self.cls_token = nn.Parameter(torch.randn(cfg.dim) * 0.02)
        self.dec_token = nn.Parameter(torch.randn(cfg.dim) * 0.02)
        self.blocks = nn.ModuleList(
            QFormerBlock(cfg, with_cross=(i % cfg.cross_attention_every == 0))
            for i in range(cfg.blocks)
        )
        self.query_norm = nn.LayerNorm(cfg.dim)
        self.text_norm = nn.LayerNorm(cfg.dim)
        self.lm_head = nn.Linear(cfg.dim, cfg.text_vocab_size)

    @classmethod
    def build(cls, cfg=None, seed=0):
        with seeded(seed):
            return cls(cfg).to(DTYPE)

    def self_attention_layers(self, stream):
        """Self-attention modules used by ``"molecule"`` or ``"text"`` stream."""
        if stream not in ("molecule", "text"):
            raise ValueError(stream)
        return [blk.self_attn for blk in self.blocks]

    # -- input handling ---------------------------------------------------

    @staticmethod
    def _mol_batch(X, x_mask):
        single = X.dim() == 2
        if single:
            X = X.unsqueeze(0)
        if x_mask is None:
            x_mask = torch.ones(X.shape[:2], dtype=torch.bool)
        return X, x_mask, single

    def _text_batch(self, tokens, text_mask):
        ids = torch.as_tensor(tokens, dtype=torch.long)
        single = ids.dim() == 1
        if single:
            ids = ids.unsqueeze(0)
        if ids.shape[1] == 0:
            raise ValueError("token sequence must be non-empty")
        if ids.shape[1] > self.cfg.max_text_len:
            raise SequenceTooLong(
                f"{ids.shape[1]} text tokens exceed max_text_len={self.cfg.max_text_len}")
        if text_mask is None:
            text_mask = torch.ones(ids.shape, dtype=torch.bool)
        bad = (ids < 0) | (ids >= self.cfg.text_vocab_size)
        if bool((bad & text_mask).any()):
            raise TokenOutOfVocab("token id outside projector vocabulary")
        return ids.clamp(0, self.cfg.text_vocab_size - 1), text_mask, single

    def _queries(self, batch):
        return self.query_tokens.unsqueeze(0).expand(batch, -1, -1)

    def _run(self, q, t, X, x_mask, text_mask, mode):
        k = 0 if q is None else q.shape[1]
        if t is None:
            mask = None
        else:
            mask = build_mask(mode, k, text_mask)
        for blk in self.blocks:
            q, t = blk(q, t, X, x_mask, mask)
        q = None if q is None else self.query_norm(q)
        t = None if t is None else self.text_norm(t)
        return q, t

    # -- public API -------------------------------------------------------

    def project(self, X, x_mask=None):
        """K query outputs for atomic representations ``X`` ((N, d) or (B, N, d))."""
        X, x_mask, single = self._mol_batch(X, x_mask)
        q, _ = self._run(self._queries(X.shape[0]), None, X, x_mask, None, "unimodal")
        return q[0] if single else q

    def _embed_text(self, ids, prefix):
        b, n = ids.shape
        pos = self.pos_embed(torch.arange(n + 1))
        first = prefix.expand(b, 1, -1)
        return torch.cat([first, self.tok_embed(ids)], dim=1) + pos

    def encode_text(self, tokens, text_mask=None):
        """[CLS] output of the bidirectional text stream."""
        ids, text_mask, single = self._text_batch(tokens, text_mask)
        t = self._embed_text(ids, self.cls_token)
        full_mask = torch.cat([torch.ones(ids.shape[0], 1, dtype=torch.bool), text_mask], 1)
        _, t = self._run(None, t, None, None, full_mask, "unimodal")
        cls = t[:, 0]
        return cls[0] if single else cls

    def fuse(self, X, tokens, x_mask=None, text_mask=None):
        """Query outputs after joint bidirectional attention with the text."""
        X, x_mask, single = self._mol_batch(X, x_mask)
        ids, text_mask, _ = self._text_batch(tokens, text_mask)
        if ids.shape[0] != X.shape[0]:
            ids = ids.expand(X.shape[0], -1)
            text_mask = text_mask.expand(X.shape[0], -1)
        t = self._embed_text(ids, self.cls_token)
        # the [CLS] slot follows the text stream's visibility
        full_mask = torch.cat([text_mask[:, :1], text_mask], 1)
        q, _ = self._run(self._queries(X.shape[0]), t, X, x_mask, full_mask,
                         "fused_bidirectional")
        return q[0] if single else q

    def caption_logits(self, X, tokens, x_mask=None, text_mask=None):
        """Vocabulary logits at each text position.

        Row ``i`` scores ``tokens[i]`` given the queries and ``tokens[:i]``:
        the text stream reads a start vector followed by the tokens shifted
        right by one, under a causal mask.
        """
        X, x_mask, single = self._mol_batch(X, x_mask)
        ids, text_mask, _ = self._text_batch(tokens, text_mask)
        if ids.shape[0] != X.shape[0]:
            ids = ids.expand(X.shape[0], -1)
            text_mask = text_mask.expand(X.shape[0], -1)
        t = self._embed_text(ids[:, :-1], self.dec_token)
        _, t = self._run(self._queries(X.shape[0]), t, X, x_mask, text_mask,
                         "multimodal_causal")
        logits = self.lm_head(t)
        return logits[0] if single else logits

    @torch.no_grad()
    def greedy_caption(self, X, max_new=64, bos=1, eos=2, x_mask=None):
        """Greedy caption ids (without BOS/EOS) for one molecule ``X`` (N, d)."""
        ids = [bos]
        for _ in range(max_new):
            if len(ids) >= self.cfg.max_text_len:
                break
            # the trailing slot is a placeholder: row i only sees tokens[:i]
            logits = self.caption_logits(X, ids + [bos], x_mask=x_mask)
            nxt = int(torch.argmax(logits[-1]))
            if nxt == eos:
                break
            ids.append(nxt)
        return ids[1:]


class AlignmentHeads(nn.Module):
    """Stage-1 heads: contrastive projections and the 2-way matching head."""

    def __init__(self, dim, embed_dim):
        super().__init__()
        self.mol_proj = nn.Linear(dim, embed_dim)
        self.text_proj = nn.Linear(dim, embed_dim)
        self.itm_head = nn.Linear(dim, 2)

    @classmethod
    def build(cls, cfg, seed=0):
        with seeded(seed):
            return cls(cfg.dim, cfg.embed_dim).to(DTYPE)


def project(p, X):
    return p.project(X)
