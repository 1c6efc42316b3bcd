"""Character-level causal language model over mixed molecule/text sequences.

A sequence fed to the LM is a matrix of input embeddings. Molecular rows
(the projector's query outputs mapped through a linear adapter) come first,
then the embedded prompt text, then optionally the response::

    [mol rows][BOS] smiles [SEP] task [SEP] response [EOS]

Low-rank adapters can be attached to any of the named linear layers of the
decoder blocks and later merged back into the base weights.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Optional

import torch
from torch import nn

from .errors import (
    ModeInputMismatch,
    NoAdapters,
    SequenceTooLong,
    TokenOutOfVocab,
    UnknownTargetModule,
)
from .layers import DTYPE, FeedForward, MultiHeadAttention, causal_mask, count_parameters, seeded

SPECIALS = ("[PAD]", "[BOS]", "[EOS]", "[SEP]")
PAD, BOS, EOS, SEP = range(4)
MOL_SENTINEL = -1
PROMPT_MODES = ("both", "smiles_only", "mol_only")
LORA_TARGETS = ("q_proj", "k_proj", "v_proj", "o_proj", "ffn_up", "ffn_down")


class Vocabulary:
    """Four specials followed by printable ASCII (32..126); 99 symbols.

    In text form the specials are written as the control characters
    ``\\x00``..``\\x03`` so that the text codec is an exact bijection.
    """

    def __init__(self):
        self.symbols = list(SPECIALS) + [chr(c) for c in range(32, 127)]
        self._chars = [chr(i) for i in range(len(SPECIALS))] + self.symbols[len(SPECIALS):]
        self._index = {c: i for i, c in enumerate(self._chars)}

    @property
    def size(self):
        return len(self.symbols)

    def __len__(self):
        return len(self.symbols)

    def index(self, symbol):
        return self.symbols.index(symbol)

    def encode_text(self, text):
        try:
            return [self._index[ch] for ch in text]
        except KeyError as exc:
            raise TokenOutOfVocab(f"character {exc.args[0]!r} is not in the vocabulary") from None

    def decode_text(self, ids):
        out = []
        for i in ids:
            i = int(i)
            if not 0 <= i < self.size:
                raise TokenOutOfVocab(f"token id {i} outside vocabulary")
            out.append(self._chars[i])
        return "".join(out)


def build_vocab():
    return Vocabulary()


@dataclass(frozen=True)
class LMConfig:
    layers: int = 2
    dim: int = 32
    heads: int = 4
    max_seq_len: int = 256
    vocab_size: int = 99
    ffn_mult: int = 2

    def __post_init__(self):
        if self.dim % self.heads:
            raise ValueError("dim must be divisible by heads")

    def to_dict(self):
        return asdict(self)


@dataclass(frozen=True)
class LoraConfig:
    r: int = 8
    alpha: float = 32.0
    dropout: float = 0.1
    target_modules: tuple = field(default=LORA_TARGETS)

    def __post_init__(self):
        object.__setattr__(self, "target_modules", tuple(self.target_modules))
        if self.r < 1:
            raise ValueError("LoRA rank must be >= 1")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must be in [0, 1)")

    @property
    def scaling(self):
        return self.alpha / self.r

    def to_dict(self):
        d = asdict(self)
        d["target_modules"] = list(self.target_modules)
        return d


# ---------------------------------------------------------------------------
# model


class DecoderBlock(nn.Module):
    def __init__(self, cfg):
        super().__init__()
        self.norm1 = nn.LayerNorm(cfg.dim)
        self.attn = MultiHeadAttention(cfg.dim, cfg.heads, bias=False)
        self.norm2 = nn.LayerNorm(cfg.dim)
        self.ffn = FeedForward(cfg.dim, cfg.ffn_mult * cfg.dim, bias=False)

    def forward(self, x, mask):
        x = x + self.attn(self.norm1(x), mask=mask)
        return x + self.ffn(self.norm2(x))


class CausalLM(nn.Module):
    """Pre-norm decoder with learned absolute positions over the whole sequence."""

    def __init__(self, cfg=None):
        super().__init__()
        self.cfg = cfg = cfg or LMConfig()
        self.vocab = build_vocab()
        if cfg.vocab_size != self.vocab.size:
            raise ValueError("vocab_size must match the character vocabulary")
        self.tok_embed = nn.Embedding(cfg.vocab_size, cfg.dim)
        self.pos_embed = nn.Embedding(cfg.max_seq_len, cfg.dim)
        self.blocks = nn.ModuleList(DecoderBlock(cfg) for _ in range(cfg.layers))
        self.final_norm = nn.LayerNorm(cfg.dim)
        self.lm_head = nn.Linear(cfg.dim, cfg.vocab_size, bias=False)
        self.lora_cfg: Optional[LoraConfig] = None

    @classmethod
    def build(cls, cfg=None, seed=0):
        with seeded(seed):
            return cls(cfg).to(DTYPE)

    def embed_tokens(self, ids):
        return self.tok_embed(torch.as_tensor(ids, dtype=torch.long))

    def forward(self, embeddings):
        """Logits for (B, l, dim) or (l, dim) input embeddings."""
        single = embeddings.dim() == 2
        if single:
            embeddings = embeddings.unsqueeze(0)
        n = embeddings.shape[1]
        if n > self.cfg.max_seq_len:
            raise SequenceTooLong(f"sequence length {n} exceeds max_seq_len={self.cfg.max_seq_len}")
        x = embeddings + self.pos_embed(torch.arange(n))
        mask = causal_mask(n)
        for blk in self.blocks:
            x = blk(x, mask)
        logits = self.lm_head(self.final_norm(x))
        return logits[0] if single else logits

    def named_targets(self):
        """(block index, name, parent module) for every adaptable linear layer."""
        for i, blk in enumerate(self.blocks):
            for name in ("q_proj", "k_proj", "v_proj", "o_proj"):
                yield i, name, blk.attn
            for name in ("ffn_up", "ffn_down"):
                yield i, name, blk.ffn


# ---------------------------------------------------------------------------
# mixed sequences


@dataclass
class MixedSequence:
    """Input rows for the LM plus bookkeeping for the loss.

    ``token_ids`` holds the text id at text positions and ``MOL_SENTINEL``
    at molecular positions. ``response_mask`` is True at positions whose
    token is a scored target (the response characters and the final EOS).
    """

    embeddings: torch.Tensor
    response_mask: torch.Tensor
    token_ids: torch.Tensor
    n_mol: int = 0

    def __len__(self):
        return self.embeddings.shape[0]


def compose_mixed_sequence(lm, mol_tokens, smiles, task_text, response=None, mode="both",
                           adapter=None, score_prompt=False):
    """Lay out molecular rows and text for the LM.

    ``mol_tokens`` is the projector output (K, d_proj); it is mapped to the
    LM width by ``adapter``. Segments are dropped according to ``mode``:
    ``smiles_only`` has no molecular rows, ``mol_only`` has no SMILES.
    With ``score_prompt`` every text position after the first becomes a
    target, not only the response.
    """
    if mode not in PROMPT_MODES:
        raise ValueError(f"unknown prompt mode {mode!r}")
    has_mol = mol_tokens is not None
    has_smiles = smiles is not None
    expected = {"both": (True, True), "smiles_only": (False, True), "mol_only": (True, False)}
    if (has_mol, has_smiles) != expected[mode]:
        raise ModeInputMismatch(
            f"mode {mode!r} needs molecule tokens={expected[mode][0]}, SMILES={expected[mode][1]};"
            f" got molecule tokens={has_mol}, SMILES={has_smiles}"
        )
    vocab = lm.vocab
    ids = [BOS]
    if has_smiles:
        ids += vocab.encode_text(smiles) + [SEP]
    ids += vocab.encode_text(task_text) + [SEP]
    n_prompt = len(ids)
    if response is not None:
        ids += vocab.encode_text(response) + [EOS]
    n_mol = 0
    parts = []
    if has_mol:
        if adapter is None:
            raise ValueError("an adapter is required to map molecule tokens to the LM width")
        rows = adapter(mol_tokens)
        n_mol = rows.shape[0]
        parts.append(rows)
    length = n_mol + len(ids)
    if length > lm.cfg.max_seq_len:
        raise SequenceTooLong(f"mixed sequence of length {length} exceeds {lm.cfg.max_seq_len}")
    parts.append(lm.embed_tokens(ids))
    token_ids = torch.tensor([MOL_SENTINEL] * n_mol + ids, dtype=torch.long)
    mask = torch.zeros(length, dtype=torch.bool)
    if score_prompt:
        mask[n_mol + 1:] = True
    elif response is not None:
        mask[n_mol + n_prompt:] = True
    return MixedSequence(torch.cat(parts, dim=0), mask, token_ids, n_mol)


def collate(seqs):
    """Right-pad sequences into (embeddings, token_ids, response_mask) batches."""
    n = max(len(s) for s in seqs)
    dim = seqs[0].embeddings.shape[1]
    emb = torch.zeros(len(seqs), n, dim, dtype=seqs[0].embeddings.dtype)
    ids = torch.full((len(seqs), n), PAD, dtype=torch.long)
    mask = torch.zeros(len(seqs), n, dtype=torch.bool)
    for b, s in enumerate(seqs):
        k = len(s)
        emb[b, :k] = s.embeddings
        ids[b, :k] = s.token_ids
        mask[b, :k] = s.response_mask
    return emb, ids, mask


def lm_forward(lm, Z):
    return lm(Z.embeddings)


@torch.no_grad()
def greedy_generate(lm, prompt, max_new):
    """Append the highest-scoring token until EOS or ``max_new`` tokens.

    Ties resolve to the lowest vocabulary index (``torch.argmax`` returns the
    first maximum).
    """
    if bool(prompt.response_mask.any()):
        raise ValueError("prompt already contains a response segment")
    emb = prompt.embeddings
    out = []
    for _ in range(max_new):
        if emb.shape[0] >= lm.cfg.max_seq_len:
            raise SequenceTooLong("generation ran past max_seq_len")
        logits = lm(emb)[-1]
        nxt = int(torch.argmax(logits))
        if nxt == EOS:
            break
        out.append(nxt)
        emb = torch.cat([emb, lm.embed_tokens([nxt])], dim=0)
    return lm.vocab.decode_text(out)


# ---------------------------------------------------------------------------
# LoRA


class LoraLinear(nn.Module):
    """Frozen linear layer plus a trainable ``(alpha/r) * B @ A`` update."""

    def __init__(self, base, r, alpha, dropout):
        super().__init__()
        self.base = base
        self.r = r
        self.scaling = alpha / r
        self.lora_A = nn.Parameter(torch.empty(r, base.in_features, dtype=base.weight.dtype))
        self.lora_B = nn.Parameter(torch.zeros(base.out_features, r, dtype=base.weight.dtype))
        nn.init.kaiming_uniform_(self.lora_A, a=math.sqrt(5))
        self.dropout = nn.Dropout(dropout) if dropout > 0 else nn.Identity()
        for p in self.base.parameters():
            p.requires_grad_(False)

    @property
    def in_features(self):
        return self.base.in_features

    @property
    def out_features(self):
        return self.base.out_features

    def forward(self, x):
        return self.base(x) + (self.dropout(x) @ self.lora_A.T @ self.lora_B.T) * self.scaling

    def merged(self):
        base = self.base
        with torch.no_grad():
            base.weight += self.scaling * (self.lora_B @ self.lora_A)
        return base


def attach_lora(lm, cfg, seed=0):
    """Wrap every targeted layer in :class:`LoraLinear` and freeze the base."""
    unknown = set(cfg.target_modules) - set(LORA_TARGETS)
    if unknown:
        raise UnknownTargetModule(f"unknown LoRA target(s): {sorted(unknown)}")
    for p in lm.parameters():
        p.requires_grad_(False)
    with seeded(seed):
        for _, name, parent in lm.named_targets():
            if name in cfg.target_modules:
                layer = getattr(parent, name)
                if isinstance(layer, LoraLinear):
                    raise ValueError("LoRA already attached")
                setattr(parent, name, LoraLinear(layer, cfg.r, cfg.alpha, cfg.dropout))
    lm.lora_cfg = cfg
    return lm


def lora_modules(lm):
    return [m for m in lm.modules() if isinstance(m, LoraLinear)]


def lora_parameters(lm):
    for m in lora_modules(lm):
        yield m.lora_A
        yield m.lora_B


def base_state(lm):
    """State dict without adapter matrices, keyed as for a plain model."""
    out = {}
    for k, v in lm.state_dict().items():
        if ".lora_" in k:
            continue
        out[k.replace(".base.", ".")] = v
    return out


def merge_lora(lm):
    """Fold adapters into the base weights and drop them."""
    if not lora_modules(lm):
        raise NoAdapters("no LoRA adapters attached")
    for _, name, parent in lm.named_targets():
        layer = getattr(parent, name)
        if isinstance(layer, LoraLinear):
            setattr(parent, name, layer.merged())
    lm.lora_cfg = None
    return lm


def trainable_fraction(*modules):
    """Share of unique parameters (across ``modules``) that require grad."""
    seen = {}
    for m in modules:
        for p in m.parameters():
            seen[id(p)] = p
    total = sum(p.numel() for p in seen.values())
    if total == 0:
        return 0.0
    return sum(p.numel() for p in seen.values() if p.requires_grad) / total


def lora_parameter_count(shapes, r):
    """Closed-form adapter size for weight shapes ``(out, in)``."""
    return sum(r * (out + inp) for out, inp in shapes)


__all__ = [
    "Vocabulary", "build_vocab", "LMConfig", "LoraConfig", "CausalLM", "MixedSequence",
    "compose_mixed_sequence", "collate", "lm_forward", "greedy_generate", "LoraLinear",
    "attach_lora", "merge_lora", "trainable_fraction", "lora_parameter_count",
    "count_parameters", "PAD", "BOS", "EOS", "SEP",
]
