"""Invariant 3D molecular encoder.

Atoms are embedded by element only. Geometry enters exclusively through a
Gaussian expansion of the interatomic distance matrix, which a per-layer
linear map turns into an additive per-head attention bias. Since distances
are unchanged by rotations and translations, so is the output; since no atom
index is ever embedded, permuting atoms permutes output rows.
"""

from dataclasses import asdict, dataclass, field

import numpy as np
import torch
from torch import nn

from .errors import UnknownElement
from .layers import DTYPE, FeedForward, MultiHeadAttention, freeze, seeded
from .molrepr import SUPPORTED_ELEMENTS, pairwise_distances


@dataclass(frozen=True)
class EncoderConfig:
    layers: int = 2
    dim: int = 32
    heads: int = 4
    gaussian_kernels: int = 16
    d_max: float = 8.0
    element_vocab: tuple = field(default=SUPPORTED_ELEMENTS)
    ffn_mult: int = 2
    pair_bias_std: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "element_vocab", tuple(self.element_vocab))
        if min(self.layers, self.dim, self.heads, self.gaussian_kernels) < 1:
            raise ValueError("layers, dim, heads and gaussian_kernels must be positive")
        if self.dim % self.heads:
            raise ValueError("dim must be divisible by heads")
        if not self.d_max > 0:
            raise ValueError("d_max must be positive")

    def to_dict(self):
        d = asdict(self)
        d["element_vocab"] = list(self.element_vocab)
        return d


def gaussian_centers(cfg):
    """Kernel means evenly spaced on [0, d_max] and their common width."""
    g = cfg.gaussian_kernels
    mu = torch.linspace(0.0, cfg.d_max, g, dtype=DTYPE)
    sigma = cfg.d_max / (g - 1) if g > 1 else cfg.d_max
    return mu, sigma


def gaussian_basis(D, cfg):
    """Expand distances into ``G`` Gaussian features, values in (0, 1].

    ``D`` may be a numpy array or tensor of any leading shape; the result
    gains a trailing axis of length ``cfg.gaussian_kernels``.
    """
    D = torch.as_tensor(np.asarray(D) if not torch.is_tensor(D) else D, dtype=DTYPE)
    mu, sigma = gaussian_centers(cfg)
    return torch.exp(-((D.unsqueeze(-1) - mu) ** 2) / (2.0 * sigma**2))


class EncoderLayer(nn.Module):
    def __init__(self, cfg):
        super().__init__()
        self.norm1 = nn.LayerNorm(cfg.dim)
        self.attn = MultiHeadAttention(cfg.dim, cfg.heads)
        self.pair_bias = nn.Linear(cfg.gaussian_kernels, cfg.heads)
        # large enough that an untrained encoder is still clearly geometry-aware
        nn.init.normal_(self.pair_bias.weight, std=cfg.pair_bias_std)
        nn.init.zeros_(self.pair_bias.bias)
        self.norm2 = nn.LayerNorm(cfg.dim)
        self.ffn = FeedForward(cfg.dim, cfg.ffn_mult * cfg.dim)

    def forward(self, x, pair_feats, key_mask):
        bias = self.pair_bias(pair_feats).permute(0, 3, 1, 2)  # (B, H, N, N)
        x = x + self.attn(self.norm1(x), attn_bias=bias, mask=key_mask)
        return x + self.ffn(self.norm2(x))


class MolecularEncoder(nn.Module):
    """Maps a molecule with coordinates to per-atom representations."""

    def __init__(self, cfg=None):
        super().__init__()
        self.cfg = cfg or EncoderConfig()
        self.frozen = False
        self._index = {e: i for i, e in enumerate(self.cfg.element_vocab)}
        self.embed = nn.Embedding(len(self.cfg.element_vocab), self.cfg.dim)
        self.layers = nn.ModuleList(EncoderLayer(self.cfg) for _ in range(self.cfg.layers))
        self.final_norm = nn.LayerNorm(self.cfg.dim)

    @classmethod
    def build(cls, cfg=None, seed=0):
        with seeded(seed):
            return cls(cfg).to(DTYPE)

    def freeze(self, frozen=True):
        return freeze(self, frozen)

    def element_ids(self, mol):
        try:
            return [self._index[e] for e in mol.elements]
        except KeyError as exc:
            raise UnknownElement(f"element {exc.args[0]!r} not in encoder vocabulary") from None

    def forward(self, element_ids, distances, atom_mask):
        """Batched forward.

        Args:
            element_ids: (B, N) long.
            distances: (B, N, N) interatomic distances in Angstrom.
            atom_mask: (B, N) bool, False on padding.
        """
        pair = gaussian_basis(distances, self.cfg)
        key_mask = atom_mask[:, None, None, :]
        x = self.embed(element_ids)
        for layer in self.layers:
            x = layer(x, pair, key_mask)
        return self.final_norm(x)

    def featurize(self, mols):
        """Pad a list of molecules into (element_ids, distances, atom_mask)."""
        n = max(m.n_atoms for m in mols)
        ids = torch.zeros(len(mols), n, dtype=torch.long)
        dist = torch.zeros(len(mols), n, n, dtype=DTYPE)
        mask = torch.zeros(len(mols), n, dtype=torch.bool)
        for b, m in enumerate(mols):
            k = m.n_atoms
            ids[b, :k] = torch.tensor(self.element_ids(m))
            dist[b, :k, :k] = torch.from_numpy(pairwise_distances(m))
            mask[b, :k] = True
        return ids, dist, mask

    def encode_batch(self, mols):
        """Encode several molecules; returns padded ``(X, atom_mask)``."""
        ids, dist, mask = self.featurize(mols)
        return self(ids, dist, mask), mask

    def encode(self, mol):
        """Atomic representations of one molecule, shape (n_atoms, dim)."""
        X, _ = self.encode_batch([mol])
        return X[0]


def encode(enc, mol):
    return enc.encode(mol)
