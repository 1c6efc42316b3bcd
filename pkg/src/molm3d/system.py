"""The assembled model: encoder -> projector -> adapter -> language model."""

from __future__ import annotations

from dataclasses import dataclass, field

import torch
from torch import nn

from .encoder import EncoderConfig, MolecularEncoder
from .layers import DTYPE, freeze, seeded
from .projector import AlignmentHeads, ProjectorConfig, QFormer
from .textlm import (
    CausalLM,
    LMConfig,
    LoraConfig,
    attach_lora,
    compose_mixed_sequence,
    greedy_generate,
    lora_modules,
)


@dataclass(frozen=True)
class SystemConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    projector: ProjectorConfig = field(default_factory=ProjectorConfig)
    lm: LMConfig = field(default_factory=LMConfig)
    seed: int = 0

    def __post_init__(self):
        if self.projector.mol_dim != self.encoder.dim:
            raise ValueError("projector.mol_dim must equal encoder.dim")

    def to_dict(self):
        return {"encoder": self.encoder.to_dict(), "projector": self.projector.to_dict(),
                "lm": self.lm.to_dict(), "seed": self.seed}

    @classmethod
    def from_dict(cls, d):
        return cls(EncoderConfig(**d["encoder"]), ProjectorConfig(**d["projector"]),
                   LMConfig(**d["lm"]), d["seed"])


def tiny_config(enc_dim=32, proj_dim=32, lm_dim=32, heads=4, layers=2, num_queries=8,
                max_seq_len=256, seed=0, gaussian_kernels=16):
    return SystemConfig(
        EncoderConfig(layers=layers, dim=enc_dim, heads=heads, gaussian_kernels=gaussian_kernels),
        ProjectorConfig(num_queries=num_queries, blocks=layers, dim=proj_dim, heads=heads,
                        mol_dim=enc_dim, embed_dim=proj_dim),
        LMConfig(layers=layers, dim=lm_dim, heads=heads, max_seq_len=max_seq_len),
        seed,
    )


class MoLM(nn.Module):
    """All trainable pieces plus convenience wrappers for prompting.

    The encoder is frozen on construction and stays frozen in every stage.
    """

    def __init__(self, cfg: SystemConfig):
        super().__init__()
        self.cfg = cfg
        s = cfg.seed
        self.encoder = MolecularEncoder.build(cfg.encoder, seed=s)
        self.projector = QFormer.build(cfg.projector, seed=s + 1)
        self.heads = AlignmentHeads.build(cfg.projector, seed=s + 2)
        self.lm = CausalLM.build(cfg.lm, seed=s + 3)
        with seeded(s + 4):
            self.mol_adapter = nn.Linear(cfg.projector.dim, cfg.lm.dim).to(DTYPE)
        self.encoder.freeze()

    @property
    def vocab(self):
        return self.lm.vocab

    @property
    def has_lora(self):
        return bool(lora_modules(self.lm))

    def ensure_lora(self, lora_cfg: LoraConfig, seed=0):
        if not self.has_lora:
            attach_lora(self.lm, lora_cfg, seed=seed)
        return self

    def freeze_base_lm(self):
        for name, p in self.lm.named_parameters():
            if ".lora_" not in name:
                p.requires_grad_(False)

    @torch.no_grad()
    def atomic_representations(self, mols):
        return self.encoder.encode_batch(list(mols))

    def mol_tokens(self, X, x_mask=None):
        return self.projector.project(X, x_mask)

    def compose(self, q, mol, task_text, response=None, mode="both", score_prompt=False):
        """Mixed sequence for one molecule; ``q`` is its (K, d) query output or None."""
        use_mol = mode in ("both", "mol_only")
        use_smiles = mode in ("both", "smiles_only")
        return compose_mixed_sequence(
            self.lm, q if use_mol else None, mol.smiles if use_smiles else None, task_text,
            response, mode=mode, adapter=self.mol_adapter, score_prompt=score_prompt,
        )

    @torch.no_grad()
    def generate(self, mol, task_text, mode="both", max_new=64):
        was_training = self.training
        self.eval()
        try:
            q = None
            if mode in ("both", "mol_only"):
                X = self.encoder.encode(mol)
                q = self.projector.project(X)
            prompt = self.compose(q, mol, task_text, None, mode)
            return greedy_generate(self.lm, prompt, max_new)
        finally:
            self.train(was_training)

    def frozen_parameters(self):
        return {f"{n}": p for n, p in self.named_parameters() if not p.requires_grad}


def build_system(cfg: SystemConfig | None = None) -> MoLM:
    return MoLM(cfg or SystemConfig())


def set_frozen(module, flag=True):
    return freeze(module, flag)
