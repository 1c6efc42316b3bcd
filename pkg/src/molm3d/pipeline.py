"""Three-stage training: alignment pretraining, generative alignment, instruction tuning.

Stage 1 trains the projector and its heads against the frozen encoder.
Stages 2 and 3 train the projector, the molecule-to-LM adapter and LoRA
matrices under conditional language modelling, with the encoder and the
base LM frozen. Every stage snapshots its frozen parameters and raises
:class:`FrozenViolation` if any of them moved.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import os
from dataclasses import asdict, dataclass, field, replace
from typing import Dict, List, Optional, Sequence

import numpy as np
import torch

from .errors import (
    DigestMismatch,
    EmptyInput,
    FrozenViolation,
    InvalidSchedule,
    MissingCheckpoint,
    NoDatasets,
    VersionUnsupported,
)
from .objectives import (
    BatchPair,
    EncodedBatch,
    conditional_lm_loss,
    pad_ids,
    stage1_losses,
)
from .textlm import BOS, EOS, LoraConfig, PROMPT_MODES, base_state, collate
from .system import MoLM, SystemConfig

log = logging.getLogger(__name__)

FORMAT_VERSION = 1
BLOB_NAMES = ("encoder.bin", "projector.bin", "lm.bin", "adapters.bin")


@dataclass
class StageConfig:
    stage: int = 1
    peak_lr: float = 1e-4
    min_lr: float = 5e-6
    warmup_steps: int = 1000
    weight_decay: float = 0.05
    max_steps: Optional[int] = None
    epochs: Optional[int] = None
    batch_size: int = 64
    seed: int = 0
    prompt_mode: str = "both"
    grad_accum: int = 1
    temperature: float = 0.1
    loss_weights: tuple = (1.0, 1.0, 1.0)
    val_every: int = 0
    score_prompt: bool = False

    def __post_init__(self):
        if self.stage not in (1, 2, 3):
            raise ValueError("stage must be 1, 2 or 3")
        if not 0 < self.min_lr <= self.peak_lr:
            raise InvalidSchedule("need 0 < min_lr <= peak_lr")
        if self.warmup_steps < 0 or self.weight_decay < 0 or self.batch_size < 1:
            raise ValueError("warmup_steps, weight_decay must be >= 0 and batch_size >= 1")
        if self.prompt_mode not in PROMPT_MODES:
            raise ValueError(f"prompt_mode must be one of {PROMPT_MODES}")
        if self.grad_accum < 1:
            raise ValueError("grad_accum must be >= 1")
        self.loss_weights = tuple(float(w) for w in self.loss_weights)

    def total_steps(self, n_examples):
        if self.max_steps is not None:
            return self.max_steps
        if self.epochs is None:
            raise ValueError("set max_steps or epochs")
        per_epoch = math.ceil(n_examples / (self.batch_size * self.grad_accum))
        return self.epochs * per_epoch

    def to_dict(self):
        d = asdict(self)
        d["loss_weights"] = list(self.loss_weights)
        return d


def default_stage_config(stage, finetune=False, **overrides):
    """Reference defaults: AdamW(wd 0.05), lr 1e-4 -> 5e-6, warmup 1000.

    ``finetune=True`` selects the shorter 200-step warmup used for
    task-specific fine-tuning runs.
    """
    base = StageConfig(stage=stage, batch_size=64 if stage == 1 else 16,
                       warmup_steps=200 if finetune else 1000)
    return replace(base, **overrides)


# ---------------------------------------------------------------------------
# schedule and mixing


def lr_at(step, total_steps, cfg):
    """Linear warmup from 0 to ``peak_lr``, then cosine decay to ``min_lr``."""
    w = cfg.warmup_steps
    if not 0 <= w < total_steps:
        raise InvalidSchedule(f"need 0 <= warmup_steps ({w}) < total_steps ({total_steps})")
    if not 0 <= step <= total_steps:
        raise InvalidSchedule(f"step {step} outside [0, {total_steps}]")
    if step < w:
        return cfg.peak_lr * step / w
    frac = 0.5 * (1.0 + math.cos(math.pi * (step - w) / (total_steps - w)))
    # weighted form hits peak_lr and min_lr exactly at the ends
    return cfg.peak_lr * frac + cfg.min_lr * (1.0 - frac)


def fourth_root_probs(sizes):
    if len(sizes) == 0:
        raise EmptyInput("no dataset sizes given")
    if any(s < 1 for s in sizes):
        raise ValueError("dataset sizes must be >= 1")
    roots = np.asarray(sizes, dtype=np.float64) ** 0.25
    return roots / roots.sum()


class MixtureSampler:
    """Draws dataset indices with probability proportional to size ** 0.25."""

    def __init__(self, sizes, seed):
        self.probs = fourth_root_probs(sizes)
        self.rng = np.random.default_rng(seed)

    def draw(self, n=None):
        return self.rng.choice(len(self.probs), size=n, p=self.probs)


class _EpochIterator:
    """Seeded reshuffling batches of indices; partial tail batches are kept."""

    def __init__(self, n, batch_size, seed, min_batch=1):
        self.n, self.bs, self.min_batch = n, batch_size, min_batch
        self.rng = np.random.default_rng(seed)
        self._queue: List[np.ndarray] = []

    def _refill(self):
        perm = self.rng.permutation(self.n)
        chunks = [perm[i:i + self.bs] for i in range(0, self.n, self.bs)]
        if len(chunks) > 1 and len(chunks[-1]) < self.min_batch:
            chunks[-2] = np.concatenate([chunks[-2], chunks.pop()])
        self._queue = chunks

    def next(self):
        if not self._queue:
            self._refill()
        return self._queue.pop(0)


# ---------------------------------------------------------------------------
# helpers


@dataclass
class Example:
    """One prompt/response pair about a molecule (coords needed unless smiles_only)."""

    mol: object
    prompt: str
    response: str
    task: str = "caption"


@dataclass
class StageResult:
    system: MoLM
    stage: int
    losses: List[float]
    log_rows: List[dict]
    val_log: List[dict] = field(default_factory=list)
    sampling_log: List[str] = field(default_factory=list)
    best_step: Optional[int] = None
    checkpoint: Optional[str] = None


def _snapshot(named):
    return {n: p.detach().clone() for n, p in named}


def _check_frozen(snapshot, named, what):
    current = dict(named)
    for n, before in snapshot.items():
        if not torch.equal(before, current[n].detach()):
            raise FrozenViolation(f"frozen parameter {what}.{n} changed during training")


def _optimizer(modules, cfg):
    decay, no_decay, seen = [], [], set()
    for m in modules:
        for p in m.parameters():
            if not p.requires_grad or id(p) in seen:
                continue
            seen.add(id(p))
            (no_decay if p.ndim < 2 else decay).append(p)
    groups = [{"params": decay, "weight_decay": cfg.weight_decay},
              {"params": no_decay, "weight_decay": 0.0}]
    return torch.optim.AdamW(groups, lr=cfg.peak_lr, betas=(0.9, 0.999), eps=1e-8)


def _encode_cached(system, mols, chunk=64):
    """Per-molecule encoder outputs (the encoder is frozen, so once is enough)."""
    out = []
    with torch.no_grad():
        for i in range(0, len(mols), chunk):
            X, mask = system.encoder.encode_batch(mols[i:i + chunk])
            for b in range(X.shape[0]):
                out.append(X[b, :int(mask[b].sum())].clone())
    return out


def pad_atoms(xs):
    n = max(x.shape[0] for x in xs)
    X = torch.zeros(len(xs), n, xs[0].shape[1], dtype=xs[0].dtype)
    mask = torch.zeros(len(xs), n, dtype=torch.bool)
    for i, x in enumerate(xs):
        X[i, :x.shape[0]] = x
        mask[i, :x.shape[0]] = True
    return X, mask


def _train_loop(modules, cfg, total, loss_fn):
    opt = _optimizer(modules, cfg)
    losses, rows = [], []
    for step in range(total):
        lr = lr_at(step, total, cfg)
        for g in opt.param_groups:
            g["lr"] = lr
        opt.zero_grad(set_to_none=True)
        step_loss, parts_acc = 0.0, {}
        for micro in range(cfg.grad_accum):
            loss, parts = loss_fn(step, micro)
            (loss / cfg.grad_accum).backward()
            step_loss += float(loss.detach()) / cfg.grad_accum
            for k, v in parts.items():
                parts_acc[k] = parts_acc.get(k, 0.0) + float(v.detach()) / cfg.grad_accum
        opt.step()
        losses.append(step_loss)
        rows.append({"step": step, "lr": lr, "loss": step_loss, **parts_acc})
    return losses, rows


def write_loss_csv(path, rows):
    keys = list(rows[0].keys()) if rows else ["step", "lr", "loss"]
    for r in rows:
        for k in r:
            if k not in keys:
                keys.append(k)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=keys, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})


# ---------------------------------------------------------------------------
# stage 1


def _as_batch_pair(data):
    if isinstance(data, BatchPair):
        return data
    mols, texts = zip(*data)
    return BatchPair(list(mols), list(texts))


def prepare_stage1(system, data):
    """Encode molecules once and tokenise texts into one :class:`EncodedBatch`."""
    batch = _as_batch_pair(data)
    xs = _encode_cached(system, list(batch.molecules))
    X, x_mask = pad_atoms(xs)
    toks = [system.vocab.encode_text(t) if isinstance(t, str) else list(t) for t in batch.texts]
    ids, mask = pad_ids(toks)
    cap, cap_mask = pad_ids([[BOS] + t + [EOS] for t in toks])
    return EncodedBatch(X, x_mask, ids, mask, cap, cap_mask)


def _trim(b: EncodedBatch):
    na = int(b.x_mask.sum(1).max())
    nt = int(b.text_mask.sum(1).max())
    nc = int(b.caption_mask.sum(1).max())
    return EncodedBatch(b.X[:, :na], b.x_mask[:, :na], b.text_ids[:, :nt], b.text_mask[:, :nt],
                        b.caption_ids[:, :nc], b.caption_mask[:, :nc])


def run_stage1(system: MoLM, data, cfg: StageConfig, out_dir=None):
    """Pretrain projector + heads with contrastive, matching and captioning losses."""
    if not getattr(system.encoder, "frozen", False):
        raise FrozenViolation("stage 1 requires a frozen encoder")
    full = prepare_stage1(system, data)
    n = len(full)
    if n < 2:
        raise EmptyInput("stage 1 needs at least 2 pairs")
    total = cfg.total_steps(n)
    enc_snap = _snapshot(system.encoder.named_parameters())
    it = _EpochIterator(n, cfg.batch_size, cfg.seed, min_batch=2)

    def loss_fn(step, micro):
        idx = it.next()
        batch = _trim(full.subset(idx))
        return stage1_losses(system.projector, system.heads, batch,
                             seed=cfg.seed * 1_000_003 + step * 31 + micro,
                             weights=cfg.loss_weights, temperature=cfg.temperature)

    system.train()
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(cfg.seed)
        losses, rows = _train_loop([system.projector, system.heads], cfg, total, loss_fn)
    system.eval()
    _check_frozen(enc_snap, system.encoder.named_parameters(), "encoder")
    result = StageResult(system, 1, losses, rows)
    if out_dir is not None:
        result.checkpoint = save_checkpoint(out_dir, system, stage=1, step=total, seed=cfg.seed,
                                            stage_cfg=cfg, metrics={"final_loss": losses[-1]})
        write_loss_csv(os.path.join(out_dir, "loss_log.csv"), rows)
    return result


@torch.no_grad()
def stage1_eval_losses(system, data, cfg):
    """Stage-1 loss terms on ``data`` in eval mode (one batch)."""
    system.eval()
    b = prepare_stage1(system, data)
    total, parts = stage1_losses(system.projector, system.heads, b, seed=cfg.seed,
                                 weights=cfg.loss_weights, temperature=cfg.temperature)
    return float(total), {k: float(v) for k, v in parts.items()}


# ---------------------------------------------------------------------------
# base LM pretraining


def pretrain_lm(lm, texts, steps=300, batch_size=16, peak_lr=3e-3, warmup_steps=None, seed=0):
    """Plain next-token training of a bare LM on ``BOS text EOS`` sequences.

    Stands in for starting from a pretrained language model. Only valid
    before adapters are attached; stages 2 and 3 then keep these weights
    frozen.
    """
    from .textlm import lora_modules

    if lora_modules(lm):
        raise FrozenViolation("base LM pretraining must run before LoRA is attached")
    if not texts:
        raise EmptyInput("no pretraining texts")
    cfg = StageConfig(stage=1, peak_lr=peak_lr, min_lr=peak_lr / 20,
                      warmup_steps=steps // 10 if warmup_steps is None else warmup_steps,
                      weight_decay=0.0, max_steps=steps, batch_size=batch_size, seed=seed)
    ids, mask = pad_ids([[BOS] + lm.vocab.encode_text(t) + [EOS] for t in texts])
    it = _EpochIterator(len(texts), batch_size, seed)
    for p in lm.parameters():
        p.requires_grad_(True)

    def loss_fn(step, micro):
        idx = torch.as_tensor(it.next())
        b_ids, b_mask = ids[idx], mask[idx]
        n = int(b_mask.sum(1).max())
        b_ids, b_mask = b_ids[:, :n], b_mask[:, :n]
        logits = lm(lm.embed_tokens(b_ids))
        return conditional_lm_loss(logits, token_ids=b_ids, response_mask=b_mask), {}

    lm.train()
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        losses, _ = _train_loop([lm], cfg, steps, loss_fn)
    lm.eval()
    return losses


# ---------------------------------------------------------------------------
# stages 2 and 3


class _GenerationData:
    def __init__(self, system, examples, mode, score_prompt=False):
        if not examples:
            raise NoDatasets("empty dataset")
        self.examples = list(examples)
        self.mode = mode
        self.score_prompt = score_prompt
        self.xs = None
        if mode != "smiles_only":
            self.xs = _encode_cached(system, [e.mol for e in self.examples])

    def __len__(self):
        return len(self.examples)

    def batch_loss(self, system, idx):
        idx = [int(i) for i in idx]
        qs = [None] * len(idx)
        if self.xs is not None:
            X, mask = pad_atoms([self.xs[i] for i in idx])
            q = system.projector.project(X, mask)
            qs = list(q)
        seqs = [system.compose(qs[j], self.examples[i].mol, self.examples[i].prompt,
                               self.examples[i].response, self.mode, self.score_prompt)
                for j, i in enumerate(idx)]
        emb, ids, rmask = collate(seqs)
        logits = system.lm(emb)
        return conditional_lm_loss(logits, token_ids=ids, response_mask=rmask)


@torch.no_grad()
def evaluate_lm_loss(system, examples, mode="both", batch_size=16):
    """Mean per-token response loss in eval mode (dropout off)."""
    was = system.training
    system.eval()
    data = _GenerationData(system, examples, mode)
    total, count = 0.0, 0
    for i in range(0, len(data), batch_size):
        idx = list(range(i, min(i + batch_size, len(data))))
        n_tok = 0
        for j in idx:
            e = data.examples[j]
            n_tok += len(system.vocab.encode_text(e.response)) + 1
        total += float(data.batch_loss(system, idx)) * n_tok
        count += n_tok
    system.train(was)
    return total / count


def _trainable_state(system):
    return {n: p.detach().clone() for n, p in system.named_parameters() if p.requires_grad}


def _load_trainable_state(system, state):
    params = dict(system.named_parameters())
    with torch.no_grad():
        for n, v in state.items():
            params[n].copy_(v)


def _generation_stage(system, sources: Dict[str, list], cfg, lora_cfg, val=None, out_dir=None):
    if not sources:
        raise NoDatasets("no instruction datasets given")
    if not getattr(system.encoder, "frozen", False):
        raise FrozenViolation(f"stage {cfg.stage} requires a frozen encoder")
    system.ensure_lora(lora_cfg or LoraConfig(), seed=cfg.seed)
    system.freeze_base_lm()
    names = list(sources)
    data = [_GenerationData(system, sources[k], cfg.prompt_mode, cfg.score_prompt)
            for k in names]
    sizes = [len(d) for d in data]
    total = cfg.total_steps(sum(sizes))
    its = [_EpochIterator(len(d), cfg.batch_size, cfg.seed + 17 * i) for i, d in enumerate(data)]
    sampler = MixtureSampler(sizes, cfg.seed + 1)
    sampling_log: List[str] = []

    enc_snap = _snapshot(system.encoder.named_parameters())
    lm_frozen = [(n, p) for n, p in system.lm.named_parameters() if not p.requires_grad]
    lm_snap = _snapshot(lm_frozen)

    val_log: List[dict] = []
    best = {"loss": math.inf, "step": None, "state": None}

    def validate(step):
        v = evaluate_lm_loss(system, val, cfg.prompt_mode)
        system.train()
        if v < best["loss"]:
            best.update(loss=v, step=step, state=_trainable_state(system))
        val_log.append({"step": step, "val_loss": v, "best_val_loss": best["loss"]})

    def loss_fn(step, micro):
        d = int(sampler.draw()) if len(data) > 1 else 0
        sampling_log.append(names[d])
        loss = data[d].batch_loss(system, its[d].next())
        if cfg.val_every and val and micro == cfg.grad_accum - 1 and (step + 1) % cfg.val_every == 0:
            validate_after.append(step + 1)
        return loss, {}

    validate_after: List[int] = []
    modules = [system.projector, system.mol_adapter, system.lm]
    system.train()
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(cfg.seed)
        opt = _optimizer(modules, cfg)
        losses, rows = [], []
        for step in range(total):
            lr = lr_at(step, total, cfg)
            for g in opt.param_groups:
                g["lr"] = lr
            opt.zero_grad(set_to_none=True)
            step_loss = 0.0
            for micro in range(cfg.grad_accum):
                loss, _ = loss_fn(step, micro)
                (loss / cfg.grad_accum).backward()
                step_loss += float(loss.detach()) / cfg.grad_accum
            opt.step()
            losses.append(step_loss)
            rows.append({"step": step, "lr": lr, "loss": step_loss})
            if validate_after and validate_after[-1] == step + 1:
                validate(step + 1)
    if best["state"] is not None:
        _load_trainable_state(system, best["state"])
    system.eval()
    _check_frozen(enc_snap, system.encoder.named_parameters(), "encoder")
    _check_frozen(lm_snap, system.lm.named_parameters(), "lm")
    result = StageResult(system, cfg.stage, losses, rows, val_log, sampling_log, best["step"])
    if out_dir is not None:
        metrics = {"final_loss": losses[-1]}
        if best["step"] is not None:
            metrics.update(best_val_loss=best["loss"], best_step=best["step"])
        result.checkpoint = save_checkpoint(out_dir, system, stage=cfg.stage, step=total,
                                            seed=cfg.seed, stage_cfg=cfg, metrics=metrics,
                                            lora_cfg=system.lm.lora_cfg)
        write_loss_csv(os.path.join(out_dir, "loss_log.csv"), rows)
        if val_log:
            write_loss_csv(os.path.join(out_dir, "val_log.csv"), val_log)
        if len(names) > 1:
            counts = {k: sampling_log.count(k) for k in names}
            with open(os.path.join(out_dir, "sampling_log.json"), "w", encoding="utf-8") as fh:
                json.dump({"datasets": names, "sizes": sizes,
                           "probs": fourth_root_probs(sizes).tolist(), "counts": counts},
                          fh, indent=2)
    return result


def run_stage2(system: MoLM, examples: Sequence[Example], cfg: StageConfig,
               lora_cfg: Optional[LoraConfig] = None, out_dir=None):
    """Conditional LM training of projector, adapter and LoRA on caption pairs."""
    return _generation_stage(system, {"stage2": list(examples)}, cfg, lora_cfg, out_dir=out_dir)


def run_stage3(system: MoLM, datasets, cfg: StageConfig, val: Optional[Sequence[Example]] = None,
               lora_cfg: Optional[LoraConfig] = None, out_dir=None):
    """Instruction tuning.

    ``datasets`` maps names to example lists (or is a list of lists). One
    dataset gives a specialist; several are mixed by fourth-root sampling.
    With ``val`` and ``cfg.val_every`` the lowest-validation-loss weights are
    kept.
    """
    if not datasets:
        raise NoDatasets("stage 3 needs at least one dataset")
    if not isinstance(datasets, dict):
        datasets = {f"dataset{i}": list(d) for i, d in enumerate(datasets)}
    return _generation_stage(system, datasets, cfg, lora_cfg, val=val, out_dir=out_dir)


# ---------------------------------------------------------------------------
# checkpoints


def config_digest(config):
    blob = json.dumps(config, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()


def _file_digest(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def save_checkpoint(path, system: MoLM, stage, step, seed, stage_cfg=None, metrics=None,
                    lora_cfg=None):
    os.makedirs(path, exist_ok=True)
    lora_cfg = lora_cfg if lora_cfg is not None else system.lm.lora_cfg
    config = {
        "system": system.cfg.to_dict(),
        "stage": None if stage_cfg is None else stage_cfg.to_dict(),
        "lora": None if lora_cfg is None else lora_cfg.to_dict(),
    }
    lora_state = {k: v for k, v in system.lm.state_dict().items() if ".lora_" in k}
    blobs = {
        "encoder.bin": system.encoder.state_dict(),
        "projector.bin": {"projector": system.projector.state_dict(),
                          "heads": system.heads.state_dict()},
        "lm.bin": base_state(system.lm),
        "adapters.bin": {"mol_adapter": system.mol_adapter.state_dict(), "lora": lora_state},
    }
    digests = {}
    for name, obj in blobs.items():
        fp = os.path.join(path, name)
        torch.save(obj, fp)
        digests[name] = _file_digest(fp)
    manifest = {
        "format_version": FORMAT_VERSION,
        "stage": stage,
        "step": step,
        "seed": seed,
        "config": config,
        "config_digest": config_digest(config),
        "metrics": metrics or {},
        "blobs": digests,
    }
    with open(os.path.join(path, "manifest.json"), "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
    return path


def read_manifest(path):
    fp = os.path.join(path, "manifest.json")
    if not os.path.isfile(fp):
        raise MissingCheckpoint(f"no checkpoint manifest at {fp}")
    with open(fp, encoding="utf-8") as fh:
        try:
            manifest = json.load(fh)
        except json.JSONDecodeError as exc:
            raise DigestMismatch(f"unreadable manifest: {exc}") from None
    if manifest.get("format_version") != FORMAT_VERSION:
        raise VersionUnsupported(f"checkpoint format {manifest.get('format_version')!r}")
    if config_digest(manifest.get("config")) != manifest.get("config_digest"):
        raise DigestMismatch("manifest config does not match its digest")
    return manifest


def load_checkpoint(path):
    """Rebuild the system from a checkpoint directory; returns (manifest, system)."""
    manifest = read_manifest(path)
    for name in BLOB_NAMES:
        fp = os.path.join(path, name)
        if not os.path.isfile(fp):
            raise MissingCheckpoint(f"missing blob {fp}")
        if _file_digest(fp) != manifest["blobs"].get(name):
            raise DigestMismatch(f"blob {name} does not match the manifest")
    config = manifest["config"]
    system = MoLM(SystemConfig.from_dict(config["system"]))
    if config["lora"] is not None:
        system.ensure_lora(LoraConfig(**config["lora"]))
        system.freeze_base_lm()

    def load(name):
        return torch.load(os.path.join(path, name), weights_only=True)

    system.encoder.load_state_dict(load("encoder.bin"))
    proj = load("projector.bin")
    system.projector.load_state_dict(proj["projector"])
    system.heads.load_state_dict(proj["heads"])
    lm_state = {}
    own = system.lm.state_dict()
    for k, v in load("lm.bin").items():
        # re-key base weights for layers that are wrapped by LoRA
        if k in own:
            lm_state[k] = v
        else:
            head, leaf = k.rsplit(".", 1)
            lm_state[f"{head}.base.{leaf}"] = v
    adapters = load("adapters.bin")
    lm_state.update(adapters["lora"])
    system.lm.load_state_dict(lm_state, strict=True)
    system.mol_adapter.load_state_dict(adapters["mol_adapter"])
    system.eval()
    return manifest, system


__all__ = [
    "StageConfig", "default_stage_config", "lr_at", "fourth_root_probs", "MixtureSampler",
    "Example", "StageResult", "run_stage1", "run_stage2", "run_stage3", "save_checkpoint",
    "load_checkpoint", "read_manifest", "pretrain_lm", "evaluate_lm_loss", "stage1_eval_losses", "config_digest",
]
