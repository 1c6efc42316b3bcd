"""Command-line entry point: ``python3 -m molm3d <command> ...``.

Commands::

    dataset build  MOLECULES.jsonl --out DIR
    dataset split  RECORDS.jsonl --out DIR
    dataset enrich MOLECULES.jsonl --out DIR
    train stage1   MOLECULES.jsonl --out CKPT [--init CKPT]
    train stage2   MOLECULES.jsonl INSTRUCTIONS.jsonl --init CKPT --out CKPT
    train stage3   MOLECULES.jsonl DATASET.jsonl [DATASET.jsonl ...] --init CKPT --out CKPT
    eval retrieval CKPT MOLECULES.jsonl --out DIR
    eval caption   CKPT MOLECULES.jsonl INSTRUCTIONS.jsonl --out DIR
    eval qa        CKPT MOLECULES.jsonl INSTRUCTIONS.jsonl --out DIR
    generate       CKPT MOLECULE_FILE PROMPT

Settings come from an optional INI-style ``--config`` file; flags override
it. Exit codes: 0 ok, 2 usage, 3 data error, 4 state error.
"""

from __future__ import annotations

import argparse
import configparser
import dataclasses
import json
import logging
import os
import sys

import torch

from .errors import DataError, MissingCheckpoint, SchemaViolation, StateError
from .textlm import PROMPT_MODES

log = logging.getLogger("molm3d")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_STATE = 0, 2, 3, 4

# section -> key -> parser
SCHEMA = {
    "run": {"seed": int},
    "model": {k: int for k in ("enc_dim", "proj_dim", "lm_dim", "heads", "layers",
                               "num_queries", "max_seq_len", "gaussian_kernels")},
    "train": {
        "peak_lr": float, "min_lr": float, "warmup_steps": int, "weight_decay": float,
        "max_steps": int, "epochs": int, "batch_size": int, "prompt_mode": str,
        "grad_accum": int, "temperature": float, "loss_weights": str, "val_every": int,
        "valid": str, "score_prompt": str, "lora_r": int, "lora_alpha": float,
        "lora_dropout": float, "lm_pretrain_steps": int, "lm_pretrain_lr": float,
    },
    "dataset": {"ratios": str, "descriptive_count": int},
    "eval": {"k": int, "batch_size": int, "max_new": int, "prompt_mode": str,
             "rerank_mtm": int},
}


class UsageError(Exception):
    pass


def _floats(text):
    return tuple(float(x) for x in text.replace(",", " ").split())


def _bool(text):
    low = str(text).strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise UsageError(f"not a boolean: {text!r}")


class RunConfig:
    """Typed view over the config file plus flag overrides."""

    def __init__(self, path=None):
        self.values = {s: {} for s in SCHEMA}
        if path is None:
            return
        parser = configparser.ConfigParser(interpolation=None)
        parser.optionxform = str
        try:
            with open(path, encoding="utf-8") as fh:
                parser.read_file(fh)
        except OSError as exc:
            raise UsageError(f"cannot read config: {exc}") from None
        except configparser.Error as exc:
            raise UsageError(f"bad config file: {exc}") from None
        for section in parser.sections():
            if section not in SCHEMA:
                raise UsageError(f"unknown config section [{section}]")
            for key, raw in parser.items(section):
                self.set(section, key, raw)

    def set(self, section, key, raw):
        if key not in SCHEMA[section]:
            raise UsageError(f"unknown config key {key!r} in [{section}]")
        try:
            self.values[section][key] = SCHEMA[section][key](raw)
        except ValueError:
            raise UsageError(f"bad value for {section}.{key}: {raw!r}") from None

    def get(self, section, key, default=None):
        return self.values[section].get(key, default)

    def section(self, name):
        return dict(self.values[name])

    def write(self, out_dir, extra=None):
        os.makedirs(out_dir, exist_ok=True)
        parser = configparser.ConfigParser(interpolation=None)
        parser.optionxform = str
        for s, kv in self.values.items():
            if kv:
                parser[s] = {k: str(v) for k, v in sorted(kv.items())}
        for s, kv in (extra or {}).items():
            parser[s] = {k: str(v) for k, v in sorted(kv.items())}
        with open(os.path.join(out_dir, "resolved_config.ini"), "w", encoding="utf-8",
                  newline="\n") as fh:
            parser.write(fh)


def num_workers():
    raw = os.environ.get("MOLM_NUM_WORKERS", "0")
    try:
        n = int(raw)
    except ValueError:
        n = -1
    if n < 0:
        raise UsageError(f"MOLM_NUM_WORKERS must be an integer >= 0, got {raw!r}")
    return n


# ---------------------------------------------------------------------------
# argument parsing


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", metavar="DIR")

    p = argparse.ArgumentParser(prog="molm3d", description=__doc__.split("\n")[0])
    sub = p.add_subparsers(dest="command", required=True)

    ds = sub.add_parser("dataset", help="build, split or enrich JSONL datasets")
    ds_sub = ds.add_subparsers(dest="action", required=True)
    for name in ("build", "split", "enrich"):
        a = ds_sub.add_parser(name, parents=[common])
        a.add_argument("input")

    tr = sub.add_parser("train", help="run one training stage")
    tr_sub = tr.add_subparsers(dest="action", required=True)
    for name in ("stage1", "stage2", "stage3"):
        a = tr_sub.add_parser(name, parents=[common])
        a.add_argument("molecules")
        if name != "stage1":
            a.add_argument("datasets", nargs="+")
        a.add_argument("--init", metavar="CKPT", help="checkpoint to start from")
        a.add_argument("--prompt-mode", choices=PROMPT_MODES)
        a.add_argument("--batch-size", type=int)

    ev = sub.add_parser("eval", help="evaluate a checkpoint")
    ev_sub = ev.add_subparsers(dest="action", required=True)
    for name in ("retrieval", "caption", "qa"):
        a = ev_sub.add_parser(name, parents=[common])
        a.add_argument("checkpoint")
        a.add_argument("molecules")
        if name != "retrieval":
            a.add_argument("instructions")
        a.add_argument("--batch-size", type=int)
        a.add_argument("--k", type=int)
        a.add_argument("--prompt-mode", choices=PROMPT_MODES)
        a.add_argument("--max-new", type=int)
        a.add_argument("--rerank-mtm", type=int, metavar="TOPK")

    g = sub.add_parser("generate", parents=[common], help="greedy decoding for one molecule")
    g.add_argument("checkpoint")
    g.add_argument("molecule", help=".xyz file or molecule JSONL (first record)")
    g.add_argument("prompt")
    g.add_argument("--prompt-mode", choices=PROMPT_MODES)
    g.add_argument("--max-new", type=int)
    return p


def _resolve(args):
    cfg = RunConfig(args.config)
    if args.seed is not None:
        cfg.set("run", "seed", str(args.seed))
    section = "train" if args.command == "train" else "eval"
    for flag, key in (("batch_size", "batch_size"), ("prompt_mode", "prompt_mode")):
        v = getattr(args, flag, None)
        if v is not None:
            cfg.set(section, key, str(v))
    for flag in ("k", "max_new", "rerank_mtm"):
        v = getattr(args, flag, None)
        if v is not None:
            cfg.set("eval", flag, str(v))
    return cfg


# ---------------------------------------------------------------------------
# helpers


def _require_file(path):
    if not os.path.isfile(path):
        raise DataError(f"input file not found: {path}")


def _read(path, kind):
    from .moit import InstructionRecord, MoleculeRecord, read_jsonl

    _require_file(path)
    records = read_jsonl(path)
    typ = MoleculeRecord if kind == "molecule" else InstructionRecord
    for n, r in enumerate(records, start=1):
        if not isinstance(r, typ):
            raise SchemaViolation(f"expected {kind} records in {path}", line=n)
    return records


def _molecules_by_id(path):
    return {r.id: r.to_molecule() for r in _read(path, "molecule")}


def _examples(instructions, mols):
    from .moit import lm_text
    from .pipeline import Example

    out = []
    for r in instructions:
        if r.mol_id not in mols:
            raise DataError(f"instruction refers to unknown molecule {r.mol_id!r}")
        out.append(Example(mols[r.mol_id], lm_text(r.prompt), lm_text(r.response), r.task))
    return out


def _load(path):
    from .pipeline import load_checkpoint

    if not path:
        raise MissingCheckpoint("this command needs an upstream checkpoint (--init)")
    return load_checkpoint(path)


def _emit(obj):
    sys.stdout.write(json.dumps(obj, indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# commands


def cmd_dataset(args, cfg):
    from . import moit

    out = args.out or "."
    seed = cfg.get("run", "seed", 0)
    if args.action == "build":
        recs = _read(args.input, "molecule")
        count = cfg.get("dataset", "descriptive_count", 5)
        instr = moit.build_instructions(recs, seed=seed, descriptive_count=count)
        caps = moit.build_captions(recs)
        os.makedirs(out, exist_ok=True)
        moit.write_jsonl(os.path.join(out, "instructions.jsonl"), instr)
        moit.write_jsonl(os.path.join(out, "captions.jsonl"), caps)
        summary = moit.summarize(instr)
        summary["captions"] = len(caps)
    elif args.action == "split":
        _require_file(args.input)
        recs = moit.read_jsonl(args.input)
        ratios = _floats(cfg.get("dataset", "ratios", "0.8,0.1,0.1"))
        key = [getattr(r, "mol_id", None) or r.id for r in recs]
        parts = moit.deterministic_split(sorted(set(key)), ratios, seed)
        os.makedirs(out, exist_ok=True)
        summary = {}
        for name, ids in zip(("train", "valid", "test"), parts):
            chosen = [r for r, k in zip(recs, key) if k in ids]
            moit.write_jsonl(os.path.join(out, f"{name}.jsonl"), chosen)
            summary[name] = len(chosen)
    else:
        recs = _read(args.input, "molecule")
        enriched = moit.enrich_records(recs)
        os.makedirs(out, exist_ok=True)
        moit.write_jsonl(os.path.join(out, "enriched.jsonl"), enriched)
        summary = {"records": len(enriched),
                   "enriched": sum(1 for r in enriched if r.description)}
    cfg.write(out)
    with open(os.path.join(out, "summary.json"), "w", encoding="utf-8", newline="\n") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")
    _emit(summary)
    return EXIT_OK


def _stage_config(stage, cfg):
    from .pipeline import StageConfig

    t = cfg.section("train")
    kw = {k: t[k] for k in ("peak_lr", "min_lr", "warmup_steps", "weight_decay", "max_steps",
                            "epochs", "batch_size", "prompt_mode", "grad_accum", "temperature",
                            "val_every") if k in t}
    if "loss_weights" in t:
        kw["loss_weights"] = _floats(t["loss_weights"])
    if "score_prompt" in t:
        kw["score_prompt"] = _bool(t["score_prompt"])
    if "max_steps" not in kw and "epochs" not in kw:
        kw["epochs"] = 1
    kw.setdefault("batch_size", 64 if stage == 1 else 16)
    return StageConfig(stage=stage, seed=cfg.get("run", "seed", 0), **kw)


def _lora_config(cfg):
    from .textlm import LoraConfig

    t = cfg.section("train")
    kw = {}
    for src, dst in (("lora_r", "r"), ("lora_alpha", "alpha"), ("lora_dropout", "dropout")):
        if src in t:
            kw[dst] = t[src]
    return LoraConfig(**kw)


def cmd_train(args, cfg):
    from .moit import lm_text
    from .pipeline import pretrain_lm, run_stage1, run_stage2, run_stage3
    from .system import MoLM, tiny_config

    if not args.out:
        raise UsageError("--out is required for training")
    stage = int(args.action[-1])
    scfg = _stage_config(stage, cfg)
    seed = scfg.seed
    if stage == 1:
        recs = _read(args.molecules, "molecule")
        pairs = [(r.to_molecule(), lm_text(r.description)) for r in recs if r.description]
        if len(pairs) < 2:
            raise DataError("stage 1 needs at least two molecules with descriptions")
        if args.init:
            _, system = _load(args.init)
        else:
            system = MoLM(tiny_config(seed=seed, **cfg.section("model")))
            # stand-in for a pretrained LM: fit the base LM to the descriptions
            steps = cfg.get("train", "lm_pretrain_steps", 0)
            if steps > 0:
                pretrain_lm(system.lm, [t for _, t in pairs], steps=steps,
                            peak_lr=cfg.get("train", "lm_pretrain_lr", 3e-3), seed=seed)
        result = run_stage1(system, pairs, scfg, out_dir=args.out)
    else:
        _, system = _load(args.init)
        mols = _molecules_by_id(args.molecules)
        sets = {os.path.splitext(os.path.basename(p))[0]: _examples(_read(p, "instruction"), mols)
                for p in args.datasets}
        if stage == 2:
            examples = [e for v in sets.values() for e in v]
            result = run_stage2(system, examples, scfg, _lora_config(cfg), out_dir=args.out)
        else:
            val = None
            if cfg.get("train", "valid"):
                val = _examples(_read(cfg.get("train", "valid"), "instruction"), mols)
            result = run_stage3(system, sets, scfg, val=val, lora_cfg=_lora_config(cfg),
                                out_dir=args.out)
    cfg.write(args.out, {"resolved": {"stage": stage, "steps": len(result.losses),
                                      "init": args.init or ""}})
    _emit({"stage": stage, "steps": len(result.losses), "final_loss": result.losses[-1],
           "checkpoint": args.out})
    return EXIT_OK


def _generate_all(system, examples, mode, max_new):
    return [system.generate(e.mol, e.prompt, mode=mode, max_new=max_new) for e in examples]


def cmd_eval(args, cfg):
    from . import evalsuite
    from .moit import lm_text

    _, system = _load(args.checkpoint)
    report = {"retrieval": None, "caption": None, "qa": None}
    mode = cfg.get("eval", "prompt_mode", "both")
    max_new = cfg.get("eval", "max_new", 128)
    if args.action == "retrieval":
        recs = [r for r in _read(args.molecules, "molecule") if r.description]
        if not recs:
            raise DataError("no molecules with descriptions to retrieve")
        mols = [r.to_molecule() for r in recs]
        texts = [lm_text(r.description) for r in recs]
        S = evalsuite.similarity_matrix(system, mols, texts)
        k = cfg.get("eval", "k", 20)
        rep = evalsuite.retrieval_report(
            evalsuite.SimilarityMatrix(S, [r.id for r in recs], [r.id for r in recs]), k=k,
            batch_size=cfg.get("eval", "batch_size", 64), seed=cfg.get("run", "seed", 0))
        top = cfg.get("eval", "rerank_mtm")
        if top:
            S2 = evalsuite.rerank_with_matching(system, mols, texts, S, top)
            rep["M2T_reranked"] = evalsuite.retrieval_report(
                S2, k=k, batch_size=cfg.get("eval", "batch_size", 64),
                seed=cfg.get("run", "seed", 0))["M2T"]
        report["retrieval"] = rep
    else:
        mols = _molecules_by_id(args.molecules)
        instr = _read(args.instructions, "instruction")
        if args.action == "qa":
            instr = [r for r in instr if r.task == "computed_qa"]
        if not instr:
            raise DataError("no instruction records to evaluate")
        examples = _examples(instr, mols)
        outputs = _generate_all(system, examples, mode, max_new)
        if args.action == "caption":
            report["caption"] = evalsuite.caption_report(outputs, [e.response for e in examples])
        else:
            pairs = [evalsuite.QAPair(evalsuite.extract_numeric(e.response), o)
                     for e, o in zip(examples, outputs)]
            report["qa"] = evalsuite.qa_report(pairs)
        if args.out:
            os.makedirs(args.out, exist_ok=True)
            with open(os.path.join(args.out, "generations.jsonl"), "w", encoding="utf-8",
                      newline="\n") as fh:
                for r, o in zip(instr, outputs):
                    fh.write(json.dumps({"mol_id": r.mol_id, "prompt": r.prompt,
                                         "reference": r.response, "generated": o},
                                        ensure_ascii=False) + "\n")
    if args.out:
        cfg.write(args.out)
        with open(os.path.join(args.out, "report.json"), "w", encoding="utf-8",
                  newline="\n") as fh:
            json.dump(report, fh, indent=2, sort_keys=True)
            fh.write("\n")
    _emit(report)
    return EXIT_OK


def _read_molecule(path):
    from .molrepr import load_xyz, parse_smiles

    _require_file(path)
    if path.endswith(".xyz"):
        mol = load_xyz(path)
        with open(path, encoding="utf-8") as fh:
            fh.readline()
            comment = fh.readline().strip()
        try:
            smiles = parse_smiles(comment).smiles if comment else None
        except DataError:
            smiles = None
        return dataclasses.replace(mol, smiles=comment if smiles else None)
    recs = _read(path, "molecule")
    if not recs:
        raise DataError(f"no molecule records in {path}")
    return recs[0].to_molecule()


def cmd_generate(args, cfg):
    from .moit import lm_text

    manifest, system = _load(args.checkpoint)
    mol = _read_molecule(args.molecule)
    mode = cfg.get("eval", "prompt_mode", "both")
    max_new = cfg.get("eval", "max_new", 128)
    if max_new < 0:
        raise UsageError("--max-new must be >= 0")
    text = system.generate(mol, lm_text(args.prompt), mode=mode, max_new=max_new)
    if args.out:
        cfg.write(args.out)
    sys.stdout.write(text + ("\n" if text else ""))
    return EXIT_OK


COMMANDS = {"dataset": cmd_dataset, "train": cmd_train, "eval": cmd_eval,
            "generate": cmd_generate}


def main(argv=None):
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        num_workers()
        cfg = _resolve(args)
        torch.set_num_threads(1)
        return COMMANDS[args.command](args, cfg)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except StateError as exc:
        print(f"state error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_STATE
    except DataError as exc:
        print(f"data error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
