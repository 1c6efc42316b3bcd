"""Instruction dataset construction: records, templates, splits and JSONL I/O.

Molecule records carry optional geometry, a free-text description and up to
eight computed properties. They are rendered into instruction records of
three kinds: numeric property questions (``computed_qa``), questions about
the description (``descriptive_qa``) and captioning (``caption``).
"""

from __future__ import annotations

import hashlib
import json
import random
import re
import unicodedata
from collections import Counter
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Mapping, Optional, Protocol, Sequence, Tuple

import numpy as np

from .errors import (
    BadRatios,
    MissingProperty,
    NoDescription,
    SchemaViolation,
)
from .molrepr import Molecule, molecule_from_arrays, parse_smiles

PROPERTIES = ("molecular_weight", "logp", "tpsa", "complexity",
              "homo", "lumo", "homo_lumo_gap", "scf_energy")

UNITS = {
    "molecular_weight": "g/mol",
    "logp": "",
    "tpsa": "Å²",
    "complexity": "",
    "homo": "eV",
    "lumo": "eV",
    "homo_lumo_gap": "eV",
    "scf_energy": "10⁴ eV",
}

# the character LM only speaks printable ASCII
_ASCII = {"Å": "A", "²": "^2", "³": "^3", "⁴": "^4", "°": " deg", "±": "+/-", "–": "-",
          "\u2014": "-", "‘": "'", "’": "'", "“": '"', "”": '"', "×": "x", "µ": "u", "μ": "u"}

DISPLAY_NAMES = {
    "molecular_weight": "Molecular Weight",
    "logp": "LogP",
    "tpsa": "TPSA",
    "complexity": "Complexity",
    "homo": "HOMO",
    "lumo": "LUMO",
    "homo_lumo_gap": "HOMO-LUMO Gap",
    "scf_energy": "SCF Energy",
}

# decimals, or ("sig", n) for significant digits
PRECISION = {
    "molecular_weight": 2, "logp": 2, "tpsa": 2, "complexity": 0,
    "homo": 3, "lumo": 3, "homo_lumo_gap": 3, "scf_energy": ("sig", 4),
}

TASKS = ("computed_qa", "descriptive_qa", "caption")

ANSWER_CLAUSE = "If uncertain, provide an estimate. Respond with the numerical value only."

_QUESTIONS = {
    "molecular_weight": (
        "What is the molecular weight of this molecule?",
        "How heavy is one mole of this compound in grams?",
        "Report the molar mass of the given molecule.",
    ),
    "logp": (
        "What is the LogP of this molecule?",
        "Estimate the octanol-water partition coefficient (LogP) of this compound.",
        "How lipophilic is this molecule, expressed as LogP?",
    ),
    "tpsa": (
        "What is the topological polar surface area of this molecule?",
        "Give the TPSA of the compound.",
        "How large is the polar surface area (TPSA) of this structure?",
    ),
    "complexity": (
        "What is the structural complexity score of this molecule?",
        "Rate the complexity of this compound.",
        "Give the complexity value computed for this structure.",
    ),
    "homo": (
        "What is the HOMO energy of this molecule?",
        "Give the energy of the highest occupied molecular orbital for this compound.",
        "At what energy does the HOMO of this structure lie?",
    ),
    "lumo": (
        "What is the LUMO energy of this molecule?",
        "Give the energy of the lowest unoccupied molecular orbital for this compound.",
        "At what energy does the LUMO of this structure lie?",
    ),
    "homo_lumo_gap": (
        "What is the HOMO-LUMO gap of this molecule?",
        "How far apart are the frontier orbitals of this compound in energy?",
        "Report the energy gap between HOMO and LUMO for this structure.",
    ),
    "scf_energy": (
        "What is the SCF energy of this molecule?",
        "Give the self-consistent-field total energy of this compound.",
        "Report the converged SCF energy for this structure.",
    ),
}

PROMPT_TEMPLATES: Dict[str, Tuple[str, ...]] = {
    k: tuple(f"{q} {ANSWER_CLAUSE}" for q in v) for k, v in _QUESTIONS.items()
}

RESPONSE_TEMPLATE = "The {name} for the input molecule is {value}{unit}."

CAPTION_PROMPT = "Describe this molecule."

DESCRIPTIVE_QUESTION = "What is fact {index} about this molecule?"

# request text for a live enrichment client; the offline stub ignores it
ENRICHMENT_PROMPT = (
    "Rewrite the following description of the molecule {name} (SMILES: {smiles}) "
    "so that it is fluent and self-contained. Keep every stated fact, add nothing "
    "that is not supported by the text, and refer to the molecule by name.\n\n"
    "Description: {description}"
)


def format_value(prop, value):
    prec = PRECISION[prop]
    if isinstance(prec, tuple):
        return f"{value:.{prec[1]}g}"
    return f"{value:.{prec}f}"


def quantize(prop, value):
    """Round ``value`` to the property's printed precision (idempotent)."""
    if prop not in PRECISION:
        raise MissingProperty(f"unknown property {prop!r}")
    return float(format_value(prop, float(value)))


def lm_text(text):
    """Printable-ASCII form of ``text`` for the character LM.

    Records keep their original units (``Å²``, ``10⁴ eV``); only text fed
    to the LM is transliterated, e.g. ``Å²`` becomes ``A^2``.
    """
    out = []
    for ch in text:
        if " " <= ch <= "~":
            out.append(ch)
        elif ch in _ASCII:
            out.append(_ASCII[ch])
        elif ch in "\t\n\r":
            out.append(" ")
        else:
            base = unicodedata.normalize("NFKD", ch)
            out.append("".join(c for c in base if " " <= c <= "~") or "?")
    return "".join(out)


# ---------------------------------------------------------------------------
# records


@dataclass(frozen=True)
class PropertyValue:
    value: float
    unit: str


@dataclass
class MoleculeRecord:
    id: str
    smiles: str
    elements: Optional[List[str]] = None
    coords: Optional[List[List[float]]] = None
    description: Optional[str] = None
    properties: Dict[str, PropertyValue] = field(default_factory=dict)

    def __post_init__(self):
        if (self.elements is None) != (self.coords is None):
            raise SchemaViolation("elements and coords must be given together")
        if self.elements is not None:
            self.elements = [str(e) for e in self.elements]
            self.coords = [[float(x) for x in row] for row in self.coords]
            if len(self.elements) != len(self.coords) or any(len(r) != 3 for r in self.coords):
                raise SchemaViolation("coords must be one xyz row per element")
        props = {}
        for name, pv in (self.properties or {}).items():
            if name not in UNITS:
                raise SchemaViolation(f"unknown property {name!r}")
            if isinstance(pv, Mapping):
                pv = PropertyValue(pv["value"], pv["unit"])
            elif not isinstance(pv, PropertyValue):
                pv = PropertyValue(pv, UNITS[name])
            if pv.unit != UNITS[name]:
                raise SchemaViolation(f"{name} must be in {UNITS[name]!r}, got {pv.unit!r}")
            props[name] = PropertyValue(quantize(name, pv.value), pv.unit)
        self.properties = {k: props[k] for k in PROPERTIES if k in props}

    def to_molecule(self) -> Molecule:
        if self.elements is None:
            return parse_smiles(self.smiles, mol_id=self.id)
        return molecule_from_arrays(self.id, self.elements, np.asarray(self.coords), self.smiles)

    def to_json(self):
        d = {"id": self.id, "smiles": self.smiles}
        if self.elements is not None:
            d["elements"] = list(self.elements)
            d["coords"] = [list(r) for r in self.coords]
        if self.description is not None:
            d["description"] = self.description
        if self.properties:
            d["properties"] = {k: {"value": v.value, "unit": v.unit}
                               for k, v in self.properties.items()}
        return d


@dataclass(frozen=True)
class InstructionRecord:
    mol_id: str
    task: str
    prompt: str
    response: str
    property: Optional[str] = None

    def __post_init__(self):
        if self.task not in TASKS:
            raise SchemaViolation(f"unknown task {self.task!r}")
        if self.task == "computed_qa" and self.property not in UNITS:
            raise SchemaViolation("computed_qa records need a known property")

    def to_json(self):
        d = {"mol_id": self.mol_id, "task": self.task}
        if self.property is not None:
            d["property"] = self.property
        d["prompt"] = self.prompt
        d["response"] = self.response
        return d


def molecule_record(mol: Molecule, description=None, properties=None):
    """Record for a parsed/embedded :class:`Molecule`."""
    elements = coords = None
    if mol.coords is not None:
        elements = list(mol.elements)
        coords = mol.coords.tolist()
    return MoleculeRecord(mol.id, mol.smiles or "", elements, coords, description,
                          dict(properties or {}))


# ---------------------------------------------------------------------------
# rendering


def render_computed_qa(rec: MoleculeRecord, prop, variant_seed=0) -> InstructionRecord:
    if prop not in rec.properties:
        raise MissingProperty(f"record {rec.id} has no {prop!r}")
    pv = rec.properties[prop]
    rng = random.Random(f"{variant_seed}:{rec.id}:{prop}")
    prompt = rng.choice(PROMPT_TEMPLATES[prop])
    unit = pv.unit
    response = RESPONSE_TEMPLATE.format(name=DISPLAY_NAMES[prop],
                                        value=format_value(prop, pv.value),
                                        unit=f" {unit}" if unit else "")
    return InstructionRecord(rec.id, "computed_qa", prompt, response, prop)


class EnricherClient(Protocol):
    def enrich(self, name: str, smiles: str, description: str) -> str: ...


_SENTENCE = re.compile(r"(?<=[.!?])\s+")


def split_sentences(text):
    return [s.strip() for s in _SENTENCE.split(text.strip()) if s.strip()]


class OfflineEnricher:
    """Deterministic stand-in for a live rewriting service.

    ``enrich`` only normalises whitespace; ``qa_pairs`` turns sentence ``i``
    of a description into one question/answer pair.
    """

    prompt_template = ENRICHMENT_PROMPT

    def enrich(self, name, smiles, description):
        return " ".join(description.split())

    def qa_pairs(self, description, count=5):
        sents = split_sentences(description)[:count]
        return [(DESCRIPTIVE_QUESTION.format(index=i + 1), s) for i, s in enumerate(sents)]


def render_descriptive_qa(rec: MoleculeRecord, enricher=None, count=5) -> List[InstructionRecord]:
    if not rec.description:
        raise NoDescription(f"record {rec.id} has no description")
    enricher = enricher or OfflineEnricher()
    text = enricher.enrich(rec.id, rec.smiles, rec.description)
    pairs = enricher.qa_pairs(text, count) if hasattr(enricher, "qa_pairs") \
        else OfflineEnricher().qa_pairs(text, count)
    return [InstructionRecord(rec.id, "descriptive_qa", q, a) for q, a in pairs[:count]]


def render_caption_record(rec: MoleculeRecord) -> InstructionRecord:
    if not rec.description:
        raise NoDescription(f"record {rec.id} has no description")
    return InstructionRecord(rec.id, "caption", CAPTION_PROMPT, rec.description)


def enrich_records(records: Sequence[MoleculeRecord], enricher=None):
    """Copies of ``records`` with descriptions passed through the enricher."""
    enricher = enricher or OfflineEnricher()
    out = []
    for r in records:
        desc = r.description
        if desc:
            desc = enricher.enrich(r.id, r.smiles, desc)
        out.append(MoleculeRecord(r.id, r.smiles, r.elements, r.coords, desc, r.properties))
    return out


def build_instructions(records: Sequence[MoleculeRecord], seed=0, enricher=None,
                       descriptive_count=5) -> List[InstructionRecord]:
    """Property QA for every present property plus descriptive QA, in input order."""
    out = []
    for rec in records:
        for prop in rec.properties:
            out.append(render_computed_qa(rec, prop, seed))
        if rec.description:
            out.extend(render_descriptive_qa(rec, enricher, descriptive_count))
    return out


def build_captions(records: Sequence[MoleculeRecord]) -> List[InstructionRecord]:
    return [render_caption_record(r) for r in records if r.description]


def summarize(instructions: Iterable[InstructionRecord]):
    """Record counts per task, and per property for ``computed_qa``."""
    tasks, props = Counter(), Counter()
    for r in instructions:
        tasks[r.task] += 1
        if r.task == "computed_qa":
            props[r.property] += 1
    return {"tasks": dict(sorted(tasks.items())),
            "properties": {k: props[k] for k in PROPERTIES if k in props}}


# ---------------------------------------------------------------------------
# splitting


def _unit_hash(seed, key):
    digest = hashlib.sha256(f"{seed}:{key}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big") / 2.0 ** 64


def deterministic_split(ids, ratios=(0.8, 0.1, 0.1), seed=0):
    """Stable hash split of ``ids`` into (train, valid, test) sets."""
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or any(r <= 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise BadRatios(f"ratios must be three positive numbers summing to 1, got {ratios}")
    edges = (ratios[0], ratios[0] + ratios[1])
    parts = (set(), set(), set())
    for i in ids:
        u = _unit_hash(seed, i)
        parts[0 if u < edges[0] else 1 if u < edges[1] else 2].add(i)
    return parts


# ---------------------------------------------------------------------------
# JSONL

_MOL_KEYS = {"id", "smiles", "elements", "coords", "description", "properties"}
_MOL_REQUIRED = {"id", "smiles"}
_INS_KEYS = {"mol_id", "task", "property", "prompt", "response"}
_INS_REQUIRED = {"mol_id", "task", "prompt", "response"}


def _dumps(obj):
    return json.dumps(obj, ensure_ascii=False, allow_nan=False)


def write_jsonl(path, records):
    """One JSON object per line, UTF-8, ``\\n`` endings, fields in schema order."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for r in records:
            fh.write(_dumps(r.to_json()))
            fh.write("\n")


def _check_type(value, typ, what, line):
    if not isinstance(value, typ) or isinstance(value, bool):
        raise SchemaViolation(f"{what} has the wrong type", line=line)


def parse_record(obj, line=None):
    if not isinstance(obj, dict):
        raise SchemaViolation("expected a JSON object", line=line)
    keys = set(obj)
    kind = "instruction" if "mol_id" in keys else "molecule"
    allowed, required = (_INS_KEYS, _INS_REQUIRED) if kind == "instruction" \
        else (_MOL_KEYS, _MOL_REQUIRED)
    if keys - allowed:
        raise SchemaViolation(f"unknown keys {sorted(keys - allowed)}", line=line)
    if required - keys:
        raise SchemaViolation(f"missing keys {sorted(required - keys)}", line=line)
    try:
        if kind == "instruction":
            for k in ("mol_id", "task", "prompt", "response"):
                _check_type(obj[k], str, k, line)
            if "property" in obj:
                _check_type(obj["property"], str, "property", line)
            return InstructionRecord(obj["mol_id"], obj["task"], obj["prompt"],
                                     obj["response"], obj.get("property"))
        for k in ("id", "smiles"):
            _check_type(obj[k], str, k, line)
        if "description" in obj:
            _check_type(obj["description"], str, "description", line)
        props = obj.get("properties", {})
        _check_type(props, dict, "properties", line)
        for name, pv in props.items():
            if not isinstance(pv, dict) or set(pv) != {"value", "unit"}:
                raise SchemaViolation(f"property {name} must be {{value, unit}}", line=line)
            _check_type(pv["value"], (int, float), f"{name}.value", line)
        return MoleculeRecord(obj["id"], obj["smiles"], obj.get("elements"), obj.get("coords"),
                              obj.get("description"), props)
    except SchemaViolation as exc:
        if exc.line is None:
            raise SchemaViolation(str(exc), line=line) from None
        raise
    except (TypeError, ValueError, KeyError) as exc:
        raise SchemaViolation(str(exc), line=line) from None


def read_jsonl(path):
    out = []
    with open(path, encoding="utf-8") as fh:
        for n, text in enumerate(fh, start=1):
            if not text.strip():
                continue
            try:
                obj = json.loads(text)
            except json.JSONDecodeError as exc:
                raise SchemaViolation(f"invalid JSON: {exc.msg}", line=n) from None
            out.append(parse_record(obj, line=n))
    return out


__all__ = [
    "PROPERTIES", "UNITS", "DISPLAY_NAMES", "PRECISION", "PROMPT_TEMPLATES", "ANSWER_CLAUSE",
    "CAPTION_PROMPT", "lm_text", "ENRICHMENT_PROMPT", "PropertyValue", "MoleculeRecord",
    "InstructionRecord", "molecule_record", "render_computed_qa", "render_descriptive_qa",
    "render_caption_record", "OfflineEnricher", "EnricherClient", "enrich_records",
    "build_instructions", "build_captions", "summarize", "deterministic_split",
    "write_jsonl", "read_jsonl", "parse_record", "format_value", "quantize",
]
