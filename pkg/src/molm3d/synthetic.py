"""Small synthetic molecules and texts for tests, demos and smoke runs.

Nothing here is chemistry-grade: SMILES are valence-agnostic chains with
halogen branches, geometry comes from :func:`synthetic_embed`, and the
property values are simple deterministic functions of composition and
geometry. They exist so that every pipeline stage has data whose answer is
known by construction.
"""

from __future__ import annotations

import itertools

import numpy as np

from .molrepr import parse_smiles, pairwise_distances, synthetic_embed
from .moit import MoleculeRecord, molecule_record

ATOMIC_MASS = {"H": 1.008, "B": 10.81, "C": 12.011, "N": 14.007, "O": 15.999, "F": 18.998,
               "P": 30.974, "S": 32.06, "Cl": 35.45, "Br": 79.904, "I": 126.904}

def compositions(max_atoms=16):
    """All (C, N, O, S, F, Cl) count tuples used by the generator, in a fixed order."""
    out = []
    for c, n, o, s, f, cl in itertools.product(range(1, 7), range(3), range(3), range(2),
                                               range(2), range(2)):
        if c + n + o + s + f + cl <= max_atoms and f + cl <= c:
            out.append((c, n, o, s, f, cl))
    return out


def composition_smiles(counts, seed=0):
    """A chain SMILES with the given element counts; halogens hang off carbons."""
    c, n, o, s, f, cl = counts
    rng = np.random.default_rng(seed)
    chain = ["C"] * c + ["N"] * n + ["O"] * o + ["S"] * s
    rest = rng.permutation(chain[1:]).tolist()
    chain = [chain[0]] + rest
    halo = ["F"] * f + ["Cl"] * cl
    carbons = [i for i, a in enumerate(chain) if a == "C"]
    hosts = rng.choice(carbons, size=len(halo), replace=False) if halo else []
    parts = []
    for i, a in enumerate(chain):
        parts.append(a)
        for h, host in zip(halo, hosts):
            if host == i:
                parts.append(f"({h})")
    return "".join(parts)


def composition_formula(counts):
    """Compact formula such as ``C4N2OSFCl`` (count 1 omitted)."""
    symbols = ("C", "N", "O", "S", "F", "Cl")
    return "".join(f"{e}{k if k > 1 else ''}" for e, k in zip(symbols, counts) if k)


def composition_text(counts, style="sentence"):
    """Text derived from element counts.

    ``"sentence"`` gives 'A molecule with 2 carbon and 1 oxygen atoms.';
    ``"formula"`` gives the compact formula.
    """
    if style == "formula":
        return composition_formula(counts)
    names = ("carbon", "nitrogen", "oxygen", "sulfur", "fluorine", "chlorine")
    items = [f"{k} {name}" for k, name in zip(counts, names) if k]
    body = items[0] if len(items) == 1 else ", ".join(items[:-1]) + " and " + items[-1]
    return f"A molecule with {body} atoms."


def random_molecules(n, seed=0, max_atoms=16, style="sentence"):
    """``n`` embedded molecules with distinct compositions (ids ``mol0``, ...)."""
    pool = compositions(max_atoms)
    if n > len(pool):
        raise ValueError(f"only {len(pool)} distinct compositions available")
    rng = np.random.default_rng(seed)
    picks = rng.choice(len(pool), size=n, replace=False)
    mols, texts = [], []
    for i, p in enumerate(picks):
        counts = pool[int(p)]
        smi = composition_smiles(counts, seed=seed * 7919 + i)
        mol = parse_smiles(smi, mol_id=f"mol{i}")
        mols.append(synthetic_embed(mol, seed=seed * 7919 + i))
        texts.append(composition_text(counts, style))
    return mols, texts


def molecular_weight(mol):
    return sum(ATOMIC_MASS[e] for e in mol.elements)


def max_distance(mol):
    return float(pairwise_distances(mol).max())


def toy_properties(mol):
    """Deterministic stand-ins for the eight properties (composition + geometry)."""
    counts = {e: mol.elements.count(e) for e in set(mol.elements)}
    hetero = sum(v for k, v in counts.items() if k != "C")
    span = max_distance(mol) if mol.n_atoms > 1 else 0.0
    homo = -9.0 + 0.15 * hetero - 0.05 * span
    lumo = -1.0 - 0.1 * hetero + 0.03 * span
    return {
        "molecular_weight": molecular_weight(mol),
        "logp": 0.5 * counts.get("C", 0) - 0.7 * hetero,
        "tpsa": 12.0 * (counts.get("N", 0) + counts.get("O", 0)),
        "complexity": 10.0 * mol.n_atoms + 3.0 * hetero,
        "homo": homo,
        "lumo": lumo,
        "homo_lumo_gap": lumo - homo,
        "scf_energy": -0.01 * molecular_weight(mol) * 27.2114 / 10.0,
    }


def toy_records(n, seed=0, with_properties=True):
    """Molecule records with coordinates, descriptions and toy properties."""
    mols, texts = random_molecules(n, seed)
    return [molecule_record(m, t, toy_properties(m) if with_properties else None)
            for m, t in zip(mols, texts)]


def stretched_conformers(smiles, scales, seed=0, mol_id="conf"):
    """Copies of one embedded molecule scaled about its centroid."""
    base = synthetic_embed(parse_smiles(smiles, mol_id=mol_id), seed=seed)
    c = base.coords - base.coords.mean(0)
    return [base.with_coords(c * s) for s in scales]


def span_conformers(smiles, spans, seed=0, mol_id="conf"):
    """Conformers of one molecule rescaled so their largest distance equals each span."""
    base = synthetic_embed(parse_smiles(smiles, mol_id=mol_id), seed=seed)
    c = base.coords - base.coords.mean(0)
    d = max_distance(base)
    return [base.with_coords(c * (s / d)) for s in spans]


__all__ = [
    "compositions", "composition_smiles", "composition_formula", "composition_text",
    "random_molecules", "molecular_weight", "max_distance", "toy_properties", "toy_records",
    "stretched_conformers", "span_conformers", "MoleculeRecord",
]
