"""Molecules: SMILES parsing, coordinate ingestion and rigid geometry.

A :class:`Molecule` is a heavy-atom graph with optional 3D coordinates in
Angstrom. Everything here is immutable; coordinate arrays are handed out
read-only.
"""

from __future__ import annotations

import os
import warnings
from dataclasses import dataclass, field, replace
from typing import Iterable, Optional, Sequence

import numpy as np
from scipy.spatial.transform import Rotation

from .errors import (
    CoordsUnset,
    CountMismatch,
    EmptyInput,
    MalformedLine,
    MultiFragment,
    PlacementFailure,
    SmilesError,
    UnbalancedBranch,
    UnclosedRing,
    UnsupportedElement,
)

SUPPORTED_ELEMENTS = ("H", "B", "C", "N", "O", "F", "P", "S", "Cl", "Br", "I")
AROMATIC_SYMBOLS = {"b": "B", "c": "C", "n": "N", "o": "O", "p": "P", "s": "S"}
BOND_ORDERS = ("single", "double", "triple", "aromatic")

_BOND_CHARS = {"-": "single", "=": "double", "#": "triple", ":": "aromatic"}
_ORGANIC_TWO = ("Cl", "Br")
_ORGANIC_ONE = ("B", "C", "N", "O", "P", "S", "F", "I")

MIN_SEPARATION = 0.5  # Angstrom


class StereoIgnoredWarning(UserWarning):
    """Stereo markers (``/``, ``\\``, ``@``) were dropped while parsing."""


@dataclass(frozen=True)
class Atom:
    element: str
    formal_charge: int = 0
    aromatic: bool = False
    explicit_h: Optional[int] = None
    isotope: Optional[int] = None

    def __post_init__(self):
        if self.element not in SUPPORTED_ELEMENTS:
            raise UnsupportedElement(f"unsupported element {self.element!r}")
        if self.explicit_h is not None and self.explicit_h < 0:
            raise ValueError("explicit_h must be non-negative")
        if self.isotope is not None and self.isotope <= 0:
            raise ValueError("isotope must be positive")


@dataclass(frozen=True)
class Bond:
    begin: int
    end: int
    order: str = "single"

    def __post_init__(self):
        if self.order not in BOND_ORDERS:
            raise ValueError(f"unknown bond order {self.order!r}")
        if self.begin == self.end:
            raise ValueError("bond endpoints must differ")

    @property
    def endpoints(self):
        return (self.begin, self.end)


def _as_coords(coords, n_atoms):
    arr = np.array(coords, dtype=np.float64, copy=True)
    if arr.shape != (n_atoms, 3):
        raise ValueError(f"coords must have shape ({n_atoms}, 3), got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("coords must be finite")
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class Molecule:
    """Atoms, bonds and (optionally) coordinates of one molecule."""

    id: str
    atoms: tuple
    bonds: tuple = ()
    coords: Optional[np.ndarray] = field(default=None, compare=False)
    smiles: Optional[str] = None

    def __post_init__(self):
        object.__setattr__(self, "atoms", tuple(self.atoms))
        object.__setattr__(self, "bonds", tuple(self.bonds))
        n = len(self.atoms)
        seen = set()
        for b in self.bonds:
            if not (0 <= b.begin < n and 0 <= b.end < n):
                raise ValueError(f"bond {b.endpoints} out of range for {n} atoms")
            key = frozenset(b.endpoints)
            if key in seen:
                raise ValueError(f"duplicate bond {b.endpoints}")
            seen.add(key)
        if self.coords is not None:
            object.__setattr__(self, "coords", _as_coords(self.coords, n))

    @property
    def n_atoms(self):
        return len(self.atoms)

    @property
    def elements(self):
        return [a.element for a in self.atoms]

    def with_coords(self, coords):
        return replace(self, coords=coords)

    def require_coords(self):
        if self.coords is None:
            raise CoordsUnset(f"molecule {self.id!r} has no coordinates")
        return self.coords


@dataclass(frozen=True)
class RigidTransform:
    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        rot = np.array(self.rotation, dtype=np.float64)
        trans = np.array(self.translation, dtype=np.float64).reshape(3)
        if rot.shape != (3, 3):
            raise ValueError("rotation must be 3x3")
        if not np.allclose(rot.T @ rot, np.eye(3), atol=1e-9, rtol=0):
            raise ValueError("rotation is not orthonormal")
        if abs(np.linalg.det(rot) - 1.0) > 1e-9:
            raise ValueError("rotation must have determinant +1")
        rot.setflags(write=False)
        trans.setflags(write=False)
        object.__setattr__(self, "rotation", rot)
        object.__setattr__(self, "translation", trans)

    @classmethod
    def identity(cls):
        return cls(np.eye(3), np.zeros(3))


# ---------------------------------------------------------------------------
# SMILES


class _SmilesParser:
    def __init__(self, text):
        self.text = text
        self.pos = 0
        self.atoms = []
        self.bonds = {}
        self.warned = False

    def _warn_stereo(self):
        if not self.warned:
            warnings.warn(
                f"stereo markers ignored in {self.text!r}", StereoIgnoredWarning, stacklevel=4
            )
            self.warned = True

    def _error(self, cls, msg):
        return cls(f"{msg} at position {self.pos} in {self.text!r}")

    def _add_bond(self, a, b, order):
        if a == b:
            raise self._error(SmilesError, "atom bonded to itself")
        key = frozenset((a, b))
        if key in self.bonds:
            raise self._error(SmilesError, f"duplicate bond between atoms {a} and {b}")
        if order is None:
            aromatic = self.atoms[a].aromatic and self.atoms[b].aromatic
            order = "aromatic" if aromatic else "single"
        self.bonds[key] = Bond(a, b, order)

    def _read_int(self):
        start = self.pos
        while self.pos < len(self.text) and self.text[self.pos].isdigit():
            self.pos += 1
        return int(self.text[start:self.pos]) if self.pos > start else None

    def _organic_atom(self):
        t = self.text
        for sym in _ORGANIC_TWO:
            if t.startswith(sym, self.pos):
                self.pos += 2
                return Atom(sym)
        ch = t[self.pos]
        if ch in _ORGANIC_ONE:
            self.pos += 1
            return Atom(ch)
        if ch in AROMATIC_SYMBOLS:
            self.pos += 1
            return Atom(AROMATIC_SYMBOLS[ch], aromatic=True)
        if ch.isalpha():
            end = self.pos + 1
            if ch.isupper() and end < len(t) and t[end].islower():
                end += 1
            raise self._error(UnsupportedElement, f"unsupported element {t[self.pos:end]!r}")
        return None

    def _bracket_atom(self):
        t = self.text
        close = t.find("]", self.pos)
        if close < 0:
            raise self._error(SmilesError, "unterminated bracket atom")
        self.pos += 1
        isotope = self._read_int()
        if self.pos >= close:
            raise self._error(SmilesError, "bracket atom without element")
        aromatic = False
        element = None
        for sym in _ORGANIC_TWO:
            if t.startswith(sym, self.pos):
                element = sym
                break
        if element is None:
            ch = t[self.pos]
            if ch in SUPPORTED_ELEMENTS and not (self.pos + 1 < close and t[self.pos + 1].islower()):
                element = ch
            elif ch in AROMATIC_SYMBOLS and not (self.pos + 1 < close and t[self.pos + 1].islower()):
                element = AROMATIC_SYMBOLS[ch]
                aromatic = True
            else:
                end = self.pos + 1
                while end < close and t[end].isalpha() and t[end].islower():
                    end += 1
                raise self._error(UnsupportedElement, f"unsupported element {t[self.pos:end]!r}")
        self.pos += len(element)
        if t[self.pos] == "@":
            self._warn_stereo()
            while t[self.pos] == "@" or (t[self.pos].isalnum() and t[self.pos] != "H"):
                self.pos += 1
        hcount = 0
        if t[self.pos] == "H":
            self.pos += 1
            n = self._read_int()
            hcount = 1 if n is None else n
        charge = 0
        if t[self.pos] in "+-":
            sign = 1 if t[self.pos] == "+" else -1
            self.pos += 1
            n = self._read_int()
            if n is not None:
                charge = sign * n
            else:
                charge = sign
                while t[self.pos] == ("+" if sign > 0 else "-"):
                    charge += sign
                    self.pos += 1
        if t[self.pos] == ":":
            self.pos += 1
            if self._read_int() is None:
                raise self._error(SmilesError, "atom class without number")
        if self.pos != close:
            raise self._error(SmilesError, f"unexpected {t[self.pos]!r} in bracket atom")
        self.pos = close + 1
        return Atom(element, formal_charge=charge, aromatic=aromatic, explicit_h=hcount,
                    isotope=isotope)

    def parse(self):
        t = self.text
        prev = None
        pending = None
        branches = []
        rings = {}
        while self.pos < len(t):
            ch = t[self.pos]
            if ch == ".":
                raise self._error(MultiFragment, "multi-fragment SMILES not supported")
            if ch == "(":
                if prev is None:
                    raise self._error(UnbalancedBranch, "branch opened before any atom")
                if pending is not None:
                    raise self._error(SmilesError, "bond symbol before branch")
                branches.append(prev)
                self.pos += 1
                continue
            if ch == ")":
                if not branches:
                    raise self._error(UnbalancedBranch, "unmatched ')'")
                if pending is not None:
                    raise self._error(SmilesError, "dangling bond symbol")
                prev = branches.pop()
                self.pos += 1
                continue
            if ch in _BOND_CHARS or ch in "/\\":
                if pending is not None:
                    raise self._error(SmilesError, "consecutive bond symbols")
                if ch in "/\\":
                    self._warn_stereo()
                    pending = "single"
                else:
                    pending = _BOND_CHARS[ch]
                self.pos += 1
                continue
            if ch.isdigit() or ch == "%":
                if prev is None:
                    raise self._error(SmilesError, "ring closure before any atom")
                if ch == "%":
                    digits = t[self.pos + 1:self.pos + 3]
                    if len(digits) != 2 or not digits.isdigit():
                        raise self._error(SmilesError, "'%' must be followed by two digits")
                    num = int(digits)
                    self.pos += 3
                else:
                    num = int(ch)
                    self.pos += 1
                if num in rings:
                    other, order = rings.pop(num)
                    if order is not None and pending is not None and order != pending:
                        raise self._error(SmilesError, f"conflicting bond orders on ring {num}")
                    self._add_bond(other, prev, pending if pending is not None else order)
                else:
                    rings[num] = (prev, pending)
                pending = None
                continue
            if ch == "[":
                atom = self._bracket_atom()
            else:
                atom = self._organic_atom()
                if atom is None:
                    raise self._error(SmilesError, f"unexpected character {ch!r}")
            self.atoms.append(atom)
            idx = len(self.atoms) - 1
            if prev is not None:
                self._add_bond(prev, idx, pending)
            elif pending is not None:
                raise self._error(SmilesError, "bond symbol before first atom")
            pending = None
            prev = idx
        if branches:
            raise self._error(UnbalancedBranch, "unclosed '('")
        if rings:
            nums = ", ".join(str(n) for n in sorted(rings))
            raise self._error(UnclosedRing, f"ring closure(s) {nums} never closed")
        if pending is not None:
            raise self._error(SmilesError, "dangling bond symbol")
        return self.atoms, list(self.bonds.values())


def parse_smiles(text, mol_id=None):
    """Parse a single-fragment SMILES string into a :class:`Molecule`.

    Implicit hydrogens are not materialised. Stereo markers are accepted and
    dropped with a :class:`StereoIgnoredWarning`.

    Raises:
        EmptyInput, MultiFragment, UnsupportedElement, UnbalancedBranch,
        UnclosedRing, SmilesError
    """
    if text is None or not text.strip():
        raise EmptyInput("empty SMILES string")
    text = text.strip()
    atoms, bonds = _SmilesParser(text).parse()
    return Molecule(id=mol_id if mol_id is not None else text, atoms=atoms, bonds=bonds,
                    smiles=text)


# ---------------------------------------------------------------------------
# coordinates


def synthetic_embed(mol, seed, max_tries=1000):
    """Place atoms uniformly in a cube, rejecting positions closer than 0.5 A.

    The cube side is ``2 * n_atoms ** (1/3)`` Angstrom. This is fixture data
    with no chemical meaning.
    """
    n = mol.n_atoms
    if n < 1:
        raise EmptyInput("cannot embed a molecule without atoms")
    rng = np.random.default_rng(seed)
    side = 2.0 * n ** (1.0 / 3.0)
    placed = np.empty((n, 3))
    for i in range(n):
        for _ in range(max_tries):
            p = rng.uniform(0.0, side, size=3)
            if i == 0 or np.min(np.linalg.norm(placed[:i] - p, axis=1)) >= MIN_SEPARATION:
                placed[i] = p
                break
        else:
            raise PlacementFailure(
                f"could not place atom {i} of {n} after {max_tries} draws (box side {side:.2f} A)"
            )
    return mol.with_coords(placed)


def _normalise_element(sym):
    sym = sym.strip()
    cand = sym[:1].upper() + sym[1:].lower()
    if cand not in SUPPORTED_ELEMENTS:
        raise UnsupportedElement(f"unsupported element {sym!r}")
    return cand


def load_xyz(file, mol_id=None):
    """Read an XYZ file (path or open text stream). Bonds are left empty."""
    if isinstance(file, (str, os.PathLike)):
        with open(file, encoding="utf-8") as fh:
            lines = fh.read().splitlines()
        default_id = os.path.splitext(os.path.basename(os.fspath(file)))[0]
    else:
        lines = file.read().splitlines()
        default_id = "xyz"
    if not lines:
        raise EmptyInput("empty XYZ file")
    try:
        declared = int(lines[0].strip())
    except ValueError:
        raise MalformedLine(f"line 1: expected an atom count, got {lines[0]!r}") from None
    if declared < 0:
        raise MalformedLine("line 1: negative atom count")
    body = lines[2:]
    while body and not body[-1].strip():
        body.pop()
    if len(body) != declared:
        raise CountMismatch(f"declared {declared} atoms, found {len(body)} coordinate lines")
    atoms, coords = [], []
    for lineno, line in enumerate(body, start=3):
        parts = line.split()
        if len(parts) != 4:
            raise MalformedLine(f"line {lineno}: expected 'Element x y z', got {line!r}")
        element = _normalise_element(parts[0])
        try:
            xyz = [float(v) for v in parts[1:]]
        except ValueError:
            raise MalformedLine(f"line {lineno}: non-numeric coordinate in {line!r}") from None
        if not all(np.isfinite(xyz)):
            raise MalformedLine(f"line {lineno}: non-finite coordinate")
        atoms.append(Atom(element))
        coords.append(xyz)
    if declared == 0:
        raise EmptyInput("XYZ file declares zero atoms")
    return Molecule(id=mol_id or default_id, atoms=atoms, coords=np.array(coords))


def molecule_from_arrays(mol_id, elements, coords, smiles=None):
    atoms = [Atom(_normalise_element(e)) for e in elements]
    return Molecule(id=mol_id, atoms=atoms, coords=coords, smiles=smiles)


# ---------------------------------------------------------------------------
# geometry


def apply_rigid(mol, t):
    coords = mol.require_coords()
    return mol.with_coords(coords @ t.rotation.T + t.translation)


def pairwise_distances(mol):
    c = mol.require_coords()
    diff = c[:, None, :] - c[None, :, :]
    return np.sqrt(np.sum(diff * diff, axis=-1))


def random_rotation(seed):
    """Uniformly random proper rotation (zero translation), fixed per seed."""
    rot = Rotation.random(random_state=np.random.default_rng(seed)).as_matrix()
    return RigidTransform(rot, np.zeros(3))


def random_rigid(seed, scale=10.0):
    """Random rotation plus a translation drawn uniformly from [-scale, scale]^3."""
    rng = np.random.default_rng(seed)
    rot = Rotation.random(random_state=rng).as_matrix()
    return RigidTransform(rot, rng.uniform(-scale, scale, size=3))


def permute_atoms(mol, perm):
    """Reorder atoms so that new atom ``i`` is old atom ``perm[i]``."""
    perm = [int(p) for p in perm]
    if sorted(perm) != list(range(mol.n_atoms)):
        raise ValueError("perm must be a permutation of atom indices")
    inverse = {old: new for new, old in enumerate(perm)}
    atoms = [mol.atoms[p] for p in perm]
    bonds = [Bond(inverse[b.begin], inverse[b.end], b.order) for b in mol.bonds]
    coords = None if mol.coords is None else mol.coords[perm]
    return Molecule(id=mol.id, atoms=atoms, bonds=bonds, coords=coords, smiles=mol.smiles)


def element_counts(mol: Molecule) -> dict:
    counts: dict = {}
    for e in mol.elements:
        counts[e] = counts.get(e, 0) + 1
    return counts


def embed_all(mols: Iterable[Molecule], seed: int) -> list:
    """Embed molecules lacking coordinates; seeds are offset by position."""
    out = []
    for i, m in enumerate(mols):
        out.append(m if m.coords is not None else synthetic_embed(m, seed + i))
    return out


__all__: Sequence[str] = [
    "Atom", "Bond", "Molecule", "RigidTransform", "SUPPORTED_ELEMENTS",
    "StereoIgnoredWarning", "parse_smiles", "synthetic_embed", "load_xyz",
    "molecule_from_arrays", "apply_rigid", "pairwise_distances", "random_rotation",
    "random_rigid", "permute_atoms", "element_counts", "embed_all",
]
