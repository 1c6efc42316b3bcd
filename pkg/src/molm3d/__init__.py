"""3D molecule-text modelling: encoder, projector, language model, training and evaluation."""

from .errors import DataError, MolmError, StateError
from .molrepr import Molecule, load_xyz, parse_smiles, synthetic_embed
from .system import MoLM, SystemConfig, build_system, tiny_config

__version__ = "0.1.0"

__all__ = [
    "DataError", "MolmError", "StateError", "Molecule", "load_xyz", "parse_smiles",
    "synthetic_embed", "MoLM", "SystemConfig", "build_system", "tiny_config",
]
