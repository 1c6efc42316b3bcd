"""Show that the frozen 3D encoder and the query projector ignore rigid motion
and atom order, but react to a change in geometry.

Run: python3 demos/geometry_invariance.py
"""

import numpy as np
import torch

from molm3d.encoder import EncoderConfig, MolecularEncoder
from molm3d.molrepr import apply_rigid, parse_smiles, permute_atoms, random_rigid, synthetic_embed
from molm3d.projector import ProjectorConfig, QFormer


def main():
    torch.set_num_threads(1)
    enc = MolecularEncoder.build(EncoderConfig(), seed=0)
    proj = QFormer.build(ProjectorConfig(), seed=1)
    mol = synthetic_embed(parse_smiles("CC(=O)Oc1ccccc1C(=O)O", mol_id="aspirin"), seed=0)
    print(f"{mol.id}: {mol.n_atoms} heavy atoms")

    with torch.no_grad():
        X = enc.encode(mol)
        q = proj.project(X)
        moved = apply_rigid(mol, random_rigid(7))
        print("rigid motion, max |dq|:      ", float((proj.project(enc.encode(moved)) - q).abs().max()))

        perm = np.random.default_rng(0).permutation(mol.n_atoms)
        Xp = enc.encode(permute_atoms(mol, perm))
        print("atom reorder, max |dX - P X|:", float((Xp - X[perm]).abs().max()))

        stretched = mol.with_coords(mol.coords * 1.3)
        print("stretch x1.3, max |dq|:      ", float((proj.project(enc.encode(stretched)) - q).abs().max()))
        print("query tokens:", tuple(q.shape))


if __name__ == "__main__":
    main()
