import itertools
import math

import numpy as np
import pytest
import torch

import molm3d.objectives as objectives
from conftest import gradient_relative_error
from molm3d.errors import DegenerateBatch, EmptyResponseMask
from molm3d.layers import DTYPE
from molm3d.objectives import (
    BatchPair,
    conditional_lm_loss,
    encode_batch,
    mtc_loss,
    mtc_similarity,
    mtm_loss,
    seeded_derangement,
    stage1_caption_loss,
    stage1_losses,
    stage1_total,
    symmetric_infonce,
)
from molm3d.encoder import EncoderConfig, MolecularEncoder
from molm3d.projector import AlignmentHeads, ProjectorConfig, QFormer
from molm3d.synthetic import random_molecules
from molm3d.textlm import CausalLM, LMConfig, compose_mixed_sequence, lm_forward

TINY = ProjectorConfig(num_queries=2, blocks=1, dim=8, heads=2, mol_dim=8, max_text_len=16,
                       embed_dim=8)


def rand(*shape, seed=0):
    return torch.randn(*shape, generator=torch.Generator().manual_seed(seed), dtype=DTYPE)


def perturb_(params, scale=0.3, seed=0):
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in params:
            p.add_(scale * torch.randn(p.shape, generator=g, dtype=p.dtype))


@pytest.fixture(scope="module")
def small_batch():
    mols, texts = random_molecules(4, seed=9, max_atoms=5, style="formula")
    enc = MolecularEncoder.build(EncoderConfig(layers=1, dim=8, heads=2), seed=0)
    return encode_batch(enc, BatchPair(mols, texts))


@pytest.fixture(scope="module")
def qformer():
    proj = QFormer.build(TINY, seed=0)
    heads = AlignmentHeads.build(TINY, seed=1)
    perturb_(list(proj.parameters()) + list(heads.parameters()))
    return proj, heads


def two_loop_infonce(q, t, tau):
    """Reference contrastive loss written with explicit Python loops."""
    q, t = q.numpy(), t.numpy()
    b, k, _ = q.shape
    s = np.zeros((b, b))
    for i in range(b):
        for j in range(b):
            best = -np.inf
            for kk in range(k):
                c = q[i, kk] @ t[j] / (np.linalg.norm(q[i, kk]) * np.linalg.norm(t[j]))
                best = max(best, c)
            s[i, j] = best / tau
    row = col = 0.0
    for i in range(b):
        row += -s[i, i] + math.log(sum(math.exp(s[i, j]) for j in range(b)))
        col += -s[i, i] + math.log(sum(math.exp(s[j, i]) for j in range(b)))
    return 0.5 * (row / b + col / b)


class TestContrastive:
    def test_equal_similarities(self):
        loss = symmetric_infonce(torch.full((4, 4), 3.0, dtype=DTYPE))
        assert float(loss) == pytest.approx(math.log(4), abs=1e-12)
        assert float(loss) == pytest.approx(1.3863, abs=1e-4)

    def test_saturated(self):
        tau = 0.1
        sim = torch.full((5, 5), -1 / tau, dtype=DTYPE)
        sim.fill_diagonal_(1 / tau)
        assert float(symmetric_infonce(sim)) < 1e-6

    def test_two_loop_oracle(self):
        q, t = rand(8, 3, 6, seed=1), rand(8, 6, seed=2)
        for tau in (0.1, 1.0):
            loss = float(mtc_loss(q, t, tau))
            assert loss == pytest.approx(two_loop_infonce(q, t, tau), abs=1e-9)
        # with |s| <= 1 each CE is at most ln(1 + 7 e^2) < 2 ln 8
        assert 0.0 <= loss <= 2 * math.log(8)

    def test_permutation_covariant(self):
        q, t = rand(6, 4, 5, seed=3), rand(6, 5, seed=4)
        perm = torch.tensor([3, 0, 5, 1, 4, 2])
        assert float(mtc_loss(q, t)) == pytest.approx(float(mtc_loss(q[perm], t[perm])),
                                                      abs=1e-9)

    def test_max_over_queries(self):
        q, t = rand(4, 3, 5, seed=5), rand(4, 5, seed=6)
        sim = mtc_similarity(q, t)
        for i in range(4):
            cos = torch.nn.functional.cosine_similarity(q[i], t[i][None], dim=-1)
            best = int(torch.argmax(cos))
            if float(cos[best]) <= 0:
                continue
            kept = q.clone()
            mask = torch.zeros(3, dtype=torch.bool)
            mask[best] = True
            kept[i, ~mask] = 0.0
            assert float(mtc_similarity(kept, t)[i, i]) == pytest.approx(float(sim[i, i]),
                                                                        abs=1e-12)

    def test_degenerate(self):
        with pytest.raises(DegenerateBatch):
            mtc_loss(rand(1, 2, 4), rand(1, 4))

    def test_gradient(self):
        q = rand(3, 2, 4, seed=7).requires_grad_(True)
        t = rand(3, 4, seed=8).requires_grad_(True)
        err, _ = gradient_relative_error(lambda: mtc_loss(q, t, 0.5), [q, t])
        assert err < 1e-4


class TestDerangement:
    @pytest.mark.parametrize("n", range(2, 17))
    def test_no_fixed_points(self, n):
        for seed in range(5):
            perm = seeded_derangement(n, seed)
            assert sorted(perm.tolist()) == list(range(n))
            assert not np.any(perm == np.arange(n))

    def test_seeded(self):
        assert np.array_equal(seeded_derangement(9, 4), seeded_derangement(9, 4))

    def test_uniform_over_derangements_of_three(self):
        # the two derangements of 3 elements should appear equally often
        counts = {}
        for s in range(2000):
            key = tuple(seeded_derangement(3, s).tolist())
            counts[key] = counts.get(key, 0) + 1
        expected = {p for p in itertools.permutations(range(3))
                    if all(p[i] != i for i in range(3))}
        assert set(counts) == expected
        assert abs(counts[(1, 2, 0)] - 1000) < 100

    def test_too_small(self):
        with pytest.raises(DegenerateBatch):
            seeded_derangement(1, 0)


class TestMatching:
    def test_half_probability_head(self, small_batch, qformer):
        proj, _ = qformer
        heads = AlignmentHeads.build(TINY, seed=2)
        with torch.no_grad():
            heads.itm_head.weight.zero_()
            heads.itm_head.bias.zero_()
        assert float(mtm_loss(proj, heads, small_batch, seed=0)) == pytest.approx(
            math.log(2), abs=1e-12)

    def test_rigged_head(self, small_batch, qformer, monkeypatch):
        proj, heads = qformer
        originals = small_batch.text_ids

        def oracle(projector, heads, X, x_mask, ids, mask):
            b = originals.shape[0]
            truth = (ids == torch.cat([originals, originals])).all(-1)
            assert truth[:b].all() and not truth[b:].any()
            logits = torch.full((2 * b, 2), -50.0, dtype=DTYPE)
            logits[truth, 1] = 50.0
            logits[~truth, 0] = 50.0
            return logits

        monkeypatch.setattr(objectives, "matching_logits", oracle)
        assert float(mtm_loss(proj, heads, small_batch, seed=3)) < 1e-6

    def test_negative_sampler_hook(self, small_batch, qformer):
        proj, heads = qformer
        calls = []

        def sampler(n, seed):
            calls.append((n, seed))
            return np.roll(np.arange(n), 1)

        mtm_loss(proj, heads, small_batch, seed=11, negative_sampler=sampler)
        assert calls == [(4, 11)]

    def test_degenerate(self, small_batch, qformer):
        proj, heads = qformer
        with pytest.raises(DegenerateBatch):
            mtm_loss(proj, heads, small_batch.subset([0]), seed=0)

    def test_gradient(self, small_batch, qformer):
        proj, heads = qformer
        params = list(proj.parameters()) + list(heads.itm_head.parameters())
        err, n = gradient_relative_error(
            lambda: mtm_loss(proj, heads, small_batch.subset([0, 1]), seed=0), params)
        assert n <= 5000 and err < 1e-4


class TestCaption:
    def test_uniform_logits(self, monkeypatch, small_batch, qformer):
        proj, _ = qformer

        def flat(X, tokens, x_mask=None, text_mask=None):
            tokens = torch.as_tensor(tokens)
            return torch.zeros(*tokens.shape, 99, dtype=DTYPE)

        monkeypatch.setattr(proj, "caption_logits", flat)
        loss = stage1_caption_loss(proj, small_batch.X, small_batch.caption_ids,
                                   small_batch.x_mask, small_batch.caption_mask)
        assert float(loss) == pytest.approx(math.log(99), abs=1e-12)

    def test_non_negative(self, small_batch, qformer):
        proj, _ = qformer
        loss = stage1_caption_loss(proj, small_batch.X, small_batch.caption_ids,
                                   small_batch.x_mask, small_batch.caption_mask)
        assert math.isfinite(float(loss)) and float(loss) >= 0

    def test_short_tokens(self, small_batch, qformer):
        with pytest.raises(ValueError):
            stage1_caption_loss(qformer[0], small_batch.X[0], [1])

    def test_gradient(self, small_batch, qformer):
        proj, _ = qformer
        b = small_batch.subset([0, 1])
        err, n = gradient_relative_error(
            lambda: stage1_caption_loss(proj, b.X, b.caption_ids, b.x_mask, b.caption_mask),
            list(proj.parameters()))
        assert n <= 5000 and err < 1e-4


class TestConditionalLM:
    @pytest.fixture
    def lm(self):
        return CausalLM.build(LMConfig(layers=1, dim=8, heads=2, max_seq_len=48), seed=0)

    def test_uniform_any_prompt(self, lm):
        for task in ["a", "a much longer prompt text"]:
            z = compose_mixed_sequence(lm, None, "CCO", task, "reply", mode="smiles_only")
            logits = torch.zeros(len(z), 99, dtype=DTYPE)
            assert float(conditional_lm_loss(logits, z)) == pytest.approx(math.log(99),
                                                                          abs=1e-12)

    def test_prompt_changes_do_not_matter(self, lm):
        a = compose_mixed_sequence(lm, None, "CCO", "first", "xyz", mode="smiles_only")
        b = compose_mixed_sequence(lm, None, "CCO", "other", "xyz", mode="smiles_only")
        logits_a = rand(len(a), 99, seed=1)
        logits_b = rand(len(b), 99, seed=2)
        start = int(a.response_mask.nonzero()[0]) - 1
        logits_b[start:] = logits_a[start:]
        assert float(conditional_lm_loss(logits_a, a)) == float(conditional_lm_loss(logits_b, b))

    def test_hand_computed(self):
        ids = torch.tensor([1, 10, 20, 30, 2])
        mask = torch.tensor([False, False, True, True, True])
        logits = rand(5, 99, seed=3)
        manual = 0.0
        for p in (2, 3, 4):
            row = logits[p - 1]
            manual += float(torch.logsumexp(row, 0) - row[ids[p]])
        got = conditional_lm_loss(logits, token_ids=ids, response_mask=mask)
        assert float(got) == pytest.approx(manual / 3, abs=1e-12)

    def test_empty_mask(self):
        with pytest.raises(EmptyResponseMask):
            conditional_lm_loss(rand(4, 99), token_ids=torch.tensor([1, 5, 6, 2]),
                                response_mask=torch.zeros(4, dtype=torch.bool))

    def test_gradient(self, lm):
        perturb_(lm.parameters(), 0.2)

        def loss():
            z = compose_mixed_sequence(lm, None, "CN", "q", "ab", mode="smiles_only")
            return conditional_lm_loss(lm_forward(lm, z), z)

        err, n = gradient_relative_error(loss, list(lm.parameters()))
        assert n <= 5000 and err < 1e-4


class TestStage1Total:
    def test_mtc_only(self, small_batch, qformer):
        proj, heads = qformer
        total = stage1_total(proj, heads, small_batch, weights=(1.0, 0.0, 0.0))
        q = proj.project(small_batch.X, small_batch.x_mask)
        t = proj.encode_text(small_batch.text_ids, small_batch.text_mask)
        assert float(total) == float(mtc_loss(heads.mol_proj(q), heads.text_proj(t)))

    def test_sum_of_parts(self, small_batch, qformer):
        proj, heads = qformer
        w = (0.5, 2.0, 1.5)
        total, _ = stage1_losses(proj, heads, small_batch, seed=4, weights=w)
        q = proj.project(small_batch.X, small_batch.x_mask)
        t = proj.encode_text(small_batch.text_ids, small_batch.text_mask)
        mtc = mtc_loss(heads.mol_proj(q), heads.text_proj(t))
        mtm = mtm_loss(proj, heads, small_batch, seed=4)
        cap = stage1_caption_loss(proj, small_batch.X, small_batch.caption_ids,
                                  small_batch.x_mask, small_batch.caption_mask)
        expected = w[0] * float(mtc) + w[1] * float(mtm) + w[2] * float(cap)
        assert float(total) == pytest.approx(expected, abs=1e-9)

    def test_zero_components(self, small_batch, qformer):
        proj, heads = qformer
        total = stage1_total(proj, heads, small_batch, weights=(0.0, 0.0, 0.0))
        assert float(total) == 0.0

    def test_default_weights_unweighted(self, small_batch, qformer):
        proj, heads = qformer
        total, parts = stage1_losses(proj, heads, small_batch, seed=1)
        assert float(total) == pytest.approx(sum(float(v) for v in parts.values()), abs=1e-9)
        assert all(float(v) >= 0 for v in parts.values())
