"""Evaluation: retrieval ranking, caption metrics and numeric QA scoring."""

from __future__ import annotations

import math
import re
from collections import Counter
from dataclasses import dataclass
from decimal import Decimal
from functools import lru_cache
from typing import List, Optional, Sequence

import numpy as np
import torch

from .errors import EmptyCandidate, EmptyInput, KTooLarge, NonSquare

# ---------------------------------------------------------------------------
# retrieval


@dataclass
class SimilarityMatrix:
    """Scores ``values[i, j]`` of molecule ``i`` against text ``j``."""

    values: np.ndarray
    row_ids: Optional[List[str]] = None
    col_ids: Optional[List[str]] = None

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise ValueError("similarity matrix must be 2-D")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("similarity matrix has non-finite entries")
        n, m = self.values.shape
        self.row_ids = list(self.row_ids) if self.row_ids is not None else [str(i) for i in range(n)]
        self.col_ids = list(self.col_ids) if self.col_ids is not None else [str(j) for j in range(m)]
        if len(self.row_ids) != n or len(self.col_ids) != m:
            raise ValueError("id lists must match the matrix shape")
        if len(set(self.row_ids)) != n or len(set(self.col_ids)) != m:
            raise ValueError("ids must be unique")


def ranks_of_diagonal(S):
    """0-based rank of ``S[i, i]`` within row ``i``; ties go to the lower index."""
    S = np.asarray(S, dtype=np.float64)
    diag = np.diag(S)[:, None]
    idx = np.arange(S.shape[0])
    greater = (S > diag).sum(1)
    tied_before = ((S == diag) & (idx[None, :] < idx[:, None])).sum(1)
    return greater + tied_before


def _direction_scores(S, k):
    r = ranks_of_diagonal(S)
    return (r == 0), (r < k)


def _batches(n, batch_size, seed):
    perm = np.random.default_rng(seed).permutation(n)
    return [perm[i:i + batch_size] for i in range(0, n, batch_size)]


def retrieval_report(S, k=20, batch_size=64, seed=0, strict=False):
    """Accuracy and Recall@k for molecule-to-text and text-to-molecule retrieval.

    In-batch mode shuffles the pairs with ``seed``, cuts them into
    consecutive batches of ``batch_size`` and ranks inside each batch. Full
    mode ranks against everything. A k larger than the candidate pool simply
    counts every hit; ``strict=True`` turns that into :class:`KTooLarge`.
    """
    values = S.values if isinstance(S, SimilarityMatrix) else np.asarray(S, dtype=np.float64)
    if values.ndim != 2 or values.shape[0] != values.shape[1]:
        raise NonSquare(f"retrieval needs a square matrix, got {values.shape}")
    n = values.shape[0]
    if n == 0:
        raise EmptyInput("empty similarity matrix")
    if k < 1 or batch_size < 1:
        raise ValueError("k and batch_size must be positive")
    if strict and k > n:
        raise KTooLarge(f"k={k} exceeds {n} candidates")

    def score(mats):
        acc = rec = 0
        for M in mats:
            a, r = _direction_scores(M, k)
            acc += int(a.sum())
            rec += int(r.sum())
        return acc / n, rec / n

    batches = _batches(n, batch_size, seed)
    out = {}
    for name, M in (("M2T", values), ("T2M", values.T)):
        full = score([M])
        inb = score([M[np.ix_(b, b)] for b in batches])
        out[name] = {"in_batch": {"Acc": inb[0], f"R@{k}": inb[1]},
                     "full": {"Acc": full[0], f"R@{k}": full[1]}}
    return out


@torch.no_grad()
def similarity_matrix(system, mols, texts, temperature=1.0):
    """Stage-1 contrastive scores between molecules and texts."""
    from .objectives import mtc_similarity, pad_ids

    system.eval()
    X, mask = system.encoder.encode_batch(list(mols))
    q = system.heads.mol_proj(system.projector.project(X, mask))
    ids, tmask = pad_ids([system.vocab.encode_text(t) for t in texts])
    t = system.heads.text_proj(system.projector.encode_text(ids, tmask))
    return mtc_similarity(q, t, temperature).numpy()


@torch.no_grad()
def rerank_with_matching(system, mols, texts, S, top_k):
    """Re-score each row's top-``top_k`` candidates with the matching head.

    Reranked candidates are lifted above the rest of their row and ordered
    by matching probability; the result is used for M2T ranking.
    """
    from .objectives import matching_logits, pad_ids

    S = np.asarray(S, dtype=np.float64).copy()
    n = S.shape[1]
    top_k = min(top_k, n)
    X, mask = system.encoder.encode_batch(list(mols))
    ids, tmask = pad_ids([system.vocab.encode_text(t) for t in texts])
    top = S.max() + (S.max() - S.min()) + 1.0
    for i in range(S.shape[0]):
        cand = np.argsort(-S[i], kind="stable")[:top_k]
        logits = matching_logits(system.projector, system.heads,
                                 X[i:i + 1].expand(len(cand), -1, -1),
                                 mask[i:i + 1].expand(len(cand), -1),
                                 ids[cand], tmask[cand])
        p = torch.softmax(logits, -1)[:, 1].numpy()
        S[i, cand] = top + p
    return S


# ---------------------------------------------------------------------------
# caption metrics

_TOKEN = re.compile(r"\w+|[^\w\s]")


def tokenize(text):
    """Lower-case words and single punctuation marks."""
    return _TOKEN.findall(text.lower())


def _toks(x):
    return tokenize(x) if isinstance(x, str) else list(x)


def _ngrams(toks, n):
    return Counter(tuple(toks[i:i + n]) for i in range(len(toks) - n + 1))


def bleu(candidate, reference, max_n=4, smoothing=True):
    """Sentence BLEU with brevity penalty.

    With ``smoothing`` a zero clipped count at order n > 1 becomes
    (0 + 1) / (total + 1). A zero unigram precision always scores 0.
    """
    cand, ref = _toks(candidate), _toks(reference)
    if not cand:
        raise EmptyCandidate("candidate has no tokens")
    if max_n not in (1, 2, 3, 4):
        raise ValueError("max_n must be between 1 and 4")
    log_p = 0.0
    for n in range(1, max_n + 1):
        c, r = _ngrams(cand, n), _ngrams(ref, n)
        total = sum(c.values())
        hits = sum(min(v, r[g]) for g, v in c.items())
        if hits == 0:
            if n == 1 or not smoothing:
                return 0.0
            hits, total = 1, total + 1
        log_p += math.log(hits / total) / max_n
    bp = 1.0 if len(cand) > len(ref) else math.exp(1.0 - len(ref) / len(cand))
    return bp * math.exp(log_p)


def _f1(p, r):
    return 0.0 if p + r == 0 else 2 * p * r / (p + r)


def rouge_n(candidate, reference, n=1):
    cand, ref = _toks(candidate), _toks(reference)
    if not cand or not ref:
        raise EmptyInput("ROUGE needs non-empty texts")
    if n not in (1, 2):
        raise ValueError("n must be 1 or 2")
    c, r = _ngrams(cand, n), _ngrams(ref, n)
    tc, tr = sum(c.values()), sum(r.values())
    if tc == 0 or tr == 0:
        return 1.0 if cand == ref else 0.0
    overlap = sum((c & r).values())
    return _f1(overlap / tc, overlap / tr)


def lcs_length(a, b):
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def rouge_l(candidate, reference):
    cand, ref = _toks(candidate), _toks(reference)
    if not cand or not ref:
        raise EmptyInput("ROUGE needs non-empty texts")
    lcs = lcs_length(cand, ref)
    return _f1(lcs / len(cand), lcs / len(ref))


METEOR_ALPHA, METEOR_GAMMA, METEOR_BETA = 0.9, 0.5, 3.0
_ALIGN_BUDGET = 200_000


def _count_chunks(pairs):
    chunks, last = 0, None
    for i, j in pairs:
        if last is None or i != last[0] + 1 or j != last[1] + 1:
            chunks += 1
        last = (i, j)
    return chunks


def _greedy_alignment(cand, ref):
    used, pairs = set(), []
    for i, w in enumerate(cand):
        for j, v in enumerate(ref):
            if v == w and j not in used:
                used.add(j)
                pairs.append((i, j))
                break
    return len(pairs), _count_chunks(pairs)


def _best_alignment(cand, ref):
    """(matches, chunks): one-to-one exact matches, most matches then fewest chunks."""
    positions = [tuple(j for j, v in enumerate(ref) if v == w) for w in cand]
    calls = [0]

    @lru_cache(maxsize=None)
    def go(i, used, prev_j):
        # best (matches, -chunks) for cand[i:], given used ref positions
        calls[0] += 1
        if calls[0] > _ALIGN_BUDGET:
            raise OverflowError
        if i == len(cand):
            return 0, 0
        best = go(i + 1, used, -2)
        for j in positions[i]:
            if used >> j & 1:
                continue
            m, negc = go(i + 1, used | (1 << j), j)
            cand_score = (m + 1, negc - (0 if j == prev_j + 1 and prev_j >= 0 else 1))
            if cand_score > best:
                best = cand_score
        return best

    try:
        m, negc = go(0, 0, -2)
    except OverflowError:
        return _greedy_alignment(cand, ref)
    return m, -negc


def meteor_lite(candidate, reference):
    """Exact-match METEOR without stemming or synonyms (alpha 0.9, gamma 0.5, beta 3)."""
    cand, ref = _toks(candidate), _toks(reference)
    if not cand or not ref:
        return 0.0
    m, chunks = _best_alignment(cand, ref)
    if m == 0:
        return 0.0
    p, r = m / len(cand), m / len(ref)
    f_mean = p * r / (METEOR_ALPHA * p + (1 - METEOR_ALPHA) * r)
    penalty = METEOR_GAMMA * (chunks / m) ** METEOR_BETA
    return f_mean * (1 - penalty)


def caption_report(candidates: Sequence[str], references: Sequence[str]):
    """Corpus means of BLEU-2/4, ROUGE-1/2/L and METEOR over paired texts."""
    if len(candidates) != len(references):
        raise ValueError("candidates and references must pair up")
    if not candidates:
        raise EmptyInput("no captions to score")
    rows = {"BLEU-2": [], "BLEU-4": [], "ROUGE-1": [], "ROUGE-2": [], "ROUGE-L": [],
            "METEOR": []}
    for c, r in zip(candidates, references):
        ct, rt = tokenize(c), tokenize(r)
        if not ct:
            for key in rows:
                rows[key].append(0.0)
            continue
        rows["BLEU-2"].append(bleu(ct, rt, 2))
        rows["BLEU-4"].append(bleu(ct, rt, 4))
        rows["ROUGE-1"].append(rouge_n(ct, rt, 1) if rt else 0.0)
        rows["ROUGE-2"].append(rouge_n(ct, rt, 2) if rt else 0.0)
        rows["ROUGE-L"].append(rouge_l(ct, rt) if rt else 0.0)
        rows["METEOR"].append(meteor_lite(ct, rt))
    out = {k: float(np.mean(v)) for k, v in rows.items()}
    out["count"] = len(candidates)
    return out


# ---------------------------------------------------------------------------
# numeric QA

NUMBER = re.compile(r"[-+]?(?:\d+\.?\d*|\.\d+)(?:[eE][-+]?\d+)?")


def _first_number(response):
    m = NUMBER.search(response)
    return None if m is None else m.group(0)


def extract_numeric(response):
    """First numeric literal in ``response`` as a float, or None."""
    lit = _first_number(response or "")
    return None if lit is None else float(lit)


@dataclass(frozen=True)
class QAPair:
    gold: float
    response: str
    unit: str = ""

    def __post_init__(self):
        if not math.isfinite(self.gold):
            raise ValueError("gold value must be finite")


def qa_report(pairs: Sequence[QAPair]):
    """MAE over parseable answers and the percentage of parseable answers.

    Differences are taken in decimal arithmetic on the shortest float
    representations, so |286.28 - 288.30| is exactly 2.02.
    """
    if not pairs:
        raise EmptyInput("no QA pairs")
    errors = []
    for p in pairs:
        lit = _first_number(p.response or "")
        if lit is None:
            continue
        errors.append(abs(Decimal(lit) - Decimal(repr(float(p.gold)))))
    valid_rate = 100.0 * len(errors) / len(pairs)
    mae = None if not errors else float(sum(errors, Decimal(0)) / Decimal(len(errors)))
    return {"mae": mae, "valid_rate": valid_rate, "count": len(pairs), "valid": len(errors)}


__all__ = [
    "NUMBER", "SimilarityMatrix", "retrieval_report", "ranks_of_diagonal", "similarity_matrix",
    "rerank_with_matching", "tokenize", "bleu", "rouge_n", "rouge_l", "lcs_length",
    "meteor_lite", "caption_report", "extract_numeric", "QAPair", "qa_report",
]
