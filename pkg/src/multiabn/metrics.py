"""Corpus-level caption metrics: BLEU-1..4, ROUGE-L, exact-match METEOR and CIDEr.

All functions take a sequence of EvalPair records and return floats. BLEU,
ROUGE and METEOR live in [0, 1]; CIDEr is scaled to [0, 10]. The METEOR here
matches unigrams by exact token equality only, so its absolute values are not
comparable to implementations that add stemming or synonym sets.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass
from typing import Dict, Iterable, List, Sequence, Tuple

Tokens = Tuple[str, ...]

ROUGE_BETA = 1.2
CIDER_MAX_NGRAM = 4
CIDER_SCALE = 10.0
REPORT_COLUMNS = ("BLEU-1", "BLEU-2", "BLEU-3", "BLEU-4", "ROUGE", "METEOR", "CIDEr")


@dataclass(frozen=True)
class EvalPair:
    """One generated sentence with its reference set."""

    candidate: Tokens
    references: Tuple[Tokens, ...]

    def __post_init__(self):
        object.__setattr__(self, "candidate", tuple(self.candidate))
        object.__setattr__(self, "references", tuple(tuple(r) for r in self.references))
        if not self.references:
            raise ValueError("EvalPair needs at least one reference")
        if any(not r for r in self.references):
            raise ValueError("references must be non-empty token lists")


@dataclass(frozen=True)
class CorpusIdf:
    """Reference document frequencies for CIDEr, one table per n-gram order."""

    doc_freq: Tuple[Dict[Tokens, int], ...]
    num_docs: int


@dataclass(frozen=True)
class ScoreReport:
    bleu1: float
    bleu2: float
    bleu3: float
    bleu4: float
    rouge_l: float
    meteor: float
    cider: float

    def as_dict(self) -> Dict[str, float]:
        values = (self.bleu1, self.bleu2, self.bleu3, self.bleu4,
                  self.rouge_l, self.meteor, self.cider)
        return dict(zip(REPORT_COLUMNS, values))


def _require_pairs(pairs: Sequence[EvalPair]) -> Sequence[EvalPair]:
    pairs = list(pairs)
    if not pairs:
        raise ValueError("empty evaluation corpus")
    return pairs


def _ngram_counts(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


# ---------------------------------------------------------------------------
# BLEU
# ---------------------------------------------------------------------------

def bleu(pairs: Sequence[EvalPair], n: int, smooth: bool = False) -> float:
    """Corpus BLEU-n: clipped modified precisions under a brevity penalty.

    The reference length is the closest one to the candidate per pair (ties
    go to the shorter reference). Without smoothing a zero i-gram overlap for
    any i <= n collapses the score to 0; `smooth` applies add-one counts.
    """
    if not 1 <= n <= 4:
        raise ValueError("n-gram order must be in 1..4")
    pairs = _require_pairs(pairs)
    matched = [0] * n
    possible = [0] * n
    cand_len = 0
    ref_len = 0
    for pair in pairs:
        c = len(pair.candidate)
        cand_len += c
        ref_len += min((abs(len(r) - c), len(r)) for r in pair.references)[1]
        for order in range(1, n + 1):
            counts = _ngram_counts(pair.candidate, order)
            if not counts:
                continue
            ceiling: Counter = Counter()
            for ref in pair.references:
                for gram, k in _ngram_counts(ref, order).items():
                    if k > ceiling[gram]:
                        ceiling[gram] = k
            matched[order - 1] += sum(min(k, ceiling[gram]) for gram, k in counts.items())
            possible[order - 1] += sum(counts.values())
    if cand_len == 0:
        return 0.0
    log_precision = 0.0
    for order in range(n):
        num, den = matched[order], possible[order]
        if smooth:
            num, den = num + 1, den + 1
        if num == 0 or den == 0:
            return 0.0
        log_precision += math.log(num / den)
    brevity = math.exp(min(0.0, 1.0 - ref_len / cand_len))
    return brevity * math.exp(log_precision / n)


# ---------------------------------------------------------------------------
# ROUGE-L
# ---------------------------------------------------------------------------

def _lcs_length(a: Sequence[str], b: Sequence[str]) -> int:
    prev = [0] * (len(b) + 1)
    for token in a:
        row = [0] * (len(b) + 1)
        for j, other in enumerate(b, start=1):
            if token == other:
                row[j] = prev[j - 1] + 1
            else:
                row[j] = max(prev[j], row[j - 1])
        prev = row
    return prev[-1]


def rouge_l(pairs: Sequence[EvalPair]) -> float:
    """Mean over pairs of the best LCS F-measure against any reference."""
    pairs = _require_pairs(pairs)
    beta_sq = ROUGE_BETA ** 2
    total = 0.0
    for pair in pairs:
        best = 0.0
        if pair.candidate:
            for ref in pair.references:
                lcs = _lcs_length(pair.candidate, ref)
                if lcs == 0:
                    continue
                p = lcs / len(pair.candidate)
                r = lcs / len(ref)
                f = (1.0 + beta_sq) * p * r / (r + beta_sq * p)
                if f > best:
                    best = f
        total += best
    return total / len(pairs)


# ---------------------------------------------------------------------------
# METEOR (exact-match variant)
# ---------------------------------------------------------------------------

def _min_chunk_alignment(cand: Tokens, ref: Tokens) -> Tuple[int, int]:
    """Size of a maximum exact-match alignment and its fewest chunk count."""
    cand_counts = Counter(cand)
    ref_counts = Counter(ref)
    need = {w: min(k, ref_counts[w]) for w, k in cand_counts.items() if w in ref_counts}
    matches = sum(need.values())
    if matches == 0:
        return 0, 0
    skips = {w: cand_counts[w] - k for w, k in need.items()}
    slots: Dict[str, List[int]] = {}
    for j, w in enumerate(ref):
        if w in need:
            slots.setdefault(w, []).append(j)

    best = matches  # upper bound: every matched word its own chunk
    used = [False] * len(ref)

    def walk(i: int, left: int, last_i: int, last_j: int, chunks: int):
        nonlocal best
        if left == 0:
            if chunks < best:
                best = chunks
            return
        if i >= len(cand) or chunks >= best:
            return
        w = cand[i]
        if need.get(w, 0) > 0:
            for j in slots[w]:
                if used[j]:
                    continue
                grew = 0 if (last_i == i - 1 and last_j == j - 1) else 1
                if chunks + grew < best:
                    need[w] -= 1
                    used[j] = True
                    walk(i + 1, left - 1, i, j, chunks + grew)
                    used[j] = False
                    need[w] += 1
        if w not in need:
            walk(i + 1, left, last_i, last_j, chunks)
        elif skips[w] > 0:
            skips[w] -= 1
            walk(i + 1, left, last_i, last_j, chunks)
            skips[w] += 1
        elif need[w] == 0:
            walk(i + 1, left, last_i, last_j, chunks)

    walk(0, matches, -2, -2, 0)
    return matches, best


def _meteor_pair(cand: Tokens, ref: Tokens) -> float:
    matches, chunks = _min_chunk_alignment(cand, ref)
    if matches == 0:
        return 0.0
    p = matches / len(cand)
    r = matches / len(ref)
    f = 10.0 * p * r / (r + 9.0 * p)
    penalty = 0.5 * (chunks / matches) ** 3
    return f * (1.0 - penalty)


def meteor_lite(pairs: Sequence[EvalPair]) -> float:
    """Exact-unigram METEOR: harmonic mean of P and R with a chunk penalty."""
    pairs = _require_pairs(pairs)
    total = 0.0
    for pair in pairs:
        total += max(_meteor_pair(pair.candidate, ref) for ref in pair.references)
    return total / len(pairs)


# ---------------------------------------------------------------------------
# CIDEr
# ---------------------------------------------------------------------------

def build_idf(pairs: Sequence[EvalPair]) -> CorpusIdf:
    """Document frequencies over reference sets; one document per pair."""
    pairs = _require_pairs(pairs)
    tables: List[Counter] = [Counter() for _ in range(CIDER_MAX_NGRAM)]
    for pair in pairs:
        for order in range(1, CIDER_MAX_NGRAM + 1):
            seen = set()
            for ref in pair.references:
                seen.update(_ngram_counts(ref, order))
            for gram in seen:
                tables[order - 1][gram] += 1
    return CorpusIdf(tuple(dict(t) for t in tables), len(pairs))


def _tfidf_vector(tokens: Tokens, order: int, idf: CorpusIdf) -> Dict[Tokens, float]:
    counts = _ngram_counts(tokens, order)
    total = sum(counts.values())
    if total == 0:
        return {}
    table = idf.doc_freq[order - 1]
    log_n = math.log(idf.num_docs)
    out = {}
    for gram, k in counts.items():
        df = table.get(gram, 0)
        weight = log_n - math.log(df) if df > 1 else log_n
        out[gram] = (k / total) * weight
    return out


def _norm(vec: Dict[Tokens, float]) -> float:
    return math.sqrt(sum(v * v for v in vec.values()))


def cider(pairs: Sequence[EvalPair], idf: CorpusIdf = None) -> float:
    """Consensus score: clipped tf-idf cosine, averaged over refs and n=1..4."""
    pairs = _require_pairs(pairs)
    if idf is None:
        idf = build_idf(pairs)
    if idf.num_docs < 1:
        raise ValueError("idf table built over an empty corpus")
    total = 0.0
    for pair in pairs:
        pair_score = 0.0
        for order in range(1, CIDER_MAX_NGRAM + 1):
            cand_vec = _tfidf_vector(pair.candidate, order, idf)
            cand_norm = _norm(cand_vec)
            ref_total = 0.0
            for ref in pair.references:
                ref_vec = _tfidf_vector(ref, order, idf)
                ref_norm = _norm(ref_vec)
                if cand_norm == 0.0 or ref_norm == 0.0:
                    continue
                dot = 0.0
                for gram, value in cand_vec.items():
                    rv = ref_vec.get(gram, 0.0)
                    dot += min(value, rv) * rv
                ref_total += CIDER_SCALE * dot / (cand_norm * ref_norm)
            pair_score += ref_total / len(pair.references)
        total += pair_score / CIDER_MAX_NGRAM
    return total / len(pairs)


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------

def evaluate_corpus(pairs: Sequence[EvalPair], smooth: bool = False) -> ScoreReport:
    """All seven numbers for one corpus."""
    pairs = _require_pairs(pairs)
    idf = build_idf(pairs)
    return ScoreReport(
        bleu1=bleu(pairs, 1, smooth),
        bleu2=bleu(pairs, 2, smooth),
        bleu3=bleu(pairs, 3, smooth),
        bleu4=bleu(pairs, 4, smooth),
        rouge_l=rouge_l(pairs),
        meteor=meteor_lite(pairs),
        cider=cider(pairs, idf),
    )


def render_table(rows: Iterable[Tuple[str, ScoreReport]], precision: int = 3) -> str:
    """Aligned text table, one row per labelled report."""
    rows = list(rows)
    if not rows:
        raise ValueError("nothing to render")
    label_width = max(len("Method"), max(len(label) for label, _ in rows))
    width = max(len(c) for c in REPORT_COLUMNS) + 2
    lines = ["# METEOR uses exact token matching only (no stems or synonyms)"]
    header = "Method".ljust(label_width) + "".join(c.rjust(width) for c in REPORT_COLUMNS)
    lines.append(header)
    lines.append("-" * len(header))
    for label, report in rows:
        cells = report.as_dict()
        line = label.ljust(label_width) + "".join(
            format(cells[c], f".{precision}f").rjust(width) for c in REPORT_COLUMNS)
        lines.append(line)
    return "\n".join(lines)
