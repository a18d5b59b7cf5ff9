"""Caption metrics against hand fixtures and brute-force oracles."""

import math

import numpy as np
import pytest

from multiabn.metrics import (
    REPORT_COLUMNS,
    EvalPair,
    ScoreReport,
    bleu,
    build_idf,
    cider,
    evaluate_corpus,
    meteor_lite,
    render_table,
    rouge_l,
)

from metric_oracles import oracle_bleu, oracle_cider, oracle_meteor, oracle_rouge


def pair(cand, *refs):
    return EvalPair(tuple(cand.split()), tuple(tuple(r.split()) for r in refs))


def random_pairs(seed, count=50, vocab=("a", "b", "c", "d", "e", "f"), max_len=8):
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(count):
        cand = tuple(vocab[i] for i in rng.integers(0, len(vocab), rng.integers(0, max_len + 1)))
        refs = tuple(
            tuple(vocab[i] for i in rng.integers(0, len(vocab), rng.integers(1, max_len + 1)))
            for _ in range(int(rng.integers(1, 4))))
        out.append(EvalPair(cand, refs))
    return out


# ---------------------------------------------------------------------------
# hand fixtures
# ---------------------------------------------------------------------------

def test_bleu_identity():
    pairs = [pair("bring me the red ball", "bring me the red ball")]
    for n in range(1, 5):
        assert bleu(pairs, n) == pytest.approx(1.0, abs=1e-12)


def test_bleu_brevity_penalty_fixture():
    pairs = [pair("the cat", "the cat sat")]
    assert bleu(pairs, 1) == pytest.approx(math.exp(-0.5), abs=1e-12)


def test_bleu_zero_overlap_and_smoothing():
    pairs = [pair("x y", "p q r")]
    assert bleu(pairs, 1) == 0.0
    assert bleu(pairs, 1, smooth=True) > 0.0


def test_bleu_closest_reference_length():
    # candidate length 2; reference lengths 2 and 9: closest is 2, no penalty
    pairs = [pair("the cat", "the cat", "the cat sat down on the soft warm mat")]
    assert bleu(pairs, 1) == pytest.approx(1.0, abs=1e-12)


def test_bleu_contract_errors():
    with pytest.raises(ValueError):
        bleu([], 1)
    with pytest.raises(ValueError):
        bleu([pair("a", "a")], 5)


def test_rouge_fixture():
    pairs = [pair("a b c", "a c")]
    p, r = 2 / 3, 1.0
    expected = (1 + 1.44) * p * r / (r + 1.44 * p)
    assert rouge_l(pairs) == pytest.approx(expected, abs=1e-12)
    assert expected == pytest.approx(0.8299, abs=1e-4)


def test_rouge_identity_and_disjoint():
    assert rouge_l([pair("a b c", "a b c")]) == pytest.approx(1.0)
    assert rouge_l([pair("a b", "x y")]) == 0.0


def test_meteor_single_word():
    assert meteor_lite([pair("cat", "cat")]) == pytest.approx(0.5, abs=1e-12)


def test_meteor_identity_length_l():
    for length in (2, 5, 9):
        words = " ".join(f"w{i}" for i in range(length))
        expected = 1.0 - 0.5 / length ** 3
        assert meteor_lite([pair(words, words)]) == pytest.approx(expected, abs=1e-12)


def test_meteor_disjoint():
    assert meteor_lite([pair("a b", "x y")]) == 0.0


def test_meteor_prefers_fewer_chunks():
    # both orderings give m=3; contiguous match must be found (1 chunk)
    score = meteor_lite([pair("a b c", "a b c x a")])
    m, chunks = 3, 1
    p, r = m / 3, m / 5
    f = 10 * p * r / (r + 9 * p)
    assert score == pytest.approx(f * (1 - 0.5 * (chunks / m) ** 3), abs=1e-12)


def test_cider_exact_match_distinct_corpus():
    pairs = [
        pair("bring me the red ball", "bring me the red ball"),
        pair("grab a green cup now", "grab a green cup now"),
    ]
    assert cider(pairs) == pytest.approx(10.0, abs=1e-9)


def test_cider_orthogonal():
    pairs = [
        pair("x y z w", "bring me the red ball"),
        pair("u v q t", "grab a green cup now"),
    ]
    assert cider(pairs) == pytest.approx(0.0, abs=1e-12)


def test_cider_contract_errors():
    with pytest.raises(ValueError):
        cider([])
    with pytest.raises(ValueError):
        build_idf([])


def test_eval_pair_validation():
    with pytest.raises(ValueError):
        EvalPair(("a",), ())
    with pytest.raises(ValueError):
        EvalPair(("a",), ((),))


# ---------------------------------------------------------------------------
# oracle agreement
# ---------------------------------------------------------------------------

def test_bleu_matches_oracle():
    pairs = random_pairs(11)
    for n in range(1, 5):
        assert bleu(pairs, n) == pytest.approx(oracle_bleu(pairs, n), abs=1e-9)
        assert bleu(pairs, n, smooth=True) == pytest.approx(
            oracle_bleu(pairs, n, smooth=True), abs=1e-9)


def test_rouge_matches_oracle():
    pairs = random_pairs(12)
    assert rouge_l(pairs) == pytest.approx(oracle_rouge(pairs), abs=1e-9)


def test_meteor_matches_oracle():
    pairs = random_pairs(13)
    assert meteor_lite(pairs) == pytest.approx(oracle_meteor(pairs), abs=1e-9)


def test_cider_matches_oracle():
    pairs = random_pairs(14)
    assert cider(pairs) == pytest.approx(oracle_cider(pairs), abs=1e-9)


# ---------------------------------------------------------------------------
# corpus-level properties
# ---------------------------------------------------------------------------

def all_scores(pairs):
    report = evaluate_corpus(pairs)
    return [report.bleu1, report.bleu2, report.bleu3, report.bleu4,
            report.rouge_l, report.meteor, report.cider]


def test_metric_ranges():
    for seed in (21, 22, 23):
        scores = all_scores(random_pairs(seed, count=20))
        for value in scores[:6]:
            assert 0.0 <= value <= 1.0
        assert 0.0 <= scores[6] <= 10.0


def test_permutation_invariance():
    pairs = random_pairs(31, count=20)
    rng = np.random.default_rng(0)
    shuffled = [pairs[i] for i in rng.permutation(len(pairs))]
    for a, b in zip(all_scores(pairs), all_scores(shuffled)):
        assert a == pytest.approx(b, abs=1e-9)


def test_corruption_never_helps():
    sentences = [
        "bring me the red ball from the table",
        "take the small blue box from the upper part of the shelf",
        "fetch the doll closest to the green bottle from the sofa",
        "give me the big yellow bottle on the left side of the table",
    ]
    perfect = [pair(s, s) for s in sentences]
    baseline = all_scores(perfect)
    rng = np.random.default_rng(5)
    for _ in range(12):
        i = int(rng.integers(0, len(sentences)))
        words = sentences[i].split()
        j = int(rng.integers(0, len(words)))
        words[j] = "zzz"
        corrupted = list(perfect)
        corrupted[i] = EvalPair(tuple(words), perfect[i].references)
        for before, after in zip(baseline, all_scores(corrupted)):
            assert after <= before + 1e-12


def test_deterministic():
    pairs = random_pairs(41, count=10)
    assert all_scores(pairs) == all_scores(pairs)


# ---------------------------------------------------------------------------
# report rendering
# ---------------------------------------------------------------------------

def test_report_columns_and_format():
    report = ScoreReport(0.390, 0.287, 0.184, 0.142, 0.359, 0.193, 1.048)
    text = render_table([("Ours (Multi-ABN)", report)])
    lines = text.splitlines()
    assert lines[0].startswith("#")
    for column in REPORT_COLUMNS:
        assert column in lines[1]
    row = lines[-1]
    for value in ("0.390", "0.287", "0.184", "0.142", "0.359", "0.193", "1.048"):
        assert value in row
    assert report.as_dict()["CIDEr"] == 1.048


def test_report_from_perfect_corpus():
    sentences = ["bring me the red ball", "grab a green cup now"]
    pairs = [pair(s, s) for s in sentences]
    report = evaluate_corpus(pairs)
    assert report.bleu1 == pytest.approx(1.0)
    assert report.bleu4 == pytest.approx(1.0)
    assert report.rouge_l == pytest.approx(1.0)
    assert report.cider == pytest.approx(10.0, abs=1e-9)
    expected_meteor = float(np.mean([1 - 0.5 / len(s.split()) ** 3 for s in sentences]))
    assert report.meteor == pytest.approx(expected_meteor, abs=1e-12)


def test_render_rejects_empty():
    with pytest.raises(ValueError):
        render_table([])
