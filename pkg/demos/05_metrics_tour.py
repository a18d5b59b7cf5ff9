"""A tour of the caption metrics.

Walks through BLEU, ROUGE-L, METEOR and CIDEr on small examples, then shows
how each score degrades as a candidate sentence is progressively corrupted.
"""

from multiabn.metrics import (
    EvalPair,
    bleu,
    build_idf,
    cider,
    evaluate_corpus,
    meteor_lite,
    render_table,
    rouge_l,
)

def pair(candidate: str, *references: str) -> EvalPair:
    return EvalPair(tuple(candidate.split()), tuple(tuple(r.split()) for r in references))

print("== BLEU ==")
p = [pair("the cat", "the cat sat")]
print(f"'the cat' vs 'the cat sat': BLEU-1 = {bleu(p, 1):.5f}")
print("  unigram precision is 1.0 but the brevity penalty exp(1 - 3/2) bites")
p = [pair("a b c d", "e f g h")]
print(f"disjoint sentences: BLEU-1 = {bleu(p, 1):.5f},"
      f" smoothed = {bleu(p, 1, smooth=True):.5f}")

print()
print("== ROUGE-L ==")
p = [pair("a b x c", "a b c")]
print(f"LCS fixture: {rouge_l(p):.4f}  (recall-weighted F with beta^2 = 1.44)")

print()
print("== METEOR ==")
p = [pair("b a", "a b")]
print(f"'b a' vs 'a b': {meteor_lite(p):.4f}")
print("  all words match but the aligned chunks are scrambled, so the")
print("  fragmentation penalty 0.5 * (chunks/matches)^3 costs half the score")
p = [pair("a b", "a b")]
print(f"'a b' vs 'a b': {meteor_lite(p):.4f}  (one chunk, tiny penalty)")

print()
print("== CIDEr ==")
corpus = [
    pair("bring me the red ball", "bring me the red ball"),
    pair("grab a green cup now", "grab a green cup now"),
]
print(f"exact matches over a distinct corpus: {cider(corpus):.4f}  (the 10x ceiling)")
idf = build_idf(corpus)
mixed = [EvalPair(("grab", "a", "red", "ball"), corpus[0].references)]
print(f"half-right candidate under the same idf: {cider(mixed, idf):.4f}")

print()
print("== corruption never helps ==")
print("idf comes from the reference corpus, so CIDEr needs several documents")
print("to say anything; the two distractor pairs below stay exact throughout.")
reference = "move the small blue cup from the left side of the shelf to me"
candidate = reference.split()
distractors = [pair(s, s) for s in (
    "put the big green can on the table",
    "carry a purple doll over to the sofa",
)]
rows = []
for n_swaps, label in ((0, "exact"), (2, "2 words wrong"), (5, "5 words wrong")):
    corrupted = list(candidate)
    for i in range(n_swaps):
        corrupted[2 + 2 * i] = f"wrong{i}"
    corpus = [EvalPair(tuple(corrupted), (tuple(candidate),))] + distractors
    rows.append((label, evaluate_corpus(corpus)))
print(render_table(rows))
