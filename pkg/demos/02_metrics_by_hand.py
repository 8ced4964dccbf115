"""
Scoring captions
================

BLEU, ROUGE-L and CIDEr-D on a few hand-written captions. Inputs may be
strings (they are tokenized: lowercase, punctuation stripped) or token lists.
"""

from capmod.metrics import bleu, cider, cider_scores, lcs_length, rouge_l

cands = ["a man riding a horse on the beach",
         "two dogs play in the snow",
         "a plate of food on a table"]
refs = [["a man rides a horse along the beach", "a person riding a horse on sand"],
        ["two dogs playing in snow", "a pair of dogs run through the snow"],
        ["a plate with food sits on a wooden table", "food on a plate"]]

b = bleu(cands, refs)
print("BLEU-1..4 ", [round(v, 4) for v in b])
print("ROUGE-L   ", round(rouge_l(cands, refs), 4))
print("CIDEr-D   ", round(cider(cands, refs), 4))
print("per image ", [round(v, 3) for v in cider_scores(cands, refs)])

# clipping: "the" can only be matched as often as it appears in a reference
print("clipped unigram precision:", bleu(["the the the"], [["the cat"]])[0])

# ROUGE-L is built on the longest common subsequence
print("LCS(a b c d, a c d) =", lcs_length("a b c d".split(), "a c d".split()))

# a caption scored against itself gets the maximum everywhere
print("identity:", bleu(cands, [[c] for c in cands])[3], rouge_l(cands, [[c] for c in cands]),
      cider(cands, [[c] for c in cands]))
