#!/usr/bin/env python3
"""Corpus BLEU-4 with multi-bleu.perl semantics.

Case-sensitive, whitespace tokenization, no smoothing: if any order has
zero clipped matches the score is zero. Brevity penalty is
exp(1 - ref_len/hyp_len) when the hypothesis corpus is shorter, else 1.

Usage: multi_bleu.py REFERENCE_FILE < HYPOTHESIS_FILE

Prints the classic one-line summary, then full-precision `key: value`
lines for tests that parse the exact numbers.
"""

import math
import sys


def ngram_counts(words, n):
    counts = {}
    for i in range(len(words) - n + 1):
        gram = tuple(words[i : i + n])
        counts[gram] = counts.get(gram, 0) + 1
    return counts


def corpus_bleu(hyps, refs):
    total = [0] * 4
    correct = [0] * 4
    hyp_len = 0
    ref_len = 0
    for hyp, ref in zip(hyps, refs):
        hyp_len += len(hyp)
        ref_len += len(ref)
        for n in range(1, 5):
            ref_grams = ngram_counts(ref, n)
            for gram, count in ngram_counts(hyp, n).items():
                total[n - 1] += count
                correct[n - 1] += min(count, ref_grams.get(gram, 0))
    precisions = [c / t if t else 0.0 for c, t in zip(correct, total)]
    if hyp_len == 0:
        bp = 0.0
    elif hyp_len < ref_len:
        bp = math.exp(1.0 - ref_len / hyp_len)
    else:
        bp = 1.0
    if any(p == 0.0 for p in precisions) or hyp_len == 0:
        bleu = 0.0
    else:
        bleu = 100.0 * bp * math.exp(sum(math.log(p) for p in precisions) / 4.0)
    return bleu, precisions, bp, hyp_len, ref_len


def main():
    if len(sys.argv) != 2:
        sys.exit(f"usage: {sys.argv[0]} REFERENCE_FILE < HYPOTHESIS_FILE")
    with open(sys.argv[1], encoding="utf-8") as f:
        refs = [line.split() for line in f]
    hyps = [line.split() for line in sys.stdin]
    if len(hyps) != len(refs):
        sys.exit(f"line count mismatch: {len(hyps)} hypotheses vs {len(refs)} references")

    bleu, precisions, bp, hyp_len, ref_len = corpus_bleu(hyps, refs)
    ratio = hyp_len / ref_len if ref_len else 0.0
    print(
        "BLEU = {:.2f}, {:.1f}/{:.1f}/{:.1f}/{:.1f} "
        "(BP={:.3f}, ratio={:.3f}, hyp_len={}, ref_len={})".format(
            bleu, *(100.0 * p for p in precisions), bp, ratio, hyp_len, ref_len
        )
    )
    print(f"bleu: {bleu!r}")
    for n, p in enumerate(precisions, start=1):
        print(f"p{n}: {p!r}")
    print(f"bp: {bp!r}")
    print(f"hyp_len: {hyp_len}")
    print(f"ref_len: {ref_len}")


if __name__ == "__main__":
    main()
