"""Reference-based text metrics: ROUGE-1/2/L, METEOR, BLEU-4 and an embedding F1.

All functions take token lists produced by :func:`tokenize`, which handles
both English and Devanagari text.
"""

from __future__ import annotations

import math
import unicodedata
from collections import Counter
from functools import lru_cache
from typing import Iterable, Sequence

import snowballstemmer

from ..gateway import Gateway, cosine


def normalize_text(text: str) -> str:
    """NFC, casefold, and replace punctuation with spaces.

    A period or comma between two digits is kept so ``2.5`` stays one token.
    Devanagari vowel signs are combining marks, not punctuation, and survive.
    """
    text = unicodedata.normalize("NFC", text).casefold()
    chars = []
    for i, ch in enumerate(text):
        if unicodedata.category(ch).startswith("P"):
            between_digits = 0 < i < len(text) - 1 and text[i - 1].isdigit() and text[i + 1].isdigit()
            if not (ch in ".," and between_digits):
                chars.append(" ")
                continue
        chars.append(ch)
    return "".join(chars)


def tokenize(text: str) -> list[str]:
    return normalize_text(text).split()


def ngrams(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def _f1(p: float, r: float) -> float:
    return 0.0 if p + r == 0 else 2 * p * r / (p + r)


def rouge_n(pred_tokens: Sequence[str], truth_tokens: Sequence[str], n: int = 1) -> tuple[float, float, float]:
    """(precision, recall, f1) over clipped n-gram overlap."""
    if n not in (1, 2):
        raise ValueError(f"rouge_n supports n in {{1, 2}}, got {n}")
    pred, truth = ngrams(pred_tokens, n), ngrams(truth_tokens, n)
    overlap = sum((pred & truth).values())
    p = overlap / sum(pred.values()) if pred else 0.0
    r = overlap / sum(truth.values()) if truth else 0.0
    return p, r, _f1(p, r)


def lcs_length(a: Sequence[str], b: Sequence[str]) -> int:
    if not a or not b:
        return 0
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b, start=1):
            cur.append(prev[j - 1] + 1 if x == y else max(prev[j], cur[j - 1]))
        prev = cur
    return prev[-1]


def rouge_l(pred_tokens: Sequence[str], truth_tokens: Sequence[str]) -> float:
    lcs = lcs_length(pred_tokens, truth_tokens)
    if lcs == 0:
        return 0.0
    return _f1(lcs / len(pred_tokens), lcs / len(truth_tokens))


@lru_cache(maxsize=None)
def _english_stemmer():
    return snowballstemmer.stemmer("english")


def _stem(token: str, language: str) -> str:
    if language == "en":
        return _english_stemmer().stemWord(token)
    return token


def meteor_alignment(
    pred_tokens: Sequence[str], truth_tokens: Sequence[str], language: str = "en"
) -> list[tuple[int, int]]:
    """Greedy left-to-right alignment: exact matches first, then stem matches.

    Stemming applies to English only. Returns ``(pred_idx, truth_idx)``
    pairs sorted by prediction position.
    """
    used_pred: set[int] = set()
    used_truth: set[int] = set()
    pairs = []
    stages = [lambda t: t]
    if language == "en":
        stages.append(lambda t: _stem(t, "en"))
    for key in stages:
        truth_keys = [key(t) for t in truth_tokens]
        for i, tok in enumerate(pred_tokens):
            if i in used_pred:
                continue
            k = key(tok)
            for j, tk in enumerate(truth_keys):
                if j not in used_truth and tk == k:
                    pairs.append((i, j))
                    used_pred.add(i)
                    used_truth.add(j)
                    break
    return sorted(pairs)


def count_chunks(pairs: Sequence[tuple[int, int]]) -> int:
    chunks = 0
    prev = None
    for i, j in pairs:
        if prev is None or i != prev[0] + 1 or j != prev[1] + 1:
            chunks += 1
        prev = (i, j)
    return chunks


def meteor(pred_tokens: Sequence[str], truth_tokens: Sequence[str], language: str = "en") -> float:
    """METEOR with recall-weighted harmonic mean and the cubic fragmentation penalty."""
    pairs = meteor_alignment(pred_tokens, truth_tokens, language)
    m = len(pairs)
    if m == 0:
        return 0.0
    p = m / len(pred_tokens)
    r = m / len(truth_tokens)
    f_mean = 10 * p * r / (r + 9 * p)
    penalty = 0.5 * (count_chunks(pairs) / m) ** 3
    return f_mean * (1 - penalty)


def corpus_bleu(pairs: Iterable[tuple[Sequence[str], Sequence[str]]], max_n: int = 4) -> float:
    """Corpus BLEU with clipped counts, uniform weights, no smoothing, and brevity penalty.

    ``pairs`` are ``(pred_tokens, truth_tokens)``.
    """
    matched = [0] * max_n
    total = [0] * max_n
    pred_len = truth_len = 0
    for pred, truth in pairs:
        pred_len += len(pred)
        truth_len += len(truth)
        for n in range(1, max_n + 1):
            p, t = ngrams(pred, n), ngrams(truth, n)
            matched[n - 1] += sum((p & t).values())
            total[n - 1] += sum(p.values())
    if pred_len == 0 or any(m == 0 for m in matched):
        return 0.0
    log_precision = sum(math.log(m / t) for m, t in zip(matched, total)) / max_n
    bp = 1.0 if pred_len > truth_len else math.exp(1 - truth_len / pred_len)
    return bp * math.exp(log_precision)


def embedding_f1(pred_tokens: Sequence[str], truth_tokens: Sequence[str], gateway: Gateway) -> float:
    """Greedy token-embedding match F1, a cheap stand-in for BERTScore."""
    if not pred_tokens or not truth_tokens:
        return 0.0
    vocab = sorted(set(pred_tokens) | set(truth_tokens))
    vectors = dict(zip(vocab, gateway.embed(vocab)))
    sims = [[cosine(vectors[p], vectors[t]) for t in truth_tokens] for p in pred_tokens]
    precision = sum(max(row) for row in sims) / len(pred_tokens)
    recall = sum(max(sims[i][j] for i in range(len(pred_tokens))) for j in range(len(truth_tokens))) / len(truth_tokens)
    # negative cosines carry no match credit
    return _f1(max(0.0, precision), max(0.0, recall))
