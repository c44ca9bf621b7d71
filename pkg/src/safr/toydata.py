"""Synthetic sentiment corpus for smoke tests and demos.

Each sentence mixes neutral filler with a few polarity words; the label is
the sign of the polarity sum (ties are resolved by the first polarity word).
Only a handful of tokens decide the label, which makes deletion-based
evaluation easy to read.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .data import RawExample

POSITIVE = ("great", "wonderful", "moving", "brilliant", "charming", "funny",
            "superb", "delightful", "gripping", "warm")
NEGATIVE = ("dull", "tedious", "awful", "boring", "clumsy", "bland",
            "preposterous", "lifeless", "messy", "weak")
FILLER = ("the", "film", "a", "movie", "story", "is", "and", "with", "its", "cast",
          "plot", "this", "was", "of", "director", "script", "really", "quite",
          "scenes", "ending", "that", "performance", "it", "on", "at", "an",
          "acting", "music", "time", "again", "some", "more", "by", "for", "as")


def sentiment_corpus(n: int, seed: int = 0, min_len: int = 6,
                     max_len: int = 18) -> list[RawExample]:
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n):
        T = int(rng.integers(min_len, max_len + 1))
        words = list(rng.choice(FILLER, size=T))
        n_pol = int(rng.integers(1, 4))
        slots = rng.choice(T, size=n_pol, replace=False)
        score, first = 0, 0
        for s in sorted(slots):
            positive = bool(rng.random() < 0.5)
            words[s] = str(rng.choice(POSITIVE if positive else NEGATIVE))
            score += 1 if positive else -1
            first = first or (1 if positive else -1)
        label = int(score > 0 or (score == 0 and first > 0))
        out.append(RawExample(label, " ".join(words)))
    return out


def write_tsv(examples: list[RawExample], path) -> Path:
    path = Path(path)
    path.write_text("".join(f"{ex.label}\t{ex.text}\n" for ex in examples), encoding="utf-8")
    return path
