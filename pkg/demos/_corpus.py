"""Shared synthetic corpus for the demos."""

import os
from pathlib import Path

from safr.data import ingest
from safr.toydata import sentiment_corpus, write_tsv

OUT = Path(os.environ.get("SAFR_OUT_DIR", "demo_out"))


def corpus(n_train=1500, n_dev=300, n_test=500):
    d = OUT / "corpus"
    d.mkdir(parents=True, exist_ok=True)
    paths = [write_tsv(sentiment_corpus(n, seed, 4, 24), d / f"{name}.tsv")
             for name, n, seed in (("train", n_train, 0), ("dev", n_dev, 1), ("test", n_test, 2))]
    ds, _ = ingest(*paths, min_freq=1, max_len=32, seed=0)
    return ds
