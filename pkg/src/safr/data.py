"""Corpus ingestion: TSV parsing, word tokenization, vocabulary, batching.

Input files hold one ``label<TAB>text`` example per line. Encoded splits can
be written to a binary cache (``SAFRDS1\\0`` container) plus a JSON manifest
so that training and evaluation runs see bit-identical inputs.
"""

from __future__ import annotations

import hashlib
import json
import logging
import struct
import string
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

PAD, UNK = 0, 1
PAD_TOKEN, UNK_TOKEN = "<pad>", "<unk>"

DATASET_MAGIC = b"SAFRDS1\0"
DATASET_VERSION = 1

# Defaults per corpus; neither value comes from the original experiments.
DEFAULTS = {
    "sst2": {"min_freq": 2, "max_len": 64, "batch_size": 64},
    "imdb": {"min_freq": 5, "max_len": 256, "batch_size": 32},
}

_PUNCT = string.punctuation


class DataFormatError(ValueError):
    """Raised for malformed corpus files."""


@dataclass
class RawExample:
    label: int
    text: str


@dataclass
class TokenizedExample:
    token_ids: list[int]
    tokens: list[str]
    label: int

    @property
    def T(self) -> int:
        return len(self.token_ids)


@dataclass
class DatasetSplit:
    name: str
    examples: list[TokenizedExample]

    @property
    def N(self) -> int:
        return len(self.examples)

    def __len__(self):
        return len(self.examples)


@dataclass
class IngestReport:
    read: int = 0
    rejected: int = 0
    truncated: int = 0


def load_tsv(path, num_classes: int = 2) -> list[RawExample]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\r\n")
            if not line.strip():
                continue
            if "\t" not in line:
                raise DataFormatError(f"{path}:{lineno}: missing tab separator")
            label_str, text = line.split("\t", 1)
            try:
                label = int(label_str)
            except ValueError:
                raise DataFormatError(
                    f"{path}:{lineno}: non-integer label {label_str!r}") from None
            if not 0 <= label < num_classes:
                raise DataFormatError(
                    f"{path}:{lineno}: label out of range ({label} not in [0, {num_classes}))")
            out.append(RawExample(label, text))
    if not out:
        raise DataFormatError(f"{path}: no examples")
    return out


def tokenize(text: str) -> list[str]:
    """Lowercase, split on whitespace, peel punctuation off piece edges."""
    tokens = []
    for piece in text.lower().split():
        core = piece.strip(_PUNCT)
        if not core:
            tokens.extend(piece)
            continue
        start = piece.index(core)
        tokens.extend(piece[:start])
        tokens.append(core)
        tokens.extend(piece[start + len(core):])
    return tokens


class Vocab:
    def __init__(self, itos: list[str], min_freq: int = 1):
        if itos[:2] != [PAD_TOKEN, UNK_TOKEN]:
            raise ValueError("vocab must start with the pad and unk tokens")
        self.itos = list(itos)
        self.stoi = {tok: i for i, tok in enumerate(self.itos)}
        if len(self.stoi) != len(self.itos):
            raise ValueError("duplicate tokens in vocab")
        self.min_freq = min_freq

    def __len__(self):
        return len(self.itos)

    def __contains__(self, token):
        return token in self.stoi

    def __eq__(self, other):
        return isinstance(other, Vocab) and self.itos == other.itos

    def lookup(self, token: str) -> int:
        return self.stoi.get(token, UNK)

    def digest(self) -> str:
        return hashlib.sha256("\n".join(self.itos).encode("utf-8")).hexdigest()


def build_vocab(train: list[RawExample], min_freq: int = 1) -> Vocab:
    if not train:
        raise ValueError("cannot build a vocabulary from an empty split")
    counts = Counter()
    for ex in train:
        counts.update(tokenize(ex.text))
    kept = sorted((t for t, c in counts.items() if c >= min_freq),
                  key=lambda t: (-counts[t], t))
    return Vocab([PAD_TOKEN, UNK_TOKEN] + kept, min_freq=min_freq)


def encode(example: RawExample, vocab: Vocab, max_len: int) -> TokenizedExample:
    tokens = tokenize(example.text)
    if not tokens:
        raise DataFormatError("example has no tokens")
    tokens = tokens[:max_len]
    return TokenizedExample([vocab.lookup(t) for t in tokens], tokens, example.label)


def encode_all(raw: list[RawExample], vocab: Vocab, max_len: int,
               name: str = "train", report: IngestReport | None = None) -> DatasetSplit:
    report = report if report is not None else IngestReport()
    examples = []
    for ex in raw:
        report.read += 1
        try:
            enc = encode(ex, vocab, max_len)
        except DataFormatError:
            report.rejected += 1
            continue
        if len(tokenize(ex.text)) > max_len:
            report.truncated += 1
        examples.append(enc)
    if not examples:
        raise DataFormatError(f"split {name!r} has no usable examples")
    return DatasetSplit(name, examples)


@dataclass
class Batch:
    token_ids: np.ndarray  # (B, T_max) int64, right-padded with PAD
    lengths: np.ndarray    # (B,) true lengths
    labels: np.ndarray     # (B,)
    indices: np.ndarray    # positions of the examples in their split


def pad_examples(examples: list[TokenizedExample], indices=None) -> Batch:
    lengths = np.array([ex.T for ex in examples], dtype=np.int64)
    ids = np.full((len(examples), int(lengths.max())), PAD, dtype=np.int64)
    for row, ex in enumerate(examples):
        ids[row, : ex.T] = ex.token_ids
    labels = np.array([ex.label for ex in examples], dtype=np.int64)
    if indices is None:
        indices = np.arange(len(examples))
    return Batch(ids, lengths, labels, np.asarray(indices, dtype=np.int64))


def make_batches(split: DatasetSplit, batch_size: int,
                 seed: int | None = None) -> list[Batch]:
    """Shuffle under ``seed`` (``None`` keeps file order) and pad per batch."""
    if split.N == 0:
        raise ValueError("cannot batch an empty split")
    if seed is None:
        order = np.arange(split.N)
    else:
        order = np.random.default_rng(seed).permutation(split.N)
    return [
        pad_examples([split.examples[i] for i in chunk], chunk)
        for chunk in (order[s: s + batch_size] for s in range(0, split.N, batch_size))
    ]


def split_train_dev(raw: list[RawExample], dev_fraction: float,
                    seed: int) -> tuple[list[RawExample], list[RawExample]]:
    """Seeded split used when a corpus ships without a dev set (IMDB)."""
    order = np.random.default_rng(seed).permutation(len(raw))
    n_dev = int(round(dev_fraction * len(raw)))
    dev_idx = set(order[:n_dev].tolist())
    train = [ex for i, ex in enumerate(raw) if i not in dev_idx]
    dev = [ex for i, ex in enumerate(raw) if i in dev_idx]
    return train, dev


@dataclass
class Dataset:
    vocab: Vocab
    splits: dict[str, DatasetSplit]
    seed: int = 0
    max_len: int = 64
    meta: dict = field(default_factory=dict)

    def __getitem__(self, name) -> DatasetSplit:
        return self.splits[name]


def ingest(train_path, dev_path=None, test_path=None, *, min_freq=2, max_len=64,
           seed=0, num_classes=2, dev_fraction=0.2) -> tuple[Dataset, dict]:
    raw_train = load_tsv(train_path, num_classes)
    meta = {"train_path": str(train_path)}
    if dev_path is None:
        raw_train, raw_dev = split_train_dev(raw_train, dev_fraction, seed)
        meta["dev_from_train"] = {"fraction": dev_fraction, "seed": seed}
    else:
        raw_dev = load_tsv(dev_path, num_classes)
        meta["dev_path"] = str(dev_path)
    raws = {"train": raw_train, "dev": raw_dev}
    if test_path is not None:
        raws["test"] = load_tsv(test_path, num_classes)
        meta["test_path"] = str(test_path)
    vocab = build_vocab(raw_train, min_freq)
    reports, splits = {}, {}
    for name, raw in raws.items():
        reports[name] = IngestReport()
        splits[name] = encode_all(raw, vocab, max_len, name, reports[name])
    meta["num_classes"] = num_classes
    meta["min_freq"] = min_freq
    ds = Dataset(vocab, splits, seed=seed, max_len=max_len, meta=meta)
    return ds, {k: vars(v) for k, v in reports.items()}


# -- binary cache --------------------------------------------------------

def _u32(n: int) -> bytes:
    return struct.pack("<I", n)


def dataset_to_bytes(ds: Dataset) -> bytes:
    header = {
        "version": DATASET_VERSION,
        "seed": ds.seed,
        "max_len": ds.max_len,
        "min_freq": ds.vocab.min_freq,
        "vocab": ds.vocab.itos,
        "splits": [[name, split.N] for name, split in ds.splits.items()],
        "meta": ds.meta,
    }
    head = json.dumps(header, sort_keys=True, ensure_ascii=False).encode("utf-8")
    parts = [DATASET_MAGIC, _u32(len(head)), head]
    for split in ds.splits.values():
        parts.append(_u32(split.N))
        for ex in split.examples:
            parts.append(struct.pack(f"<II{ex.T}I", ex.label, ex.T, *ex.token_ids))
            surface = "\t".join(ex.tokens).encode("utf-8")
            parts.append(_u32(len(surface)))
            parts.append(surface)
    return b"".join(parts)


def dataset_from_bytes(blob: bytes) -> Dataset:
    if blob[:8] != DATASET_MAGIC:
        raise DataFormatError("not a dataset cache (bad magic)")
    (hlen,) = struct.unpack_from("<I", blob, 8)
    header = json.loads(blob[12: 12 + hlen].decode("utf-8"))
    if header["version"] != DATASET_VERSION:
        raise DataFormatError(f"unsupported dataset cache version {header['version']}")
    off = 12 + hlen
    splits = {}
    for name, count in header["splits"]:
        (n,) = struct.unpack_from("<I", blob, off)
        off += 4
        if n != count:
            raise DataFormatError(f"split {name}: header says {count}, body says {n}")
        examples = []
        for _ in range(n):
            label, T = struct.unpack_from("<II", blob, off)
            off += 8
            ids = list(struct.unpack_from(f"<{T}I", blob, off))
            off += 4 * T
            (slen,) = struct.unpack_from("<I", blob, off)
            off += 4
            tokens = blob[off: off + slen].decode("utf-8").split("\t")
            off += slen
            examples.append(TokenizedExample(ids, tokens, label))
        splits[name] = DatasetSplit(name, examples)
    if off != len(blob):
        raise DataFormatError("trailing bytes in dataset cache")
    vocab = Vocab(header["vocab"], header["min_freq"])
    return Dataset(vocab, splits, seed=header["seed"], max_len=header["max_len"],
                   meta=header["meta"])


def save_dataset(ds: Dataset, path) -> str:
    """Write the cache and return its sha256."""
    blob = dataset_to_bytes(ds)
    Path(path).write_bytes(blob)
    return hashlib.sha256(blob).hexdigest()


def load_dataset(path) -> Dataset:
    return dataset_from_bytes(Path(path).read_bytes())


def file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def dataset_manifest(ds: Dataset, digest: str | None = None,
                     reports: dict | None = None) -> dict:
    out = {
        "counts": {name: split.N for name, split in ds.splits.items()},
        "vocab_size": len(ds.vocab),
        "vocab_sha256": ds.vocab.digest(),
        "seed": ds.seed,
        "max_len": ds.max_len,
        "min_freq": ds.vocab.min_freq,
        "meta": ds.meta,
    }
    if digest is not None:
        out["cache_sha256"] = digest
    if reports is not None:
        out["ingest"] = reports
    return out
