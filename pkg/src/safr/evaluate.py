"""Deletion-based evaluation of how well capacity tracks token importance.

The central score is the accuracy drop after deleting the top ``k`` percent
of each input's tokens, ranked by per-token capacity at one layer (FC1 by
default). A random-deletion baseline with the same deletion count is
reported alongside.
"""

from __future__ import annotations

import logging
import math
import traceback
from dataclasses import dataclass, field, replace
from typing import Iterable, Iterator, Sequence

import numpy as np
import torch

from .data import Dataset, DatasetSplit, TokenizedExample, pad_examples
from .metrics import LAYER_TAGS, capacity
from .model import Checkpoint, ForwardTrace, ModelConfig, SafrClassifier

log = logging.getLogger(__name__)

DEFAULT_LAYER = "fc1"
DEFAULT_RANDOM_SEEDS = (0, 1, 2, 3, 4)


def _as_model(obj) -> SafrClassifier:
    if isinstance(obj, Checkpoint):
        return obj.model()
    return obj


def _examples(split) -> list[TokenizedExample]:
    examples = split.examples if isinstance(split, DatasetSplit) else list(split)
    if not examples:
        raise ValueError("split is empty")
    return examples


def iter_traces(model, examples: Sequence[TokenizedExample],
                batch_size: int = 128) -> Iterator[ForwardTrace]:
    model = _as_model(model)
    with torch.no_grad():
        for s in range(0, len(examples), batch_size):
            chunk = examples[s: s + batch_size]
            bt = model(pad_examples(chunk).token_ids, [ex.T for ex in chunk], "eval")
            for b, ex in enumerate(chunk):
                yield bt.example(b, ex.tokens)


def predictions(model, examples: Sequence[TokenizedExample], batch_size: int = 256) -> np.ndarray:
    model = _as_model(model)
    out = []
    with torch.no_grad():
        for s in range(0, len(examples), batch_size):
            chunk = examples[s: s + batch_size]
            bt = model(pad_examples(chunk).token_ids, [ex.T for ex in chunk], "eval")
            out.append(bt.logits.argmax(-1).numpy())
    return np.concatenate(out)


def accuracy(model, split) -> float:
    examples = _examples(split)
    labels = np.array([ex.label for ex in examples])
    return float((predictions(model, examples) == labels).mean())


def _percent_correct(preds, labels) -> float:
    return 100.0 * float(np.count_nonzero(preds == labels)) / len(labels)


# -- ranking and deletion ------------------------------------------------

def rank_tokens_by_capacity(trace: ForwardTrace, layer_tag: str = DEFAULT_LAYER) -> np.ndarray:
    """Token positions by descending capacity; ties keep the earlier position first."""
    if layer_tag not in LAYER_TAGS:
        raise KeyError(f"unknown layer {layer_tag!r}")
    cap = capacity(trace.layer(layer_tag))
    return np.argsort(-cap, kind="stable")


def deletion_count(T: int, k: float) -> int:
    """Tokens to delete: ``floor(k T / 100)``, at least one when ``k > 0``, at most ``T - 1``."""
    if not 0 <= k <= 100:
        raise ValueError(f"k must be in [0, 100], got {k}")
    if k == 0:
        return 0
    m = max(1, math.floor(k * T / 100))
    return min(m, T - 1)


def _drop(example: TokenizedExample, positions) -> TokenizedExample:
    gone = set(int(i) for i in positions)
    keep = [i for i in range(example.T) if i not in gone]
    return TokenizedExample([example.token_ids[i] for i in keep],
                            [example.tokens[i] for i in keep], example.label)


def delete_topk(example: TokenizedExample, ranking, k: float) -> TokenizedExample:
    m = deletion_count(example.T, k)
    if m == 0:
        return example
    return _drop(example, list(ranking)[:m])


def delete_random(example: TokenizedExample, k: float, seed) -> TokenizedExample:
    m = deletion_count(example.T, k)
    if m == 0:
        return example
    rng = np.random.default_rng(seed)
    return _drop(example, rng.choice(example.T, size=m, replace=False))


# -- reports -------------------------------------------------------------

@dataclass
class SrsReport:
    """Accuracies in percent; ``srs`` in percentage points."""

    k: float
    acc_original: float
    acc_random: float
    acc_capacity: float
    srs: float
    layer_tag: str
    N: int
    acc_random_per_seed: list[float] = field(default_factory=list)

    def row(self) -> tuple:
        return (self.k, self.acc_original, self.acc_random, self.acc_capacity, self.srs)


SRS_COLUMNS = ("k", "acc_s", "acc_r", "acc_k", "srs")


def srs(model, split, k: float = 30, layer_tag: str = DEFAULT_LAYER,
        random_seeds: Iterable[int] = DEFAULT_RANDOM_SEEDS, *, _cache=None) -> SrsReport:
    """Accuracy before vs. after deleting the top-``k``% capacity tokens."""
    model = _as_model(model)
    examples = _examples(split)
    labels = np.array([ex.label for ex in examples])
    if _cache is None:
        _cache = _srs_cache(model, examples, layer_tag)
    base_preds, rankings = _cache
    acc_s = _percent_correct(base_preds, labels)
    if k == 0:
        acc_k = acc_s
        per_seed = [acc_s for _ in random_seeds]
    else:
        cut = [delete_topk(ex, r, k) for ex, r in zip(examples, rankings)]
        acc_k = _percent_correct(predictions(model, cut), labels)
        per_seed = []
        for s in random_seeds:
            rnd = [delete_random(ex, k, (s, n)) for n, ex in enumerate(examples)]
            per_seed.append(_percent_correct(predictions(model, rnd), labels))
    acc_r = float(np.mean(per_seed)) if per_seed else float("nan")
    return SrsReport(k, acc_s, acc_r, acc_k, acc_s - acc_k, layer_tag, len(examples), per_seed)


def _srs_cache(model, examples, layer_tag):
    rankings = []
    preds = []
    for tr in iter_traces(model, examples):
        rankings.append(rank_tokens_by_capacity(tr, layer_tag))
        preds.append(int(np.argmax(tr.logits)))
    return np.array(preds), rankings


def sensitivity_curve(model, split, ks: Sequence[float], layer_tag: str = DEFAULT_LAYER,
                      random_seeds: Iterable[int] = DEFAULT_RANDOM_SEEDS,
                      path=None) -> list[SrsReport]:
    ks = list(ks)
    if ks != sorted(ks):
        raise ValueError("ks must be sorted ascending")
    model = _as_model(model)
    examples = _examples(split)
    cache = _srs_cache(model, examples, layer_tag)
    reports = [srs(model, examples, k, layer_tag, random_seeds, _cache=cache) for k in ks]
    if path is not None:
        write_srs_tsv(reports, path)
    return reports


def write_srs_tsv(reports: Sequence[SrsReport], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\t".join(SRS_COLUMNS) + "\n")
        for r in reports:
            fh.write("\t".join(_fmt(v) for v in r.row()) + "\n")


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


# -- capacity per token status ------------------------------------------

@dataclass
class CapacityReport:
    mean_all: float
    mean_important: float
    mean_rest: float
    n_important: int
    n_rest: int
    records: list[tuple] = field(default_factory=list)  # (example, position, token, p, capacity)


def capacity_report(model, split, important_fraction: float = 0.30,
                    layer_tag: str = DEFAULT_LAYER, per_type: bool = False) -> CapacityReport:
    """Mean capacity of the top-scored tokens (by mask probability) vs. the rest.

    With ``per_type`` the scores and capacities are first averaged per
    surface token and the split is made over token types.
    """
    if not 0 < important_fraction < 1:
        raise ValueError("important_fraction must be in (0, 1); group means are undefined otherwise")
    model = _as_model(model)
    if model.vmask is None:
        raise ValueError("model has no word-mask layer, so there are no importance scores")
    examples = _examples(split)
    records = []
    for n, tr in enumerate(iter_traces(model, examples)):
        cap = capacity(tr.layer(layer_tag))
        for i in range(tr.T):
            records.append((n, i, tr.tokens[i], float(tr.mask_probs[i]), float(cap[i])))

    if per_type:
        by_type: dict[str, list] = {}
        for _, _, tok, p, c in records:
            by_type.setdefault(tok, []).append((p, c))
        units = [(float(np.mean([p for p, _ in v])), float(np.mean([c for _, c in v])))
                 for _, v in sorted(by_type.items())]
    else:
        units = [(p, c) for *_, p, c in records]

    scores = np.array([u[0] for u in units])
    caps = np.array([u[1] for u in units])
    order = np.argsort(-scores, kind="stable")
    n_imp = math.floor(important_fraction * len(units))
    if n_imp == 0 or n_imp == len(units):
        raise ValueError(f"{len(units)} tokens cannot be split at fraction {important_fraction}")
    imp, rest = caps[order[:n_imp]], caps[order[n_imp:]]
    return CapacityReport(float(caps.mean()), float(imp.mean()), float(rest.mean()),
                          len(imp), len(rest), records)


def write_capacity_report(report: CapacityReport, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("group\tn\tmean_capacity\n")
        fh.write(f"all\t{report.n_important + report.n_rest}\t{report.mean_all!r}\n")
        fh.write(f"important\t{report.n_important}\t{report.mean_important!r}\n")
        fh.write(f"rest\t{report.n_rest}\t{report.mean_rest!r}\n")


# -- lambda sweep --------------------------------------------------------

SWEEP_COLUMNS = ("dataset", "lambda_imp", "lambda_inter", "acc_s", "acc_r", "acc_k", "srs", "status")


@dataclass
class SweepRow:
    dataset: str
    lambda_imp: float
    lambda_inter: float
    acc_s: float = float("nan")
    acc_r: float = float("nan")
    acc_k: float = float("nan")
    srs: float = float("nan")
    status: str = "ok"

    def row(self) -> tuple:
        return tuple(getattr(self, c) for c in SWEEP_COLUMNS)


def sweep(grid: Sequence[tuple[float, float]], model_config: ModelConfig, train_config,
          dataset: Dataset, *, dataset_name: str = "data", k: float = 30,
          layer_tag: str = DEFAULT_LAYER, eval_split: str = "test",
          random_seeds: Iterable[int] = DEFAULT_RANDOM_SEEDS, path=None,
          checkpoint_dir=None) -> list[SweepRow]:
    """Train and score one model per ``(lambda_imp, lambda_inter)`` cell, in grid order.

    A failing cell is recorded with its error and the sweep moves on.
    """
    from .train import train

    grid = list(grid)
    if not grid:
        raise ValueError("empty grid")
    rows = []
    for lam_imp, lam_inter in grid:
        row = SweepRow(dataset_name, float(lam_imp), float(lam_inter))
        try:
            tc = replace(train_config, lambda_imp=float(lam_imp), lambda_inter=float(lam_inter))
            ck, _ = train(model_config, tc, dataset)
            if checkpoint_dir is not None:
                ck.save(f"{checkpoint_dir}/imp{lam_imp:g}_inter{lam_inter:g}.ck")
            rep = srs(ck, dataset[eval_split], k, layer_tag, random_seeds)
            row.acc_s, row.acc_r, row.acc_k, row.srs = (
                rep.acc_original, rep.acc_random, rep.acc_capacity, rep.srs)
        except Exception as exc:  # noqa: BLE001 - a cell failure must not stop the sweep
            log.error("sweep cell (%g, %g) failed:\n%s", lam_imp, lam_inter, traceback.format_exc())
            row.status = f"failed: {type(exc).__name__}: {exc}"
        rows.append(row)
        if path is not None:
            write_sweep_tsv(rows, path)
    return rows


def write_sweep_tsv(rows: Sequence[SweepRow], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\t".join(SWEEP_COLUMNS) + "\n")
        for r in rows:
            fh.write("\t".join(_fmt(v) for v in r.row()) + "\n")
