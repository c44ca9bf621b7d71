import dataclasses
import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from safr.data import DatasetSplit, TokenizedExample
from safr.evaluate import (
    accuracy, capacity_report, delete_random, delete_topk, deletion_count, iter_traces,
    rank_tokens_by_capacity, sensitivity_curve, srs, sweep, write_srs_tsv,
)
from safr.metrics import capacity
from safr.model import Checkpoint, ForwardTrace, ModelConfig, SafrClassifier
from safr.train import TrainConfig


def _ex(T, label=0):
    return TokenizedExample(list(range(2, 2 + T)), [f"w{i}" for i in range(T)], label)


def _trace_with_fc1(rows):
    rows = np.asarray(rows, dtype=float)
    T = rows.shape[0]
    z = np.zeros((T, 2))
    return ForwardTrace(None, z, z, None, z, np.ones((1, T, T)) / T, z, rows, z,
                        np.zeros(2), np.zeros(2))


class TestRanking:
    def test_sort(self, monkeypatch):
        import safr.evaluate as ev
        monkeypatch.setattr(ev, "capacity", lambda H: np.array([0.2, 0.9, 0.5]))
        assert rank_tokens_by_capacity(_trace_with_fc1(np.eye(3)), "fc1").tolist() == [1, 2, 0]

    def test_ties_keep_position(self):
        assert rank_tokens_by_capacity(_trace_with_fc1(np.eye(4)), "fc1").tolist() == [0, 1, 2, 3]

    def test_unknown_layer(self):
        with pytest.raises(KeyError):
            rank_tokens_by_capacity(_trace_with_fc1(np.eye(2)), "fc7")

    def test_matches_brute_force(self, tiny_model, rng):
        for _ in range(100):
            T = int(rng.integers(1, 12))
            tr = tiny_model.trace(TokenizedExample(rng.integers(2, 20, T).tolist(), ["x"] * T, 0))
            cap = capacity(tr.fc1_out)
            expected = sorted(range(T), key=lambda i: (-cap[i], i))
            assert rank_tokens_by_capacity(tr, "fc1").tolist() == expected


class TestDeletion:
    def test_count_rule(self):
        assert deletion_count(10, 30) == 3
        assert deletion_count(10, 0) == 0
        assert deletion_count(2, 30) == 1
        assert deletion_count(5, 100) == 4
        assert deletion_count(1, 50) == 0
        with pytest.raises(ValueError):
            deletion_count(5, 101)

    def test_topk(self):
        ex = _ex(10)
        out = delete_topk(ex, [9, 0, 4, 1, 2, 3, 5, 6, 7, 8], 30)
        assert out.tokens == [f"w{i}" for i in (1, 2, 3, 5, 6, 7, 8)]
        assert delete_topk(ex, range(10), 0) is ex

    def test_everything_leaves_lowest_ranked(self):
        out = delete_topk(_ex(4), [2, 0, 3, 1], 100)
        assert out.tokens == ["w1"]

    def test_random(self):
        ex = _ex(10)
        a, b = delete_random(ex, 30, 11), delete_random(ex, 30, 11)
        assert a == b and a.T == 7
        assert delete_random(ex, 100, 0).T == 1

    @settings(max_examples=300, deadline=None)
    @given(st.integers(1, 60), st.floats(0, 100), st.integers(0, 2 ** 32))
    def test_properties(self, T, k, seed):
        ex = _ex(T)
        m = deletion_count(T, k)
        ranking = np.random.default_rng(seed).permutation(T)
        for out in (delete_topk(ex, ranking, k), delete_random(ex, k, seed)):
            assert out.T == T - m >= 1
            pos = [int(t[1:]) for t in out.tokens]
            assert pos == sorted(pos)
            assert out.token_ids == [2 + p for p in pos]


class TestAccuracy:
    def test_constant_classifier(self, tiny_model):
        with torch.no_grad():
            tiny_model.cls_weight.zero_()
            tiny_model.cls_bias.copy_(torch.tensor([1.0, 0.0]))
        split = [_ex(3, 0), _ex(4, 1), _ex(2, 0), _ex(5, 1)]
        assert accuracy(tiny_model, split) == 0.5

    def test_empty(self, tiny_model):
        with pytest.raises(ValueError):
            accuracy(tiny_model, [])


class TestSrs:
    def test_zero_k(self, tiny_model, toy_dataset):
        rep = srs(tiny_model, toy_dataset["test"], 0)
        assert rep.srs == 0.0 and rep.acc_capacity == rep.acc_original

    def test_identity(self, tiny_model, toy_dataset):
        for k in (10, 30, 70):
            rep = srs(tiny_model, toy_dataset["test"], k, random_seeds=(0, 1))
            assert rep.srs == rep.acc_original - rep.acc_capacity
            assert rep.acc_random == pytest.approx(np.mean(rep.acc_random_per_seed))
            assert rep.N == toy_dataset["test"].N

    def test_accuracy_consistent(self, tiny_model, toy_dataset):
        rep = srs(tiny_model, toy_dataset["test"], 30, random_seeds=(0,))
        assert rep.acc_original == pytest.approx(100 * accuracy(tiny_model, toy_dataset["test"]))

    def test_sensitivity(self, tiny_model, toy_dataset, tmp_path):
        reps = sensitivity_curve(tiny_model, toy_dataset["test"], [0], path=tmp_path / "s.tsv")
        assert len(reps) == 1 and reps[0].srs == 0
        lines = (tmp_path / "s.tsv").read_text().splitlines()
        assert lines[0] == "k\tacc_s\tacc_r\tacc_k\tsrs" and len(lines) == 2
        with pytest.raises(ValueError):
            sensitivity_curve(tiny_model, toy_dataset["test"], [30, 10])

    def test_shuffled_ranking_behaves_like_random(self, tiny_model, toy_dataset, monkeypatch):
        """With a random ranking the capacity protocol is just another random draw."""
        import safr.evaluate as ev
        gen = np.random.default_rng(0)
        monkeypatch.setattr(ev, "rank_tokens_by_capacity",
                            lambda tr, layer: gen.permutation(tr.T))
        rep = srs(tiny_model, toy_dataset["test"], 30, random_seeds=range(5))
        spread = np.std(rep.acc_random_per_seed)
        # binomial noise on N = 60 examples is about 6 points
        assert abs(rep.acc_capacity - rep.acc_random) <= max(3 * spread, 12)


class TestCapacityReport:
    def test_groups(self, tiny_model, toy_dataset):
        rep = capacity_report(tiny_model, toy_dataset["test"])
        lo, hi = sorted((rep.mean_important, rep.mean_rest))
        assert lo <= rep.mean_all <= hi
        n = rep.n_important + rep.n_rest
        assert n == sum(ex.T for ex in toy_dataset["test"].examples)
        assert rep.n_important == math.floor(0.3 * n)

    def test_per_type(self, tiny_model, toy_dataset):
        rep = capacity_report(tiny_model, toy_dataset["test"], per_type=True)
        types = {r[2] for r in rep.records}
        assert rep.n_important + rep.n_rest == len(types)

    def test_zero_fraction(self, tiny_model, toy_dataset):
        with pytest.raises(ValueError):
            capacity_report(tiny_model, toy_dataset["test"], 0.0)

    def test_uniform_scores(self, tiny_model, toy_dataset):
        with torch.no_grad():
            tiny_model.vmask.w.zero_()
        rep = capacity_report(tiny_model, toy_dataset["test"])
        # constant scores: the split is by position order only, so both groups
        # are samples of the same population
        pooled_sd = np.std([r[4] for r in rep.records])
        se = pooled_sd * math.sqrt(1 / rep.n_important + 1 / rep.n_rest)
        assert abs(rep.mean_important - rep.mean_rest) < 4 * se

    def test_needs_mask(self, tiny_config, toy_dataset):
        m = SafrClassifier(dataclasses.replace(tiny_config, use_vmask=False))
        with pytest.raises(ValueError):
            capacity_report(m, toy_dataset["test"])


def test_sweep(toy_dataset, tmp_path):
    mc = ModelConfig(vocab_size=len(toy_dataset.vocab), E=8, d_ff=32, M=2, max_len=24)
    tc = TrainConfig(epochs=1, batch_size=32)
    rows = sweep([(0, 0), (0.1, -1.0), (0.1, 0.1)], mc, tc, toy_dataset,
                 random_seeds=(0,), path=tmp_path / "sweep.tsv")
    assert [r.status == "ok" for r in rows] == [True, False, True]
    lines = (tmp_path / "sweep.tsv").read_text().splitlines()
    assert len(lines) == 4
    assert lines[0].split("\t") == ["dataset", "lambda_imp", "lambda_inter", "acc_s", "acc_r",
                                    "acc_k", "srs", "status"]
    single = sweep([(0, 0)], mc, tc, toy_dataset, random_seeds=(0,), path=tmp_path / "one.tsv")
    assert len(single) == 1 and len((tmp_path / "one.tsv").read_text().splitlines()) == 2
    with pytest.raises(ValueError):
        sweep([], mc, tc, toy_dataset)
