import numpy as np
import pytest

from safr.data import (
    PAD, UNK, DataFormatError, RawExample, build_vocab, dataset_from_bytes, dataset_manifest,
    dataset_to_bytes, encode, ingest, load_tsv, make_batches, tokenize,
)


def _write(tmp_path, text, name="f.tsv"):
    p = tmp_path / name
    p.write_text(text, encoding="utf-8")
    return p


class TestLoadTsv:
    def test_basic(self, tmp_path):
        assert load_tsv(_write(tmp_path, "1\tgreat film\n")) == [RawExample(1, "great film")]

    def test_skips_blank_lines(self, tmp_path):
        out = load_tsv(_write(tmp_path, "0\ta\n\n1\tb\n"))
        assert [e.label for e in out] == [0, 1]

    def test_empty(self, tmp_path):
        with pytest.raises(DataFormatError, match="no examples"):
            load_tsv(_write(tmp_path, ""))

    def test_label_range(self, tmp_path):
        with pytest.raises(DataFormatError, match="label out of range"):
            load_tsv(_write(tmp_path, "2\tok\n"), num_classes=2)

    @pytest.mark.parametrize("line", ["no tab here", "x\ttext"])
    def test_malformed_names_line(self, tmp_path, line):
        with pytest.raises(DataFormatError, match=":2:"):
            load_tsv(_write(tmp_path, f"0\tfine\n{line}\n"))


class TestTokenize:
    def test_punctuation(self):
        assert tokenize("Preposterous and tedious,") == ["preposterous", "and", "tedious", ","]

    def test_single(self):
        assert tokenize("A") == ["a"]

    def test_blank(self):
        assert tokenize("  ") == []

    def test_leading_and_inner(self):
        assert tokenize('"don\'t!"') == ['"', "don't", "!", '"']


class TestVocab:
    def test_min_freq(self):
        v = build_vocab([RawExample(0, "a a b")], min_freq=2)
        assert "a" in v and "b" not in v

    def test_minimal(self):
        v = build_vocab([RawExample(0, "x")], min_freq=1)
        assert v.itos == ["<pad>", "<unk>", "x"]
        assert v.lookup("<pad>") == PAD and v.lookup("zzz") == UNK

    def test_tie_break(self):
        v = build_vocab([RawExample(0, "zeta alpha zeta alpha zeta alpha beta")], 1)
        assert v.lookup("alpha") < v.lookup("zeta") < v.lookup("beta")


class TestEncode:
    def test_length(self):
        v = build_vocab([RawExample(0, "great film")], 1)
        ex = encode(RawExample(1, "great film"), v, 64)
        assert ex.T == 2 and ex.tokens == ["great", "film"]

    def test_truncation_keeps_prefix(self):
        words = " ".join(f"w{i}" for i in range(300))
        v = build_vocab([RawExample(0, words)], 1)
        ex = encode(RawExample(0, words), v, 256)
        assert ex.T == 256 and ex.tokens[-1] == "w255"

    def test_oov(self):
        v = build_vocab([RawExample(0, "known")], 1)
        assert encode(RawExample(0, "unknown"), v, 8).token_ids == [UNK]

    def test_round_trip(self, toy_dataset):
        v = toy_dataset.vocab
        for ex in toy_dataset["test"].examples:
            for tok, i in zip(ex.tokens, ex.token_ids):
                assert i == (v.stoi[tok] if tok in v else UNK)

    def test_rejected_counted(self, tmp_path):
        p = _write(tmp_path, "0\tfine words\n1\t   \n0\tmore words\n")
        ds, reports = ingest(p, p, min_freq=1, max_len=8)
        assert reports["train"] == {"read": 3, "rejected": 1, "truncated": 0}
        assert ds["train"].N == 2


class TestBatches:
    def _split(self, lengths):
        from safr.data import DatasetSplit, TokenizedExample
        return DatasetSplit("train", [TokenizedExample(list(range(2, 2 + T)),
                                                       ["t"] * T, 0) for T in lengths])

    def test_sizes(self):
        assert [len(b.labels) for b in make_batches(self._split([1] * 5), 2, 0)] == [2, 2, 1]

    def test_deterministic(self):
        s = self._split(range(1, 12))
        a = make_batches(s, 3, 42)
        b = make_batches(s, 3, 42)
        assert all(np.array_equal(x.indices, y.indices) for x, y in zip(a, b))

    def test_padding(self):
        (b,) = make_batches(self._split([3, 5]), 2, None)
        assert b.token_ids.shape == (2, 5)
        assert b.lengths.tolist() == [3, 5]
        assert (b.token_ids[0, 3:] == PAD).all()


class TestCache:
    def test_round_trip_bit_exact(self, toy_dataset):
        blob = dataset_to_bytes(toy_dataset)
        assert blob[:8] == b"SAFRDS1\0"
        ds2 = dataset_from_bytes(blob)
        assert dataset_to_bytes(ds2) == blob
        assert ds2.vocab == toy_dataset.vocab
        assert ds2["train"].examples == toy_dataset["train"].examples

    def test_bad_magic(self):
        with pytest.raises(DataFormatError):
            dataset_from_bytes(b"NOTADATASET")

    def test_deterministic_ingest(self, toy_tsvs):
        a, _ = ingest(toy_tsvs["train"], toy_tsvs["dev"], toy_tsvs["test"], min_freq=1, seed=3)
        b, _ = ingest(toy_tsvs["train"], toy_tsvs["dev"], toy_tsvs["test"], min_freq=1, seed=3)
        assert dataset_to_bytes(a) == dataset_to_bytes(b)

    def test_manifest_counts(self, toy_dataset):
        m = dataset_manifest(toy_dataset)
        assert m["counts"] == {"train": 160, "dev": 40, "test": 60}

    def test_seeded_dev_split(self, toy_tsvs):
        ds, _ = ingest(toy_tsvs["train"], None, None, min_freq=1, seed=5, dev_fraction=0.2)
        assert (ds["train"].N, ds["dev"].N) == (128, 32)
        assert ds.meta["dev_from_train"] == {"fraction": 0.2, "seed": 5}
