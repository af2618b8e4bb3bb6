import hashlib
import itertools
import json

import numpy as np
import pytest

from attrseq.data import (AttributeVocab, OrderSpec, Sample, SynthSpec, build_orders,
                          compute_frequencies, generate_synthetic, labels_to_sequence,
                          make_order, read_dataset, read_vocab, sequence_to_labels,
                          validate_sequence, with_frequencies, write_dataset, write_vocab)
from attrseq.errors import ContractError, DataFileError
from attrseq.numerics import Rng


def vocab3(freqs=(0.9, 0.1, 0.5)):
    return AttributeVocab(names=["a", "b", "c"], train_frequency=np.array(freqs),
                          region_hint=[0, 1, 1], granularity=["global", "local", "global"])


class TestOrders:
    def test_rare_first(self):
        assert make_order(vocab3(), "rare_first").permutation == (1, 2, 0)

    def test_frequent_first(self):
        assert make_order(vocab3(), "frequent_first").permutation == (0, 2, 1)

    def test_equal_frequencies_tie_to_identity(self):
        v = vocab3(freqs=(0.4, 0.4, 0.4))
        assert make_order(v, "rare_first").permutation == (0, 1, 2)
        assert make_order(v, "frequent_first").permutation == (0, 1, 2)

    def test_top_down_bottom_up(self):
        assert make_order(vocab3(), "top_down").permutation == (0, 1, 2)
        assert make_order(vocab3(), "bottom_up").permutation == (1, 2, 0)

    def test_global_local_groups_by_granularity_then_frequency(self):
        # globals: a (0.9), c (0.5); locals: b
        assert make_order(vocab3(), "global_local").permutation == (0, 2, 1)
        assert make_order(vocab3(), "local_global").permutation == (1, 0, 2)

    def test_build_orders_is_ten_bijections(self):
        orders = build_orders(vocab3(), n_random=4, base_seed=3)
        assert len(orders) == 10
        kinds = [o.kind for o in orders]
        assert kinds[:6] == ["rare_first", "frequent_first", "top_down", "bottom_up",
                             "global_local", "local_global"]
        assert kinds[6:] == ["random"] * 4
        for o in orders:
            assert sorted(o.permutation) == [0, 1, 2]

    def test_missing_metadata_replaced_by_randoms(self):
        v = AttributeVocab(names=["a", "b", "c"], train_frequency=np.array([0.9, 0.1, 0.5]))
        orders = build_orders(v, n_random=4, base_seed=0)
        assert len(orders) == 10
        kinds = [o.kind for o in orders]
        assert "top_down" not in kinds and "global_local" not in kinds
        assert kinds.count("random") == 8
        seeds = [o.seed for o in orders if o.kind == "random"]
        assert len(set(seeds)) == 8

    def test_deterministic(self):
        a = build_orders(vocab3(), base_seed=5)
        b = build_orders(vocab3(), base_seed=5)
        assert [o.permutation for o in a] == [o.permutation for o in b]

    def test_unpopulated_frequencies_rejected(self):
        v = AttributeVocab(names=["a", "b"])
        with pytest.raises(ContractError):
            build_orders(v)

    def test_non_bijection_rejected(self):
        with pytest.raises(ContractError):
            OrderSpec(kind="random", permutation=(0, 0, 1))


class TestSequences:
    def test_present_attributes_in_order(self):
        # attrs: male=0, hat=1, jeans=2, skirt=3; jeans and skirt present
        order = OrderSpec(kind="random", permutation=(0, 1, 2, 3), seed=0)
        assert labels_to_sequence(np.array([0, 0, 1, 1]), order) == [2, 3, 4]

    def test_all_absent_gives_stop_only(self):
        order = OrderSpec(kind="random", permutation=(2, 0, 1), seed=0)
        assert labels_to_sequence(np.zeros(3, dtype=int), order) == [3]

    def test_all_present_gives_full_permutation(self):
        order = OrderSpec(kind="random", permutation=(2, 0, 1), seed=0)
        assert labels_to_sequence(np.ones(3, dtype=int), order) == [2, 0, 1, 3]

    def test_sequence_to_labels(self):
        assert sequence_to_labels([4], 4).tolist() == [0, 0, 0, 0]
        assert sequence_to_labels([2, 0, 4], 4).tolist() == [1, 0, 1, 0]

    def test_out_of_range_token(self):
        with pytest.raises(ContractError):
            sequence_to_labels([5, 4], 4)

    def test_malformed_sequences_rejected(self):
        with pytest.raises(ContractError):
            validate_sequence([0, 1], 3)  # missing stop
        with pytest.raises(ContractError):
            validate_sequence([3, 0, 3], 3)  # stop not last only
        with pytest.raises(ContractError):
            validate_sequence([0, 0, 3], 3)  # duplicate

    def test_round_trip_exhaustive_small(self):
        for n_attr in (1, 2, 3):
            orders = [make_order_random(n_attr, s) for s in range(3)]
            for bits in itertools.product((0, 1), repeat=n_attr):
                labels = np.array(bits)
                for order in orders:
                    seq = labels_to_sequence(labels, order)
                    np.testing.assert_array_equal(sequence_to_labels(seq, n_attr), labels)

    def test_round_trip_exhaustive_n10(self):
        n_attr = 10
        orders = [make_order_random(n_attr, s) for s in range(3)]
        for bits in itertools.product((0, 1), repeat=n_attr):
            labels = np.array(bits)
            for order in orders:
                seq = labels_to_sequence(labels, order)
                validate_sequence(seq, n_attr)
                np.testing.assert_array_equal(sequence_to_labels(seq, n_attr), labels)


def make_order_random(n_attr, seed):
    return OrderSpec(kind="random", permutation=tuple(int(i) for i in Rng(seed).permutation(n_attr)),
                     seed=seed)


class TestSyntheticGenerator:
    def spec(self, **kw):
        base = dict(n_attr=6, m=3, d_region=8, d_global=8, n_train=200, n_test=50,
                    noise_sigma=0.3, correlation_strength=0.5)
        base.update(kw)
        return SynthSpec(**base)

    def test_noise_free_linear_probe_recovers_labels_exactly(self):
        spec = self.spec(noise_sigma=0.0)
        train, test, vocab, signatures = generate_synthetic(spec, Rng(11))
        hints = spec.region_hints()
        for sample in train + test:
            for j in range(spec.n_attr):
                score = float(sample.regions[hints[j]] @ signatures[j])
                assert (score > 0.5) == bool(sample.labels[j])

    def test_zero_correlation_gives_uncorrelated_labels(self):
        spec = self.spec(correlation_strength=0.0, n_train=5000, n_test=1)
        train, _, _, _ = generate_synthetic(spec, Rng(12))
        labels = np.stack([s.labels for s in train]).astype(float)
        corr = np.corrcoef(labels.T)
        off_diag = corr[~np.eye(spec.n_attr, dtype=bool)]
        assert np.max(np.abs(off_diag)) < 0.05

    def test_high_correlation_is_visible(self):
        spec = self.spec(correlation_strength=0.8, n_train=3000, n_test=1)
        train, _, _, _ = generate_synthetic(spec, Rng(13))
        labels = np.stack([s.labels for s in train]).astype(float)
        adjacent = [np.corrcoef(labels[:, j], labels[:, j + 1])[0, 1]
                    for j in range(spec.n_attr - 1)]
        assert min(adjacent) > 0.3

    def test_deterministic_files(self, tmp_path):
        def digest(seed, name):
            train, test, vocab, _ = generate_synthetic(self.spec(), Rng(seed))
            write_dataset(tmp_path / f"{name}.jsonl", train)
            write_vocab(tmp_path / f"{name}-vocab.json", vocab)
            return (hashlib.sha256((tmp_path / f"{name}.jsonl").read_bytes()).hexdigest(),
                    hashlib.sha256((tmp_path / f"{name}-vocab.json").read_bytes()).hexdigest())

        assert digest(7, "a") == digest(7, "b")
        assert digest(7, "c") != digest(8, "d")

    def test_emitted_frequencies_match_label_means(self):
        spec = self.spec()
        train, _, vocab, _ = generate_synthetic(spec, Rng(14))
        means = np.stack([s.labels for s in train]).mean(axis=0)
        np.testing.assert_array_equal(vocab.train_frequency, means)

    def test_invalid_specs_rejected(self):
        with pytest.raises(ContractError):
            self.spec(noise_sigma=-1.0)
        with pytest.raises(ContractError):
            self.spec(correlation_strength=1.5)
        with pytest.raises(ContractError):
            self.spec(d_global=4)  # must equal d_region
        with pytest.raises(ContractError):
            self.spec(n_attr=20, d_region=2, d_global=2)  # region groups overflow


class TestFileIO:
    def test_dataset_round_trip(self, tmp_path):
        train, _, vocab, _ = generate_synthetic(
            SynthSpec(n_attr=3, m=2, d_region=4, d_global=4, n_train=5, n_test=1,
                      noise_sigma=0.1, correlation_strength=0.2), Rng(0))
        path = tmp_path / "ds.jsonl"
        write_dataset(path, train)
        loaded = read_dataset(path)
        assert [s.id for s in loaded] == [s.id for s in train]
        for a, b in zip(loaded, train):
            np.testing.assert_array_equal(a.regions, b.regions)
            np.testing.assert_array_equal(a.global_feature, b.global_feature)
            np.testing.assert_array_equal(a.labels, b.labels)

    def test_vocab_round_trip(self, tmp_path):
        vocab = AttributeVocab(names=["x", "y"], region_hint=[0, 1],
                               granularity=["global", "local"])
        path = tmp_path / "vocab.json"
        write_vocab(path, vocab)
        loaded = read_vocab(path)
        assert loaded.names == vocab.names
        assert loaded.region_hint == vocab.region_hint
        assert loaded.granularity == vocab.granularity
        assert loaded.train_frequency is None

    def test_vocab_sidecar_field_names(self, tmp_path):
        path = tmp_path / "vocab.json"
        write_vocab(path, AttributeVocab(names=["x"]))
        record = json.loads(path.read_text())
        assert set(record) == {"names", "region_hint", "granularity"}

    def test_missing_files(self, tmp_path):
        with pytest.raises(DataFileError):
            read_dataset(tmp_path / "nope.jsonl")
        with pytest.raises(DataFileError):
            read_vocab(tmp_path / "nope.json")

    def test_malformed_dataset(self, tmp_path):
        path = tmp_path / "bad.jsonl"
        path.write_text('{"id": "a", "regions": [[1.0]]}\n')
        with pytest.raises(DataFileError):
            read_dataset(path)

    def test_inconsistent_dims(self, tmp_path):
        path = tmp_path / "bad.jsonl"
        rows = [
            {"id": "a", "regions": [[1.0, 2.0]], "global": [1.0, 2.0], "attrs": [0, 1]},
            {"id": "b", "regions": [[1.0, 2.0, 3.0]], "global": [1.0, 2.0, 3.0], "attrs": [0, 1]},
        ]
        path.write_text("\n".join(json.dumps(r) for r in rows) + "\n")
        with pytest.raises(DataFileError):
            read_dataset(path)

    def test_with_frequencies(self):
        samples = [Sample(id="a", regions=np.zeros((1, 2)), global_feature=np.zeros(2),
                          labels=np.array([1, 0])),
                   Sample(id="b", regions=np.zeros((1, 2)), global_feature=np.zeros(2),
                          labels=np.array([1, 1]))]
        vocab = with_frequencies(AttributeVocab(names=["x", "y"]), samples)
        np.testing.assert_array_equal(vocab.train_frequency, [1.0, 0.5])
        np.testing.assert_array_equal(compute_frequencies(samples, 2), [1.0, 0.5])
