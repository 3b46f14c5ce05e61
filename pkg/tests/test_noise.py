import numpy as np
import pytest

from lope.noise import (
    ContinuousNoiseSpec,
    Dataset,
    DiscreteNoiseSpec,
    NoiseOp,
    augment_dataset,
    inject_continuous,
    inject_discrete,
    load_dataset,
    load_manifest,
    save_dataset,
    save_manifest,
)
from lope.numerics import RngStream

ALPHABET = tuple(range(32))
CHAR_OPS = (NoiseOp.SHUFFLE, NoiseOp.INSERT, NoiseOp.DELETE)


def spec_with(ops, rate, alphabet=ALPHABET, seed=0):
    return DiscreteNoiseSpec(ops=ops, rate=rate, alphabet=alphabet, seed=seed)


class TestSpecValidation:
    def test_rate_bounds(self):
        with pytest.raises(ValueError):
            spec_with(CHAR_OPS, -0.1)
        with pytest.raises(ValueError):
            spec_with(CHAR_OPS, 1.5)

    def test_ops_required_when_rate_positive(self):
        with pytest.raises(ValueError):
            spec_with((), 0.1)
        spec_with((), 0.0)  # fine

    def test_alphabet_required_for_insert_replace(self):
        with pytest.raises(ValueError):
            spec_with((NoiseOp.INSERT,), 0.1, alphabet=())
        with pytest.raises(ValueError):
            spec_with((NoiseOp.REPLACE,), 0.1, alphabet=())
        spec_with((NoiseOp.SHUFFLE, NoiseOp.DELETE), 0.1, alphabet=())

    def test_negative_alpha_rejected(self):
        with pytest.raises(ValueError):
            ContinuousNoiseSpec(alpha=-0.01)


class TestInjectDiscrete:
    def test_rate_zero_identity(self):
        tokens = [5, 2, 9, 9, 1]
        out, manifest = inject_discrete(tokens, spec_with(CHAR_OPS, 0.0), RngStream(1))
        assert out == tokens
        assert manifest == []

    def test_empty_sequence_errors(self):
        with pytest.raises(ValueError):
            inject_discrete([], spec_with(CHAR_OPS, 0.1), RngStream(1))

    def test_edit_rate_matches_binomial(self):
        # 10^5 positions at rate 0.05: 3-sigma window is about +-0.0021.
        rate = 0.05
        spec = spec_with(CHAR_OPS, rate)
        rng = RngStream(614)
        total_positions = 0
        total_edits = 0
        for i in range(1000):
            tokens = list(range(100))
            _, manifest = inject_discrete(tokens, spec, rng.child(i))
            total_positions += 100
            total_edits += sum(1 for e in manifest if not e.op.endswith("_skipped"))
        assert total_positions == 100_000
        frac = total_edits / total_positions
        assert 0.045 <= frac <= 0.055

    def test_equal_injection_share(self):
        spec = spec_with((NoiseOp.SHUFFLE, NoiseOp.INSERT, NoiseOp.DELETE, NoiseOp.REPLACE), 0.5)
        rng = RngStream(7)
        counts = {op.value: 0 for op in spec.token_ops}
        total = 0
        for i in range(400):
            _, manifest = inject_discrete(list(range(50)), spec, rng.child(i))
            for e in manifest:
                if not e.op.endswith("_skipped"):
                    counts[e.op] += 1
                    total += 1
        # Conditional on an edit, each op's share should be near 1/4.
        sigma = (0.25 * 0.75 / total) ** 0.5
        for op, c in counts.items():
            assert abs(c / total - 0.25) < 3 * sigma, (op, c / total)

    def test_shuffle_pair_swaps_back(self):
        out, manifest = inject_discrete(["a", "b"], spec_with((NoiseOp.SHUFFLE,), 1.0, alphabet=()), RngStream(3))
        # Both positions edited: last swaps left, then position 0 swaps right.
        assert len(manifest) == 2
        assert all(e.op == "shuffle" for e in manifest)
        assert out == ["a", "b"]

    def test_delete_never_empties_sequence(self):
        spec = spec_with((NoiseOp.DELETE,), 1.0, alphabet=())
        out, manifest = inject_discrete([4], spec, RngStream(5))
        assert out == [4]
        assert [e.op for e in manifest] == ["delete_skipped"]
        out2, manifest2 = inject_discrete([4, 7, 9], spec, RngStream(5))
        assert len(out2) == 1
        skipped = [e for e in manifest2 if e.op == "delete_skipped"]
        applied = [e for e in manifest2 if e.op == "delete"]
        assert len(applied) == 2 and len(skipped) == 1

    def test_insert_uses_alphabet(self):
        spec = spec_with((NoiseOp.INSERT,), 1.0, alphabet=(99,))
        out, manifest = inject_discrete([1, 2], spec, RngStream(11))
        assert out == [1, 99, 2, 99]
        assert [e.position for e in manifest] == [1, 0]

    def test_replace_uses_alphabet(self):
        spec = spec_with((NoiseOp.REPLACE,), 1.0, alphabet=(42,))
        out, _ = inject_discrete([1, 2, 3], spec, RngStream(13))
        assert out == [42, 42, 42]

    def test_determinism(self):
        spec = spec_with(CHAR_OPS + (NoiseOp.REPLACE,), 0.3)
        a = inject_discrete(list(range(40)), spec, RngStream(21).child(2))
        b = inject_discrete(list(range(40)), spec, RngStream(21).child(2))
        assert a == b


class TestInjectContinuous:
    def test_alpha_zero_bitwise(self):
        e = np.random.default_rng(0).normal(size=(6, 4))
        out = inject_continuous(e, np.ones(6), ContinuousNoiseSpec(0.0), RngStream(1))
        assert np.array_equal(out, e)

    def test_all_masked_bitwise(self):
        e = np.random.default_rng(0).normal(size=(6, 4))
        out = inject_continuous(e, np.zeros(6), ContinuousNoiseSpec(0.3), RngStream(1))
        assert np.array_equal(out, e)

    def test_bound_and_mean_magnitude(self):
        alpha = 0.05
        e = np.zeros((1000, 10))
        out = inject_continuous(e, np.ones(1000), ContinuousNoiseSpec(alpha), RngStream(614))
        deltas = np.abs(out - e)
        assert deltas.max() <= alpha
        assert abs(deltas.mean() - alpha / 2) < 0.1 * (alpha / 2)

    def test_masked_rows_bitwise_unchanged(self):
        e = np.random.default_rng(2).normal(size=(8, 3))
        mask = np.array([1, 0, 1, 0, 0, 1, 1, 0])
        out = inject_continuous(e, mask, ContinuousNoiseSpec(0.1), RngStream(9))
        assert np.array_equal(out[mask == 0], e[mask == 0])
        assert np.all(out[mask == 1] != e[mask == 1])

    def test_mask_length_checked(self):
        with pytest.raises(ValueError):
            inject_continuous(np.zeros((3, 2)), np.ones(4), ContinuousNoiseSpec(0.1), RngStream(0))


def tiny_dataset(m=8, length=10, vocab=16, classes=4, seed=0):
    g = np.random.default_rng(seed)
    examples = [(g.integers(0, vocab, size=length).tolist(), int(g.integers(classes))) for _ in range(m)]
    return Dataset(examples, vocab, classes)


def vocab_spec(ops, rate, vocab=16, seed=0):
    return DiscreteNoiseSpec(ops=ops, rate=rate, alphabet=tuple(range(vocab)), seed=seed)


class TestAugmentDataset:
    def test_rate_zero_identity(self):
        ds = tiny_dataset()
        out, manifests = augment_dataset(ds, spec_with(CHAR_OPS, 0.0), RngStream(1))
        assert out.examples == ds.examples
        assert all(m == [] for m in manifests)

    def test_label_flip_binomial(self):
        ds = tiny_dataset(m=1000, seed=3)
        spec = spec_with((NoiseOp.LABEL_FLIP,), 0.05, alphabet=())
        out, manifests = augment_dataset(ds, spec, RngStream(614))
        flips = sum(1 for (ta, la), (tb, lb) in zip(ds.examples, out.examples) if la != lb)
        assert 30 <= flips <= 70
        # tokens untouched when only LABEL_FLIP is enabled
        assert all(ta == tb for (ta, _), (tb, _) in zip(ds.examples, out.examples))
        assert flips == sum(1 for m in manifests for e in m if e.op == "label_flip")

    def test_flip_changes_class(self):
        ds = tiny_dataset(m=300, classes=3, seed=5)
        spec = spec_with((NoiseOp.LABEL_FLIP,), 1.0, alphabet=())
        out, _ = augment_dataset(ds, spec, RngStream(8))
        for (_, la), (_, lb) in zip(ds.examples, out.examples):
            assert la != lb
            assert 0 <= lb < 3

    def test_same_seed_bit_identical(self):
        ds = tiny_dataset(m=50, seed=6)
        spec = vocab_spec(CHAR_OPS + (NoiseOp.LABEL_FLIP,), 0.2)
        a = augment_dataset(ds, spec, RngStream(99))
        b = augment_dataset(ds, spec, RngStream(99))
        assert a[0].examples == b[0].examples
        assert a[1] == b[1]

    def test_size_preserved(self):
        ds = tiny_dataset(m=37)
        out, _ = augment_dataset(ds, vocab_spec(CHAR_OPS, 0.4), RngStream(2))
        assert len(out) == 37


class TestFileFormats:
    def test_dataset_round_trip(self, tmp_path):
        ds = tiny_dataset(m=20, seed=9)
        p = tmp_path / "data.tsv"
        save_dataset(ds, p)
        back = load_dataset(p, vocab_size=ds.vocab_size, num_classes=ds.num_classes)
        assert back.examples == ds.examples
        assert back.vocab_size == ds.vocab_size

    def test_dataset_inference_of_sizes(self, tmp_path):
        p = tmp_path / "data.tsv"
        p.write_text("2\t0 5 3\n0\t1 1\n")
        ds = load_dataset(p)
        assert ds.vocab_size == 6
        assert ds.num_classes == 3

    def test_malformed_line_reports_position(self, tmp_path):
        p = tmp_path / "bad.tsv"
        p.write_text("1\t2 3\nnot-a-label\t4\n")
        with pytest.raises(ValueError, match="bad.tsv:2"):
            load_dataset(p)

    def test_manifest_round_trip(self, tmp_path):
        ds = tiny_dataset(m=10, seed=4)
        _, manifests = augment_dataset(ds, vocab_spec(CHAR_OPS, 0.5), RngStream(3))
        p = tmp_path / "edits.tsv"
        save_manifest(manifests, p)
        flat = load_manifest(p)
        want = [(i, e) for i, edits in enumerate(manifests) for e in edits]
        assert flat == want

    def test_dataset_validation(self):
        with pytest.raises(ValueError):
            Dataset([([1, 2], 5)], vocab_size=8, num_classes=4)  # label out of range
        with pytest.raises(ValueError):
            Dataset([([9], 0)], vocab_size=8, num_classes=4)  # token out of range
        with pytest.raises(ValueError):
            Dataset([], vocab_size=8, num_classes=4)
