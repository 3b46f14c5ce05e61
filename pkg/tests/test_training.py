import numpy as np
import pytest

from lope.adapter import DependencyVector, Regime, block_names, get_block
from lope.model import accuracy, clone_backbone, make_backbone
from lope.noise import ContinuousNoiseSpec, DiscreteNoiseSpec, NoiseOp
from lope.numerics import RngStream
from lope.tasks import TaskSpec, gen_dataset, make_noisy_split
from lope.training import (
    Checkpoint,
    PipelineConfig,
    SgdMomentum,
    StageConfig,
    calibrate_dependencies,
    checkpoint_bytes,
    checkpoint_from_bytes,
    frozen_block_checksums,
    grad_check_suite,
    load_checkpoint,
    run_pipeline,
    save_checkpoint,
    train_stage1,
    train_stage2,
)

SPEC = TaskSpec(rule="majority", seed=614)
NOISE = DiscreteNoiseSpec(
    ops=(NoiseOp.SHUFFLE, NoiseOp.INSERT, NoiseOp.DELETE),
    rate=0.05,
    alphabet=tuple(range(32)),
    seed=614,
)


def small_pipeline_config(seed=614, **overrides):
    stage1 = StageConfig(epochs=2, batch_size=16, learning_rate=0.05,
                         discrete_noise=NOISE, continuous_noise=ContinuousNoiseSpec(0.05),
                         seed=seed)
    stage2 = StageConfig(epochs=2, batch_size=16, learning_rate=0.05, seed=seed)
    defaults = dict(
        vocab_size=32, embed_dim=8, hidden_dim=12, num_classes=4, rank=2,
        num_experts=4, top_k=3, poison=(3,), stage1=stage1, stage2=stage2,
        calibration_size=64, seed=seed,
    )
    defaults.update(overrides)
    return PipelineConfig(**defaults)


def fresh_backbone(seed=614):
    return make_backbone(32, 8, 12, 4, 2, 4, 3, (3,), RngStream(seed).child(0))


def small_data(m=96, seed=614):
    spec = TaskSpec(rule="majority", seed=seed)
    return make_noisy_split(spec, m, NOISE)


def block_snapshot(backbone):
    out = {"embedding": backbone.embedding.copy()}
    for lname in ("layer1", "layer2"):
        layer = getattr(backbone, lname)
        for name in block_names(layer):
            out[f"{lname}.{name}"] = get_block(layer, name).copy()
        out[f"{lname}.w0"] = layer.w0.copy()
    return out


class TestStageConfig:
    def test_validation(self):
        with pytest.raises(ValueError):
            StageConfig(learning_rate=-1.0)
        with pytest.raises(ValueError):
            StageConfig(momentum=1.0)
        with pytest.raises(ValueError):
            StageConfig(continuous_fraction=1.5)
        StageConfig(learning_rate=0.0)  # zero is allowed: freeze-everything runs


class TestSgdMomentum:
    def test_two_step_hand_computation(self):
        backbone = fresh_backbone()
        opt = SgdMomentum(learning_rate=0.1, momentum=0.5)
        a0 = backbone.layer1.a.copy()
        g1 = np.ones_like(a0)
        opt.step(backbone, {"layer1": {"a": g1}, "layer2": {}})
        np.testing.assert_allclose(backbone.layer1.a, a0 - 0.1 * g1)
        opt.step(backbone, {"layer1": {"a": g1}, "layer2": {}})
        # v2 = 0.5 * 1 + 1 = 1.5 -> total update 0.1 * (1 + 1.5)
        np.testing.assert_allclose(backbone.layer1.a, a0 - 0.1 * 2.5 * g1)


class TestStage1:
    def test_requires_init_stage(self):
        backbone = fresh_backbone()
        backbone.stage = "post-stage1"
        split = small_data(32)
        with pytest.raises(ValueError, match="expected 'init'"):
            train_stage1(backbone, split.train, StageConfig(epochs=1, seed=1))

    def test_zero_learning_rate_is_flat(self):
        backbone = fresh_backbone()
        split = small_data(48)
        before = block_snapshot(backbone)
        cfg = StageConfig(epochs=2, batch_size=16, learning_rate=0.0,
                          discrete_noise=NOISE, seed=614)
        report = train_stage1(backbone, split.train, cfg)
        after = block_snapshot(backbone)
        for key in before:
            np.testing.assert_array_equal(before[key], after[key])
        losses = [e.loss for e in report.epochs]
        assert losses[0] == losses[1]

    def test_only_stage1_blocks_move(self):
        backbone = fresh_backbone()
        split = small_data(96)
        before = block_snapshot(backbone)
        cfg = StageConfig(epochs=2, batch_size=16, learning_rate=0.05,
                          discrete_noise=NOISE,
                          continuous_noise=ContinuousNoiseSpec(0.05), seed=614)
        report = train_stage1(backbone, split.train, cfg, eval_data=split.eval)
        after = block_snapshot(backbone)
        for key in ("embedding", "layer1.w0", "layer2.w0",
                    "layer1.b_0", "layer1.b_1", "layer1.b_2",
                    "layer2.b_0", "layer2.b_1", "layer2.b_2",
                    "layer1.w_gate", "layer2.w_gate"):
            np.testing.assert_array_equal(before[key], after[key])
        for key in ("layer1.a", "layer2.a", "layer1.b_3", "layer2.b_3"):
            assert not np.array_equal(before[key], after[key]), key
        assert backbone.stage == "post-stage1"
        assert report.frozen_before == report.frozen_after
        assert report.epochs[0].eval_acc is not None

    def test_seed_614_one_epoch_reduces_loss(self):
        # Regression fixture: defaults-shaped run, one epoch, loss drops.
        spec = TaskSpec(rule="majority", seed=614)
        split = make_noisy_split(spec, 128, NOISE)
        backbone = make_backbone(32, 16, 32, 4, 4, 4, 3, (3,), RngStream(614).child(0))
        cfg = StageConfig(epochs=1, batch_size=32, learning_rate=0.05,
                          discrete_noise=NOISE,
                          continuous_noise=ContinuousNoiseSpec(0.05), seed=614)
        from lope.model import Batch, forward_loss

        batch = Batch.from_examples(split.train.examples)
        initial, _ = forward_loss(backbone, batch, Regime.STAGE1)
        train_stage1(backbone, split.train, cfg)
        backbone.stage = "init"  # re-evaluate the same forward
        final, _ = forward_loss(backbone, batch, Regime.STAGE1)
        assert final < initial


class TestStage2:
    def _post_stage1(self, m=96):
        backbone = fresh_backbone()
        split = small_data(m)
        cfg1 = StageConfig(epochs=1, batch_size=16, learning_rate=0.05,
                           discrete_noise=NOISE, seed=614)
        train_stage1(backbone, split.train, cfg1)
        return backbone, split

    def test_requires_post_stage1(self):
        backbone = fresh_backbone()
        split = small_data(32)
        with pytest.raises(ValueError, match="expected 'post-stage1'"):
            train_stage2(backbone, split.train, StageConfig(epochs=1, seed=1))

    def test_rejects_noise_specs(self):
        backbone, split = self._post_stage1(32)
        with pytest.raises(ValueError, match="must not carry noise"):
            train_stage2(backbone, split.train,
                         StageConfig(epochs=1, discrete_noise=NOISE, seed=1))

    def test_poison_frozen_normals_move(self):
        backbone, split = self._post_stage1()
        before = block_snapshot(backbone)
        cfg = StageConfig(epochs=2, batch_size=16, learning_rate=0.05, seed=614)
        train_stage2(backbone, split.train, cfg)
        after = block_snapshot(backbone)
        for key in ("layer1.b_3", "layer2.b_3", "embedding", "layer1.w0", "layer2.w0"):
            np.testing.assert_array_equal(before[key], after[key])
        for key in ("layer1.a", "layer1.b_0", "layer1.w_gate", "layer2.b_1"):
            assert not np.array_equal(before[key], after[key]), key
        assert backbone.stage == "post-stage2"

    def test_compensate_flag_first_epoch_identical(self):
        backbone, split = self._post_stage1()
        twin = clone_backbone(backbone)
        cfg_off = StageConfig(epochs=1, batch_size=16, learning_rate=0.05, seed=614)
        cfg_on = StageConfig(epochs=1, batch_size=16, learning_rate=0.05, seed=614,
                             compensate_during_stage2=True, calibration_size=32)
        rep_off = train_stage2(backbone, split.train, cfg_off)
        rep_on = train_stage2(twin, split.train, cfg_on)
        assert rep_off.epochs[0].loss == rep_on.epochs[0].loss
        for lname in ("layer1", "layer2"):
            for name in block_names(getattr(backbone, lname)):
                np.testing.assert_array_equal(
                    get_block(getattr(backbone, lname), name),
                    get_block(getattr(twin, lname), name),
                )


class TestCalibrateDependencies:
    def test_requires_post_stage2(self):
        backbone = fresh_backbone()
        with pytest.raises(ValueError, match="expected 'post-stage2'"):
            calibrate_dependencies(backbone, [([1, 2, 3], 0)])

    def test_duplicated_expert_gives_one(self):
        backbone = fresh_backbone()
        backbone.stage = "post-stage2"
        g = np.random.default_rng(0)
        for layer in (backbone.layer1, backbone.layer2):
            shared = g.normal(size=layer.experts[0].shape)
            layer.experts[0] = shared.copy()
            layer.experts[3] = shared.copy()  # poison twin
            layer.experts[1] = g.normal(size=shared.shape)
            layer.experts[2] = g.normal(size=shared.shape)
        split = small_data(16)
        t1, t2 = calibrate_dependencies(backbone, split.train)
        assert t1.theta[0] == pytest.approx(1.0, abs=1e-12)
        assert t2.theta[0] == pytest.approx(1.0, abs=1e-12)
        assert t1.theta[3] == 0.0

    def test_zero_poison_gives_zero(self):
        backbone = fresh_backbone()
        backbone.stage = "post-stage2"
        g = np.random.default_rng(1)
        for layer in (backbone.layer1, backbone.layer2):
            for i in range(3):
                layer.experts[i] = g.normal(size=layer.experts[i].shape)
            # poison expert stays zero
        split = small_data(16)
        t1, t2 = calibrate_dependencies(backbone, split.train)
        np.testing.assert_array_equal(t1.theta, np.zeros(4))
        np.testing.assert_array_equal(t2.theta, np.zeros(4))

    def test_empty_calibration_errors(self):
        backbone = fresh_backbone()
        backbone.stage = "post-stage2"
        with pytest.raises(ValueError, match="empty"):
            calibrate_dependencies(backbone, [])


class TestPipeline:
    def test_markers_and_reports(self):
        split = small_data(64)
        result = run_pipeline(split.train, small_pipeline_config(), eval_data=split.eval)
        assert result.backbone.stage == "post-stage2"
        assert [r.stage for r in result.reports] == ["stage1", "stage2"]
        assert result.checkpoint.stage == "post-stage2"

    def test_bit_identical_across_runs(self):
        split = small_data(64)
        a = run_pipeline(split.train, small_pipeline_config())
        b = run_pipeline(split.train, small_pipeline_config())
        assert checkpoint_bytes(a.checkpoint) == checkpoint_bytes(b.checkpoint)
        assert [e.loss for r in a.reports for e in r.epochs] == \
               [e.loss for r in b.reports for e in r.epochs]

    def test_baseline_mode(self):
        split = small_data(64)
        result = run_pipeline(split.train, small_pipeline_config(baseline=True))
        assert [r.stage for r in result.reports] == ["baseline"]
        assert result.backbone.stage == "post-stage2"
        # baseline gets the combined epoch budget
        assert len(result.reports[0].epochs) == 4
        acc = accuracy(result.backbone, split.eval, masked=False)
        assert 0.0 <= acc <= 1.0


class TestCheckpoint:
    def _checkpoint(self):
        split = small_data(48)
        result = run_pipeline(split.train, small_pipeline_config())
        return result.checkpoint

    def test_round_trip_bytes_identical(self, tmp_path):
        ckpt = self._checkpoint()
        p = tmp_path / "model.lope"
        save_checkpoint(ckpt, p)
        loaded = load_checkpoint(p)
        assert checkpoint_bytes(loaded) == p.read_bytes()
        np.testing.assert_array_equal(loaded.backbone.layer1.a, ckpt.backbone.layer1.a)
        np.testing.assert_array_equal(loaded.thetas[0].theta, ckpt.thetas[0].theta)
        assert loaded.stage == ckpt.stage
        assert loaded.rng == ckpt.rng

    def test_version_mismatch_fails_loudly(self):
        ckpt = self._checkpoint()
        data = bytearray(checkpoint_bytes(ckpt))
        data[4] = 99
        with pytest.raises(ValueError, match="version mismatch: found 99"):
            checkpoint_from_bytes(bytes(data))

    def test_bad_magic(self):
        with pytest.raises(ValueError, match="bad magic"):
            checkpoint_from_bytes(b"NOPE" + b"\x00" * 64)

    def test_truncation_detected(self):
        ckpt = self._checkpoint()
        data = checkpoint_bytes(ckpt)
        with pytest.raises(ValueError, match="truncated"):
            checkpoint_from_bytes(data[: len(data) // 2])


class TestGradCheckSuite:
    def test_small_suite_passes(self):
        report = grad_check_suite(seed=614, configs_per_regime=4, model_configs=1)
        assert report.passed, sorted(
            (e.regime, e.block, e.rel_err) for e in report.entries if e.rel_err > 1e-6
        )[:5]
        regimes = {e.regime for e in report.entries}
        assert regimes == {"stage1", "stage2", "stage2_compensated"}

    def test_worst_by_block_structure(self):
        report = grad_check_suite(seed=614, configs_per_regime=2, model_configs=1)
        worst = report.worst_by_block()
        assert "a" in worst and "x" in worst
        assert all(v <= 1e-6 for v in worst.values())

    def test_corruption_hook_fails_suite(self):
        report = grad_check_suite(seed=614, configs_per_regime=2, model_configs=0,
                                  corrupt_block="a")
        assert not report.passed


class TestFrozenChecksums:
    def test_checksum_keys_per_regime(self):
        backbone = fresh_backbone()
        sums1 = frozen_block_checksums(backbone, Regime.STAGE1)
        assert "layer1.w_gate" in sums1 and "layer1.b_0" in sums1
        assert "layer1.a" not in sums1 and "layer1.b_3" not in sums1
        sums2 = frozen_block_checksums(backbone, Regime.STAGE2)
        assert "layer1.b_3" in sums2 and "layer1.w_gate" not in sums2
