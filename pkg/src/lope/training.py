"""Two-stage training pipeline, dependency calibration, versioned binary
checkpoints, and the finite-difference gradient-check suite.

Stage I specialises the poisoning experts: the shared projection and the
poisoning experts train on noise-augmented data while everything else is
frozen.  Stage II freezes the poisoning experts and trains the remaining
experts and the router on the original data.  Dependencies are calibrated
afterwards, and inference masks the poisoning experts.
"""

from __future__ import annotations

import hashlib
import os
import struct
import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import adapter
from .adapter import (
    DependencyVector,
    Regime,
    apply_freeze,
    block_names,
    calibrate_theta,
    clone_layer,
    get_block,
    set_block,
    trainable_blocks,
)
from .model import (
    Backbone,
    Batch,
    _pool,
    accuracy,
    backward_full,
    forward_loss,
    iter_batches,
    make_backbone,
)
from .noise import ContinuousNoiseSpec, Dataset, DiscreteNoiseSpec, augment_dataset
from .numerics import RngStream, finite_diff_grad

STAGE_MARKERS = ("init", "post-stage1", "post-stage2")

GRAD_TOLERANCE = 1e-6
FD_STEP = 1e-5


@dataclass(frozen=True)
class StageConfig:
    """One training stage.  Noise specs are only legal for stage I."""

    epochs: int = 20
    batch_size: int = 32
    learning_rate: float = 2e-4
    momentum: float = 0.9
    discrete_noise: DiscreteNoiseSpec | None = None
    continuous_noise: ContinuousNoiseSpec | None = None
    continuous_fraction: float = 1.0  # probability a batch receives embedding noise
    compensate_during_stage2: bool = False
    calibration_size: int = 256
    seed: int = 614

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ValueError(f"learning rate must be non-negative, got {self.learning_rate}")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError(f"momentum must lie in [0, 1), got {self.momentum}")
        if self.epochs < 0:
            raise ValueError("epochs must be non-negative")
        if not 0.0 <= self.continuous_fraction <= 1.0:
            raise ValueError("continuous_fraction must lie in [0, 1]")


@dataclass
class EpochStats:
    epoch: int
    loss: float
    train_acc: float
    eval_acc: float | None
    wall_ms: float


@dataclass
class TrainReport:
    """Per-stage training record: losses, monitoring accuracies, wall time,
    and checksums of every frozen block before and after the stage."""

    stage: str
    condition: str
    seed: int
    epochs: list[EpochStats] = field(default_factory=list)
    frozen_before: dict[str, str] = field(default_factory=dict)
    frozen_after: dict[str, str] = field(default_factory=dict)

    @property
    def final_loss(self) -> float | None:
        return self.epochs[-1].loss if self.epochs else None


def _sha256(arr: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(arr).tobytes()).hexdigest()


def frozen_block_checksums(backbone: Backbone, regime: Regime) -> dict[str, str]:
    """Checksums of every block that must not change under a regime: the
    embedding, both base weights, and each layer's frozen adapter blocks."""
    out = {"embedding": _sha256(backbone.embedding)}
    for lname, layer in (("layer1", backbone.layer1), ("layer2", backbone.layer2)):
        out[f"{lname}.w0"] = _sha256(layer.w0)
        trainable = set(trainable_blocks(layer, regime))
        for name in block_names(layer):
            if name not in trainable:
                out[f"{lname}.{name}"] = _sha256(get_block(layer, name))
    return out


class SgdMomentum:
    """Plain SGD with classical momentum: v <- mu v + g, p <- p - lr v.

    Blocks update in sorted name order, layer1 before layer2, so runs are
    bit-reproducible.
    """

    def __init__(self, learning_rate: float, momentum: float):
        self.learning_rate = learning_rate
        self.momentum = momentum
        self.velocity: dict[tuple[str, str], np.ndarray] = {}

    def step(self, backbone: Backbone, grads: dict) -> None:
        for lname in ("layer1", "layer2"):
            layer = getattr(backbone, lname)
            for name in sorted(grads[lname]):
                g = grads[lname][name]
                key = (lname, name)
                v = self.velocity.get(key)
                v = g.copy() if v is None else self.momentum * v + g
                self.velocity[key] = v
                get_block(layer, name)[...] -= self.learning_rate * v


def _require_stage(backbone: Backbone, expected: str) -> None:
    if backbone.stage != expected:
        raise ValueError(f"backbone at stage {backbone.stage!r}, expected {expected!r}")


def _verify_frozen(before: dict[str, str], after: dict[str, str], stage: str) -> None:
    changed = sorted(k for k in before if before[k] != after.get(k))
    if changed:
        raise RuntimeError(f"frozen blocks changed during {stage}: {changed}")


def _monitor(backbone, train_data, eval_data, thetas, masked):
    zeros = (
        DependencyVector.zeros(backbone.layer1.num_experts),
        DependencyVector.zeros(backbone.layer2.num_experts),
    )
    th = thetas if thetas is not None else zeros
    train_acc = accuracy(backbone, train_data, thetas=th if masked else None, masked=masked)
    eval_acc = None
    if eval_data is not None:
        eval_acc = accuracy(backbone, eval_data, thetas=th if masked else None, masked=masked)
    return train_acc, eval_acc


def _run_epoch(backbone, data, cfg, regime, rng, epoch, opt, thetas=None,
               continuous=None) -> float:
    """One pass over the data; returns the mean per-example loss."""
    order = rng.child(1, epoch).generator().permutation(len(data))
    total, seen = 0.0, 0
    for bi, batch in enumerate(iter_batches(data, cfg.batch_size, order)):
        noise = None
        noise_rng = None
        if continuous is not None and continuous.alpha > 0:
            use = cfg.continuous_fraction >= 1.0 or (
                cfg.continuous_fraction > 0.0
                and rng.child(2, epoch, bi).generator().uniform() < cfg.continuous_fraction
            )
            if use:
                noise = continuous
                noise_rng = rng.child(3, epoch, bi)
        loss, trace = forward_loss(backbone, batch, regime, thetas=thetas,
                                   noise=noise, rng=noise_rng)
        grads = backward_full(backbone, trace, regime)
        opt.step(backbone, grads)
        total += loss * len(batch)
        seen += len(batch)
    return total / seen


def _run_stage(backbone, data, eval_data, cfg, regime, stage_name, condition,
               monitor_masked, continuous=None, recalibrate=None) -> TrainReport:
    apply_freeze(backbone.layer1, regime)
    apply_freeze(backbone.layer2, regime)
    before = frozen_block_checksums(backbone, regime)
    report = TrainReport(stage=stage_name, condition=condition, seed=cfg.seed,
                         frozen_before=before)
    rng = RngStream(cfg.seed).child(_STAGE_STREAM[stage_name])
    opt = SgdMomentum(cfg.learning_rate, cfg.momentum)
    thetas = None
    if regime is Regime.STAGE2_COMPENSATED:
        thetas = (
            DependencyVector.zeros(backbone.layer1.num_experts),
            DependencyVector.zeros(backbone.layer2.num_experts),
        )
    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        mean_loss = _run_epoch(backbone, data, cfg, regime, rng, epoch, opt,
                               thetas=thetas, continuous=continuous)
        if recalibrate is not None:
            thetas = recalibrate()
        train_acc, eval_acc = _monitor(backbone, data, eval_data, thetas, monitor_masked)
        report.epochs.append(EpochStats(
            epoch=epoch, loss=mean_loss, train_acc=train_acc, eval_acc=eval_acc,
            wall_ms=(time.perf_counter() - t0) * 1000.0,
        ))
    report.frozen_after = frozen_block_checksums(backbone, regime)
    _verify_frozen(report.frozen_before, report.frozen_after, stage_name)
    return report


_STAGE_STREAM = {"stage1": 11, "stage2": 12, "baseline": 13}


def train_stage1(backbone: Backbone, data: Dataset, cfg: StageConfig,
                 eval_data: Dataset | None = None, condition: str = "lope") -> TrainReport:
    """Stage I: train the shared projections and the poisoning experts on
    hybrid-noise-augmented data; all other blocks stay bit-identical."""
    _require_stage(backbone, "init")
    rng = RngStream(cfg.seed).child(10)
    if cfg.discrete_noise is not None and cfg.discrete_noise.rate > 0:
        train_data, _ = augment_dataset(data, cfg.discrete_noise, rng)
    else:
        train_data = data
    # Monitoring is unmasked here: during stage 1 the poisoning experts are
    # the only nonzero experts, so masked accuracy would read pure chance.
    report = _run_stage(backbone, train_data, eval_data, cfg, Regime.STAGE1,
                        "stage1", condition, monitor_masked=False,
                        continuous=cfg.continuous_noise)
    backbone.stage = "post-stage1"
    return report


def train_stage2(backbone: Backbone, data: Dataset, cfg: StageConfig,
                 eval_data: Dataset | None = None, condition: str = "lope") -> TrainReport:
    """Stage II: freeze the poisoning experts, train everything else on the
    original (un-augmented) data; optionally recalibrate dependencies every
    epoch and use the compensated forward."""
    _require_stage(backbone, "post-stage1")
    if cfg.discrete_noise is not None or cfg.continuous_noise is not None:
        raise ValueError("stage-2 config must not carry noise specs")
    regime = Regime.STAGE2_COMPENSATED if cfg.compensate_during_stage2 else Regime.STAGE2
    recal = None
    if cfg.compensate_during_stage2:
        calibration = data.examples[: cfg.calibration_size]
        recal = lambda: _calibrate(backbone, calibration)  # noqa: E731
    report = _run_stage(backbone, data, eval_data, cfg, regime,
                        "stage2", condition, monitor_masked=True, recalibrate=recal)
    backbone.stage = "post-stage2"
    return report


def train_baseline(backbone: Backbone, data: Dataset, cfg: StageConfig,
                   eval_data: Dataset | None = None, condition: str = "baseline") -> TrainReport:
    """Ablation baseline: one stage on the given (noisy) data with every
    adapter block trainable and no masking at evaluation."""
    _require_stage(backbone, "init")
    report = _run_stage(backbone, data, eval_data, cfg, Regime.BASELINE,
                        "baseline", condition, monitor_masked=False)
    backbone.stage = "post-stage2"
    return report


def pretrain_base(backbone: Backbone, data: Dataset, epochs: int, learning_rate: float,
                  momentum: float = 0.9, batch_size: int = 32, seed: int = 0) -> list[float]:
    """Give the frozen base something to stand on: train the two dense base
    weights (adapters untouched, embedding frozen) on clean data, before the
    adaptation pipeline starts.  This plays the role of the upstream
    pretrained model; afterwards the base is frozen for good.

    Returns the per-epoch mean losses.
    """
    _require_stage(backbone, "init")
    rng = RngStream(seed).child(14)
    velocity = {"w1": np.zeros_like(backbone.layer1.w0),
                "w2": np.zeros_like(backbone.layer2.w0)}
    losses = []
    for epoch in range(epochs):
        order = rng.child(1, epoch).generator().permutation(len(data))
        total, seen = 0.0, 0
        for batch in iter_batches(data, batch_size, order):
            embedded = backbone.embedding[batch.tokens]
            pooled = _pool(embedded, batch.mask)
            y1 = matmul(pooled, backbone.layer1.w0.T)
            hidden = np.tanh(y1)
            logits = matmul(hidden, backbone.layer2.w0.T)
            shifted = logits - logits.max(axis=1, keepdims=True)
            logsumexp = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
            log_probs = shifted - logsumexp
            m = len(batch)
            total += float(-np.mean(log_probs[np.arange(m), batch.labels])) * m
            seen += m
            dlogits = np.exp(log_probs)
            dlogits[np.arange(m), batch.labels] -= 1.0
            dlogits /= m
            dw2 = matmul(dlogits.T, hidden)
            dhidden = matmul(dlogits, backbone.layer2.w0)
            dy1 = dhidden * (1.0 - hidden * hidden)
            dw1 = matmul(dy1.T, pooled)
            velocity["w1"] = momentum * velocity["w1"] + dw1
            velocity["w2"] = momentum * velocity["w2"] + dw2
            backbone.layer1.w0[...] -= learning_rate * velocity["w1"]
            backbone.layer2.w0[...] -= learning_rate * velocity["w2"]
        losses.append(total / seen)
    return losses


def _calibrate(backbone: Backbone, examples) -> tuple[DependencyVector, DependencyVector]:
    batch = Batch.from_examples(list(examples))
    _, trace = forward_loss(backbone, batch, Regime.STAGE2)
    theta1 = calibrate_theta(backbone.layer1, trace.pooled)
    theta2 = calibrate_theta(backbone.layer2, trace.hidden)
    return theta1, theta2


def calibrate_dependencies(backbone: Backbone, calibration_set) -> tuple[DependencyVector, DependencyVector]:
    """Per-layer dependency vectors from the hidden inputs a calibration set
    produces under the plain stage-2 forward."""
    _require_stage(backbone, "post-stage2")
    if isinstance(calibration_set, Dataset):
        examples = calibration_set.examples
    else:
        examples = list(calibration_set)
    if not examples:
        raise ValueError("calibration set is empty")
    return _calibrate(backbone, examples)


# --- pipeline ----------------------------------------------------------------


@dataclass(frozen=True)
class PipelineConfig:
    vocab_size: int = 32
    embed_dim: int = 16
    hidden_dim: int = 32
    num_classes: int = 4
    rank: int = 4
    num_experts: int = 4
    top_k: int = 3
    poison: tuple[int, ...] = (3,)
    stage1: StageConfig = StageConfig()
    stage2: StageConfig = StageConfig()
    calibration_size: int = 256
    seed: int = 614
    baseline: bool = False
    config_hash: str = ""
    # base-model preparation (stands in for upstream pretraining; the base
    # weights are frozen once the adaptation pipeline starts)
    pretrain_epochs: int = 0
    pretrain_learning_rate: float = 0.3


@dataclass
class PipelineResult:
    checkpoint: "Checkpoint"
    reports: list[TrainReport]

    @property
    def backbone(self) -> Backbone:
        return self.checkpoint.backbone

    @property
    def thetas(self):
        return self.checkpoint.thetas


def run_pipeline(train_data: Dataset, cfg: PipelineConfig,
                 eval_data: Dataset | None = None, condition: str = "lope",
                 pretrain_data: Dataset | None = None) -> PipelineResult:
    """init -> (base pretraining) -> stage 1 -> stage 2 -> calibrate ->
    checkpoint.  With ``cfg.baseline`` the same architecture instead trains
    single-stage on the same data with nothing frozen and no masking."""
    root = RngStream(cfg.seed)
    backbone = make_backbone(cfg.vocab_size, cfg.embed_dim, cfg.hidden_dim,
                             cfg.num_classes, cfg.rank, cfg.num_experts,
                             cfg.top_k, cfg.poison, root.child(0))
    if cfg.pretrain_epochs > 0 and pretrain_data is not None:
        pretrain_base(backbone, pretrain_data, cfg.pretrain_epochs,
                      cfg.pretrain_learning_rate, momentum=cfg.stage1.momentum,
                      batch_size=cfg.stage1.batch_size, seed=cfg.seed)
    reports: list[TrainReport] = []
    if cfg.baseline:
        budget = cfg.stage1.epochs + cfg.stage2.epochs
        base_cfg = replace(cfg.stage2, epochs=budget, discrete_noise=None, continuous_noise=None)
        reports.append(train_baseline(backbone, train_data, base_cfg, eval_data, condition))
        thetas = (
            DependencyVector.zeros(cfg.num_experts),
            DependencyVector.zeros(cfg.num_experts),
        )
    else:
        reports.append(train_stage1(backbone, train_data, cfg.stage1, eval_data, condition))
        reports.append(train_stage2(backbone, train_data, cfg.stage2, eval_data, condition))
        calibration = train_data.examples[: cfg.calibration_size]
        thetas = calibrate_dependencies(backbone, calibration)
    checkpoint = Checkpoint(version=CHECKPOINT_VERSION, backbone=backbone, thetas=thetas,
                            stage=backbone.stage, config_hash=cfg.config_hash,
                            rng=root)
    return PipelineResult(checkpoint=checkpoint, reports=reports)


# --- checkpoint format --------------------------------------------------------
# Little-endian binary layout:
#   magic 'LOPE' | u32 version | u32 x7 dims (V, d, h, C, r, N, K)
#   u32 poison count | u32 poison indices | u8 stage | 32-byte config hash
#   u64 rng seed | u32 rng path length | u64 path entries
#   length-prefixed f64 blocks (u64 count + payload) in declared order:
#     embedding, layer1 (w0, a, b_0..b_{N-1}, w_gate), layer2 (same),
#     theta1, theta2

CHECKPOINT_MAGIC = b"LOPE"
CHECKPOINT_VERSION = 1


@dataclass
class Checkpoint:
    version: int
    backbone: Backbone
    thetas: tuple[DependencyVector, DependencyVector]
    stage: str
    config_hash: str
    rng: RngStream


def _pack_block(arr: np.ndarray) -> bytes:
    flat = np.ascontiguousarray(arr, dtype=np.float64).ravel()
    return struct.pack("<Q", flat.size) + flat.astype("<f8").tobytes()


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise ValueError("checkpoint truncated")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def u64(self) -> int:
        return struct.unpack("<Q", self.take(8))[0]

    def block(self, shape) -> np.ndarray:
        count = self.u64()
        expected = int(np.prod(shape))
        if count != expected:
            raise ValueError(f"checkpoint block has {count} values, expected {expected}")
        arr = np.frombuffer(self.take(8 * count), dtype="<f8").astype(np.float64)
        return arr.reshape(shape)


def checkpoint_bytes(ckpt: Checkpoint) -> bytes:
    b = ckpt.backbone
    l1, l2 = b.layer1, b.layer2
    v, d = b.embedding.shape
    h = l1.d_out
    c = l2.d_out
    r = l1.rank
    n = l1.num_experts
    parts = [CHECKPOINT_MAGIC, struct.pack("<I", ckpt.version)]
    parts.append(struct.pack("<7I", v, d, h, c, r, n, l1.top_k))
    parts.append(struct.pack("<I", len(l1.poison)))
    parts.append(struct.pack(f"<{len(l1.poison)}I", *l1.poison))
    parts.append(struct.pack("<B", STAGE_MARKERS.index(ckpt.stage)))
    digest = bytes.fromhex(ckpt.config_hash) if ckpt.config_hash else b"\x00" * 32
    if len(digest) != 32:
        raise ValueError("config hash must be a 64-character hex digest")
    parts.append(digest)
    parts.append(struct.pack("<Q", ckpt.rng.seed))
    parts.append(struct.pack("<I", len(ckpt.rng.path)))
    for entry in ckpt.rng.path:
        parts.append(struct.pack("<Q", entry))
    parts.append(_pack_block(b.embedding))
    for layer in (l1, l2):
        parts.append(_pack_block(layer.w0))
        parts.append(_pack_block(layer.a))
        for expert in layer.experts:
            parts.append(_pack_block(expert))
        parts.append(_pack_block(layer.w_gate))
    parts.append(_pack_block(ckpt.thetas[0].theta))
    parts.append(_pack_block(ckpt.thetas[1].theta))
    return b"".join(parts)


def checkpoint_from_bytes(data: bytes) -> Checkpoint:
    rd = _Reader(data)
    if rd.take(4) != CHECKPOINT_MAGIC:
        raise ValueError("not a checkpoint file (bad magic)")
    version = rd.u32()
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"checkpoint format version mismatch: found {version}, "
                         f"expected {CHECKPOINT_VERSION}")
    v, d, h, c, r, n, top_k = struct.unpack("<7I", rd.take(28))
    n_poison = rd.u32()
    poison = tuple(struct.unpack(f"<{n_poison}I", rd.take(4 * n_poison)))
    stage = STAGE_MARKERS[struct.unpack("<B", rd.take(1))[0]]
    digest = rd.take(32)
    config_hash = "" if digest == b"\x00" * 32 else digest.hex()
    seed = rd.u64()
    path_len = rd.u32()
    path = tuple(rd.u64() for _ in range(path_len))
    embedding = rd.block((v, d))

    def read_layer(d_in, d_out):
        w0 = rd.block((d_out, d_in))
        a = rd.block((r, d_in))
        experts = [rd.block((d_out, r)) for _ in range(n)]
        w_gate = rd.block((r, n))
        return adapter.LopeLayer(w0=w0, a=a, experts=experts, w_gate=w_gate,
                                 poison=poison, top_k=top_k)

    layer1 = read_layer(d, h)
    layer2 = read_layer(h, c)
    theta1 = DependencyVector(rd.block((n,)))
    theta2 = DependencyVector(rd.block((n,)))
    if rd.pos != len(data):
        raise ValueError("checkpoint has trailing bytes")
    backbone = Backbone(embedding=embedding, layer1=layer1, layer2=layer2, stage=stage)
    return Checkpoint(version=version, backbone=backbone, thetas=(theta1, theta2),
                      stage=stage, config_hash=config_hash, rng=RngStream(seed, path))


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    data = checkpoint_bytes(ckpt)
    tmp = str(path) + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        return checkpoint_from_bytes(fh.read())


# --- gradient-check suite -----------------------------------------------------


@dataclass
class GradCheckEntry:
    regime: str
    config: int
    block: str
    rel_err: float


@dataclass
class GradCheckReport:
    entries: list[GradCheckEntry]
    tolerance: float = GRAD_TOLERANCE

    @property
    def passed(self) -> bool:
        return all(e.rel_err <= self.tolerance for e in self.entries)

    def worst_by_block(self) -> dict[str, float]:
        out: dict[str, float] = {}
        for e in self.entries:
            out[e.block] = max(out.get(e.block, 0.0), e.rel_err)
        return out


def _rel_err(a, b, floor=1e-8) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = max(float(np.abs(a).max(initial=0.0)), float(np.abs(b).max(initial=0.0)), floor)
    return float(np.abs(a - b).max(initial=0.0)) / denom


def _random_check_layer(g):
    d_in = int(g.integers(2, 6))
    d_out = int(g.integers(2, 5))
    rank = int(g.integers(1, 4))
    n = int(g.integers(2, 5))
    top_k = int(g.integers(1, n + 1))
    poison = (int(g.integers(n)),)
    layer = adapter.LopeLayer(
        w0=g.normal(size=(d_out, d_in)) / np.sqrt(d_in),
        a=g.normal(size=(rank, d_in)) / np.sqrt(d_in),
        experts=[g.normal(size=(d_out, rank)) / np.sqrt(rank) for _ in range(n)],
        w_gate=g.normal(size=(rank, n)),
        poison=poison,
        top_k=top_k,
    )
    return layer


def _random_check_theta(g, layer):
    th = g.uniform(-0.8, 0.8, size=layer.num_experts)
    for d in layer.poison:
        th[d] = 0.0
    return DependencyVector(th)


def _layer_fd(layer, name, x, dy, regime, theta, trace):
    base = get_block(layer, name)
    pinned_beta = trace.beta if regime is Regime.STAGE2_COMPENSATED else None

    def f(flat):
        probe = clone_layer(layer)
        set_block(probe, name, flat.reshape(base.shape))
        t = adapter._train_forward(probe, x, regime, theta,
                                   pinned_active=trace.active, pinned_beta=pinned_beta)
        return float(np.sum(t.y * dy))

    return finite_diff_grad(f, base.ravel().copy(), h=FD_STEP).reshape(base.shape)


def _check_layer_config(entries, regime, theta_needed, index, g, corrupt_block):
    layer = _random_check_layer(g)
    theta = _random_check_theta(g, layer) if theta_needed else None
    m = int(g.integers(1, 4))
    x = g.normal(size=(m, layer.d_in))
    dy = g.normal(size=(m, layer.d_out))
    trace = adapter._train_forward(layer, x, regime, theta)
    grads, dx = adapter.backward(layer, trace, dy, regime)
    if corrupt_block is not None and corrupt_block in grads:
        grads[corrupt_block] = grads[corrupt_block] + 1e-3
    for name, analytic in grads.items():
        fd = _layer_fd(layer, name, x, dy, regime, theta, trace)
        entries.append(GradCheckEntry(regime.value, index, name, _rel_err(analytic, fd)))

    pinned_beta = trace.beta if regime is Regime.STAGE2_COMPENSATED else None

    def f_input(flat):
        t = adapter._train_forward(layer, flat.reshape(x.shape), regime, theta,
                                   pinned_active=trace.active, pinned_beta=pinned_beta)
        return float(np.sum(t.y * dy))

    fd_x = finite_diff_grad(f_input, x.ravel().copy(), h=FD_STEP).reshape(x.shape)
    entries.append(GradCheckEntry(regime.value, index, "x", _rel_err(dx, fd_x)))


def _check_model_config(entries, regime, theta_needed, index, g, seed):
    backbone = make_backbone(10, 4, 3, 2, 2, 3, 2, (1,), RngStream(seed).child(90, index))
    for layer in (backbone.layer1, backbone.layer2):
        layer.a = g.normal(size=layer.a.shape) / np.sqrt(layer.d_in)
        layer.experts = [g.normal(size=b.shape) / np.sqrt(layer.rank) for b in layer.experts]
        layer.w_gate = g.normal(size=layer.w_gate.shape)
    examples = []
    for _ in range(4):
        length = int(g.integers(3, 7))
        examples.append((g.integers(0, 10, size=length).tolist(), int(g.integers(2))))
    batch = Batch.from_examples(examples)
    thetas = None
    if theta_needed:
        thetas = (_random_check_theta(g, backbone.layer1), _random_check_theta(g, backbone.layer2))
    _, trace = forward_loss(backbone, batch, regime, thetas=thetas)
    grads = backward_full(backbone, trace, regime)
    for lname in ("layer1", "layer2"):
        layer = getattr(backbone, lname)
        for name, analytic in grads[lname].items():
            base = get_block(layer, name).copy()

            def f(flat, layer=layer, name=name, base=base):
                old = get_block(layer, name).copy()
                set_block(layer, name, flat.reshape(base.shape))
                try:
                    loss, _ = forward_loss(backbone, batch, regime, thetas=thetas, pin_from=trace)
                finally:
                    set_block(layer, name, old)
                return loss

            fd = finite_diff_grad(f, base.ravel().copy(), h=FD_STEP).reshape(base.shape)
            entries.append(GradCheckEntry(regime.value, index,
                                          f"model.{lname}.{name}", _rel_err(analytic, fd)))


def grad_check_suite(seed: int = 614, configs_per_regime: int = 20,
                     model_configs: int = 3, corrupt_block: str | None = None) -> GradCheckReport:
    """Compare every analytic gradient against central finite differences
    over random configurations of every training regime.

    The finite-difference probe pins each trace's active sets and (in the
    compensated regime) its beta values: those are selection constants and
    stop-gradients of the training objective, so the probe differentiates
    exactly the function the backward pass claims to differentiate.
    ``corrupt_block`` deliberately perturbs one analytic gradient block and
    is only used to prove the suite can fail.
    """
    entries: list[GradCheckEntry] = []
    regimes = [
        (Regime.STAGE1, False),
        (Regime.STAGE2, False),
        (Regime.STAGE2_COMPENSATED, True),
    ]
    for ridx, (regime, theta_needed) in enumerate(regimes):
        for i in range(configs_per_regime):
            g = RngStream(seed).child(20 + ridx, i).generator()
            _check_layer_config(entries, regime, theta_needed, i, g, corrupt_block)
        for i in range(model_configs):
            g = RngStream(seed).child(30 + ridx, i).generator()
            _check_model_config(entries, regime, theta_needed, i, g, seed)
    return GradCheckReport(entries=entries)
