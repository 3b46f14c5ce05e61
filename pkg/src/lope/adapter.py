"""The LoPE layer: an asymmetric low-rank adapter with a shared
down-projection, several expert up-projections, a softmax router, and one
or more dedicated poisoning experts.

Forward regimes
---------------
All training-time regimes mix the poisoning experts unconditionally (at
their gate weights) together with the top-K *normal* experts:

- stage 1 / stage 2 (plain):   y = W0 x + (sum_i w_i B_i) A x
- stage 2 (compensated):       y = W0 x + beta * (w_D B_D + sum_i (1+theta_i) w_i B_i) A x
- inference (masked):          y = W0 x + beta * sum_i (1+theta_i) w~_i B_i A x

where the sums run over the active normal experts, ``theta_i`` is the
calibrated dependency of expert i on the poisoning expert, ``w~`` is the
gate re-normalised over normal experts, and ``beta`` rescales the active
normal weight mass back to its uncompensated value (so compensation
redistributes weight instead of adding output mass).  ``theta`` and
``beta`` are treated as constants by the backward pass.

Inputs may be a single vector or an (m, d_in) batch; traces always store
batch-shaped arrays.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .numerics import matmul, row_cosine_sim, softmax

_BETA_FLOOR = 1e-300  # guards beta against a fully cancelled compensated sum


class Regime(Enum):
    STAGE1 = "stage1"
    STAGE2 = "stage2"
    STAGE2_COMPENSATED = "stage2_compensated"
    BASELINE = "baseline"  # ablation baseline: single stage, everything trains
    INFERENCE = "inference"


TRAIN_REGIMES = (Regime.STAGE1, Regime.STAGE2, Regime.STAGE2_COMPENSATED, Regime.BASELINE)


@dataclass
class LopeLayer:
    """One adapted linear map.  ``w0`` is the frozen base weight; ``a`` the
    shared (r, d_in) down-projection; ``experts`` the per-expert (d_out, r)
    up-projections; ``w_gate`` the (r, N) router weight.

    ``poison`` lists the poisoning expert indices (usually one).  ``top_k``
    caps how many normal experts participate per input.  ``freeze`` carries
    the current per-block freeze flags; ``masked`` permanently excludes the
    poisoning experts from gating and mixing.
    """

    w0: np.ndarray
    a: np.ndarray
    experts: list
    w_gate: np.ndarray
    poison: tuple[int, ...]
    top_k: int
    freeze: dict = field(default_factory=dict)
    masked: bool = False

    def __post_init__(self):
        self.w0 = np.ascontiguousarray(self.w0, dtype=np.float64)
        self.a = np.ascontiguousarray(self.a, dtype=np.float64)
        self.experts = [np.ascontiguousarray(b, dtype=np.float64) for b in self.experts]
        self.w_gate = np.ascontiguousarray(self.w_gate, dtype=np.float64)
        if isinstance(self.poison, int):
            self.poison = (self.poison,)
        self.poison = tuple(int(d) for d in self.poison)
        d_out, d_in = self.w0.shape
        r = self.a.shape[0]
        n = len(self.experts)
        if self.a.shape != (r, d_in):
            raise ValueError(f"a has shape {self.a.shape}, expected (r, {d_in})")
        for i, b in enumerate(self.experts):
            if b.shape != (d_out, r):
                raise ValueError(f"expert {i} has shape {b.shape}, expected ({d_out}, {r})")
        if self.w_gate.shape != (r, n):
            raise ValueError(f"w_gate has shape {self.w_gate.shape}, expected ({r}, {n})")
        if not self.poison or len(set(self.poison)) != len(self.poison):
            raise ValueError(f"poison indices must be non-empty and unique, got {self.poison}")
        if any(not 0 <= d < n for d in self.poison):
            raise ValueError(f"poison indices {self.poison} outside [0, {n})")
        if not 1 <= self.top_k <= n:
            raise ValueError(f"top_k must lie in [1, {n}], got {self.top_k}")
        if not self.freeze:
            self.freeze = {name: False for name in block_names(self)}

    @property
    def d_in(self) -> int:
        return self.w0.shape[1]

    @property
    def d_out(self) -> int:
        return self.w0.shape[0]

    @property
    def rank(self) -> int:
        return self.a.shape[0]

    @property
    def num_experts(self) -> int:
        return len(self.experts)

    @property
    def poison_index(self) -> int:
        return self.poison[0]

    @property
    def normal_indices(self) -> np.ndarray:
        return np.array([i for i in range(self.num_experts) if i not in self.poison], dtype=np.int64)


#: Scale of the random router initialisation.  A nonzero scale keeps the
#: routing near-uniform at step 0 while letting per-input weights differ,
#: which is what lets the normal experts differentiate during training (a
#: gate of exact zeros gives every normal expert bitwise-identical
#: gradients forever).
GATE_INIT_SCALE = 0.5


def make_layer(d_in, d_out, rank, num_experts, top_k, poison, rng, w0=None,
               gate_scale: float = GATE_INIT_SCALE) -> LopeLayer:
    """Standard initialisation: experts start at zero (the adapter is
    initially the identity update), ``a`` is Gaussian with scale
    1/sqrt(d_in), and the router gets a small random initialisation."""
    if w0 is None:
        w0 = rng.child(0).normal((d_out, d_in), scale=1.0 / np.sqrt(d_in))
    a = rng.child(1).normal((rank, d_in), scale=1.0 / np.sqrt(d_in))
    experts = [np.zeros((d_out, rank)) for _ in range(num_experts)]
    if gate_scale > 0:
        w_gate = rng.child(2).normal((rank, num_experts), scale=gate_scale / np.sqrt(rank))
    else:
        w_gate = np.zeros((rank, num_experts))
    return LopeLayer(w0=w0, a=a, experts=experts, w_gate=w_gate, poison=poison, top_k=top_k)


def block_names(layer: LopeLayer) -> list[str]:
    """Adapter parameter blocks in canonical (update) order."""
    return ["a"] + [f"b_{i}" for i in range(layer.num_experts)] + ["w_gate"]


def get_block(layer: LopeLayer, name: str) -> np.ndarray:
    if name == "a":
        return layer.a
    if name == "w_gate":
        return layer.w_gate
    if name.startswith("b_"):
        return layer.experts[int(name[2:])]
    raise KeyError(f"unknown parameter block {name!r}")


def set_block(layer: LopeLayer, name: str, value: np.ndarray) -> None:
    value = np.ascontiguousarray(value, dtype=np.float64)
    if value.shape != get_block(layer, name).shape:
        raise ValueError(f"block {name}: shape {value.shape} != {get_block(layer, name).shape}")
    if name == "a":
        layer.a = value
    elif name == "w_gate":
        layer.w_gate = value
    else:
        layer.experts[int(name[2:])] = value


def trainable_blocks(layer: LopeLayer, regime: Regime) -> tuple[str, ...]:
    """Blocks that receive gradients in a regime.  Stage 1 trains the shared
    projection and the poisoning experts; stage 2 trains everything except
    the poisoning experts; the ablation baseline trains everything."""
    if regime is Regime.STAGE1:
        experts = [f"b_{d}" for d in sorted(layer.poison)]
        return ("a", *experts)
    if regime in (Regime.STAGE2, Regime.STAGE2_COMPENSATED):
        experts = [f"b_{i}" for i in layer.normal_indices.tolist()]
        return ("a", *experts, "w_gate")
    if regime is Regime.BASELINE:
        experts = [f"b_{i}" for i in range(layer.num_experts)]
        return ("a", *experts, "w_gate")
    raise ValueError(f"no trainable blocks in regime {regime}")


def apply_freeze(layer: LopeLayer, regime: Regime) -> None:
    """Set the layer's freeze flags to match a regime."""
    if regime is Regime.INFERENCE:
        trainable: tuple[str, ...] = ()
    else:
        trainable = trainable_blocks(layer, regime)
    for name in block_names(layer):
        layer.freeze[name] = name not in trainable


@dataclass(frozen=True)
class GateOutput:
    """Router output: softmax weights over all experts and the active
    (top-K) index set, ties broken toward the lowest index.  For a masked
    layer the poisoning experts are excluded from both."""

    omega: np.ndarray
    active: np.ndarray


@dataclass(frozen=True)
class DependencyVector:
    """Calibrated per-expert dependencies on the poisoning expert(s):
    mean cosine similarity of expert outputs, zero at the poison slots."""

    theta: np.ndarray

    def __post_init__(self):
        th = np.asarray(self.theta, dtype=np.float64)
        if th.ndim != 1:
            raise ValueError(f"theta must be 1-D, got shape {th.shape}")
        if not np.all(np.isfinite(th)):
            raise ValueError("theta entries must be finite")
        if np.any(np.abs(th) > 1.0 + 1e-9):
            raise ValueError("theta entries must lie in [-1, 1]")
        object.__setattr__(self, "theta", np.clip(th, -1.0, 1.0))

    @classmethod
    def zeros(cls, num_experts: int) -> "DependencyVector":
        return cls(np.zeros(num_experts))


@dataclass
class ForwardTrace:
    """Everything the backward pass and the audits need: the input, the
    shared projection, per-expert outputs, gate weights, active normal
    experts, effective mixing coefficients, the beta scale, and the output."""

    regime: Regime
    x: np.ndarray            # (m, d_in)
    ax: np.ndarray           # (m, r)
    expert_outs: np.ndarray  # (N, m, d_out)
    omega: np.ndarray        # (m, N)
    active: np.ndarray       # (m, K_normal) active normal expert indices
    coeff: np.ndarray        # (m, N) effective mixing coefficients
    beta: np.ndarray         # (m,)
    theta: np.ndarray | None
    y: np.ndarray            # (m, d_out)
    single: bool

    def recompute_y(self, layer: LopeLayer) -> np.ndarray:
        """Re-evaluate the regime formula from stored fields."""
        y = matmul(self.x, layer.w0.T)
        for i in range(layer.num_experts):
            col = self.coeff[:, i]
            if np.any(col != 0.0):
                y = y + col[:, None] * self.expert_outs[i]
        return y


def _as_batch(x, d_in: int):
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim == 1:
        if arr.shape[0] != d_in:
            raise ValueError(f"input length {arr.shape[0]} != d_in {d_in}")
        return arr[None, :], True
    if arr.ndim == 2:
        if arr.shape[1] != d_in:
            raise ValueError(f"input width {arr.shape[1]} != d_in {d_in}")
        return arr, False
    raise ValueError(f"input must be a vector or an (m, d_in) batch, got shape {arr.shape}")


def _topk_rows(values: np.ndarray, k: int) -> np.ndarray:
    """Per-row indices of the k largest values, ties to the lowest index,
    returned in ascending index order."""
    order = np.argsort(-values, axis=1, kind="stable")[:, :k]
    return np.sort(order, axis=1)


def _topk_subset(values: np.ndarray, subset: np.ndarray, k: int) -> np.ndarray:
    """Top-k restricted to the columns in ``subset`` (ascending indices)."""
    if k == 0 or subset.size == 0:
        return np.zeros((values.shape[0], 0), dtype=np.int64)
    inner = _topk_rows(values[:, subset], k)
    return subset[inner]


def _check_theta(layer: LopeLayer, theta: DependencyVector) -> np.ndarray:
    if not isinstance(theta, DependencyVector):
        raise TypeError(f"theta must be a DependencyVector, got {type(theta).__name__}")
    th = theta.theta
    if th.shape[0] != layer.num_experts:
        raise ValueError(f"theta has length {th.shape[0]}, expected {layer.num_experts}")
    if any(th[d] != 0.0 for d in layer.poison):
        raise ValueError("theta must be zero at the poisoning expert indices")
    return th


def gate(layer: LopeLayer, x) -> GateOutput:
    """Router weights omega = softmax(W_gate^T (A x)) and the active top-K
    set.  The gate sees the r-dimensional shared projection of the input."""
    X, single = _as_batch(x, layer.d_in)
    ax = matmul(X, layer.a.T)
    logits = matmul(ax, layer.w_gate)
    if layer.masked:
        normals = layer.normal_indices
        omega = np.zeros_like(logits)
        omega[:, normals] = softmax(logits[:, normals])
        active = _topk_subset(omega, normals, min(layer.top_k, normals.size))
    else:
        omega = softmax(logits)
        active = _topk_rows(omega, layer.top_k)
    if single:
        return GateOutput(omega[0], active[0])
    return GateOutput(omega, active)


def _train_forward(layer, x, regime, theta, pinned_active=None, pinned_beta=None):
    if layer.masked:
        raise ValueError("training forward on a masked layer; unmask or use forward_inference")
    X, single = _as_batch(x, layer.d_in)
    m = X.shape[0]
    n = layer.num_experts
    ax = matmul(X, layer.a.T)
    logits = matmul(ax, layer.w_gate)
    omega = softmax(logits)
    normals = layer.normal_indices
    kn = min(layer.top_k, normals.size)
    active = pinned_active if pinned_active is not None else _topk_subset(omega, normals, kn)
    expert_outs = np.stack([matmul(ax, b.T) for b in layer.experts])
    rows = np.arange(m)[:, None]
    coeff = np.zeros((m, n))
    if theta is None:
        beta = np.ones(m)
        th = None
        for d in layer.poison:
            coeff[:, d] = omega[:, d]
        if active.shape[1]:
            coeff[rows, active] = omega[rows, active]
    else:
        th = _check_theta(layer, theta)
        c = 1.0 + th
        if active.shape[1]:
            act_omega = omega[rows, active]
            s_plain = act_omega.sum(axis=1)
            s_comp = (c[active] * act_omega).sum(axis=1)
            beta = np.where(s_comp > _BETA_FLOOR, s_plain / np.maximum(s_comp, _BETA_FLOOR), 1.0)
        else:
            beta = np.ones(m)
        if pinned_beta is not None:
            beta = np.asarray(pinned_beta, dtype=np.float64)
        for d in layer.poison:
            coeff[:, d] = beta * omega[:, d]
        if active.shape[1]:
            coeff[rows, active] = (beta[:, None] * c[active]) * omega[rows, active]
    y = matmul(X, layer.w0.T)
    for i in range(n):
        col = coeff[:, i]
        if np.any(col != 0.0):
            y = y + col[:, None] * expert_outs[i]
    return ForwardTrace(
        regime=regime, x=X, ax=ax, expert_outs=expert_outs, omega=omega,
        active=active, coeff=coeff, beta=beta, theta=th, y=y, single=single,
    )


def forward_stage1(layer: LopeLayer, x) -> ForwardTrace:
    """Stage-I forward: all experts mix at their gate weights; gradients
    later flow only into the shared projection and the poisoning experts."""
    return _train_forward(layer, x, Regime.STAGE1, None)


def forward_stage2(layer: LopeLayer, x, theta: DependencyVector | None = None) -> ForwardTrace:
    """Stage-II forward.  Without ``theta`` this is the plain mixture
    (numerically identical to stage I); with ``theta`` the active normal
    experts are amplified by (1 + theta_i) and beta rescales the adapter
    term so the active normal weight mass is conserved."""
    regime = Regime.STAGE2 if theta is None else Regime.STAGE2_COMPENSATED
    return _train_forward(layer, x, regime, theta)


def forward_baseline(layer: LopeLayer, x) -> ForwardTrace:
    """Plain mixture recorded under the ablation-baseline regime (every
    block trainable in the backward pass)."""
    return _train_forward(layer, x, Regime.BASELINE, None)


def forward_inference(layer: LopeLayer, x, theta: DependencyVector) -> ForwardTrace:
    """Masked inference: the poisoning experts are excluded from gating and
    mixing, the gate re-normalises over normal experts, and compensation
    amplifies each active normal expert by (1 + theta_i) with beta
    conserving the active weight mass."""
    normals = layer.normal_indices
    if normals.size == 0:
        raise ValueError("no normal experts remain after masking")
    X, single = _as_batch(x, layer.d_in)
    m = X.shape[0]
    n = layer.num_experts
    th = _check_theta(layer, theta)
    ax = matmul(X, layer.a.T)
    logits = matmul(ax, layer.w_gate)
    omega = np.zeros((m, n))
    omega[:, normals] = softmax(logits[:, normals])
    kn = min(layer.top_k, normals.size)
    active = _topk_subset(omega, normals, kn)
    expert_outs = np.stack([matmul(ax, b.T) for b in layer.experts])
    rows = np.arange(m)[:, None]
    c = 1.0 + th
    act_omega = omega[rows, active]
    s_plain = act_omega.sum(axis=1)
    s_comp = (c[active] * act_omega).sum(axis=1)
    beta = np.where(s_comp > _BETA_FLOOR, s_plain / np.maximum(s_comp, _BETA_FLOOR), 1.0)
    coeff = np.zeros((m, n))
    coeff[rows, active] = (beta[:, None] * c[active]) * act_omega
    y = matmul(X, layer.w0.T)
    for i in range(n):
        col = coeff[:, i]
        if np.any(col != 0.0):
            y = y + col[:, None] * expert_outs[i]
    return ForwardTrace(
        regime=Regime.INFERENCE, x=X, ax=ax, expert_outs=expert_outs, omega=omega,
        active=active, coeff=coeff, beta=beta, theta=th, y=y, single=single,
    )


def backward(layer: LopeLayer, trace: ForwardTrace, dy, regime: Regime):
    """Analytic backward for the training regimes.

    Returns (grads, dx) where ``grads`` maps each trainable block of the
    regime to dL/dblock given upstream dL/dy.  Gradients flow through the
    softmax gate; in the compensated regime ``theta`` and ``beta`` are
    constants.  Frozen blocks get no entry.
    """
    if regime is not trace.regime:
        raise ValueError(f"regime {regime.value} does not match trace regime {trace.regime.value}")
    if regime not in TRAIN_REGIMES:
        raise ValueError(f"no backward pass for regime {regime.value}")
    dy2 = np.asarray(dy, dtype=np.float64)
    if dy2.ndim == 1:
        dy2 = dy2[None, :]
    if dy2.shape != trace.y.shape:
        raise ValueError(f"dy has shape {dy2.shape}, expected {trace.y.shape}")
    m, n = trace.omega.shape
    rows = np.arange(m)[:, None]
    active = trace.active

    grads: dict[str, np.ndarray] = {}
    names = trainable_blocks(layer, regime)
    for name in names:
        if name.startswith("b_"):
            i = int(name[2:])
            grads[name] = matmul((dy2 * trace.coeff[:, i:i + 1]).T, trace.ax)

    # dL/domega, with beta and theta held constant.
    q = np.zeros((m, n))
    if trace.theta is None:
        for d in layer.poison:
            q[:, d] = 1.0
        if active.shape[1]:
            q[rows, active] = 1.0
    else:
        c = 1.0 + trace.theta
        for d in layer.poison:
            q[:, d] = trace.beta
        if active.shape[1]:
            q[rows, active] = trace.beta[:, None] * c[active]
    g = np.stack([np.sum(dy2 * trace.expert_outs[j], axis=1) for j in range(n)], axis=1)
    g *= q
    dlogits = trace.omega * (g - np.sum(g * trace.omega, axis=1, keepdims=True))

    if "w_gate" in names:
        grads["w_gate"] = matmul(trace.ax.T, dlogits)

    d_ax = matmul(dlogits, layer.w_gate.T)
    for i in range(n):
        col = trace.coeff[:, i]
        if np.any(col != 0.0):
            d_ax = d_ax + matmul(dy2 * col[:, None], layer.experts[i])
    if "a" in names:
        grads["a"] = matmul(d_ax.T, trace.x)

    dx = matmul(dy2, layer.w0) + matmul(d_ax, layer.a)
    if trace.single:
        dx = dx[0]
    return grads, dx


def calibrate_theta(layer: LopeLayer, inputs) -> DependencyVector:
    """Dependency of each normal expert on the poisoning expert(s): the mean
    over calibration inputs of the cosine similarity between unweighted
    expert outputs B_i A x and B_D A x."""
    if layer.normal_indices.size == 0 or not layer.poison:
        raise ValueError("calibration needs at least one normal and one poisoning expert")
    X = np.asarray(inputs, dtype=np.float64)
    if X.ndim == 1:
        X = X[None, :]
    if X.ndim != 2 or X.shape[0] < 1:
        raise ValueError("calibration set must contain at least one input vector")
    if X.shape[1] != layer.d_in:
        raise ValueError(f"calibration inputs have width {X.shape[1]}, expected {layer.d_in}")
    ax = matmul(X, layer.a.T)
    outs = [matmul(ax, b.T) for b in layer.experts]
    theta = np.zeros(layer.num_experts)
    for i in layer.normal_indices.tolist():
        sims = [float(np.mean(row_cosine_sim(outs[i], outs[d]))) for d in layer.poison]
        theta[i] = float(np.mean(sims))
    return DependencyVector(np.clip(theta, -1.0, 1.0))


def mask_poison(layer: LopeLayer) -> LopeLayer:
    """A view of the layer with the poisoning experts permanently excluded
    from gating and mixing.  Parameters are shared, not copied."""
    if layer.normal_indices.size == 0:
        raise ValueError("no normal experts remain after masking")
    return dataclasses.replace(layer, freeze=dict(layer.freeze), masked=True)


def clone_layer(layer: LopeLayer) -> LopeLayer:
    """Deep copy of all parameter blocks (used by probes and checkpoints)."""
    return LopeLayer(
        w0=layer.w0.copy(),
        a=layer.a.copy(),
        experts=[b.copy() for b in layer.experts],
        w_gate=layer.w_gate.copy(),
        poison=layer.poison,
        top_k=layer.top_k,
        freeze=dict(layer.freeze),
        masked=layer.masked,
    )
