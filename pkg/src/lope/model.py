"""Desk-scale backbone: a frozen embedding table, mean pooling over valid
positions, two LoPE-adapted linear layers with a tanh in between, and a
softmax cross-entropy head.

Pooling accumulates positions left to right so results are bitwise
independent of how a dataset is split into padded batches.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import adapter
from .adapter import DependencyVector, ForwardTrace, LopeLayer, Regime, make_layer
from .noise import ContinuousNoiseSpec, Dataset, inject_continuous
from .numerics import RngStream, matmul


@dataclass
class Backbone:
    """Frozen embedding plus two adapted layers.  ``stage`` tracks pipeline
    progress (init -> post-stage1 -> post-stage2)."""

    embedding: np.ndarray  # (V, d), frozen
    layer1: LopeLayer      # d -> h
    layer2: LopeLayer      # h -> C
    stage: str = "init"

    @property
    def vocab_size(self) -> int:
        return self.embedding.shape[0]

    @property
    def num_classes(self) -> int:
        return self.layer2.d_out


def make_backbone(vocab_size, embed_dim, hidden_dim, num_classes, rank,
                  num_experts, top_k, poison, rng: RngStream) -> Backbone:
    embedding = rng.child(0).normal((vocab_size, embed_dim))
    layer1 = make_layer(embed_dim, hidden_dim, rank, num_experts, top_k, poison, rng.child(1))
    layer2 = make_layer(hidden_dim, num_classes, rank, num_experts, top_k, poison, rng.child(2))
    return Backbone(embedding=embedding, layer1=layer1, layer2=layer2)


def clone_backbone(backbone: Backbone) -> Backbone:
    return Backbone(
        embedding=backbone.embedding.copy(),
        layer1=adapter.clone_layer(backbone.layer1),
        layer2=adapter.clone_layer(backbone.layer2),
        stage=backbone.stage,
    )


@dataclass
class Batch:
    """Padded token-id sequences with a validity mask and class labels."""

    tokens: np.ndarray  # (m, L) int64, padded with 0
    mask: np.ndarray    # (m, L) float64 in {0, 1}
    labels: np.ndarray  # (m,) int64

    @classmethod
    def from_examples(cls, examples) -> "Batch":
        if not examples:
            raise ValueError("batch needs at least one example")
        longest = max(len(tokens) for tokens, _ in examples)
        m = len(examples)
        tokens = np.zeros((m, longest), dtype=np.int64)
        mask = np.zeros((m, longest))
        labels = np.zeros(m, dtype=np.int64)
        for i, (toks, label) in enumerate(examples):
            tokens[i, : len(toks)] = toks
            mask[i, : len(toks)] = 1.0
            labels[i] = label
        return cls(tokens=tokens, mask=mask, labels=labels)

    def __len__(self) -> int:
        return self.tokens.shape[0]


@dataclass
class ModelTrace:
    """Full-model forward record used by the backward pass."""

    pooled: np.ndarray   # (m, d) layer-1 inputs
    trace1: ForwardTrace
    hidden: np.ndarray   # (m, h) tanh outputs, layer-2 inputs
    trace2: ForwardTrace
    probs: np.ndarray    # (m, C)
    labels: np.ndarray


def _pool(embedded: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Mean over valid positions, accumulated left to right per position so
    padding length cannot perturb the result."""
    m, length, dim = embedded.shape
    acc = np.zeros((m, dim))
    for t in range(length):
        acc += embedded[:, t, :] * mask[:, t, None]
    counts = mask.sum(axis=1)
    if np.any(counts == 0):
        raise ValueError("every example needs at least one valid position")
    return acc / counts[:, None]


def _layer_forward(layer, x, regime, theta, pinned=None):
    if pinned is not None:
        return adapter._train_forward(layer, x, regime, theta,
                                      pinned_active=pinned[0], pinned_beta=pinned[1])
    if regime is Regime.STAGE1:
        return adapter.forward_stage1(layer, x)
    if regime is Regime.STAGE2:
        return adapter.forward_stage2(layer, x)
    if regime is Regime.STAGE2_COMPENSATED:
        return adapter.forward_stage2(layer, x, theta)
    if regime is Regime.BASELINE:
        return adapter.forward_baseline(layer, x)
    if regime is Regime.INFERENCE:
        return adapter.forward_inference(layer, x, theta)
    raise ValueError(f"unknown regime {regime}")


def forward_loss(backbone: Backbone, batch: Batch, regime: Regime,
                 thetas: tuple[DependencyVector, DependencyVector] | None = None,
                 noise: ContinuousNoiseSpec | None = None,
                 rng: RngStream | None = None,
                 pin_from: ModelTrace | None = None):
    """Mean cross-entropy over the batch plus the full forward trace.

    Continuous embedding noise is only legal in stage 1 and is applied to
    valid positions before pooling.  ``pin_from`` re-uses a previous trace's
    active sets and beta values (the gradient-check surrogate).
    """
    if noise is not None and regime is not Regime.STAGE1:
        raise ValueError("continuous noise injection is a stage-1 mechanism")
    if regime in (Regime.STAGE2_COMPENSATED, Regime.INFERENCE) and thetas is None:
        raise ValueError(f"regime {regime.value} requires calibrated dependency vectors")
    theta1, theta2 = thetas if thetas is not None else (None, None)

    embedded = backbone.embedding[batch.tokens]  # (m, L, d)
    if noise is not None and noise.alpha > 0:
        if rng is None:
            raise ValueError("noise injection needs a random stream")
        m, length, dim = embedded.shape
        flat = inject_continuous(embedded.reshape(m * length, dim),
                                 batch.mask.reshape(m * length), noise, rng)
        embedded = flat.reshape(m, length, dim)
    pooled = _pool(embedded, batch.mask)

    pins1 = pins2 = None
    if pin_from is not None:
        pins1 = (pin_from.trace1.active, pin_from.trace1.beta)
        pins2 = (pin_from.trace2.active, pin_from.trace2.beta)

    trace1 = _layer_forward(backbone.layer1, pooled, regime, theta1, pins1)
    hidden = np.tanh(trace1.y)
    trace2 = _layer_forward(backbone.layer2, hidden, regime, theta2, pins2)

    logits = trace2.y
    shifted = logits - logits.max(axis=1, keepdims=True)
    logsumexp = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_probs = shifted - logsumexp
    m = len(batch)
    nll = -log_probs[np.arange(m), batch.labels]
    loss = float(np.mean(nll))
    trace = ModelTrace(pooled=pooled, trace1=trace1, hidden=hidden, trace2=trace2,
                       probs=np.exp(log_probs), labels=batch.labels.copy())
    return loss, trace


def backward_full(backbone: Backbone, trace: ModelTrace, regime: Regime):
    """Gradients of the mean cross-entropy for the regime's trainable blocks
    of both layers.  The embedding is frozen and never receives a gradient."""
    m = trace.probs.shape[0]
    dlogits = trace.probs.copy()
    dlogits[np.arange(m), trace.labels] -= 1.0
    dlogits /= m
    grads2, dhidden = adapter.backward(backbone.layer2, trace.trace2, dlogits, regime)
    dy1 = dhidden * (1.0 - trace.hidden * trace.hidden)
    grads1, _ = adapter.backward(backbone.layer1, trace.trace1, dy1, regime)
    return {"layer1": grads1, "layer2": grads2}


def iter_batches(dataset: Dataset, batch_size: int, order=None):
    indices = np.arange(len(dataset)) if order is None else np.asarray(order)
    for start in range(0, len(indices), batch_size):
        chunk = indices[start : start + batch_size]
        yield Batch.from_examples([dataset.examples[i] for i in chunk])


def predict_labels(backbone: Backbone, dataset: Dataset,
                   thetas: tuple[DependencyVector, DependencyVector] | None = None,
                   masked: bool = True, batch_size: int = 64) -> np.ndarray:
    """Argmax class per example under masked inference (default) or the
    plain unmasked stage-2 forward."""
    if masked and thetas is None:
        raise ValueError("masked inference requires dependency vectors (use zeros if uncalibrated)")
    regime = Regime.INFERENCE if masked else Regime.STAGE2
    out = np.zeros(len(dataset), dtype=np.int64)
    pos = 0
    for batch in iter_batches(dataset, batch_size):
        _, trace = forward_loss(backbone, batch, regime, thetas=thetas if masked else None)
        out[pos : pos + len(batch)] = np.argmax(trace.trace2.y, axis=1)
        pos += len(batch)
    return out


def accuracy(backbone: Backbone, dataset: Dataset,
             thetas: tuple[DependencyVector, DependencyVector] | None = None,
             masked: bool = True, batch_size: int = 64) -> float:
    """Fraction of examples whose argmax prediction matches the label."""
    if len(dataset) == 0:
        raise ValueError("cannot evaluate an empty dataset")
    preds = predict_labels(backbone, dataset, thetas=thetas, masked=masked, batch_size=batch_size)
    labels = np.array([label for _, label in dataset.examples])
    return float(np.mean(preds == labels))
