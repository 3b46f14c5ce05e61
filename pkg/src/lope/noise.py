"""Hybrid noise injection: discrete token-level corruption of datasets and
bounded continuous noise on embedding matrices.

Discrete corruption selects each token position independently with a
Bernoulli rate and applies exactly one operation drawn uniformly from the
enabled token operations (equal injection).  Edits are applied right to
left so inserts and deletes never invalidate positions selected earlier.
Continuous noise adds uniform perturbations bounded by ``alpha`` to valid
rows of an embedding matrix, leaving masked rows bitwise untouched.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np

from .numerics import RngStream


class NoiseOp(Enum):
    SHUFFLE = "shuffle"      # swap with right neighbour (last position swaps left)
    INSERT = "insert"        # random alphabet token inserted after the position
    DELETE = "delete"        # token removed (never below length 1)
    REPLACE = "replace"      # token replaced by a random alphabet token
    LABEL_FLIP = "label_flip"  # per-example: label flipped to a different class


#: Operations that act on token positions (LABEL_FLIP acts per example).
TOKEN_OPS = (NoiseOp.SHUFFLE, NoiseOp.INSERT, NoiseOp.DELETE, NoiseOp.REPLACE)

_OP_ORDER = {op: i for i, op in enumerate(NoiseOp)}


@dataclass(frozen=True)
class Edit:
    """One applied (or skipped) edit; position -1 marks a label flip."""

    position: int
    op: str


@dataclass(frozen=True)
class DiscreteNoiseSpec:
    """Configuration for discrete corruption.

    ``rate`` is the per-position Bernoulli probability of perturbation (and
    the per-example flip probability when LABEL_FLIP is enabled).
    ``alphabet`` supplies tokens for INSERT and REPLACE.
    """

    ops: tuple[NoiseOp, ...]
    rate: float
    alphabet: tuple[int, ...] = ()
    seed: int = 0

    def __post_init__(self):
        ops = tuple(sorted(set(self.ops), key=_OP_ORDER.__getitem__))
        object.__setattr__(self, "ops", ops)
        object.__setattr__(self, "alphabet", tuple(int(t) for t in self.alphabet))
        if not 0.0 <= self.rate <= 1.0:
            raise ValueError(f"rate must lie in [0, 1], got {self.rate}")
        if self.rate > 0 and not ops:
            raise ValueError("ops must be non-empty when rate > 0")
        needs_alphabet = NoiseOp.INSERT in ops or NoiseOp.REPLACE in ops
        if needs_alphabet and not self.alphabet:
            raise ValueError("alphabet must be non-empty when INSERT or REPLACE is enabled")

    @property
    def token_ops(self) -> tuple[NoiseOp, ...]:
        return tuple(op for op in self.ops if op in TOKEN_OPS)


@dataclass(frozen=True)
class ContinuousNoiseSpec:
    """Bounded continuous embedding noise: perturbations are
    ``alpha * U(-1, 1)`` per entry, applied only to valid rows."""

    alpha: float

    def __post_init__(self):
        if self.alpha < 0:
            raise ValueError(f"alpha must be non-negative, got {self.alpha}")


@dataclass
class Dataset:
    """A list of (token sequence, class label) pairs with known vocabulary
    and class count."""

    examples: list[tuple[list[int], int]]
    vocab_size: int
    num_classes: int

    def __post_init__(self):
        if len(self.examples) < 1:
            raise ValueError("a dataset needs at least one example")
        for i, (tokens, label) in enumerate(self.examples):
            if not tokens:
                raise ValueError(f"example {i} has an empty token sequence")
            if any(not 0 <= t < self.vocab_size for t in tokens):
                raise ValueError(f"example {i} has token ids outside [0, {self.vocab_size})")
            if not 0 <= label < self.num_classes:
                raise ValueError(f"example {i} has label {label} outside [0, {self.num_classes})")

    def __len__(self) -> int:
        return len(self.examples)


def inject_discrete(tokens, spec: DiscreteNoiseSpec, rng: RngStream):
    """Corrupt one token sequence; returns (new tokens, manifest of edits).

    Positions in the manifest refer to the original sequence.  Skipped
    operations (delete or shuffle on a length-1 sequence) are logged with an
    ``_skipped`` suffix and do not count as edits.
    """
    toks = list(tokens)
    if not toks:
        raise ValueError("inject_discrete: empty token sequence")
    manifest: list[Edit] = []
    if spec.rate == 0.0:
        return toks, manifest
    g = rng.generator()
    selected = np.nonzero(g.uniform(size=len(toks)) < spec.rate)[0]
    token_ops = spec.token_ops
    if not token_ops or selected.size == 0:
        return toks, manifest
    for pos in selected[::-1].tolist():  # right to left: later edits cannot shift pos
        op = token_ops[int(g.integers(len(token_ops)))]
        if op is NoiseOp.SHUFFLE:
            if pos + 1 < len(toks):
                toks[pos], toks[pos + 1] = toks[pos + 1], toks[pos]
            elif pos - 1 >= 0:
                toks[pos - 1], toks[pos] = toks[pos], toks[pos - 1]
            else:
                manifest.append(Edit(pos, "shuffle_skipped"))
                continue
        elif op is NoiseOp.INSERT:
            toks.insert(pos + 1, spec.alphabet[int(g.integers(len(spec.alphabet)))])
        elif op is NoiseOp.DELETE:
            if len(toks) <= 1:
                manifest.append(Edit(pos, "delete_skipped"))
                continue
            del toks[pos]
        elif op is NoiseOp.REPLACE:
            toks[pos] = spec.alphabet[int(g.integers(len(spec.alphabet)))]
        manifest.append(Edit(pos, op.value))
    return toks, manifest


def inject_continuous(embeddings: np.ndarray, mask, spec: ContinuousNoiseSpec, rng: RngStream) -> np.ndarray:
    """Add bounded uniform noise to the valid rows of an (l, d) matrix.

    Rows with mask 0 are returned bitwise unchanged; perturbed entries
    satisfy |out - in| <= alpha.
    """
    e = np.asarray(embeddings, dtype=np.float64)
    if e.ndim != 2:
        raise ValueError(f"inject_continuous expects an (l, d) matrix, got shape {e.shape}")
    m = np.asarray(mask)
    if m.shape != (e.shape[0],):
        raise ValueError(f"mask length {m.shape} does not match {e.shape[0]} rows")
    if spec.alpha < 0:
        raise ValueError(f"alpha must be non-negative, got {spec.alpha}")
    out = e.copy()
    if spec.alpha == 0.0:
        return out
    valid = np.nonzero(m != 0)[0]
    if valid.size:
        noise = rng.generator().uniform(-1.0, 1.0, size=(valid.size, e.shape[1]))
        out[valid] = e[valid] + spec.alpha * noise
    return out


def augment_dataset(dataset: Dataset, spec: DiscreteNoiseSpec, rng: RngStream):
    """Corrupt every example with its own child stream.

    Returns (augmented dataset, per-example manifests).  When LABEL_FLIP is
    enabled each label is independently flipped to a uniformly random
    different class with probability ``spec.rate``; flips appear in the
    manifest at position -1.
    """
    flip = NoiseOp.LABEL_FLIP in spec.ops
    examples: list[tuple[list[int], int]] = []
    manifests: list[list[Edit]] = []
    for idx, (tokens, label) in enumerate(dataset.examples):
        child = rng.child(idx)
        new_tokens, edits = inject_discrete(tokens, spec, child.child(0))
        new_label = label
        if flip:
            g = child.child(1).generator()
            if g.uniform() < spec.rate:
                delta = int(g.integers(1, dataset.num_classes))
                new_label = (label + delta) % dataset.num_classes
                edits = edits + [Edit(-1, NoiseOp.LABEL_FLIP.value)]
        examples.append((new_tokens, new_label))
        manifests.append(edits)
    return Dataset(examples, dataset.vocab_size, dataset.num_classes), manifests


# --- file formats -----------------------------------------------------------
# Dataset: one line per example, `label<TAB>space-separated token ids`.
# Manifest: one line per edit, `example_index<TAB>position<TAB>op`.


def save_dataset(dataset: Dataset, path) -> None:
    lines = []
    for tokens, label in dataset.examples:
        lines.append(f"{label}\t{' '.join(str(t) for t in tokens)}")
    Path(path).write_text("\n".join(lines) + "\n")


def load_dataset(path, vocab_size: int | None = None, num_classes: int | None = None) -> Dataset:
    examples: list[tuple[list[int], int]] = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        if not line.strip():
            continue
        try:
            label_part, tokens_part = line.split("\t")
            label = int(label_part)
            tokens = [int(t) for t in tokens_part.split()]
        except ValueError as exc:
            raise ValueError(f"{path}:{lineno}: malformed dataset line") from exc
        if not tokens:
            raise ValueError(f"{path}:{lineno}: example has no tokens")
        examples.append((tokens, label))
    if not examples:
        raise ValueError(f"{path}: empty dataset file")
    if vocab_size is None:
        vocab_size = max(max(t) for t, _ in examples) + 1
    if num_classes is None:
        num_classes = max(lab for _, lab in examples) + 1
    return Dataset(examples, vocab_size, num_classes)


def save_manifest(manifests: list[list[Edit]], path) -> None:
    lines = []
    for idx, edits in enumerate(manifests):
        for edit in edits:
            lines.append(f"{idx}\t{edit.position}\t{edit.op}")
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""))


def load_manifest(path) -> list[tuple[int, Edit]]:
    out: list[tuple[int, Edit]] = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        if not line.strip():
            continue
        try:
            idx, pos, op = line.split("\t")
            out.append((int(idx), Edit(int(pos), op)))
        except ValueError as exc:
            raise ValueError(f"{path}:{lineno}: malformed manifest line") from exc
    return out
