"""Deterministic synthetic classification tasks whose labels survive mild
corruption, so noise-robustness differences are measurable at desk scale.

Two rules:

- ``keyword``: the label is the count of a designated token (id 1) mod C.
- ``majority``: tokens belong to class ``t mod C``; the label is the most
  frequent class (ties toward the lowest class id).

Both are order-invariant total functions of the clean token sequence, and
generation balances classes by construction.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

from .noise import Dataset, DiscreteNoiseSpec, Edit, augment_dataset
from .numerics import RngStream

RULES = ("keyword", "majority")

#: Token id counted by the keyword rule.
KEYWORD_TOKEN = 1


@dataclass(frozen=True)
class TaskSpec:
    vocab_size: int = 32
    seq_len: tuple[int, int] = (8, 16)
    num_classes: int = 4
    rule: str = "majority"
    seed: int = 614

    def __post_init__(self):
        if self.rule not in RULES:
            raise ValueError(f"rule must be one of {RULES}, got {self.rule!r}")
        lo, hi = self.seq_len
        if not 1 <= lo <= hi:
            raise ValueError(f"sequence length range must satisfy 1 <= lo <= hi, got {self.seq_len}")
        if self.num_classes < 2:
            raise ValueError("need at least two classes")
        if self.vocab_size < self.num_classes:
            raise ValueError("vocabulary must cover every class")
        if self.rule == "keyword" and lo < self.num_classes:
            raise ValueError("keyword rule needs min sequence length >= num_classes")


def rule_label(spec: TaskSpec, tokens) -> int:
    """Apply the task rule to a token sequence."""
    if spec.rule == "keyword":
        return sum(1 for t in tokens if t == KEYWORD_TOKEN) % spec.num_classes
    counts = [0] * spec.num_classes
    for t in tokens:
        counts[t % spec.num_classes] += 1
    return counts.index(max(counts))


def _gen_keyword_example(spec, g):
    lo, hi = spec.seq_len
    target = int(g.integers(spec.num_classes))
    length = int(g.integers(lo, hi + 1))
    k = target
    if k + spec.num_classes <= length and g.uniform() < 0.25:
        k += spec.num_classes  # same label, more keyword mass
    tokens = []
    for _ in range(length):
        t = int(g.integers(spec.vocab_size - 1))
        tokens.append(t + 1 if t >= KEYWORD_TOKEN else t)
    if k:
        for pos in g.choice(length, size=k, replace=False):
            tokens[int(pos)] = KEYWORD_TOKEN
    return tokens, target


def _gen_majority_example(spec, g):
    lo, hi = spec.seq_len
    c = spec.num_classes
    target = int(g.integers(c))
    length = int(g.integers(lo, hi + 1))
    tokens = [int(t) for t in g.integers(spec.vocab_size, size=length)]
    class_tokens = list(range(target, spec.vocab_size, c))
    for _ in range(length + 1):
        if rule_label(spec, tokens) == target:
            break
        others = [i for i, t in enumerate(tokens) if t % c != target]
        pos = others[int(g.integers(len(others)))]
        tokens[pos] = class_tokens[int(g.integers(len(class_tokens)))]
    else:
        raise RuntimeError("majority construction did not converge")
    return tokens, target


def gen_dataset(spec: TaskSpec, m: int, rng: RngStream | None = None) -> Dataset:
    """Generate ``m`` rule-consistent examples with near-uniform classes."""
    if m < 1:
        raise ValueError("need at least one example")
    if rng is None:
        rng = RngStream(spec.seed).child(0)
    make = _gen_keyword_example if spec.rule == "keyword" else _gen_majority_example
    examples = []
    for i in range(m):
        g = rng.child(i).generator()
        examples.append(make(spec, g))
    return Dataset(examples, spec.vocab_size, spec.num_classes)


class NoisySplit(NamedTuple):
    train: Dataset
    eval: Dataset
    manifests: list[list[Edit]]


def make_noisy_split(spec: TaskSpec, m: int, noise: DiscreteNoiseSpec,
                     m_eval: int | None = None) -> NoisySplit:
    """A corrupted training split and a clean, seed-disjoint eval split.

    Training labels are computed on the clean sequences and kept through
    corruption, so discrete noise induces genuine label noise; the eval
    split never sees the noise spec.
    """
    root = RngStream(spec.seed)
    train_clean = gen_dataset(spec, m, root.child(1))
    eval_clean = gen_dataset(spec, m if m_eval is None else m_eval, root.child(2))
    train_noisy, manifests = augment_dataset(train_clean, noise, root.child(3))
    return NoisySplit(train=train_noisy, eval=eval_clean, manifests=manifests)


def label_consistent_fraction(spec: TaskSpec, dataset: Dataset) -> float:
    """Fraction of examples whose stored label matches the rule re-applied
    to the (possibly corrupted) tokens."""
    hits = sum(1 for tokens, label in dataset.examples if rule_label(spec, tokens) == label)
    return hits / len(dataset)
