"""Experiment configuration: a flat ``key = value`` text file with typed,
documented defaults.  Parsing rejects unknown keys; serialisation is
canonical (definition order, shortest-roundtrip floats) so
parse -> serialize -> parse is lossless and the file contents hash stably.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, fields, replace

from .noise import ContinuousNoiseSpec, DiscreteNoiseSpec, NoiseOp
from .tasks import TaskSpec
from .training import PipelineConfig, StageConfig


@dataclass(frozen=True)
class ExperimentConfig:
    # synthetic task
    task_rule: str = "majority"        # majority | keyword
    vocab_size: int = 32
    seq_len_min: int = 8
    seq_len_max: int = 16
    num_classes: int = 4
    train_size: int = 512
    eval_size: int = 512
    # corruption baked into the training split (the noisy-data setting)
    data_noise_rate: float = 0.05
    data_noise_ops: tuple[str, ...] = ("shuffle", "insert", "delete")
    # architecture
    embed_dim: int = 16
    hidden_dim: int = 32
    rank: int = 4
    num_experts: int = 4
    top_k: int = 3
    poison_experts: int = 1
    # stage-1 hybrid noise injection
    hynoise_rate: float = 0.05
    hynoise_ops: tuple[str, ...] = ("shuffle", "insert", "delete")
    hynoise_alpha: float = 0.05
    hynoise_continuous_fraction: float = 1.0
    # optimisation
    stage1_epochs: int = 20
    stage2_epochs: int = 20
    batch_size: int = 32
    learning_rate: float = 0.1
    momentum: float = 0.9
    compensate_during_stage2: bool = False
    calibration_size: int = 256
    seed: int = 614

    def __post_init__(self):
        if self.task_rule not in ("majority", "keyword"):
            raise ValueError(f"task_rule must be 'majority' or 'keyword', got {self.task_rule!r}")
        if not 1 <= self.poison_experts < self.num_experts:
            raise ValueError("poison_experts must leave at least one normal expert")
        for name in ("data_noise_ops", "hynoise_ops"):
            for op in getattr(self, name):
                if op not in NoiseOp._value2member_map_:
                    raise ValueError(f"{name}: unknown noise op {op!r}")


def _parse_ops(text: str) -> tuple[str, ...]:
    text = text.strip()
    if text in ("", "none"):
        return ()
    return tuple(part.strip() for part in text.split(","))


def _format_ops(ops: tuple[str, ...]) -> str:
    return ",".join(ops) if ops else "none"


def _parse_bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("true", "1", "yes"):
        return True
    if low in ("false", "0", "no"):
        return False
    raise ValueError(f"expected a boolean, got {text!r}")


_PARSERS = {int: int, float: float, str: lambda s: s.strip(), bool: _parse_bool,
             tuple: _parse_ops}


def _field_kind(f):
    if f.type.startswith("tuple"):
        return tuple
    return {"int": int, "float": float, "str": str, "bool": bool}[f.type]


def parse_config(text: str) -> ExperimentConfig:
    """Parse the key = value format; '#' starts a comment; unknown keys are
    rejected with the offending line number."""
    known = {f.name: _field_kind(f) for f in fields(ExperimentConfig)}
    values = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, _, value = line.partition("=")
        key = key.strip()
        if key not in known:
            raise ValueError(f"line {lineno}: unknown config key {key!r}")
        if key in values:
            raise ValueError(f"line {lineno}: duplicate config key {key!r}")
        try:
            values[key] = _PARSERS[known[key]](value.strip())
        except ValueError as exc:
            raise ValueError(f"line {lineno}: bad value for {key!r}: {exc}") from exc
    return ExperimentConfig(**values)


def serialize_config(cfg: ExperimentConfig) -> str:
    lines = []
    for f in fields(ExperimentConfig):
        value = getattr(cfg, f.name)
        if isinstance(value, tuple):
            text = _format_ops(value)
        elif isinstance(value, bool):
            text = "true" if value else "false"
        elif isinstance(value, float):
            text = repr(value)
        else:
            text = str(value)
        lines.append(f"{f.name} = {text}")
    return "\n".join(lines) + "\n"


def load_config(path) -> ExperimentConfig:
    try:
        with open(path) as fh:
            return parse_config(fh.read())
    except OSError as exc:
        raise ValueError(f"cannot read config {path}: {exc}") from exc


def config_hash(cfg: ExperimentConfig) -> str:
    return hashlib.sha256(serialize_config(cfg).encode()).hexdigest()


# --- derived objects ----------------------------------------------------------


def task_spec(cfg: ExperimentConfig) -> TaskSpec:
    return TaskSpec(vocab_size=cfg.vocab_size,
                    seq_len=(cfg.seq_len_min, cfg.seq_len_max),
                    num_classes=cfg.num_classes, rule=cfg.task_rule, seed=cfg.seed)


def _ops(names: tuple[str, ...]) -> tuple[NoiseOp, ...]:
    return tuple(NoiseOp(name) for name in names)


def data_noise_spec(cfg: ExperimentConfig) -> DiscreteNoiseSpec:
    return DiscreteNoiseSpec(ops=_ops(cfg.data_noise_ops), rate=cfg.data_noise_rate,
                             alphabet=tuple(range(cfg.vocab_size)), seed=cfg.seed)


def hynoise_discrete_spec(cfg: ExperimentConfig) -> DiscreteNoiseSpec | None:
    if cfg.hynoise_rate <= 0 or not cfg.hynoise_ops:
        return None
    return DiscreteNoiseSpec(ops=_ops(cfg.hynoise_ops), rate=cfg.hynoise_rate,
                             alphabet=tuple(range(cfg.vocab_size)), seed=cfg.seed)


def hynoise_continuous_spec(cfg: ExperimentConfig) -> ContinuousNoiseSpec | None:
    if cfg.hynoise_alpha <= 0:
        return None
    return ContinuousNoiseSpec(alpha=cfg.hynoise_alpha)


def poison_indices(cfg: ExperimentConfig) -> tuple[int, ...]:
    return tuple(range(cfg.num_experts - cfg.poison_experts, cfg.num_experts))


def pipeline_config(cfg: ExperimentConfig, seed: int | None = None,
                    baseline: bool = False) -> PipelineConfig:
    """PipelineConfig for one run; ``seed`` overrides the config seed (used
    by multi-seed studies)."""
    run_seed = cfg.seed if seed is None else seed
    stage1 = StageConfig(
        epochs=cfg.stage1_epochs, batch_size=cfg.batch_size,
        learning_rate=cfg.learning_rate, momentum=cfg.momentum,
        discrete_noise=hynoise_discrete_spec(cfg),
        continuous_noise=hynoise_continuous_spec(cfg),
        continuous_fraction=cfg.hynoise_continuous_fraction,
        calibration_size=cfg.calibration_size, seed=run_seed,
    )
    stage2 = StageConfig(
        epochs=cfg.stage2_epochs, batch_size=cfg.batch_size,
        learning_rate=cfg.learning_rate, momentum=cfg.momentum,
        compensate_during_stage2=cfg.compensate_during_stage2,
        calibration_size=cfg.calibration_size, seed=run_seed,
    )
    return PipelineConfig(
        vocab_size=cfg.vocab_size, embed_dim=cfg.embed_dim, hidden_dim=cfg.hidden_dim,
        num_classes=cfg.num_classes, rank=cfg.rank, num_experts=cfg.num_experts,
        top_k=cfg.top_k, poison=poison_indices(cfg), stage1=stage1, stage2=stage2,
        calibration_size=cfg.calibration_size, seed=run_seed, baseline=baseline,
        config_hash=config_hash(cfg),
    )


def with_overrides(cfg: ExperimentConfig, **overrides) -> ExperimentConfig:
    return replace(cfg, **overrides)
