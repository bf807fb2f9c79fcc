"""Learning-rate schedules as pure functions of (config, step)."""

from __future__ import annotations

from dataclasses import dataclass

from .errors import ConfigurationError, PreconditionError


@dataclass(frozen=True)
class NoamConfig:
    factor: float
    warmup_steps: int
    d_model: int

    def __post_init__(self):
        if self.factor <= 0 or self.warmup_steps <= 0 or self.d_model <= 0:
            raise ConfigurationError(f"noam parameters must be positive: {self}")


@dataclass(frozen=True)
class TriStageConfig:
    """Linear warm-up, hold at peak, then decay until ``total_steps``.

    The decay is exponential down to ``final_ratio * peak_lr``; with
    ``final_ratio=None`` it is linear down to zero (the ramp-then-decay variant).
    """

    warmup_steps: int
    hold_steps: int
    total_steps: int
    peak_lr: float
    final_ratio: float | None = 0.05

    def __post_init__(self):
        if min(self.warmup_steps, self.hold_steps) < 0 or self.total_steps < 1:
            raise ConfigurationError(f"invalid tri-stage step counts: {self}")
        if self.warmup_steps + self.hold_steps > self.total_steps:
            raise ConfigurationError("warmup_steps + hold_steps must not exceed total_steps")
        if self.peak_lr <= 0:
            raise ConfigurationError("peak_lr must be positive")
        if self.final_ratio is not None and not 0 < self.final_ratio <= 1:
            raise ConfigurationError("final_ratio must be in (0, 1]")


def noam_lr(cfg: NoamConfig, step: int) -> float:
    if step < 1:
        raise PreconditionError(f"noam schedule is defined for step >= 1, got {step}")
    return cfg.factor * cfg.d_model ** -0.5 * min(step ** -0.5, step * cfg.warmup_steps ** -1.5)


def tristage_lr(cfg: TriStageConfig, step: int) -> float:
    if not 0 <= step <= cfg.total_steps:
        raise PreconditionError(f"step {step} outside [0, {cfg.total_steps}]")
    w, h = cfg.warmup_steps, cfg.hold_steps
    if step < w:
        return cfg.peak_lr * step / w
    if step <= w + h:
        return cfg.peak_lr
    frac = (step - w - h) / (cfg.total_steps - w - h)
    if cfg.final_ratio is None:
        return cfg.peak_lr * (1.0 - frac)
    return cfg.peak_lr * cfg.final_ratio ** frac


def learning_rate(cfg: NoamConfig | TriStageConfig, step: int) -> float:
    return noam_lr(cfg, step) if isinstance(cfg, NoamConfig) else tristage_lr(cfg, step)


def peak_lr(cfg: NoamConfig | TriStageConfig) -> float:
    if isinstance(cfg, NoamConfig):
        return noam_lr(cfg, cfg.warmup_steps)
    return cfg.peak_lr
