"""Target-sparsity schedules and snapshot capture points."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

from .errors import ConfigError

DEFAULT_CROSSINGS = (0.25, 0.5, 0.75, 1.0)


def milestone_schedule(target: float, step_fraction: float = 10.0) -> list[float]:
    """Sparsity milestones ``step, 2*step, ...`` ending exactly at ``target`` (percent)."""
    if not 0 < target < 100:
        raise ConfigError(f"target sparsity must be in (0, 100), got {target}", "target_sparsity")
    if not step_fraction > 0:
        raise ConfigError("must be > 0", "schedule.step_fraction")
    out = []
    k = 1
    while k * step_fraction < target - 1e-9:
        out.append(round(k * step_fraction, 10))
        k += 1
    out.append(float(target))
    return out


@dataclass
class SparsitySchedule:
    kind: str  # "milestones" or "cubic"
    milestones: list[tuple[int, float]] = field(default_factory=list)
    initial_sparsity: float = 0.0
    final_sparsity: float = 90.0
    warmup_end: int = 0
    ramp_end: int = 1
    cooldown_steps: int = 0

    def __post_init__(self):
        if self.kind == "milestones":
            rs = [r for _, r in self.milestones]
            if not rs:
                raise ConfigError("milestone schedule needs at least one milestone", "schedule")
            if any(b <= a for a, b in zip(rs, rs[1:])):
                raise ConfigError("milestone sparsities must strictly increase", "schedule")
            steps = [s for s, _ in self.milestones]
            if any(b < a for a, b in zip(steps, steps[1:])):
                raise ConfigError("milestone steps must not decrease", "schedule")
        elif self.kind == "cubic":
            if not self.warmup_end < self.ramp_end:
                raise ConfigError("warmup end must precede ramp end", "schedule")
            if self.final_sparsity < self.initial_sparsity:
                raise ConfigError("final sparsity below initial sparsity", "schedule")
            if self.cooldown_steps < 0:
                raise ConfigError("must be >= 0", "schedule.cooldown_steps")
        else:
            raise ConfigError(f"unknown schedule kind {self.kind!r}", "schedule.kind")

    @property
    def target(self) -> float:
        return self.milestones[-1][1] if self.kind == "milestones" else self.final_sparsity

    @property
    def total_steps(self) -> int:
        if self.kind == "cubic":
            return self.ramp_end + self.cooldown_steps
        return self.milestones[-1][0]

    def sparsity_at(self, t: float) -> float:
        if self.kind == "cubic":
            return cubic_sparsity(t, self)
        current = 0.0
        for step, r in self.milestones:
            if t >= step:
                current = r
        return current

    def as_dict(self) -> dict:
        if self.kind == "milestones":
            return {"kind": self.kind, "milestones": [list(m) for m in self.milestones]}
        return {
            "kind": self.kind,
            "initial_sparsity": self.initial_sparsity,
            "final_sparsity": self.final_sparsity,
            "warmup_end": self.warmup_end,
            "ramp_end": self.ramp_end,
            "cooldown_steps": self.cooldown_steps,
        }


def cubic_sparsity(t: float, schedule: SparsitySchedule) -> float:
    """``s_f + (s_i - s_f) * (1 - (t - t_i)/(t_f - t_i))**3`` on the ramp, flat outside it."""
    s_i, s_f = schedule.initial_sparsity, schedule.final_sparsity
    t_i, t_f = schedule.warmup_end, schedule.ramp_end
    if t <= t_i:
        return s_i
    if t >= t_f:
        return s_f
    return s_f + (s_i - s_f) * (1.0 - (t - t_i) / (t_f - t_i)) ** 3


def _cubic_step_reaching(level: float, schedule: SparsitySchedule) -> int:
    """First integer step whose cubic sparsity is at least ``level``."""
    s_i, s_f = schedule.initial_sparsity, schedule.final_sparsity
    t_i, t_f = schedule.warmup_end, schedule.ramp_end
    if level >= s_f:
        return t_f
    frac = 1.0 - ((s_f - level) / (s_f - s_i)) ** (1.0 / 3.0)
    t = max(t_i + 1, math.ceil(t_i + frac * (t_f - t_i)))
    while t > t_i + 1 and cubic_sparsity(t - 1, schedule) >= level:
        t -= 1
    while cubic_sparsity(t, schedule) < level:
        t += 1
    return t


def snapshot_points(schedule: SparsitySchedule, crossings=DEFAULT_CROSSINGS) -> list[tuple[int, float]]:
    """Ordered ``(step, sparsity)`` pairs at which snapshots are taken.

    One per milestone for milestone schedules. For cubic schedules, the first
    step reaching each ``s_i + c * (s_f - s_i)`` for ``c`` in ``crossings``.
    """
    if schedule.kind == "milestones":
        return [(int(s), float(r)) for s, r in schedule.milestones]
    if schedule.final_sparsity == schedule.initial_sparsity:
        return []
    pts = []
    for c in sorted(crossings):
        level = schedule.initial_sparsity + c * (schedule.final_sparsity - schedule.initial_sparsity)
        t = _cubic_step_reaching(level, schedule)
        r = cubic_sparsity(t, schedule)
        if not pts or (t > pts[-1][0] and r > pts[-1][1]):
            pts.append((t, r))
    return pts
