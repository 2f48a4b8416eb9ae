"""Progressive iteration schedule: epochs -> (K, delta_t) phases.

Every phase keeps the total integration time T = K * delta_t constant, so
raising K across phases refines the temporal discretization without
changing how far the dynamics are integrated.
"""

from __future__ import annotations

from dataclasses import dataclass, field

TOTAL_TIME_REL_TOL = 1e-3


class ScheduleError(ValueError):
    """Raised when a schedule fails validation at construction."""


@dataclass(frozen=True)
class Phase:
    """Half-open epoch range [start_epoch, end_epoch) with fixed (K, dt).

    end_epoch None means open-ended.
    """

    start_epoch: int
    end_epoch: int | None
    k: int
    delta_t: float

    def covers(self, epoch: int) -> bool:
        return epoch >= self.start_epoch and (
            self.end_epoch is None or epoch < self.end_epoch)


@dataclass(frozen=True)
class PhaseSchedule:
    """Ordered, contiguous phases covering epoch 0 onward; immutable."""

    total_time: float
    phases: tuple[Phase, ...] = field(default_factory=tuple)

    @classmethod
    def create(cls, total_time: float, phases) -> "PhaseSchedule":
        """Validating constructor: raises ScheduleError listing violations."""
        sched = cls(total_time=total_time, phases=tuple(phases))
        violations = validate(sched)
        if violations:
            raise ScheduleError("; ".join(violations))
        return sched


def validate(sched: PhaseSchedule) -> list[str]:
    """All violations (contiguity, K monotonicity, constant K*dt), not just the first."""
    out = []
    phases = sched.phases
    if not phases:
        return ["schedule has no phases"]
    if phases[0].start_epoch != 0:
        out.append(f"epoch 0 not covered: first phase starts at {phases[0].start_epoch}")
    for i, p in enumerate(phases):
        if p.k < 1:
            out.append(f"phase {i + 1}: k={p.k} < 1")
        if p.delta_t <= 0:
            out.append(f"phase {i + 1}: delta_t={p.delta_t} <= 0")
            continue
        drift = abs(p.k * p.delta_t - sched.total_time) / sched.total_time
        if drift > TOTAL_TIME_REL_TOL:
            out.append(
                f"phase {i + 1}: total time {p.k * p.delta_t:.6g} != {sched.total_time:.6g} "
                f"(relative error {drift:.2e})")
    for i in range(len(phases) - 1):
        a, b = phases[i], phases[i + 1]
        if a.end_epoch is None:
            out.append(f"phase {i + 1} is open-ended but not last")
        elif a.end_epoch != b.start_epoch:
            kind = "coverage gap" if a.end_epoch < b.start_epoch else "overlap"
            out.append(f"{kind} between phases {i + 1} and {i + 2} "
                       f"(epochs {a.end_epoch} vs {b.start_epoch})")
        if b.k < a.k:
            out.append(f"phase {i + 2}: K decreases ({a.k} -> {b.k})")
    if phases[-1].end_epoch is not None:
        out.append("last phase must be open-ended")
    return out


def default_schedule(scale: float = 1.0) -> PhaseSchedule:
    """Three phases: K=1 dt=1.0, K=3 dt=1/3, K=5 dt=0.2, with T = 1.0.

    Full-scale boundaries are epochs 10 and 20; `scale` compresses them
    proportionally for desk runs (scale 0.2 -> boundaries 2 and 4).
    """
    if scale <= 0:
        raise ValueError("scale must be positive")
    b1 = max(1, round(10 * scale))
    b2 = max(b1 + 1, round(20 * scale))
    return PhaseSchedule.create(1.0, [
        Phase(0, b1, 1, 1.0),
        Phase(b1, b2, 3, 1.0 / 3.0),
        Phase(b2, None, 5, 0.2),
    ])


def progressive_schedule_to(k_final: int, scale: float = 1.0,
                            total_time: float = 1.0) -> PhaseSchedule:
    """Progressive schedule truncated at `k_final` (ablation over final K).

    Uses the 1, 3, 5, ... odd ladder up to k_final with phase length
    round(10 * scale) epochs; every phase keeps K * dt = total_time.
    """
    if k_final < 1:
        raise ValueError("k_final must be >= 1")
    ks = [k for k in range(1, k_final + 1, 2)]
    if ks[-1] != k_final:
        ks.append(k_final)
    span = max(1, round(10 * scale))
    phases = []
    for i, k in enumerate(ks):
        end = None if k == ks[-1] else (i + 1) * span
        phases.append(Phase(i * span, end, k, total_time / k))
    return PhaseSchedule.create(total_time, phases)


def fixed_schedule(k: int, delta_t: float) -> PhaseSchedule:
    """Single open-ended phase; T follows from K * delta_t."""
    return PhaseSchedule.create(k * delta_t, [Phase(0, None, k, delta_t)])


def phase_for_epoch(sched: PhaseSchedule, epoch: int) -> Phase:
    """Unique covering phase; schedules are validated at construction."""
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    for p in sched.phases:
        if p.covers(epoch):
            return p
    raise ScheduleError(f"no phase covers epoch {epoch}")
