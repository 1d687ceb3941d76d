"""Exponential-moving-average parameter updates and the dual-teacher schedule.

Both teachers blend toward the student with the same convex rule,

    teacher <- pi * teacher + (1 - pi) * student,

but at different cadences: the dynamic teacher updates every ``n_update``
iterations with a large momentum (tracks the student closely in time, moves
gently per update), while the static teacher updates once per epoch with a
smaller momentum (absorbs a big chunk of the student's progress, rarely).
Parameters that are not gradient-trained would follow the same rule; every
entry of a ModelParameters is averaged uniformly.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

from .detector import ModelParameters
from .errors import ConfigurationError, ContractViolationError


@dataclass(frozen=True)
class TeacherSchedule:
    """Momenta and cadence for the two teachers.

    ``n_update=None`` means "resolve from the dataset size" (one-tenth of the
    samples per epoch, at least 1); the adaptation loop fills it in.
    """

    pi_dynamic: float = 0.99
    pi_static: float = 0.60
    n_update: int | None = None

    def __post_init__(self):
        if not (0.0 <= self.pi_static <= self.pi_dynamic <= 1.0):
            raise ConfigurationError(
                "momenta must satisfy 0 <= pi_static <= pi_dynamic <= 1 "
                f"(got pi_static={self.pi_static}, pi_dynamic={self.pi_dynamic})"
            )
        if self.n_update is not None and self.n_update < 1:
            raise ConfigurationError("n_update must be at least 1 (or None for auto)")

    def resolved(self, dataset_size: int) -> "TeacherSchedule":
        if self.n_update is not None:
            return self
        return replace(self, n_update=max(1, dataset_size // 10))


@dataclass(frozen=True)
class DualTeacherState:
    """The three parameter sets plus counters; owned by the adaptation loop."""

    static_params: ModelParameters
    dynamic_params: ModelParameters
    student_params: ModelParameters
    iteration: int = 0
    epoch: int = 0


def init_dual_state(source_params: ModelParameters) -> DualTeacherState:
    """All three models start as independent copies of the source weights."""
    return DualTeacherState(
        static_params=source_params.clone(),
        dynamic_params=source_params.clone(),
        student_params=source_params.clone(),
    )


def ema_update(teacher: ModelParameters, student: ModelParameters, pi: float) -> ModelParameters:
    """Elementwise convex blend ``pi * teacher + (1 - pi) * student`` as a fresh set."""
    if not (0.0 <= pi <= 1.0):
        raise ConfigurationError(f"momentum must lie in [0, 1], got {pi}")
    if teacher.schema() != student.schema():
        raise ContractViolationError("teacher and student parameter schemas differ")
    return ModelParameters(
        {name: pi * arr + (1.0 - pi) * student[name] for name, arr in teacher.items()}
    )


def tick(state: DualTeacherState, schedule: TeacherSchedule, epoch_ended: bool = False) -> DualTeacherState:
    """Advance one iteration: maybe update the dynamic teacher, and the static one at epoch end."""
    if schedule.n_update is None:
        raise ConfigurationError("schedule.n_update unresolved; call schedule.resolved(dataset_size)")
    iteration = state.iteration + 1
    dynamic = state.dynamic_params
    if iteration % schedule.n_update == 0:
        dynamic = ema_update(dynamic, state.student_params, schedule.pi_dynamic)
    static = state.static_params
    epoch = state.epoch
    if epoch_ended:
        static = ema_update(static, state.student_params, schedule.pi_static)
        epoch += 1
    return DualTeacherState(
        static_params=static,
        dynamic_params=dynamic,
        student_params=state.student_params,
        iteration=iteration,
        epoch=epoch,
    )
