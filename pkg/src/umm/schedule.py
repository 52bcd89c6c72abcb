"""Step schedule mapping training epoch to the number of sampled candidates."""

from __future__ import annotations

import bisect
from dataclasses import dataclass

from .errors import InvalidArgumentError


@dataclass(frozen=True)
class SFDSchedule:
    milestones: tuple = ((0, 5), (100, 3), (150, 1))

    def __post_init__(self):
        ms = tuple((int(e), int(k)) for e, k in self.milestones)
        if not ms or ms[0][0] != 0:
            raise InvalidArgumentError("schedule must start at epoch 0")
        for (e0, k0), (e1, k1) in zip(ms, ms[1:]):
            if e1 <= e0:
                raise InvalidArgumentError("milestone epochs must be strictly increasing")
            if k1 > k0:
                raise InvalidArgumentError("candidate counts must be non-increasing")
        if any(k < 1 for _, k in ms):
            raise InvalidArgumentError("candidate counts must be positive")
        object.__setattr__(self, "milestones", ms)

    @classmethod
    def constant(cls, k: int) -> "SFDSchedule":
        return cls(((0, k),))


def candidates_for_epoch(s: SFDSchedule, epoch: int) -> int:
    if epoch < 0:
        raise InvalidArgumentError(f"epoch must be non-negative, got {epoch}")
    starts = [e for e, _ in s.milestones]
    return s.milestones[bisect.bisect_right(starts, epoch) - 1][1]
