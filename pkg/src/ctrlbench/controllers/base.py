"""Controller interface shared by in-process baselines and subprocess clients."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Protocol

import numpy as np

from ..robots import Observation


class ControllerDied(RuntimeError):
    """The controller can no longer answer queries (e.g. its process exited)."""


@dataclass(frozen=True)
class EpisodeInfo:
    """What a controller may know before the first query."""

    system: int
    episode: int
    p: int
    d: int
    grid: tuple[float, ...]

    def to_dict(self) -> dict:
        return {
            "system": self.system,
            "episode": self.episode,
            "p": self.p,
            "d": self.d,
            "grid": list(self.grid),
        }


class Controller(Protocol):
    def start(self, info: EpisodeInfo) -> None: ...

    def query(self, step: int, obs: Observation, target: np.ndarray) -> np.ndarray | None:
        """Control for ``[t_step, t_step+1)``; ``None`` means no valid answer in time."""

    def finish(self) -> None: ...


class ZeroController:
    """Always applies no control."""

    def __init__(self, p: int | None = None):
        self.p = p

    def start(self, info: EpisodeInfo) -> None:
        self.p = info.p

    def query(self, step, obs, target):
        return np.zeros(self.p)

    def finish(self) -> None:
        pass


def zero_controller(p: int | None = None) -> ZeroController:
    return ZeroController(p)
