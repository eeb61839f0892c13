"""Full-horizon dispatch trajectories and their objective."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .costs import TerminalCost, as_source, block_len, block_values


@dataclass
class Schedule:
    """Per-period dispatch with SoC and dual traces.

    ``soc[t]`` and ``theta[t]`` are the state and SoC dual at the end of
    period t, so both have T+1 entries (index 0 is the initial state).
    ``theta`` is NaN when the producer has no dual information.
    """

    p_plus: np.ndarray
    p_minus: np.ndarray
    soc: np.ndarray
    theta: np.ndarray
    objective: float = float("nan")
    solves: int = 0
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.p_plus = np.asarray(self.p_plus, dtype=float)
        self.p_minus = np.asarray(self.p_minus, dtype=float)
        self.soc = np.asarray(self.soc, dtype=float)
        self.theta = np.asarray(self.theta, dtype=float)
        T = self.p_plus.size
        if self.p_minus.size != T or self.soc.size != T + 1 or self.theta.size != T + 1:
            raise ValueError("schedule arrays have inconsistent lengths")

    @property
    def T(self) -> int:
        return self.p_plus.size

    @property
    def net(self) -> np.ndarray:
        return self.p_plus - self.p_minus

    @classmethod
    def from_net(cls, net, e0: float, eta: float, theta: Optional[np.ndarray] = None):
        """Build a one-sided schedule from net dispatch, integrating the SoC."""
        net = np.asarray(net, dtype=float)
        p_plus = np.maximum(net, 0.0)
        p_minus = np.maximum(-net, 0.0)
        soc = e0 + np.concatenate(([0.0], np.cumsum(-p_plus / eta + p_minus * eta)))
        if theta is None:
            theta = np.full(net.size + 1, np.nan)
        return cls(p_plus, p_minus, soc, theta)


def objective_of(spec, cost_source, term: TerminalCost, schedule: Schedule) -> float:
    """Total operating cost plus terminal cost of the final SoC."""
    source = as_source(cost_source)
    if len(source) != schedule.T:
        raise ValueError(f"schedule has {schedule.T} periods, costs have {len(source)}")
    net = schedule.net
    total = 0.0
    start = 0
    for block in source.blocks():
        n = block_len(block)
        total += float(np.sum(block_values(block, net[start:start + n])))
        start += n
    return total + term.value(float(schedule.soc[-1]))
