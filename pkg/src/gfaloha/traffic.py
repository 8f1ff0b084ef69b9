"""Traffic generation: Poisson report arrivals and virtual-frame draws."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .params import InvalidParamsError, SystemParams


@dataclass
class Replica:
    """One transmitted copy of a packet, a rectangle in time-frequency."""

    packet_id: int
    t0: float           # start time, s
    df: float           # carrier frequency offset, Hz
    duration: float     # s
    bandwidth: float    # Hz
    energy_density: float = 1.0  # received energy per s*Hz after power control


@dataclass
class VirtualFrame:
    """Slot selection and CFO of one transmission attempt."""

    device_id: int
    arrival_time: float
    slot_indices: tuple[int, ...]  # strictly increasing, first is always 0
    cfo: float                     # Hz, constant over the frame

    def replicas(self, p: SystemParams) -> list[Replica]:
        return [
            Replica(self.device_id, self.arrival_time + k * p.Tp, self.cfo, p.Tp, p.W)
            for k in self.slot_indices
        ]


def draw_virtual_frame(rng: np.random.Generator, p: SystemParams,
                       arrival_time: float, device_id: int = 0) -> VirtualFrame:
    """Place N replicas in an M-slot frame starting at the arrival.

    The first replica goes out immediately (slot 0); the remaining N-1
    slots are drawn uniformly without replacement. The CFO is drawn once
    per frame, uniform on [-Fm, Fm].
    """
    if not (1 <= p.N <= p.M):
        raise InvalidParamsError(f"need 1 <= N <= M, got N={p.N}, M={p.M}")
    if p.N > 1:
        rest = rng.choice(np.arange(1, p.M), size=p.N - 1, replace=False)
        slots = (0, *sorted(int(k) for k in rest))
    else:
        slots = (0,)
    cfo = float(rng.uniform(-p.Fm, p.Fm)) if p.Fm > 0 else 0.0
    return VirtualFrame(device_id, arrival_time, slots, cfo)


def generate_arrivals(rng: np.random.Generator, lambda_agg: float,
                      horizon: float) -> np.ndarray:
    """Poisson process of packet arrivals over [0, horizon), sorted.

    Uses the order-statistics form: the count is Poisson(lambda*horizon)
    and, given the count, times are i.i.d. uniform.
    """
    if lambda_agg < 0 or horizon < 0:
        raise InvalidParamsError("arrival rate and horizon must be nonnegative")
    n = rng.poisson(lambda_agg * horizon)
    return np.sort(rng.uniform(0.0, horizon, size=n))
