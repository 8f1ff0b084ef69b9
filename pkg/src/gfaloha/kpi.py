"""Link KPIs: delay, transmit power, battery lifetime, EE, SE.

All formulas work on one operating point (an outage probability plus the
parameter sets) and are shared by the analytic pipeline and the Monte
Carlo simulator, which feeds its measured outage through the same energy
accounting.
"""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, fields

from scipy.special import lambertw

from .params import EnergyParams, InvalidParamsError, SystemParams

# Granted-access baseline: contention opportunities per access period.
RA_OPPORTUNITIES = 10
RA_PERIOD = 2.0  # s


@dataclass
class KpiReport:
    """One row of figure output."""

    outage: float
    expected_delay: float       # s
    battery_lifetime: float     # s
    energy_efficiency: float    # bit/J
    spectral_efficiency: float  # bit/s/Hz
    throughput: float           # packets/s
    avg_tx_power: float         # W

    def as_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


def expected_delay(po: float, p: SystemParams) -> float:
    """Mean time from arrival to successful reception with retries.

    Every attempt occupies M*Tp and failed ones add the Tack wait, so the
    geometric series over attempts sums to (M*Tp + Tack)/(1-Po) - Tack.
    Po = 1 yields inf (the packet never gets through).
    """
    if not (0.0 <= po <= 1.0):
        raise InvalidParamsError(f"outage must lie in [0, 1], got {po:g}")
    if po == 1.0:
        return math.inf
    return (p.M * p.Tp + p.Tack) / (1.0 - po) - p.Tack


def transmit_power_at(dist_m: float, p: SystemParams, e: EnergyParams,
                      pt_min: float = 1e-3, pt_max: float = 0.1,
                      db_pathloss: bool = False) -> float:
    """Power-controlled transmit power for a device at a given distance.

    The power-law mode inverts Pt = gamma*N0*W*Gamma*r^sigma / G. The
    db_pathloss mode uses the cellular link budget 128.1 +
    37.6*log10(d/km) plus a 20 dB margin for interference and other
    losses. Results clamp to [pt_min, pt_max]; hitting the ceiling means
    the device is outside the power-controlled coverage and a warning is
    emitted.
    """
    if dist_m <= 0:
        raise InvalidParamsError("distance must be positive")
    if db_pathloss:
        pl_db = 128.1 + 37.6 * math.log10(dist_m / 1000.0) + 20.0
        pt = p.gamma * p.N0 * p.W * 10.0 ** (pl_db / 10.0)
    else:
        pt = p.gamma * p.N0 * p.W * p.Gamma * dist_m ** e.sigma_pl / e.G
    if pt > pt_max:
        warnings.warn(f"required Pt {pt:.3g} W exceeds the cap {pt_max:g} W")
    return min(max(pt, pt_min), pt_max)


def avg_transmit_power(p: SystemParams, e: EnergyParams) -> float:
    """Mean transmit power over a cell with density f(r) = 2r/Rc^2.

    Averaging the power-law inversion over the disc gives
    Pt_avg = 2 * Rc^sigma * gamma * N0 * W * Gamma / (G * (sigma + 2)).
    """
    return (2.0 * e.Rc ** e.sigma_pl * p.gamma * p.N0 * p.W * p.Gamma
            / (e.G * (e.sigma_pl + 2.0)))


def attempt_energy(p: SystemParams, e: EnergyParams) -> float:
    """Energy of one grant-free attempt: N replica transmissions, idle
    listening over the remaining M-N slots, and the acknowledgement wait."""
    pt = avg_transmit_power(p, e)
    return ((e.Pc + e.alpha * pt) * p.N * p.Tp
            + e.Pc * (p.M - p.N) * p.Tp
            + e.Pc * p.Tack)


def battery_lifetime(po: float, p: SystemParams, e: EnergyParams,
                     paper_literal: bool = False) -> float:
    """Battery lifetime under periodic reporting.

    The corrected energy balance divides the per-attempt cost by the
    success probability: E_report = Est + attempt_energy / (1 - Po).
    paper_literal keeps the uncorrected 1/Po factor instead, which is
    undefined at Po = 0 and raises there.
    """
    if not (0.0 <= po <= 1.0):
        raise InvalidParamsError(f"outage must lie in [0, 1], got {po:g}")
    if paper_literal:
        if po == 0.0:
            raise InvalidParamsError("literal 1/Po energy balance diverges at Po = 0")
        factor = 1.0 / po
    else:
        if po == 1.0:
            return 0.0
        factor = 1.0 / (1.0 - po)
    e_report = e.Est + factor * attempt_energy(p, e)
    return e.E0 * e.Tr / e_report


def energy_efficiency(po: float, p: SystemParams, e: EnergyParams) -> float:
    """Delivered payload bits per joule spent on one attempt."""
    if not (0.0 <= po <= 1.0):
        raise InvalidParamsError(f"outage must lie in [0, 1], got {po:g}")
    return (1.0 - po) * (p.D - p.Doh) / attempt_energy(p, e)


def spectral_efficiency(lambda_agg: float, p: SystemParams,
                        po: float | None = None) -> float:
    """Payload bits per second per hertz of occupied system bandwidth.

    The deployment spends 2*(Fm + W/2) Hz to host the offset packets.
    When po is given the rate is success-weighted by (1 - Po).
    """
    if lambda_agg < 0:
        raise InvalidParamsError("arrival rate must be nonnegative")
    weight = 1.0 if po is None else (1.0 - po)
    return lambda_agg * weight * (p.D - p.Doh) / (2.0 * (p.Fm + p.W / 2.0))


def throughput(lambda_agg: float, po: float) -> float:
    """Successfully delivered reports per second at the arrival rate."""
    return lambda_agg * (1.0 - po)


# ---------------------------------------------------------------------------
# Granted-access baseline
# ---------------------------------------------------------------------------

def ra_contention(lambda_agg: float, opportunities: int = RA_OPPORTUNITIES,
                  period: float = RA_PERIOD) -> tuple[float, float, bool]:
    """Steady-state random-access contention of the granted baseline.

    Backlogged devices each pick one of `opportunities` slots per period;
    a slot with a single pick succeeds. With Poisson attempts A per
    period the per-attempt success is exp(-A/O) and the stable fixed
    point A*exp(-A/O) = lambda*period exists while lambda*period <= O/e
    (solved via the Lambert W function).

    Returns (expected attempts per report, per-attempt success
    probability, stable flag). Beyond saturation the attempt count is
    infinite and success probability 0.
    """
    if lambda_agg < 0:
        raise InvalidParamsError("arrival rate must be nonnegative")
    demand = lambda_agg * period
    if demand == 0.0:
        return 1.0, 1.0, True
    if demand > opportunities / math.e:
        return math.inf, 0.0, False
    a = -opportunities * float(lambertw(-demand / opportunities, 0).real)
    p_succ = demand / a
    return 1.0 / p_succ, p_succ, True


def granted_attempt_energy(p: SystemParams, e: EnergyParams) -> float:
    """Energy of one random-access attempt: a preamble-length burst."""
    pt = avg_transmit_power(p, e)
    return (e.Pc + e.alpha * pt) * p.Nzc * p.Tb


def granted_report_energy(p: SystemParams, e: EnergyParams,
                          attempts: float) -> float:
    """Per-report energy on the granted path.

    The device contends on the RA channel (attempts bursts), then pays
    synchronization (Esynch plus idle listening over Dsynch) and one
    collision-free data transmission of duration Tp.
    """
    pt = avg_transmit_power(p, e)
    return (e.Est + attempts * granted_attempt_energy(p, e)
            + e.Esynch + e.Pc * e.Dsynch
            + (e.Pc + e.alpha * pt) * p.Tp)


def granted_kpis(lambda_agg: float, p: SystemParams, e: EnergyParams,
                 opportunities: int = RA_OPPORTUNITIES,
                 period: float = RA_PERIOD) -> KpiReport:
    """Analytic KPI row of the granted baseline at the same demand."""
    attempts, p_succ, stable = ra_contention(lambda_agg, opportunities, period)
    if not stable:
        return KpiReport(outage=1.0, expected_delay=math.inf,
                         battery_lifetime=0.0, energy_efficiency=0.0,
                         spectral_efficiency=0.0, throughput=0.0,
                         avg_tx_power=avg_transmit_power(p, e))
    e_report = granted_report_energy(p, e, attempts)
    # Mean wait to the next period boundary plus retry periods, then
    # synchronization and the data transmission itself.
    delay = period / 2.0 + (attempts - 1.0) * period + e.Dsynch + p.Tp
    return KpiReport(
        outage=0.0,
        expected_delay=delay,
        battery_lifetime=e.E0 * e.Tr / e_report,
        energy_efficiency=(p.D - p.Doh) / e_report,
        spectral_efficiency=spectral_efficiency(lambda_agg, p),
        throughput=lambda_agg,
        avg_tx_power=avg_transmit_power(p, e),
    )


def grant_free_kpis(lambda_agg: float, po: float, p: SystemParams,
                    e: EnergyParams) -> KpiReport:
    """KPI row of the grant-free scheme from an outage probability."""
    return KpiReport(
        outage=po,
        expected_delay=expected_delay(po, p),
        battery_lifetime=battery_lifetime(po, p, e),
        energy_efficiency=energy_efficiency(po, p, e),
        spectral_efficiency=spectral_efficiency(lambda_agg, p, po),
        throughput=throughput(lambda_agg, po),
        avg_tx_power=avg_transmit_power(p, e),
    )


def write_report_rows(path, rows: list[dict]) -> None:
    """Dump KPI rows (dicts sharing the same keys) as CSV."""
    if not rows:
        raise InvalidParamsError("no rows to write")
    keys = list(rows[0].keys())
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(keys)
        for row in rows:
            writer.writerow([_fmt(row[k]) for k in keys])


def _fmt(v) -> str:
    if isinstance(v, float):
        return f"{v:.10g}"
    return str(v)
