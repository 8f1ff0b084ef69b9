"""Rectangle-level Monte Carlo simulator of the asynchronous channel.

Replicas are Tp-by-W rectangles on a circular time horizon (wrap-around
removes edge effects). The simulator builds the pairwise overlap graph
with a sweep over start times, runs iterative interference cancellation
on it, and feeds failed packets back as retries. PHY detail below the
rectangle abstraction (waveforms, preambles) lives in the signal chain
module and is validated separately.
"""

from __future__ import annotations

import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy import stats as sps

from . import kpi as kpi_mod
from .params import EnergyParams, InvalidParamsError, SystemParams
from .traffic import generate_arrivals

_SINR_TOL = 1e-12   # relative slack on threshold comparisons
_AREA_TOL = 1e-10   # absolute slack on area-domain comparisons, s*Hz


# ---------------------------------------------------------------------------
# Collision graph
# ---------------------------------------------------------------------------

@dataclass
class CollisionGraph:
    """Pairwise overlap structure of a replica population.

    Edges exist only for strictly positive overlap area. dt stores the
    signed start-time difference t0[eb] - t0[ea] (unwrapped, |dt| < Tp)
    so the interfered interval inside each rectangle can be recovered.
    """

    t0: np.ndarray
    df: np.ndarray
    packet: np.ndarray
    ea: np.ndarray
    eb: np.ndarray
    dt: np.ndarray
    area: np.ndarray
    n_packets: int
    p: SystemParams
    _adj: tuple | None = field(default=None, repr=False)

    @property
    def n_replicas(self) -> int:
        return len(self.t0)

    def overlaps(self) -> dict[tuple[int, int], float]:
        """Sparse (i, j) -> area map with i < j, for inspection and tests."""
        return {(int(a), int(b)): float(v)
                for a, b, v in zip(self.ea, self.eb, self.area)}

    def adjacency(self):
        """CSR-style neighbor lists over the undirected edge set."""
        if self._adj is None:
            src = np.concatenate([self.ea, self.eb])
            eidx = np.tile(np.arange(len(self.ea)), 2)
            forward = np.concatenate([np.ones(len(self.ea), bool),
                                      np.zeros(len(self.eb), bool)])
            order = np.argsort(src, kind="stable")
            indptr = np.searchsorted(src[order], np.arange(self.n_replicas + 1))
            self._adj = (indptr, eidx[order], forward[order])
        return self._adj


def _segment_arange(counts: np.ndarray) -> np.ndarray:
    """[0..c0), [0..c1), ... concatenated."""
    total = int(counts.sum())
    if total == 0:
        return np.empty(0, dtype=np.int64)
    starts = np.cumsum(counts) - counts
    return np.arange(total) - np.repeat(starts, counts)


def build_collision_graph(replicas, p: SystemParams,
                          horizon: float | None = None) -> CollisionGraph:
    """Find all pairwise rectangle intersections via a start-time sweep.

    Accepts a list of Replica records or a (t0, df, packet) array triple.
    With a horizon the time axis is circular: rectangles crossing the end
    wrap to the start. Same-packet pairs are excluded (replicas of one
    attempt sit in distinct slots and cannot overlap).
    """
    if isinstance(replicas, tuple):
        t0, df, packet = (np.asarray(a) for a in replicas)
    else:
        t0 = np.array([r.t0 for r in replicas], dtype=float)
        df = np.array([r.df for r in replicas], dtype=float)
        packet = np.array([r.packet_id for r in replicas], dtype=np.int64)
    n = len(t0)
    n_packets = int(packet.max()) + 1 if n else 0
    if horizon is not None:
        if horizon <= 2 * p.M * p.Tp:
            raise InvalidParamsError("circular horizon must exceed 2*M*Tp")
        t0 = np.mod(t0, horizon)

    # Extended population: replicas near the end reappear shifted left so
    # the linear sweep sees wrapped overlaps.
    ext_t = t0
    ext_idx = np.arange(n)
    if horizon is not None and n:
        wrap = np.nonzero(t0 > horizon - p.Tp)[0]
        ext_t = np.concatenate([t0, t0[wrap] - horizon])
        ext_idx = np.concatenate([ext_idx, wrap])

    order = np.argsort(ext_t, kind="stable")
    ts = ext_t[order]
    hi = np.searchsorted(ts, ts + p.Tp, side="left")
    counts = hi - np.arange(len(ts)) - 1
    a = np.repeat(np.arange(len(ts)), counts)
    b = np.repeat(np.arange(len(ts)) + 1, counts) + _segment_arange(counts)
    ia, ib = ext_idx[order[a]], ext_idx[order[b]]
    dt = ts[b] - ts[a]  # in (0, Tp) by construction

    keep = (ia != ib) & (packet[ia] != packet[ib]) & (dt < p.Tp)
    ia, ib, dt = ia[keep], ib[keep], dt[keep]
    fov = p.W - np.abs(df[ia] - df[ib])
    keep = fov > 0.0
    ia, ib, dt, fov = ia[keep], ib[keep], dt[keep], fov[keep]
    area = (p.Tp - dt) * fov

    # Canonical orientation plus dedup (a wrapped pair can be seen twice).
    flip = ia > ib
    ia2 = np.where(flip, ib, ia)
    ib2 = np.where(flip, ia, ib)
    dt = np.where(flip, -dt, dt)
    key = ia2.astype(np.int64) * n + ib2
    _, first = np.unique(key, return_index=True)
    return CollisionGraph(t0, df, packet,
                          ia2[first].astype(np.int64), ib2[first].astype(np.int64),
                          dt[first], area[first], n_packets, p)


# ---------------------------------------------------------------------------
# Successive interference cancellation
# ---------------------------------------------------------------------------

@dataclass
class SicOutcome:
    decoded: np.ndarray          # bool per packet id
    rounds: int
    per_packet_delay: dict       # packet id -> decode delay within the frame, s
    residual_replicas: int       # replicas still on air when SIC stalled


def _merge_intervals(iv: list[tuple[float, float]]) -> list[tuple[float, float]]:
    iv.sort()
    out = []
    for lo, hi in iv:
        if out and lo <= out[-1][1]:
            if hi > out[-1][1]:
                out[-1] = (out[-1][0], hi)
        else:
            out.append((lo, hi))
    return out


def _intersect_intervals(a, b):
    out = []
    i = j = 0
    while i < len(a) and j < len(b):
        lo = max(a[i][0], b[j][0])
        hi = min(a[i][1], b[j][1])
        if hi > lo:
            out.append((lo, hi))
        if a[i][1] < b[j][1]:
            i += 1
        else:
            j += 1
    return out


def sic_decode(graph: CollisionGraph, p: SystemParams, policy: str = "mrc",
               cr: float = 0.5, max_rounds: int = 32,
               decodable: np.ndarray | None = None) -> SicOutcome:
    """Iterative decoding over the collision graph.

    Per round every undecoded packet is tested under the chosen policy:
      none - some replica alone reaches SINR >= St
      mrc  - the summed replica SINRs reach St
      sc   - the union of interference-free stretches across the
             replicas covers at least the fraction cr of the packet
    Decoded packets are removed (all their replicas) and the next round
    sees the reduced interference; the loop stops at a fixpoint or after
    max_rounds. `decodable` marks packets the receiver may decode; the
    rest (already-failed earlier transmissions) only radiate.
    """
    if policy not in ("none", "mrc", "sc"):
        raise ValueError(f"unknown decoding policy {policy!r}")
    if not (0.0 < cr <= 1.0):
        raise InvalidParamsError("coding-rate threshold must lie in (0, 1]")
    npk, nrep = graph.n_packets, graph.n_replicas
    decoded = np.zeros(npk, dtype=bool)
    if decodable is None:
        decodable = np.ones(npk, dtype=bool)
    wtp = p.W * p.Tp
    area_thresh = wtp * (1.0 / p.St - 1.0 / p.gamma)
    pkt = graph.packet
    rounds = 0
    per_delay: dict[int, float] = {}

    rep_of: dict[int, list[int]] | None = None

    while rounds < max_rounds:
        rounds += 1
        e_alive = ~decoded[pkt[graph.ea]] & ~decoded[pkt[graph.eb]]
        m = (np.bincount(graph.ea[e_alive],
                         weights=graph.area[e_alive], minlength=nrep)
             + np.bincount(graph.eb[e_alive],
                           weights=graph.area[e_alive], minlength=nrep))
        cand = ~decoded & decodable
        rep_live = cand[pkt]

        if policy == "none":
            ok_rep = rep_live & (m <= area_thresh + _AREA_TOL)
            new = np.zeros(npk, dtype=bool)
            new[pkt[ok_rep]] = True
            new &= cand
        elif policy == "mrc":
            s = 1.0 / (m / wtp + 1.0 / p.gamma)
            sums = np.bincount(pkt[rep_live], weights=s[rep_live], minlength=npk)
            new = cand & (sums >= p.St * (1.0 - _SINR_TOL))
        else:
            if rep_of is None:
                rep_of = {}
                for r in range(nrep):
                    rep_of.setdefault(int(pkt[r]), []).append(r)
            new = _sc_round(graph, m, e_alive, cand, rep_of, cr, p)

        if not new.any():
            break
        for q in np.nonzero(new)[0]:
            per_delay[int(q)] = p.M * p.Tp
        decoded |= new

    residual = int(np.count_nonzero(~decoded[pkt]))
    return SicOutcome(decoded, rounds, per_delay, residual)


def _sc_round(graph: CollisionGraph, m: np.ndarray, e_alive: np.ndarray,
              cand: np.ndarray, rep_of: dict, cr: float,
              p: SystemParams) -> np.ndarray:
    """One round of the clean-fraction policy.

    A position inside the packet counts as clean if at least one replica
    carries it free of any overlapping, not yet cancelled replica; even
    partial frequency overlap spoils the stretch it covers.
    """
    pkt = graph.packet
    new = np.zeros(graph.n_packets, dtype=bool)
    # Fast path: a completely clean replica reconstructs everything.
    clean_rep = (m == 0.0) & cand[pkt]
    new[pkt[clean_rep]] = True

    check = np.nonzero(cand & ~new)[0]
    if check.size == 0:
        return new
    indptr, eidx, forward = graph.adjacency()
    for q in check:
        dirty_sets = []
        for r in rep_of.get(int(q), []):
            iv = []
            for k in range(indptr[r], indptr[r + 1]):
                e = eidx[k]
                if not e_alive[e]:
                    continue
                d = graph.dt[e] if forward[k] else -graph.dt[e]
                iv.append((max(0.0, d), min(p.Tp, d + p.Tp)))
            dirty_sets.append(_merge_intervals(iv))
        inter = dirty_sets[0] if dirty_sets else []
        for s in dirty_sets[1:]:
            inter = _intersect_intervals(inter, s)
            if not inter:
                break
        covered = sum(hi - lo for lo, hi in inter)
        if p.Tp - covered >= cr * p.Tp - 1e-12:
            new[q] = True
    return new


# ---------------------------------------------------------------------------
# Trials
# ---------------------------------------------------------------------------

@dataclass
class TrialResult:
    lambda_agg: float
    policy: str
    offered: int            # measured reports
    attempts: int           # transmission attempts of measured reports
    delivered: int
    outage: float           # per-attempt failure probability
    report_loss: float      # reports undelivered after all retries
    mean_delay: float       # s, over delivered reports
    mean_attempts: float
    realized_g: float       # replicas/s on air in the measured window
    realized_load: float    # W/(2Fm+W) * realized_g * Tp
    kpis: kpi_mod.KpiReport


def nominal_lambda(load: float, p: SystemParams) -> float:
    """Arrival rate whose first-attempt traffic realizes the given load."""
    return load * (2.0 * p.Fm + p.W) / (p.W * p.N * p.Tp)


def run_trial(rng: np.random.Generator, lambda_agg: float, horizon: float,
              p: SystemParams, e: EnergyParams, policy: str = "mrc", *,
              cr: float = 0.5, max_retries: int = 5, max_rounds: int = 32,
              trace_path=None) -> TrialResult:
    """Simulate one horizon of traffic and measure the KPI set.

    Retries are processed in waves: all first attempts are decoded
    jointly (global SIC on the circular horizon), failures retransmit
    Tack after their frame with a fresh slot pattern and CFO, and each
    retry wave is decoded against the replicas of everything that failed
    before it. Later waves never rewrite earlier outcomes; the first and
    last 2*M*Tp of arrivals are excluded from the statistics.
    """
    if horizon <= 8 * p.M * p.Tp:
        raise InvalidParamsError("horizon too short for warm-up exclusion")
    arrivals = generate_arrivals(rng, lambda_agg, horizon)
    n_rep = arrivals.size
    margin = 2.0 * p.M * p.Tp
    measured = (arrivals >= margin) & (arrivals < horizon - margin)

    # Static interference: replicas of failed attempts stay on air.
    static_t0 = np.empty(0)
    static_df = np.empty(0)
    att_report: list[np.ndarray] = []     # wave -> report index per attempt
    att_start: list[np.ndarray] = []
    att_decoded: list[np.ndarray] = []

    wave_report = np.arange(n_rep)
    wave_start = arrivals.copy()
    delivered_at = np.full(n_rep, -1)      # wave index of success
    attempts_used = np.zeros(n_rep, dtype=np.int64)

    for wave in range(max_retries + 1):
        if wave_report.size == 0:
            break
        n_att = wave_report.size
        slots = np.zeros((n_att, p.N), dtype=np.int64)
        if p.N == 2:
            slots[:, 1] = rng.integers(1, p.M, size=n_att)
        elif p.N > 2:
            # Uniform subset of the later slots via per-row argsort ranks.
            ranks = np.argsort(rng.random((n_att, p.M - 1)), axis=1)
            slots[:, 1:] = np.sort(ranks[:, : p.N - 1], axis=1) + 1
        cfo = (rng.uniform(-p.Fm, p.Fm, size=n_att) if p.Fm > 0
               else np.zeros(n_att))

        t0 = np.mod(wave_start[:, None] + slots * p.Tp, horizon).ravel()
        df = np.repeat(cfo, p.N)
        pkt_of_att = np.arange(n_att)
        pkt = np.repeat(pkt_of_att, p.N)

        n_static = static_t0.size
        all_t0 = np.concatenate([t0, static_t0])
        all_df = np.concatenate([df, static_df])
        # Static replicas get one dummy packet id each, marked undecodable.
        all_pkt = np.concatenate([pkt, n_att + np.arange(n_static)])
        decodable = np.concatenate([np.ones(n_att, bool),
                                    np.zeros(n_static, bool)])
        graph = build_collision_graph((all_t0, all_df, all_pkt), p, horizon)
        out = sic_decode(graph, p, policy, cr=cr, max_rounds=max_rounds,
                         decodable=decodable)
        ok = out.decoded[:n_att]

        attempts_used[wave_report] += 1
        delivered_at[wave_report[ok]] = wave
        att_report.append(wave_report)
        att_start.append(wave_start)
        att_decoded.append(ok)

        fail = ~ok
        static_t0 = np.concatenate([static_t0, t0[fail.repeat(p.N)]])
        static_df = np.concatenate([static_df, df[fail.repeat(p.N)]])
        wave_report = wave_report[fail]
        wave_start = np.mod(wave_start[fail] + p.M * p.Tp + p.Tack, horizon)

    # Statistics over measured reports only.
    att_rep_all = np.concatenate(att_report)
    att_ok_all = np.concatenate(att_decoded)
    att_meas = measured[att_rep_all]
    attempts = int(att_meas.sum())
    failures = int((~att_ok_all & att_meas).sum())
    po = failures / attempts if attempts else 0.0

    offered = int(measured.sum())
    got = measured & (delivered_at >= 0)
    delivered = int(got.sum())
    delay = delivered_at[got] * (p.M * p.Tp + p.Tack) + p.M * p.Tp
    mean_delay = float(delay.mean()) if delivered else math.inf
    span = horizon - 2 * margin
    realized_g = attempts * p.N / span if span > 0 else 0.0
    realized_load = p.W / (2 * p.Fm + p.W) * realized_g * p.Tp
    mean_att = attempts / offered if offered else 0.0

    kpis = kpi_mod.grant_free_kpis(lambda_agg, po, p, e)
    kpis.expected_delay = mean_delay
    kpis.throughput = delivered / span if span > 0 else 0.0

    if trace_path is not None:
        with open(trace_path, "w") as fh:
            for i in np.nonzero(measured)[0]:
                fh.write(json.dumps({
                    "report": int(i),
                    "arrival": round(float(arrivals[i]), 9),
                    "attempts": int(attempts_used[i]),
                    "delivered": bool(delivered_at[i] >= 0),
                    "delay": (None if delivered_at[i] < 0 else round(
                        float(delivered_at[i] * (p.M * p.Tp + p.Tack) + p.M * p.Tp), 9)),
                }) + "\n")

    return TrialResult(lambda_agg, policy, offered, attempts, delivered, po,
                       1.0 - delivered / offered if offered else 0.0,
                       mean_delay, mean_att, realized_g, realized_load, kpis)


@dataclass
class GrantedTrialResult:
    lambda_agg: float
    offered: int
    delivered: int
    report_loss: float
    mean_delay: float
    mean_attempts: float
    kpis: kpi_mod.KpiReport


def run_granted_baseline(rng: np.random.Generator, lambda_agg: float,
                         horizon: float, p: SystemParams, e: EnergyParams,
                         opportunities: int = kpi_mod.RA_OPPORTUNITIES,
                         period: float = kpi_mod.RA_PERIOD) -> GrantedTrialResult:
    """Granted-access reference: slotted contention, then a clean grant.

    Devices with a pending report pick one of the period's RA
    opportunities; a singleton pick wins a collision-free data slot.
    Losers retry next period. Energy uses the same accounting as the
    analytic baseline with the measured attempt count.
    """
    arrivals = generate_arrivals(rng, lambda_agg, horizon)
    n = arrivals.size
    margin = 2.0 * p.M * p.Tp
    measured = (arrivals >= margin) & (arrivals < horizon - margin)
    # A report contends at the RA instant closing its arrival period.
    first_period = np.floor(arrivals / period).astype(np.int64)
    n_periods = int(math.floor(horizon / period))

    attempts = np.zeros(n, dtype=np.int64)
    done_period = np.full(n, -1, dtype=np.int64)
    order = np.argsort(first_period, kind="stable")
    bounds = np.searchsorted(first_period[order], np.arange(n_periods + 1))
    backlog = np.empty(0, dtype=np.int64)
    for t in range(n_periods):
        fresh = order[bounds[t]:bounds[t + 1]]
        if fresh.size:
            backlog = np.concatenate([backlog, fresh])
        if backlog.size == 0:
            continue
        picks = rng.integers(0, opportunities, size=backlog.size)
        slot_counts = np.bincount(picks, minlength=opportunities)
        won = slot_counts[picks] == 1
        attempts[backlog] += 1
        done_period[backlog[won]] = t
        backlog = backlog[~won]

    got = measured & (done_period >= 0)
    delivered = int(got.sum())
    offered = int(measured.sum())
    delay = ((done_period[got] + 1) * period - arrivals[got]
             + e.Dsynch + p.Tp)
    mean_delay = float(delay.mean()) if delivered else math.inf
    mean_att = float(attempts[got].mean()) if delivered else math.inf

    e_report = kpi_mod.granted_report_energy(p, e, mean_att)
    kpis = kpi_mod.KpiReport(
        outage=1.0 - delivered / offered if offered else 0.0,
        expected_delay=mean_delay,
        battery_lifetime=e.E0 * e.Tr / e_report,
        energy_efficiency=(p.D - p.Doh) / e_report,
        spectral_efficiency=kpi_mod.spectral_efficiency(lambda_agg, p),
        throughput=delivered / (horizon - 2 * margin),
        avg_tx_power=kpi_mod.avg_transmit_power(p, e),
    )
    return GrantedTrialResult(lambda_agg, offered, delivered,
                              kpis.outage, mean_delay, mean_att, kpis)


# ---------------------------------------------------------------------------
# Sweeps
# ---------------------------------------------------------------------------

def rng_for(seed: int, *key: int) -> np.random.Generator:
    """Deterministic substream for a grid cell, independent of run order."""
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=key))


def _ci95(vals: np.ndarray) -> float:
    if len(vals) < 2:
        return 0.0
    t = sps.t.ppf(0.975, len(vals) - 1)
    return float(t * vals.std(ddof=1) / math.sqrt(len(vals)))


_POLICY_IDS = {"none": 0, "sc": 1, "mrc": 2, "granted": 3}


def _gf_cell(args):
    (seed, li, policy, rep, lam, horizon, p, e, cr, max_retries) = args
    rng = rng_for(seed, li, _POLICY_IDS[policy], rep)
    return run_trial(rng, lam, horizon, p, e, policy,
                     cr=cr, max_retries=max_retries)


def sweep(loads, reps: int, p: SystemParams, e: EnergyParams,
          policies=("mrc",), *, packets_per_point: int = 20000,
          seed: int = 1234, cr: float = 0.5, max_retries: int = 5,
          include_granted: bool = False, workers: int = 1) -> list[dict]:
    """Monte Carlo sweep over offered loads, one row per (load, policy).

    Every (load, policy, repetition) cell draws its own RNG substream
    from the master seed, so results do not depend on scheduling and are
    reproducible cell by cell. Rows carry the mean and 95% CI of each
    KPI across repetitions.
    """
    jobs = []
    for li, load in enumerate(loads):
        lam = nominal_lambda(load, p)
        horizon = max(packets_per_point / lam, 10 * p.M * p.Tp)
        for policy in policies:
            for rep in range(reps):
                jobs.append((seed, li, policy, rep, lam, horizon, p, e,
                             cr, max_retries))
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_gf_cell, jobs))
    else:
        results = [_gf_cell(j) for j in jobs]

    by_cell: dict[tuple, list[TrialResult]] = {}
    for job, res in zip(jobs, results):
        by_cell.setdefault((job[1], job[2]), []).append(res)

    rows = []
    for li, load in enumerate(loads):
        for policy in policies:
            cell = by_cell[(li, policy)]
            row = {"load": load, "lambda_agg": cell[0].lambda_agg,
                   "policy": policy, "n_replicas": p.N, "cr": cr,
                   "reps": len(cell)}
            row["realized_load"] = float(np.mean([c.realized_load for c in cell]))
            for name in ("outage", "expected_delay", "battery_lifetime",
                         "energy_efficiency", "spectral_efficiency",
                         "throughput"):
                vals = np.array([getattr(c.kpis, name) for c in cell])
                row[name] = float(np.mean(vals))
                row[name + "_ci"] = _ci95(vals)
            row["report_loss"] = float(np.mean([c.report_loss for c in cell]))
            rows.append(row)
        if include_granted:
            lam = nominal_lambda(load, p)
            horizon = max(packets_per_point / lam, 10 * p.M * p.Tp)
            cell = [run_granted_baseline(
                rng_for(seed, li, _POLICY_IDS["granted"], rep), lam, horizon, p, e)
                for rep in range(reps)]
            row = {"load": load, "lambda_agg": lam, "policy": "granted",
                   "n_replicas": 0, "cr": cr, "reps": len(cell),
                   "realized_load": 0.0}
            for name in ("outage", "expected_delay", "battery_lifetime",
                         "energy_efficiency", "spectral_efficiency",
                         "throughput"):
                vals = np.array([getattr(c.kpis, name) for c in cell])
                row[name] = float(np.mean(vals))
                row[name + "_ci"] = _ci95(vals)
            row["report_loss"] = float(np.mean([c.report_loss for c in cell]))
            rows.append(row)
    return rows
