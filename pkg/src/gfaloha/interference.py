"""Analytic interference model for asynchronous replica transmissions.

A replica occupies a Tp-by-W rectangle in the time-frequency plane, offset
by its carrier frequency error. Interference between two replicas is the
area of their rectangle intersection (in s*Hz), and the post-despreading
SINR of a replica carrying unit energy density is

    SINR = 1 / (A / (W*Tp) + 1/gamma)

with A the summed intersection areas with all other undecoded replicas.
This module builds the distribution of A (single interferer law, n-fold
convolutions, Poisson mixture over the interferer count), turns it into
outage probabilities for the supported combining schemes, and solves the
retry-inflated offered-load fixed point.
"""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass

import numpy as np
from scipy import stats

from .params import InvalidParamsError, SystemParams

GRID_POINTS = 2048


class DegenerateInputError(ValueError):
    """An input is degenerate (singular system, empty distribution, ...)."""


# ---------------------------------------------------------------------------
# SINR and the single-interferer overlap law
# ---------------------------------------------------------------------------

def sinr(overlap_area, p: SystemParams):
    """SINR of a replica given the total interfering overlap area (s*Hz)."""
    a = np.asarray(overlap_area, dtype=float)
    if np.any(a < 0):
        raise InvalidParamsError("overlap area cannot be negative")
    out = 1.0 / (a / (p.W * p.Tp) + 1.0 / p.gamma)
    return float(out) if np.isscalar(overlap_area) else out


def overlap_area(dt: float, df: float, p: SystemParams) -> float:
    """Intersection area of two replica rectangles offset by (dt, df)."""
    return max(0.0, p.Tp - abs(dt)) * max(0.0, p.W - abs(df))


def overlap_probability(p: SystemParams, mode: str = "triangular") -> float:
    """Probability that a time-overlapping interferer also overlaps in
    frequency, under the chosen CFO-difference model."""
    if p.Fm == 0:
        return 1.0
    if mode == "triangular":
        return 1.0 - (max(0.0, 2.0 * p.Fm - p.W) / (2.0 * p.Fm)) ** 2
    if mode == "uniform":
        return min(1.0, p.W / (2.0 * p.Fm))
    raise ValueError(f"unknown CFO-difference mode {mode!r}")


def overlap_ccdf_paper(s, p: SystemParams):
    """Closed-form complementary CDF of the single-interferer overlap.

    Pr(S > s) = [W*(Tp - s/W) + s*ln(s/(Tp*W))] / (Tp*Fm), evaluated on
    s in [0, W*Tp]. The s -> 0 limit is W/Fm, which exceeds 1 whenever
    W > Fm; results are clamped to [0, 1] and the second return value
    flags elementwise where clamping fired.

    Returns (value, clamped) as scalars or arrays matching the input.
    """
    if p.Fm <= 0:
        raise InvalidParamsError("closed-form overlap CCDF requires Fm > 0")
    arr = np.asarray(s, dtype=float)
    smax = p.W * p.Tp
    if np.any(arr < 0) or np.any(arr > smax * (1 + 1e-12)):
        raise ValueError(f"overlap area must lie in [0, {smax:g}]")
    with np.errstate(divide="ignore", invalid="ignore"):
        log_term = np.where(arr > 0, arr * np.log(arr / smax), 0.0)
    raw = (p.W * (p.Tp - arr / p.W) + log_term) / (p.Tp * p.Fm)
    clamped = (raw < 0.0) | (raw > 1.0)
    value = np.clip(raw, 0.0, 1.0)
    if np.isscalar(s):
        return float(value), bool(clamped)
    return value, clamped


# ---------------------------------------------------------------------------
# Distribution container
# ---------------------------------------------------------------------------

@dataclass
class InterferenceCdf:
    """CDF of an interference area on a uniform grid starting at 0.

    grid[0] must be 0 so the first CDF value carries the probability mass
    of "no overlap at all". Evaluation interpolates linearly between grid
    points; mass pushed beyond the grid by convolution is folded into the
    top bin, which leaves the CDF exact below the grid maximum.
    """

    grid: np.ndarray
    cdf: np.ndarray
    meta: dict

    def __post_init__(self):
        if len(self.grid) != len(self.cdf) or len(self.grid) < 2:
            raise InvalidParamsError("grid and cdf must share a length >= 2")
        if self.grid[0] != 0.0:
            raise InvalidParamsError("area grid must start at 0")
        if np.any(np.diff(self.cdf) < -1e-12):
            raise InvalidParamsError("cdf must be non-decreasing")

    def value_at(self, s):
        """F(s), with F = 0 left of the grid and flat right of it."""
        return np.interp(s, self.grid, self.cdf, left=0.0, right=float(self.cdf[-1]))

    def pmf(self) -> np.ndarray:
        out = np.empty_like(self.cdf)
        out[0] = self.cdf[0]
        out[1:] = np.diff(self.cdf)
        return np.clip(out, 0.0, None)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["area", "cdf"])
            for s, f in zip(self.grid, self.cdf):
                writer.writerow([f"{s:.10g}", f"{f:.10g}"])


def area_grid(p: SystemParams, points: int = GRID_POINTS) -> np.ndarray:
    """Uniform evaluation grid [0, N*W*Tp] shared by the whole pipeline."""
    return np.linspace(0.0, p.N * p.W * p.Tp, points)


def overlap_cdf_oracle(rng: np.random.Generator, p: SystemParams,
                       samples: int = 1_000_000, mode: str = "triangular",
                       points: int = GRID_POINTS) -> InterferenceCdf:
    """Monte Carlo law of the overlap with one interferer, given overlap.

    Draws the interferer start uniform on (-Tp, Tp) and the CFO difference
    either triangular on [-2Fm, 2Fm] (exact difference of two uniform
    CFOs) or uniform on the same support (the coarser model matching the
    closed form). The returned CDF is conditioned on a strictly positive
    area; meta["overlap_prob"] carries the conditioning probability.
    """
    if samples < 1:
        raise DegenerateInputError("oracle needs at least one sample")
    dt = rng.uniform(-p.Tp, p.Tp, size=samples)
    if p.Fm == 0:
        dfq = np.zeros(samples)
    elif mode == "triangular":
        dfq = rng.triangular(-2.0 * p.Fm, 0.0, 2.0 * p.Fm, size=samples)
    elif mode == "uniform":
        dfq = rng.uniform(-2.0 * p.Fm, 2.0 * p.Fm, size=samples)
    else:
        raise ValueError(f"unknown CFO-difference mode {mode!r}")
    areas = np.maximum(p.Tp - np.abs(dt), 0.0) * np.maximum(p.W - np.abs(dfq), 0.0)
    hit = areas[areas > 0.0]
    if hit.size == 0:
        raise DegenerateInputError("no overlapping draw; increase samples")
    grid = area_grid(p, points)
    cdf = np.searchsorted(np.sort(hit), grid, side="right") / hit.size
    meta = {
        "kind": "single-conditional",
        "mode": mode,
        "samples": samples,
        "overlap_prob": hit.size / samples,
        "tp": p.Tp, "w": p.W, "fm": p.Fm,
    }
    return InterferenceCdf(grid, cdf, meta)


def single_overlap_cdf_paper(p: SystemParams,
                             points: int = GRID_POINTS) -> InterferenceCdf:
    """Single-interferer CDF from the clamped closed form, on the grid.

    Every packet in the vulnerable period counts as interfering here
    (overlap_prob = 1), matching the closed form's own convention.
    """
    grid = area_grid(p, points)
    smax = p.W * p.Tp
    inside = np.minimum(grid, smax)
    ccdf, _ = overlap_ccdf_paper(inside, p)
    cdf = 1.0 - ccdf
    meta = {
        "kind": "single-conditional",
        "mode": "paper",
        "overlap_prob": 1.0,
        "tp": p.Tp, "w": p.W, "fm": p.Fm,
    }
    return InterferenceCdf(grid, np.asarray(cdf), meta)


def build_base_cdf(p: SystemParams, *, base: str = "oracle",
                   mode: str = "triangular", rng=None,
                   samples: int = 1_000_000,
                   points: int = GRID_POINTS) -> InterferenceCdf:
    """Single-interferer base law: Monte Carlo oracle or closed form."""
    if base == "oracle":
        if rng is None:
            rng = np.random.default_rng(0)
        return overlap_cdf_oracle(rng, p, samples=samples, mode=mode, points=points)
    if base == "paper":
        return single_overlap_cdf_paper(p, points=points)
    raise ValueError(f"unknown base CDF kind {base!r}")


# ---------------------------------------------------------------------------
# Convolutions and the interferer-count mixture
# ---------------------------------------------------------------------------

def _check_same_grid(a: InterferenceCdf, b: InterferenceCdf) -> None:
    if len(a.grid) != len(b.grid) or not np.allclose(a.grid, b.grid):
        raise ValueError("CDFs live on different grids")


def _convolve_pmf(pa: np.ndarray, pb: np.ndarray) -> np.ndarray:
    """Linear convolution folded back onto the grid length.

    Mass that lands beyond the top bin is accumulated there, so total
    mass is preserved and F(s) stays exact for s below the grid maximum.
    """
    full = np.convolve(pa, pb)
    out = full[: len(pa)].copy()
    out[-1] += full[len(pa):].sum()
    return out


def _pmf_powers(pmf: np.ndarray, n_max: int) -> np.ndarray:
    """Rows 0..n_max of the n-fold self-convolution of pmf."""
    rows = np.zeros((n_max + 1, len(pmf)))
    rows[0, 0] = 1.0
    for n in range(1, n_max + 1):
        rows[n] = _convolve_pmf(rows[n - 1], pmf)
    return rows


def convolve_cdf(a: InterferenceCdf, b: InterferenceCdf) -> InterferenceCdf:
    """Distribution of the sum of two independent areas, on a's grid."""
    _check_same_grid(a, b)
    pmf = _convolve_pmf(a.pmf(), b.pmf())
    cdf = np.minimum(np.cumsum(pmf), 1.0)
    return InterferenceCdf(a.grid, cdf, {"kind": "convolution"})


def _mean_count(mu: float) -> int:
    """Interferer count used by the fixed-count shortcut: ceil(mu) - 1."""
    return max(int(math.ceil(mu)) - 1, 0)


def unconditional_cdf(base: InterferenceCdf, g: float, p: SystemParams,
                      mixture: str = "poisson",
                      tail_tol: float = 1e-9) -> InterferenceCdf:
    """Aggregate overlap-area CDF of one replica at replica rate g.

    Interferers arrive in the 2*Tp vulnerable window as a Poisson process
    with mean mu = 2*g*Tp; each contributes the base law, thinned by the
    base's conditional-overlap probability. mixture selects either the
    full Poisson mixture over the count or the fixed-count shortcut
    ceil(mu) - 1.
    """
    if g < 0:
        raise InvalidParamsError("replica rate must be nonnegative")
    mu = 2.0 * g * p.Tp
    p_ov = base.meta.get("overlap_prob", 1.0)
    pmf1 = base.pmf() * p_ov
    pmf1[0] += 1.0 - p_ov
    if mixture == "poisson":
        if mu == 0.0:
            n_max = 0
        else:
            n_max = int(stats.poisson.ppf(1.0 - tail_tol, mu))
        weights = stats.poisson.pmf(np.arange(n_max + 1), mu)
        mix = weights @ _pmf_powers(pmf1, n_max)
    elif mixture == "mean-count":
        n = _mean_count(mu)
        mix = _pmf_powers(pmf1, n)[n]
    else:
        raise ValueError(f"unknown mixture mode {mixture!r}")
    cdf = np.minimum(np.cumsum(mix), 1.0)
    meta = {"kind": "aggregate", "g": g, "mu": mu, "mixture": mixture,
            "base_mode": base.meta.get("mode")}
    return InterferenceCdf(base.grid, cdf, meta)


# ---------------------------------------------------------------------------
# Outage probabilities
# ---------------------------------------------------------------------------

def _single_threshold(p: SystemParams) -> float:
    return p.W * p.Tp * (1.0 / p.St - 1.0 / p.gamma)


def outage_single(cdf: InterferenceCdf, p: SystemParams) -> float:
    """P(SINR < St) for one replica under the aggregate law."""
    if p.St > p.gamma:
        warnings.warn("threshold exceeds the operating SNR, outage is certain")
        return 1.0
    return 1.0 - float(cdf.value_at(_single_threshold(p)))


def outage_mrc(cdf: InterferenceCdf, p: SystemParams) -> float:
    """Outage of ratio combining across N replicas.

    The per-replica aggregate areas are modeled i.i.d.; their sum is
    compared against W*Tp*(N/St - 1/gamma).
    """
    x = p.W * p.Tp * (p.N / p.St - 1.0 / p.gamma)
    if x < 0:
        return 1.0
    pmf_n = _pmf_powers(cdf.pmf(), p.N)[p.N]
    summed = InterferenceCdf(cdf.grid, np.minimum(np.cumsum(pmf_n), 1.0),
                             {"kind": "replica-sum", "n": p.N})
    return 1.0 - float(summed.value_at(x))


def outage_mrc_sinr(cdf: InterferenceCdf, p: SystemParams,
                    points: int = 4096) -> float:
    """P(sum of branch SINRs < St) with i.i.d. branch interference.

    Exact construction for the summed-SINR decision rule: the aggregate
    area law of one branch is pushed through s = 1/(a/(W*Tp) + 1/gamma)
    onto a uniform SINR grid, convolved N-fold, and read at St. Unlike
    the area-sum form above this matches what an SINR-summing receiver
    actually tests, so it tracks the simulator closely; the area-sum
    form upper-bounds it (splitting interference across branches hurts
    an area total long before it defeats the summed SINR).
    """
    if p.St > p.N * p.gamma:
        return 1.0
    wtp = p.W * p.Tp
    pmf = cdf.pmf()
    s_of_a = 1.0 / (cdf.grid / wtp + 1.0 / p.gamma)
    ds = p.N * p.gamma / (points - 1)
    idx = np.rint(s_of_a / ds).astype(np.int64)
    branch = np.bincount(idx, weights=pmf, minlength=points)[:points]
    total = branch.copy()
    for _ in range(p.N - 1):
        total = _convolve_pmf(total, branch)
    grid = np.arange(total.size) * ds
    return float(np.interp(p.St, grid, np.minimum(np.cumsum(total), 1.0)))


def outage_independent(cdf: InterferenceCdf, p: SystemParams) -> float:
    """Outage without combining: every replica must fail on its own."""
    per_replica = outage_single(cdf, p)
    return per_replica ** p.N


def analytic_outage(base: InterferenceCdf, g: float, p: SystemParams,
                    policy: str = "mrc", mixture: str = "poisson",
                    mrc_mode: str = "sinr") -> float:
    """Full pipeline: base law -> aggregate at rate g -> policy outage.

    mrc_mode selects the summed-SINR construction ("sinr", default, the
    quantity a combining receiver measures) or the area-sum threshold
    form ("area").
    """
    agg = unconditional_cdf(base, g, p, mixture=mixture)
    if policy == "mrc":
        if mrc_mode == "sinr":
            return outage_mrc_sinr(agg, p)
        if mrc_mode == "area":
            return outage_mrc(agg, p)
        raise ValueError(f"unknown mrc_mode {mrc_mode!r}")
    if policy == "independent":
        return outage_independent(agg, p)
    if policy == "single":
        return outage_single(agg, p)
    raise ValueError(f"unknown analytic policy {policy!r}")


# ---------------------------------------------------------------------------
# MMSE combining weights
# ---------------------------------------------------------------------------

def mmse_weights(sigma_x2: float, sigma_i2) -> np.ndarray:
    """MMSE combining weights for N noisy copies of one symbol.

    Solves (sigma_x2 * J + diag(sigma_i2)) w = sigma_x2 * 1 with J the
    all-ones matrix. With equal branch noise the weights are equal and
    the combined SINR is N times the branch SINR.
    """
    noise = np.atleast_1d(np.asarray(sigma_i2, dtype=float))
    if noise.ndim != 1 or noise.size == 0:
        raise DegenerateInputError("need a flat, non-empty noise vector")
    if np.any(noise <= 0):
        raise DegenerateInputError("branch noise powers must be positive")
    if sigma_x2 < 0:
        raise InvalidParamsError("signal power cannot be negative")
    n = noise.size
    a = sigma_x2 * np.ones((n, n)) + np.diag(noise)
    b = sigma_x2 * np.ones(n)
    w = np.linalg.solve(a, b)
    resid = np.max(np.abs(a @ w - b))
    if resid > 1e-9 * max(1.0, float(np.max(np.abs(b)))):
        raise DegenerateInputError(f"ill-conditioned combining system, residual {resid:g}")
    return w


def combined_sinr(sigma_x2: float, sigma_i2, w) -> float:
    """Post-combining SINR (sum w)^2 sx2 / sum(w^2 si2)."""
    noise = np.asarray(sigma_i2, dtype=float)
    w = np.asarray(w, dtype=float)
    denom = float(np.sum(w ** 2 * noise))
    if denom == 0.0:
        return math.inf
    return float(np.sum(w)) ** 2 * sigma_x2 / denom


# ---------------------------------------------------------------------------
# Offered-load fixed point
# ---------------------------------------------------------------------------

@dataclass
class LoadPoint:
    """Operating point of the channel."""

    lambda_agg: float   # aggregate new-report rate, packets/s
    g: float            # replica transmission rate incl. retries, replicas/s
    offered_load: float  # W/(2Fm+W) * g * Tp, dimensionless


@dataclass
class SolveResult:
    load: LoadPoint
    po: float
    status: str       # "converged" | "overload" | "max-iterations"
    iterations: int


def offered_load_of(g: float, p: SystemParams) -> float:
    return p.W / (2.0 * p.Fm + p.W) * g * p.Tp


def solve_offered_load(lambda_agg: float, p: SystemParams, policy: str = "mrc",
                       *, base: InterferenceCdf | None = None,
                       mixture: str = "poisson", damping: float = 0.5,
                       tol: float = 1e-6, max_iter: int = 200,
                       po_ceiling: float = 1.0 - 1e-6) -> SolveResult:
    """Solve g = N*lambda / (1 - Po(g)) by damped fixed-point iteration.

    Retries re-enter the channel, so the replica rate seen on air exceeds
    N*lambda by the retry factor. Divergence (offered traffic beyond the
    sustainable region) is reported via status="overload" with the last
    iterate, never raised.
    """
    if lambda_agg < 0:
        raise InvalidParamsError("arrival rate must be nonnegative")
    if base is None:
        base = build_base_cdf(p)
    g_floor = p.N * lambda_agg
    g = g_floor
    po = analytic_outage(base, g, p, policy, mixture=mixture)
    status = "max-iterations"
    it = 0
    for it in range(1, max_iter + 1):
        po = analytic_outage(base, g, p, policy, mixture=mixture)
        if po >= po_ceiling:
            status = "overload"
            break
        target = g_floor / (1.0 - po)
        g_next = (1.0 - damping) * g + damping * target
        if abs(g_next - g) <= tol * max(1.0, g):
            g = g_next
            status = "converged"
            break
        g = g_next
    point = LoadPoint(lambda_agg, g, offered_load_of(g, p))
    return SolveResult(point, po, status, it)
