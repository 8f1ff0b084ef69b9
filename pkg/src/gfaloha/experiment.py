"""Load sweeps, figure-data emission and receiver validation.

The orchestrator runs the analytic chain and the Monte Carlo simulator
over a shared load grid and writes one CSV per figure with analytic and
empirical columns side by side, so model-vs-simulation divergence shows
up in the data instead of hiding in plotting code. All randomness is
keyed off one master seed through per-cell substreams; a rerun with the
same config writes byte-identical CSVs regardless of worker scheduling.
"""

from __future__ import annotations

import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import interference as itf
from . import kpi as kpi_mod
from . import mcsim
from . import sigchain as sg
from .params import (EnergyParams, InvalidParamsError, SystemParams,
                     load_params)

FIGURES = ("reliability", "ee", "lifetime", "delay", "se")
_FIG_KPI = {
    "reliability": "success",
    "ee": "energy_efficiency",
    "lifetime": "battery_lifetime",
    "delay": "expected_delay",
    "se": "spectral_efficiency",
}
CSV_HEADER = ("figure", "kpi", "load", "scheme", "policy", "n_replicas",
              "cr", "analytic", "empirical", "empirical_ci", "status",
              "divergence")

# substream kinds; part of the reproducibility contract
_KIND_KPI, _KIND_REL, _KIND_GRANTED = 0, 1, 2


@dataclass
class ExperimentConfig:
    """Sweep definition carrying everything a rerun needs.

    One master seed drives every cell through keyed substreams, so the
    per-cell streams are distinct and independent of execution order by
    construction. The KPI figures (ee, lifetime, delay, se) sweep
    kpi_replicas under kpi_policy with retries on; the reliability
    figure sweeps reliability_replicas x cr_grid under the
    clean-fraction policy with retries off (single-attempt success, the
    quantity the success-probability curves show).
    """

    system: SystemParams = field(default_factory=SystemParams)
    energy: EnergyParams = field(default_factory=EnergyParams)
    loads: tuple = (0.01, 0.02, 0.05, 0.1, 0.2, 0.35, 0.5, 0.75)
    kpi_replicas: tuple = (2,)
    kpi_policy: str = "mrc"
    reliability_replicas: tuple = (1, 2, 4)
    cr_grid: tuple = (1.0, 0.5)
    reps: int = 3
    packets_per_point: int = 20000
    max_retries: int = 5
    seed: int = 1234
    out_dir: str = "results"
    figures: tuple = FIGURES
    paper_literal: bool = False    # closed-form base law instead of the oracle
    mixture: str = "poisson"       # interferer-count mixture mode
    oracle_samples: int = 1_000_000
    low_load_cutoff: float = 0.2   # loads the divergence flag checks
    divergence_tol: float = 0.03
    receiver_trials: int = 1000
    workers: int = 1

    def validate(self) -> "ExperimentConfig":
        self.system.validate()
        self.energy.validate()
        loads = tuple(self.loads)
        if any(b <= a for a, b in zip(loads, loads[1:])):
            raise InvalidParamsError("load grid must be strictly ascending")
        if any(x <= 0 for x in loads):
            raise InvalidParamsError("loads must be positive")
        if self.reps < 1:
            raise InvalidParamsError("need at least one repetition")
        if self.packets_per_point < 1 or self.receiver_trials < 1:
            raise InvalidParamsError("sample sizes must be positive")
        if self.max_retries < 0 or self.workers < 1:
            raise InvalidParamsError("max_retries >= 0 and workers >= 1")
        unknown = set(self.figures) - set(FIGURES)
        if unknown:
            raise InvalidParamsError(f"unknown figures: {sorted(unknown)}")
        if self.kpi_policy not in ("mrc", "sc", "none"):
            raise InvalidParamsError(f"unknown policy {self.kpi_policy!r}")
        if self.mixture not in ("poisson", "mean-count"):
            raise InvalidParamsError(f"unknown mixture {self.mixture!r}")
        if not self.kpi_replicas or not self.reliability_replicas:
            raise InvalidParamsError("replica-count lists must be nonempty")
        if any(not (0.0 < c <= 1.0) for c in self.cr_grid):
            raise InvalidParamsError("cr values must lie in (0, 1]")
        return self

    @classmethod
    def from_file(cls, path) -> "ExperimentConfig":
        """Build from a JSON config with system/energy/experiment sections."""
        p, e = load_params(path)
        with open(path) as fh:
            raw = json.load(fh)
        exp = dict(raw.get("experiment", {}))
        known = {f.name for f in fields(cls)} - {"system", "energy"}
        unknown = set(exp) - known
        if unknown:
            raise InvalidParamsError(
                f"unknown experiment keys: {sorted(unknown)}")
        for key in ("loads", "kpi_replicas", "reliability_replicas",
                    "cr_grid", "figures"):
            if key in exp:
                exp[key] = tuple(exp[key])
        return cls(system=p, energy=e, **exp).validate()


# ---------------------------------------------------------------------------
# Sweep execution
# ---------------------------------------------------------------------------

def _horizon(lam: float, cfg: ExperimentConfig, p: SystemParams) -> float:
    return max(cfg.packets_per_point / lam, 10 * p.M * p.Tp)


def _run_cell(args):
    kind, seed, key, lam, horizon, p, e, policy, cr, retries = args
    rng = mcsim.rng_for(seed, kind, *key)
    if kind == _KIND_GRANTED:
        return mcsim.run_granted_baseline(rng, lam, horizon, p, e)
    return mcsim.run_trial(rng, lam, horizon, p, e, policy,
                           cr=cr, max_retries=retries)


def _execute(jobs: list, workers: int) -> list:
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(_run_cell, jobs))
    return [_run_cell(j) for j in jobs]


def _mean_ci(vals: list[float]) -> tuple[float, float]:
    arr = np.asarray(vals, dtype=float)
    return float(arr.mean()), mcsim._ci95(arr)


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return f"{v:.10g}"
    return str(v)


def _write_csv(path: Path, rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(",".join(CSV_HEADER) + "\n")
        for row in rows:
            fh.write(",".join(_fmt(row[k]) for k in CSV_HEADER) + "\n")


def _granted_status(lam: float) -> str:
    attempts, _, stable = kpi_mod.ra_contention(lam)
    return "" if stable else "unstable"


def run_experiment(cfg: ExperimentConfig) -> dict:
    """Run the configured sweep and write figure CSVs plus a summary.

    Emits fig-<name>.csv for every requested figure (header-only when
    the load grid is empty) and summary.json with the crossover loads
    where the granted baseline starts beating grant-free access per
    KPI, evaluated separately on the analytic and the empirical
    columns. Non-convergent analytic fixed points mark their rows via
    the status column; the run continues.
    """
    cfg.validate()
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    loads = tuple(cfg.loads)
    p0, e0 = cfg.system, cfg.energy

    base = None
    if loads:
        base = itf.build_base_cdf(
            p0, base="paper" if cfg.paper_literal else "oracle",
            rng=np.random.default_rng(cfg.seed), samples=cfg.oracle_samples)

    need_kpi = any(f != "reliability" for f in cfg.figures)
    need_rel = "reliability" in cfg.figures

    # --- empirical cells -------------------------------------------------
    jobs, tags = [], []
    for li, load in enumerate(loads):
        if need_kpi:
            for ni, n in enumerate(cfg.kpi_replicas):
                pn = p0.with_replicas(n)
                lam = mcsim.nominal_lambda(load, pn)
                for rep in range(cfg.reps):
                    jobs.append((_KIND_KPI, cfg.seed, (li, ni, rep), lam,
                                 _horizon(lam, cfg, pn), pn, e0,
                                 cfg.kpi_policy, p0.St / p0.gamma,
                                 cfg.max_retries))
                    tags.append(("kpi", load, n, None, rep))
            lam = mcsim.nominal_lambda(load, p0)
            for rep in range(cfg.reps):
                jobs.append((_KIND_GRANTED, cfg.seed, (li, rep), lam,
                             _horizon(lam, cfg, p0), p0, e0, "", 0.0, 0))
                tags.append(("granted", load, None, None, rep))
        if need_rel:
            for ni, n in enumerate(cfg.reliability_replicas):
                pn = p0.with_replicas(n)
                lam = mcsim.nominal_lambda(load, pn)
                for ci, cr in enumerate(cfg.cr_grid):
                    for rep in range(cfg.reps):
                        jobs.append((_KIND_REL, cfg.seed, (li, ni, ci, rep),
                                     lam, _horizon(lam, cfg, pn), pn, e0,
                                     "sc", cr, 0))
                        tags.append(("rel", load, n, cr, rep))
    results = _execute(jobs, cfg.workers)
    cells: dict[tuple, list] = {}
    for tag, res in zip(tags, results):
        cells.setdefault(tag[:4], []).append(res)

    # --- analytic rows ----------------------------------------------------
    analytic: dict[tuple, tuple] = {}    # (load, n) -> (KpiReport, po, status)
    if need_kpi:
        for load in loads:
            for n in cfg.kpi_replicas:
                pn = p0.with_replicas(n)
                lam = mcsim.nominal_lambda(load, pn)
                policy = ("independent" if cfg.kpi_policy == "none"
                          else cfg.kpi_policy)
                if policy == "sc":
                    analytic[(load, n)] = (None, None, "")
                    continue
                res = itf.solve_offered_load(lam, pn, policy, base=base,
                                             mixture=cfg.mixture)
                rep = kpi_mod.grant_free_kpis(lam, res.po, pn, e0)
                analytic[(load, n)] = (rep, res.po, res.status)

    # --- figure rows --------------------------------------------------
    figure_rows: dict[str, list[dict]] = {f: [] for f in cfg.figures}
    for fig in cfg.figures:
        kpi_name = _FIG_KPI[fig]
        if fig == "reliability":
            for load in loads:
                for n in cfg.reliability_replicas:
                    for cr in cfg.cr_grid:
                        cell = cells[("rel", load, n, cr)]
                        emp, ci = _mean_ci([1.0 - c.outage for c in cell])
                        figure_rows[fig].append({
                            "figure": fig, "kpi": kpi_name, "load": load,
                            "scheme": "grant-free", "policy": "sc",
                            "n_replicas": n, "cr": cr, "analytic": None,
                            "empirical": emp, "empirical_ci": ci,
                            "status": "", "divergence": ""})
            continue
        for load in loads:
            for n in cfg.kpi_replicas:
                cell = cells[("kpi", load, n, None)]
                rep_a, po_a, status = analytic[(load, n)]
                emp, ci = _mean_ci([getattr(c.kpis, kpi_name) for c in cell])
                po_e = float(np.mean([c.outage for c in cell]))
                diverged = ""
                if po_a is not None and load <= cfg.low_load_cutoff \
                        and abs(po_a - po_e) > cfg.divergence_tol:
                    diverged = "divergent"
                figure_rows[fig].append({
                    "figure": fig, "kpi": kpi_name, "load": load,
                    "scheme": "grant-free", "policy": cfg.kpi_policy,
                    "n_replicas": n, "cr": p0.St / p0.gamma,
                    "analytic": (None if rep_a is None
                                 else getattr(rep_a, kpi_name)),
                    "empirical": emp, "empirical_ci": ci,
                    "status": status, "divergence": diverged})
            cell = cells[("granted", load, None, None)]
            lam = mcsim.nominal_lambda(load, p0)
            rep_a = kpi_mod.granted_kpis(lam, p0, e0)
            emp, ci = _mean_ci([getattr(c.kpis, kpi_name) for c in cell])
            figure_rows[fig].append({
                "figure": fig, "kpi": kpi_name, "load": load,
                "scheme": "granted", "policy": "granted",
                "n_replicas": None, "cr": None,
                "analytic": getattr(rep_a, kpi_name),
                "empirical": emp, "empirical_ci": ci,
                "status": _granted_status(lam), "divergence": ""})

    files = {}
    for fig in cfg.figures:
        path = out / f"fig-{fig}.csv"
        _write_csv(path, figure_rows[fig])
        files[fig] = str(path)

    summary = {
        "config": _config_echo(cfg),
        "crossover_loads": _crossovers(cfg, figure_rows),
        "files": files,
    }
    with open(out / "summary.json", "w") as fh:
        json.dump(summary, fh, indent=1)
        fh.write("\n")
    return summary


def _config_echo(cfg: ExperimentConfig) -> dict:
    echo = asdict(cfg)
    for key, val in echo.items():
        if isinstance(val, tuple):
            echo[key] = list(val)
    return echo


# KPI comparison direction: does a larger value win?
_HIGHER_BETTER = {"energy_efficiency": True, "battery_lifetime": True,
                  "spectral_efficiency": True, "expected_delay": False}


def _crossovers(cfg: ExperimentConfig, figure_rows: dict) -> dict:
    """Smallest load where granted beats grant-free, per KPI and N.

    Evaluated separately on the analytic and empirical columns; null
    when the inequality never flips inside the swept grid.
    """
    out: dict = {}
    for fig, rows in figure_rows.items():
        if fig == "reliability":
            continue
        kpi_name = _FIG_KPI[fig]
        higher = _HIGHER_BETTER[kpi_name]
        granted = {r["load"]: r for r in rows if r["scheme"] == "granted"}
        for n in cfg.kpi_replicas:
            gf = [r for r in rows
                  if r["scheme"] == "grant-free" and r["n_replicas"] == n]
            entry = {}
            for col in ("analytic", "empirical"):
                found = None
                for r in gf:
                    a, b = r[col], granted[r["load"]][col]
                    if a is None or b is None:
                        continue
                    if (b > a) if higher else (b < a):
                        found = r["load"]
                        break
                entry[col] = found
            out.setdefault(kpi_name, {})[f"n={n}"] = entry
    return out


# ---------------------------------------------------------------------------
# Receiver validation
# ---------------------------------------------------------------------------

def _decode_stream(samples: np.ndarray, p: SystemParams, dt: sg.DriftTable,
                   power_threshold: float) -> list[tuple[int, float, object]]:
    """Full chain over a sample stream: (position, cfo, bits|None) triples."""
    out = []
    stream = sg.ComplexSignal(samples, p.Fs)
    for ev in sg.frame_events(stream, p, power_threshold=power_threshold):
        pm = sg.peak_map(ev, sg.periodogram_cfos(ev, p), p)
        off = int(round(ev.start_time * p.Fs))
        vs = sg.spc_resolve(pm, dt)
        for v, sq in zip(vs, sg.extract_sequences(ev, vs, p)):
            bits = None if sq.partial else sg.demap_payload(sq.z, p)
            out.append((off + v.position, v.cfo, bits))
    return out


def validate_receiver(cfg: ExperimentConfig) -> dict:
    """Exercise the sample-level chain on its synthetic suites.

    Four checks: drift-table properties and build determinism, a
    noise-free single packet decoded bit-exactly, single-packet
    decoding at SNR gamma over receiver_trials random draws, and the
    random two-packet suite with its measured miss and false-positive
    rates (pass below 5% and 1%). Writes the report JSON into the
    output directory and returns it.
    """
    cfg.validate()
    p = cfg.system
    p.validate(sample_level=True)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    n_trials = cfg.receiver_trials
    nbits = sg.payload_bits_per_packet(p)
    n_pkt = round(p.Tp * p.Fs)
    thr = 1.4 / p.gamma   # smoothed-power gate over the noise floor 1/gamma

    dt = sg.build_drift_table(p.Nzc, p.Tb, p.Fs)
    dt2 = sg.build_drift_table(p.Nzc, p.Tb, p.Fs)
    bound = p.Nzc // 2
    drift = {
        "q_zero_symbols": dt.shift_at(0.0) // p.samples_per_symbol,
        "q_max_symbols": int(np.max(np.abs(dt.shifts))) // p.samples_per_symbol,
        "bound_symbols": bound,
        "deterministic": bool(np.array_equal(dt.shifts, dt2.shifts)
                              and np.array_equal(dt.gains, dt2.gains)),
    }
    drift["pass"] = (drift["q_zero_symbols"] == 0
                     and drift["q_max_symbols"] <= bound
                     and drift["deterministic"])

    rng = np.random.default_rng(cfg.seed)
    bits = rng.integers(0, 2, nbits).astype(np.uint8)
    clean = np.zeros(2 * n_pkt, dtype=complex)
    pk = sg.synthesize_packet(bits, p, 31.0)
    clean[300: 300 + n_pkt] += pk.samples
    got = _decode_stream(clean, p, dt, power_threshold=0.1)
    errs = (nbits if len(got) != 1 or got[0][2] is None
            else int(np.sum(got[0][2] != bits)))
    noise_free = {"validated": len(got), "bit_errors": errs,
                  "pass": len(got) == 1 and errs == 0}

    missed = bad = 0
    for _ in range(n_trials):
        tb = rng.integers(0, 2, nbits).astype(np.uint8)
        cfo = rng.uniform(-p.Fm, p.Fm)
        s0 = int(rng.integers(200, 1200))
        sig = np.zeros(2 * n_pkt, dtype=complex)
        sig[s0: s0 + n_pkt] += sg.synthesize_packet(tb, p, cfo).samples
        noisy = sg.awgn(sg.ComplexSignal(sig, p.Fs), p.gamma, rng)
        hit = [g for g in _decode_stream(noisy.samples, p, dt, thr)
               if abs(g[0] - s0) <= 1]
        if not hit or hit[0][2] is None:
            missed += 1
        elif not np.array_equal(hit[0][2], tb):
            bad += 1
    single = {"trials": n_trials, "missed": missed, "bit_error_trials": bad,
              "pass": missed == 0 and bad == 0}

    tot = miss2 = n_val = false = 0
    for _ in range(n_trials):
        cfos = rng.uniform(-p.Fm, p.Fm, 2)
        starts = np.sort(rng.integers(200, 2200, 2))
        sig = np.zeros(3 * n_pkt, dtype=complex)
        truth = []
        for c, s0 in zip(cfos, starts):
            sig[s0: s0 + n_pkt] += sg.synthesize_packet(
                None, p, c, rng=rng).samples
            truth.append((int(s0), float(c)))
        noisy = sg.awgn(sg.ComplexSignal(sig, p.Fs), p.gamma, rng)
        got = _decode_stream(noisy.samples, p, dt, thr)
        n_val += len(got)
        used = [False] * len(got)
        for s0, c in truth:
            tot += 1
            for i, g in enumerate(got):
                if not used[i] and abs(g[0] - s0) <= 1 and abs(g[1] - c) <= 3.0:
                    used[i] = True
                    break
            else:
                miss2 += 1
        false += used.count(False)
    two = {"trials": n_trials, "miss_rate": miss2 / tot if tot else 0.0,
           "false_rate": false / n_val if n_val else 0.0}
    two["pass"] = two["miss_rate"] < 0.05 and two["false_rate"] < 0.01

    report = {"drift": drift, "single_noise_free": noise_free,
              "single_snr": single, "two_packet": two,
              "pass": all(x["pass"] for x in (drift, noise_free, single, two))}
    with open(out / "receiver-validation.json", "w") as fh:
        json.dump(report, fh, indent=1)
        fh.write("\n")
    return report
