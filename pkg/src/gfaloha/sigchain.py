"""Sample-level receiver front end.

Synthesizes preamble-plus-payload packets with a carrier offset, frames
energy events out of a stream, estimates per-packet CFOs with a
periodogram, locates preambles by matched filtering per CFO branch, and
cross-validates peaks across branches through the frequency-dependent
correlation-peak drift of the Zadoff-Chu preamble. Validated packets
are cut out for the decoding stage.

Conventions: all SNRs here are per-sample power ratios of the complex
baseband stream (signal power over complex noise variance at rate Fs).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.signal import fftconvolve

from .params import InvalidParamsError, SystemParams

_PAM_LEVELS = np.array([0.0, 1.0, 2.0, 3.0]) / math.sqrt(3.5)
# Gray labels for level index 0..3
_GRAY_BITS = np.array([[0, 0], [0, 1], [1, 1], [1, 0]], dtype=np.uint8)
_GRAY_INDEX = {(0, 0): 0, (0, 1): 1, (1, 1): 2, (1, 0): 3}


# ---------------------------------------------------------------------------
# Waveform types and synthesis
# ---------------------------------------------------------------------------

@dataclass
class ComplexSignal:
    samples: np.ndarray
    fs: float
    t0: float = 0.0

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.complex128)
        if self.fs <= 0:
            raise InvalidParamsError("sample rate must be positive")

    @property
    def duration(self) -> float:
        return self.samples.size / self.fs

    def time(self) -> np.ndarray:
        return self.t0 + np.arange(self.samples.size) / self.fs


@dataclass
class DetectionEvent:
    start_time: float
    end_time: float
    buffer: ComplexSignal
    frame_len: float
    tail: np.ndarray | None = None   # stream continuing past the buffer


@dataclass
class PeakBranch:
    cfo: float
    positions: np.ndarray   # sample offsets into the event buffer
    magnitudes: np.ndarray
    weight: float = 1.0     # carrier-line strength of this branch


@dataclass
class PeakMap:
    branches: list[PeakBranch] = field(default_factory=list)
    span: int | None = None   # correlation length; None disables edge checks


@dataclass
class ValidatedPeak:
    cfo: float
    position: int
    magnitude: float


@dataclass
class ExtractedSequence:
    z: ComplexSignal
    cfo: float
    tau: float
    partial: bool


def zc_preamble(nzc: int = 23, root: int = 5) -> ComplexSignal:
    """Constant-modulus Zadoff-Chu sequence at symbol rate."""
    if nzc < 3 or nzc % 2 == 0:
        raise InvalidParamsError("preamble length must be odd and >= 3")
    if not (0 < root < nzc) or math.gcd(root, nzc) != 1:
        raise InvalidParamsError("root must be in (0, nzc) and coprime with nzc")
    n = np.arange(nzc)
    return ComplexSignal(np.exp(-1j * math.pi * root * n * (n + 1) / nzc), 1.0)


def pam4_map(bits) -> np.ndarray:
    """Bit pairs to nonnegative 4-PAM amplitudes, unit mean power, Gray."""
    bits = np.asarray(bits, dtype=np.uint8).ravel()
    if bits.size % 2:
        raise InvalidParamsError("bit count must be even for 2 bits/symbol")
    pairs = bits.reshape(-1, 2)
    idx = np.array([_GRAY_INDEX[(int(a), int(b))] for a, b in pairs])
    return _PAM_LEVELS[idx]


def pam4_demap(amplitudes) -> np.ndarray:
    """Nearest-level slicer back to Gray-labeled bit pairs."""
    amp = np.asarray(amplitudes, dtype=float).ravel()
    idx = np.argmin(np.abs(amp[:, None] - _PAM_LEVELS[None, :]), axis=1)
    return _GRAY_BITS[idx].ravel()


def payload_bits_per_packet(p: SystemParams) -> int:
    """Bits filling one Tp packet after the preamble."""
    n_sym = round(p.Tp / p.Tb) - p.Nzc
    if n_sym <= 0:
        raise InvalidParamsError("packet too short for the preamble")
    return 2 * n_sym


def _upsample(symbols: np.ndarray, sps: int) -> np.ndarray:
    # Rectangular pulse: time-frequency support stays Tp x W.
    return np.repeat(symbols, sps)


def synthesize_packet(bits, p: SystemParams, df: float,
                      rng: np.random.Generator | None = None) -> ComplexSignal:
    """Preamble + 4-PAM payload, upsampled to Fs and shifted by df.

    bits=None draws a random full-packet payload from rng.
    """
    p.validate(sample_level=True)
    if bits is None:
        if rng is None:
            raise InvalidParamsError("random payload needs an rng")
        bits = rng.integers(0, 2, size=payload_bits_per_packet(p))
    sps = p.samples_per_symbol
    symbols = np.concatenate([zc_preamble(p.Nzc).samples, pam4_map(bits)])
    x = _upsample(symbols, sps).astype(np.complex128)
    t = np.arange(x.size) / p.Fs
    return ComplexSignal(x * np.exp(2j * math.pi * df * t), p.Fs)


def awgn(sig: ComplexSignal, snr: float,
         rng: np.random.Generator) -> ComplexSignal:
    """Add complex white noise at the given per-sample SNR (linear)."""
    if snr <= 0:
        raise InvalidParamsError("snr must be positive")
    power = float(np.mean(np.abs(sig.samples) ** 2))
    sigma2 = power / snr
    noise = rng.normal(scale=math.sqrt(sigma2 / 2), size=(sig.samples.size, 2))
    return ComplexSignal(sig.samples + noise[:, 0] + 1j * noise[:, 1],
                         sig.fs, sig.t0)


# ---------------------------------------------------------------------------
# Event framing
# ---------------------------------------------------------------------------

def frame_events(signal: ComplexSignal, p: SystemParams,
                 power_threshold: float, gap_symbols: float = 2.0,
                 smooth_symbols: int = 8) -> list[DetectionEvent]:
    """Cut supra-threshold stretches of smoothed power into events.

    Power is box-averaged over smooth_symbols symbols (several, because
    the nonnegative constellation has a zero level and short zero runs
    must not split a packet); runs separated by gaps of at most
    gap_symbols merge, and each run is widened by the smoothing span so
    threshold-crossing lag cannot clip a preamble. Events longer than
    Tmax split into frames no longer than Tmax each. Each event also
    carries up to a packet length of the stream past the detected end
    as an extraction tail (a deep fade can cut a run mid-packet, and a
    preamble validated near the end of the event must still yield a
    complete packet); the search itself never sees the tail.
    """
    if power_threshold <= 0:
        raise InvalidParamsError("power threshold must be positive")
    sps = max(1, round(signal.fs * p.Tb))
    win = max(1, smooth_symbols) * sps
    pw = np.abs(signal.samples) ** 2
    kernel = np.ones(win) / win
    smooth = fftconvolve(pw, kernel, mode="same").real
    above = smooth > power_threshold
    if not above.any():
        return []
    idx = np.flatnonzero(above)
    breaks = np.flatnonzero(np.diff(idx) > gap_symbols * sps)
    guard = win
    run_starts = np.maximum(np.concatenate([[idx[0]], idx[breaks + 1]]) - guard, 0)
    run_ends = np.minimum(np.concatenate([idx[breaks], [idx[-1]]]) + 1 + guard,
                          signal.samples.size)
    # Guard widening can make neighbors touch; merge those.
    merged = [(int(run_starts[0]), int(run_ends[0]))]
    for s, e in zip(run_starts[1:], run_ends[1:]):
        if s <= merged[-1][1]:
            merged[-1] = (merged[-1][0], int(e))
        else:
            merged.append((int(s), int(e)))

    events = []
    max_len = int(round(p.Tmax * signal.fs))
    tail_len = int(round(p.Tp * signal.fs))
    for s, e in merged:
        for fs_ in range(s, e, max_len):
            fe = min(fs_ + max_len, e)
            buf = ComplexSignal(signal.samples[fs_:fe], signal.fs,
                                signal.t0 + fs_ / signal.fs)
            tail = signal.samples[fe: min(fe + tail_len, signal.samples.size)]
            events.append(DetectionEvent(buf.t0, signal.t0 + fe / signal.fs,
                                         buf, buf.duration, tail))
    return events


# ---------------------------------------------------------------------------
# Periodogram CFO estimation
# ---------------------------------------------------------------------------

def _parabolic(logmag: np.ndarray, k: int) -> float:
    """Sub-bin peak refinement on a periodic spectrum."""
    n = logmag.size
    a, b, c = logmag[(k - 1) % n], logmag[k], logmag[(k + 1) % n]
    denom = a - 2 * b + c
    if denom == 0:
        return 0.0
    return float(0.5 * (a - c) / denom)


def periodogram_cfos(ev: DetectionEvent, p: SystemParams,
                     threshold_db: float = 10.0, max_peaks: int = 8,
                     max_cfo: float | None = None) -> list[float]:
    """Carrier-line CFO estimates from the event spectrum.

    The nonnegative constellation puts a discrete line at each packet's
    offset; lines above median + threshold_db and at least one
    resolution bin apart are returned, refined parabolically.
    """
    x = ev.buffer.samples
    if x.size < 64:
        raise InvalidParamsError("event buffer too short for a periodogram")
    if not np.any(x):
        return []
    pad = 4
    nfft = pad * x.size
    spec = np.abs(np.fft.fft(x, nfft))
    freqs = np.fft.fftfreq(nfft, 1.0 / ev.buffer.fs)
    logmag = 20 * np.log10(np.maximum(spec, 1e-300))
    floor = np.median(logmag)
    min_sep = pad  # one pre-padding resolution bin, in padded bins
    limit = (p.Fm + 10.0) if max_cfo is None else max_cfo

    # circular: a carrier near 0 Hz peaks in the DC bin
    is_peak = (spec >= np.roll(spec, 1)) & (spec >= np.roll(spec, -1))
    cand = np.flatnonzero(is_peak & (logmag > floor + threshold_db)
                          & (np.abs(freqs) <= limit))
    cand = cand[np.argsort(spec[cand])[::-1]]
    chosen: list[int] = []
    for k in cand:
        if all(min(abs(k - c), nfft - abs(k - c)) >= min_sep for c in chosen):
            chosen.append(int(k))
        if len(chosen) >= max_peaks:
            break
    out = []
    for k in chosen:
        frac = _parabolic(logmag, k)
        out.append(float(freqs[k] + frac * ev.buffer.fs / nfft))
    return sorted(out)


# ---------------------------------------------------------------------------
# Preamble correlation
# ---------------------------------------------------------------------------

def upsampled_preamble(p: SystemParams) -> np.ndarray:
    return _upsample(zc_preamble(p.Nzc).samples, p.samples_per_symbol)


def correlate_preamble(ev: DetectionEvent, cfo: float, preamble: np.ndarray,
                       eta: float = 0.5) -> tuple[np.ndarray, np.ndarray]:
    """Matched-filter the cfo-demodulated buffer against the preamble.

    Returns local maxima of |correlation| above eta * ||preamble||^2,
    with non-maximum suppression over half a preamble-symbol span.
    The clean full-overlap peak magnitude equals ||preamble||^2.
    """
    y = ev.buffer.samples * np.exp(-2j * math.pi * cfo
                                   * np.arange(ev.buffer.samples.size)
                                   / ev.buffer.fs)
    if y.size < preamble.size:
        return np.empty(0, dtype=np.int64), np.empty(0)
    c = np.abs(fftconvolve(y, np.conj(preamble[::-1]), mode="valid"))
    thr = eta * float(np.sum(np.abs(preamble) ** 2))
    is_max = np.zeros(c.size, dtype=bool)
    if c.size == 1:
        is_max[0] = True
    else:
        is_max[0] = c[0] >= c[1]
        is_max[-1] = c[-1] >= c[-2]
        is_max[1:-1] = (c[1:-1] >= c[:-2]) & (c[1:-1] >= c[2:])
    cand = np.flatnonzero(is_max & (c > thr))
    cand = cand[np.argsort(c[cand])[::-1]]
    sep = max(1, preamble.size // (2 * 23))  # about half a symbol
    chosen: list[int] = []
    for k in cand:
        if all(abs(k - q) > sep for q in chosen):
            chosen.append(int(k))
    chosen.sort()
    pos = np.array(chosen, dtype=np.int64)
    return pos, c[pos]


def peak_map(ev: DetectionEvent, cfos: list[float], p: SystemParams,
             eta: float = 0.5) -> PeakMap:
    """Correlate the event against the preamble on every CFO branch.

    Each branch also records its carrier-line strength (the event
    spectrum sampled at the branch CFO): a real arrival concentrates a
    packet-long tone there while sidelobe lines run well below it.
    """
    x = ev.buffer.samples
    t = np.arange(x.size) / ev.buffer.fs
    pre = upsampled_preamble(p)
    branches = []
    for f in cfos:
        pos, mag = correlate_preamble(ev, f, pre, eta=eta)
        w = float(np.abs(np.sum(x * np.exp(-2j * math.pi * f * t))))
        branches.append(PeakBranch(f, pos, mag, w))
    span = max(0, x.size - pre.size + 1)
    return PeakMap(branches, span)


# ---------------------------------------------------------------------------
# Peak drift table
# ---------------------------------------------------------------------------

@dataclass
class DriftTable:
    cfos: np.ndarray        # Hz, ascending uniform grid
    shifts: np.ndarray      # samples, argmax drift of the correlation peak
    gains: np.ndarray       # peak magnitude relative to the zero-offset peak
    meta: dict
    alt_indptr: np.ndarray  # CSR bounds into alt_lags, one row per cfo
    alt_lags: np.ndarray    # samples, near-top lag set of each cfo

    def _index(self, df: float) -> int:
        return int(np.clip(np.rint((df - self.cfos[0])
                                   / (self.cfos[1] - self.cfos[0])),
                           0, self.cfos.size - 1))

    def shift_at(self, df: float) -> int:
        return int(self.shifts[self._index(df)])

    def gain_at(self, df: float) -> float:
        return float(self.gains[self._index(df)])

    def _window(self, df: float, slack: float) -> slice:
        lo = np.searchsorted(self.cfos, df - slack, side="left")
        hi = np.searchsorted(self.cfos, df + slack, side="right")
        lo = max(0, min(lo, self.cfos.size - 1))
        hi = max(lo + 1, min(hi, self.cfos.size))
        return slice(lo, hi)

    def shifts_window(self, df: float, slack: float) -> np.ndarray:
        """Distinct argmax shifts on [df-slack, df+slack]."""
        return np.unique(self.shifts[self._window(df, slack)])

    def alt_window(self, df: float, slack: float) -> np.ndarray:
        """Union of the near-top lag sets on [df-slack, df+slack].

        Where the drift gain collapses several lags tie within noise, so
        an observed image can sit on any of them; consumers that must
        cover every place an image can appear (cancellation, deferral)
        use this set rather than the argmax alone.
        """
        w = self._window(df, slack)
        return np.unique(self.alt_lags[self.alt_indptr[w.start]:
                                       self.alt_indptr[w.stop]])

    def max_gain_window(self, df: float, slack: float) -> float:
        return float(np.max(self.gains[self._window(df, slack)]))

    def min_gain_window(self, df: float, slack: float) -> float:
        return float(np.min(self.gains[self._window(df, slack)]))


def build_drift_table(nzc: int, tb: float, fs: float,
                      cfo_grid: np.ndarray | None = None,
                      alt_frac: float = 0.8) -> DriftTable:
    """Measure the correlation-peak drift of a CFO-hit preamble.

    For each offset the clean preamble is correlated against its
    modulated copy and the argmax lag is reduced to its cyclic symbol
    lag, so the stored drift steps through whole symbols and stays
    within +-floor(Nzc/2) symbols of zero by construction. The gain is
    the relative peak magnitude; where it collapses toward the sidelobe
    floor the argmax carries no information and the stored lag is
    meaningless (consumers gate on the gain). Magnitude ties resolve to
    the smallest |lag| with the sign of the offset.

    Alongside the argmax each row keeps the set of lags whose magnitude
    reaches alt_frac of the top: near the gain plateaus that set is the
    argmax alone, but where the gain collapses several lags come within
    noise of each other and an observed image can land on any of them.
    """
    sps = round(fs * tb)
    if abs(fs * tb - sps) > 1e-9 or sps < 1:
        raise InvalidParamsError("fs*Tb must be a positive integer")
    if not 0.0 < alt_frac <= 1.0:
        raise InvalidParamsError("alt_frac must lie in (0, 1]")
    if cfo_grid is None:
        cfo_grid = np.arange(-400.0, 401.0)
    cfo_grid = np.asarray(cfo_grid, dtype=float)
    pre = _upsample(zc_preamble(nzc).samples, sps)
    n = pre.size
    t = np.arange(n) / fs
    shifted = pre[None, :] * np.exp(2j * math.pi * cfo_grid[:, None] * t[None, :])
    nfft = 1 << int(math.ceil(math.log2(2 * n - 1)))
    f_pre = np.fft.fft(pre, nfft)
    f_sh = np.fft.fft(shifted, nfft, axis=1)
    corr = np.fft.ifft(f_sh * np.conj(f_pre)[None, :], axis=1)
    # lag k in [-(n-1), n-1] sits at circular index k mod nfft
    lags = np.concatenate([np.arange(0, n), np.arange(-(n - 1), 0)])
    idx = np.concatenate([np.arange(0, n), nfft - np.arange(n - 1, 0, -1)])
    mag = np.abs(corr[:, idx])
    energy = float(np.sum(np.abs(pre) ** 2))
    half = nzc // 2

    def canon(lag: int) -> int:
        # cyclic lag wrapped into half a preamble period, symbol-quantized;
        # linear-correlation complements at Q -+ Nzc*sps are re-expanded
        # by the consumers that need them
        q = (lag + n // 2) % n - n // 2
        return int(np.clip(round(q / sps), -half, half)) * sps

    shifts = np.empty(cfo_grid.size, dtype=np.int64)
    gains = np.empty(cfo_grid.size)
    alt_indptr = np.zeros(cfo_grid.size + 1, dtype=np.int64)
    alt_rows = []
    for i in range(cfo_grid.size):
        top = mag[i].max()
        tie = np.flatnonzero(mag[i] >= top * (1.0 - 1e-9))
        tl = lags[tie]
        best = tl[np.lexsort((-np.sign(tl) * np.sign(cfo_grid[i]), np.abs(tl)))][0]
        shifts[i] = canon(int(best))
        gains[i] = top / energy
        near = np.unique([canon(int(v))
                          for v in lags[mag[i] >= top * alt_frac]])
        alt_rows.append(near)
        alt_indptr[i + 1] = alt_indptr[i] + near.size
    return DriftTable(cfo_grid, shifts, gains,
                      {"nzc": nzc, "tb": tb, "fs": fs, "sps": sps,
                       "alt_frac": alt_frac},
                      alt_indptr, np.concatenate(alt_rows))


# ---------------------------------------------------------------------------
# Successive peak validation
# ---------------------------------------------------------------------------

def spc_resolve(pm: PeakMap, dt: DriftTable, tol: int = 1,
                cfo_slack: float = 2.5, gate_slack: float = 1.0,
                min_gain: float = 0.75, cand_floor: float = 0.82,
                defer_ratio: float = 2.0,
                weight_floor: float = 0.5) -> list[ValidatedPeak]:
    """Cross-branch validation of correlation peaks, strongest first.

    A peak at p in branch j is real if every other branch k that could
    physically see its ghost shows a peak at p + Q(-(cfo_k - cfo_j))
    within +-tol samples. Branches are exempt from giving evidence when
    they hold no peaks at all (a junk carrier line that resolved
    nothing must not veto real packets), when the predicted image gain
    stays below min_gain over a tight +-gate_slack window around the
    offset difference (the image would sit under the correlation
    threshold), or when every predicted position falls outside the
    computed correlation span. Target positions are looked up over the
    wider +-cfo_slack window because Q steps through whole symbols
    within the CFO estimation error.

    Two classes of peak can serve as evidence but are never promoted
    to packets themselves: peaks weaker than cand_floor times the
    clean-preamble energy (a true arrival correlates near full energy
    in its own branch while ghost images are attenuated), and peaks in
    branches whose carrier line is weaker than weight_floor times the
    strongest line in the map (a real packet concentrates a packet-long
    tone in its own branch; ghost branches ride sidelobe lines several
    times weaker). After a peak validates, its predicted image
    constellation is cancelled across all branches before weaker
    candidates are examined, using the full near-top lag sets rather
    than the argmax drifts alone: where the drift gain collapses the
    observed image can sit on any of the near-degenerate lags.
    Survivors within tol samples and a few Hz of a stronger validated
    peak are duplicates of it on a neighbouring branch (the drift is
    zero there) and are dropped.
    """
    branches = pm.branches
    if not branches:
        return []
    energy = float(dt.meta["nzc"] * dt.meta["sps"])
    n_pre = dt.meta["nzc"] * dt.meta["sps"]
    wmax = max(b.weight for b in branches)
    alive = [np.ones(b.positions.size, dtype=bool) for b in branches]
    pool = [(float(b.magnitudes[i]), j, i)
            for j, b in enumerate(branches)
            for i in range(b.positions.size)]
    pool.sort(reverse=True)
    validated: list[ValidatedPeak] = []

    def deferred(j: int, pos: int) -> bool:
        # an overlap conspiracy can push a drift image above its own
        # main peak; when a live rival on a much stronger carrier line
        # explains this candidate as its image, hold the candidate back
        # and let the rival claim the constellation first
        for k, bk in enumerate(branches):
            if k == j or bk.weight < defer_ratio * branches[j].weight:
                continue
            q = dt.alt_window(-(branches[j].cfo - bk.cfo), cfo_slack)
            q = np.concatenate([q, q + n_pre, q - n_pre])
            rooted = alive[k] & (bk.magnitudes >= cand_floor * energy)
            src = bk.positions[rooted]
            if src.size and np.min(np.abs(pos - src[:, None]
                                          - q[None, :])) <= tol:
                return True
        return False

    def examine(mag: float, j: int, i: int, rescue: bool) -> None:
        if (not alive[j][i] or mag < cand_floor * energy
                or branches[j].weight < weight_floor * wmax):
            return
        pos = int(branches[j].positions[i])
        if not rescue and deferred(j, pos):
            return
        required = 0
        missing = 0
        for k, bk in enumerate(branches):
            if k == j or bk.positions.size == 0:
                continue
            delta = -(bk.cfo - branches[j].cfo)
            if dt.max_gain_window(delta, gate_slack) < min_gain:
                continue
            targets = pos + dt.shifts_window(delta, cfo_slack)
            if pm.span is not None:
                targets = targets[(targets >= 0) & (targets < pm.span)]
            if targets.size == 0:
                continue
            required += 1
            live_pos = bk.positions[alive[k]]
            if live_pos.size == 0 or np.min(np.abs(
                    live_pos[:, None] - targets[None, :])) > tol:
                missing += 1
        # a predicted gain just above the gate still leaves the image
        # near the correlation threshold, so a minority of absent
        # images does not disqualify once three or more branches are
        # required
        if missing > (required // 3 if required >= 3 else 0):
            alive[j][i] = False
            return
        validated.append(ValidatedPeak(branches[j].cfo, pos, mag))
        alive[j][i] = False
        # cancel the packet's whole image constellation, not just the
        # evidence that confirmed it, so leftover images cannot later
        # masquerade as packets of their own; a linear correlation
        # splits every cyclic lag into a pair Q and Q -+ Nzc*sps, so the
        # complements are cancelled alongside the tabulated shifts
        for k, bk in enumerate(branches):
            delta = -(bk.cfo - branches[j].cfo)
            q = dt.alt_window(delta, cfo_slack)
            targets = pos + np.concatenate([q, q + n_pre, q - n_pre])
            if bk.positions.size:
                near = np.min(np.abs(bk.positions[:, None]
                                     - targets[None, :]), axis=1) <= tol
                alive[k][near] = False

    for mag, j, i in pool:
        examine(mag, j, i, rescue=False)
    for mag, j, i in pool:
        examine(mag, j, i, rescue=True)
    validated.sort(key=lambda v: -v.magnitude)
    kept: list[ValidatedPeak] = []
    for v in validated:
        if any(abs(v.position - u.position) <= tol
               and abs(v.cfo - u.cfo) <= 2 * cfo_slack for u in kept):
            continue
        kept.append(v)
    kept.sort(key=lambda v: v.position)
    return kept


# ---------------------------------------------------------------------------
# Sequence extraction and payload decoding
# ---------------------------------------------------------------------------

def extract_sequences(ev: DetectionEvent, validated: list[ValidatedPeak],
                      p: SystemParams) -> list[ExtractedSequence]:
    """Cut each validated packet out of the demodulated event buffer.

    Packets running past the buffer end finish from the event's
    extraction tail; a cut stays partial only when the stream itself
    ends first.
    """
    out = []
    n_pkt = round(p.Tp * ev.buffer.fs)
    for v in validated:
        if not (0 <= v.position < ev.buffer.samples.size):
            raise InvalidParamsError("validated offset outside the event buffer")
        x = ev.buffer.samples
        need = v.position + n_pkt
        if need > x.size and ev.tail is not None and ev.tail.size:
            x = np.concatenate([x, ev.tail[: need - x.size]])
        y = x * np.exp(-2j * math.pi * v.cfo * np.arange(x.size) / ev.buffer.fs)
        seg = y[v.position: v.position + n_pkt]
        partial = seg.size < n_pkt
        z = ComplexSignal(seg, ev.buffer.fs,
                          ev.buffer.t0 + v.position / ev.buffer.fs)
        out.append(ExtractedSequence(z, v.cfo, z.t0, partial))
    return out


def fine_cfo(seq: ComplexSignal, p: SystemParams, pad: int = 32) -> float:
    """Residual offset from the preamble after coarse demodulation.

    The wiped preamble leaves a tone at the residual; the refinement is
    circular so residuals straddling zero interpolate across the FFT
    wrap instead of collapsing to the bin edge.
    """
    pre = upsampled_preamble(p)
    if seq.samples.size < pre.size:
        raise InvalidParamsError("sequence shorter than the preamble")
    r = seq.samples[: pre.size] * np.conj(pre)
    nfft = pad * pre.size
    spec = np.abs(np.fft.fft(r, nfft))
    k = int(np.argmax(spec))
    frac = _parabolic(20 * np.log10(np.maximum(spec, 1e-300)), k)
    f = np.fft.fftfreq(nfft, 1.0 / seq.fs)[k]
    return float(f + frac * seq.fs / nfft)


def demap_payload(seq: ComplexSignal, p: SystemParams,
                  refine_cfo: bool = True) -> np.ndarray:
    """Coherent payload demodulation of an extracted packet.

    Removes the residual CFO measured on the preamble, equalizes with
    the preamble-estimated complex gain, integrates each symbol, and
    slices to Gray bits.
    """
    x = seq.samples
    if refine_cfo:
        df = fine_cfo(seq, p)
        x = x * np.exp(-2j * math.pi * df * np.arange(x.size) / seq.fs)
    pre = upsampled_preamble(p)
    gain = np.vdot(pre, x[: pre.size]) / np.vdot(pre, pre)
    if gain == 0:
        raise InvalidParamsError("zero preamble gain, nothing to equalize")
    z = x / gain
    payload = z[pre.size:]
    sps = p.samples_per_symbol
    n_sym = payload.size // sps
    sym = payload[: n_sym * sps].reshape(n_sym, sps).mean(axis=1)
    return pam4_demap(sym.real)


# ---------------------------------------------------------------------------
# I/Q file exchange
# ---------------------------------------------------------------------------

def write_iq(path, sig: ComplexSignal) -> None:
    """Interleaved little-endian float32 I/Q plus a JSON sidecar."""
    inter = np.empty(2 * sig.samples.size, dtype="<f4")
    inter[0::2] = sig.samples.real
    inter[1::2] = sig.samples.imag
    inter.tofile(path)
    meta = {"fs": sig.fs, "t0": sig.t0, "count": int(sig.samples.size),
            "format": "f32le-interleaved"}
    with open(str(path) + ".json", "w") as fh:
        json.dump(meta, fh, indent=1)
        fh.write("\n")


def read_iq(path) -> ComplexSignal:
    with open(str(path) + ".json") as fh:
        meta = json.load(fh)
    raw = np.fromfile(path, dtype="<f4")
    if raw.size != 2 * meta["count"]:
        raise InvalidParamsError("I/Q payload does not match its header")
    return ComplexSignal(raw[0::2].astype(np.float64)
                         + 1j * raw[1::2].astype(np.float64),
                         float(meta["fs"]), float(meta["t0"]))
