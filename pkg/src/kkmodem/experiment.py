"""Glue between the transmitter, link and receiver for streamed runs.

A run is a stream of ADC frames of ``buffer_samples`` codes. Frames are
simulated independently (``SimulatedSource`` tickets, expanded by the
``channel`` stage) with a guard interval on both sides that is discarded,
so the ADC stream does not depend on how it is cut into frames, only on
the seeds. The stream starts ``lead_samples`` before symbol 0; that stretch
carries the bare carrier and lets the receiver's block stages and the
equaliser settle.
"""

from __future__ import annotations

import hashlib
import math
import threading
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.fft import next_fast_len

from . import rxdsp
from .channel import AdcConfig, DetectorConfig, LinkSpec, adc, launch, photodetect, propagate_link
from .constellation import (
    DEFAULT_FEC_THRESHOLDS,
    BinRecord,
    ConstellationSpec,
    QReport,
    build_constellation,
    decide,
    indices_to_bits,
    make_report,
    _q_or_nan,
)
from .frames import ComplexFrame
from .pipeline import STATEFUL, PipelineConfig, StageSpec
from .pipeline import run as run_pipeline
from .txdsp import TxConfig, add_carrier, bits_for_symbols, nominal_signal_power, shape, symbols_for_range

GUARD_SYMBOLS = 512
LEAD_SAMPLES = 8192
# symbols after symbol 0 before the equaliser starts adapting
HOLD_SYMBOLS = 64


@dataclass(frozen=True)
class SystemSetup:
    order: int = 4
    distance_km: float = 0.0
    tx: TxConfig = field(default_factory=TxConfig)
    link: LinkSpec = field(default_factory=lambda: LinkSpec(ase_enabled=False, nonlinearity_enabled=False))
    detector: DetectorConfig = field(default_factory=DetectorConfig)
    adc: AdcConfig = field(default_factory=AdcConfig)
    kk: rxdsp.KkConfig = field(default_factory=rxdsp.KkConfig)
    static_fft_size: int = 4096
    mu: float = 1e-3
    mu_final: float = 2.5e-4
    mu_switch_symbols: int = 10_000

    @property
    def constellation(self) -> ConstellationSpec:
        return build_constellation(self.order)

    @property
    def rx_sps(self) -> int:
        return int(round(self.adc.sample_rate / self.tx.baud))


@dataclass
class FrameTicket:
    """Placeholder for an ADC frame that has not been simulated yet."""

    stream_index: int
    start: int
    n_samples: int


class SimulatedSource:
    """Tickets for consecutive ADC frames covering ``n_symbols`` symbols after the lead-in."""

    def __init__(self, setup: SystemSetup, n_symbols: int, buffer_samples: int,
                 lead_samples: int = LEAD_SAMPLES):
        self.setup = setup
        sps = setup.rx_sps
        if buffer_samples % (2 * sps):
            raise ValueError("buffer_samples must be a multiple of two symbols")
        self.buffer_samples = buffer_samples
        self.lead = lead_samples
        total = lead_samples + n_symbols * sps + 4096
        self.n_frames = -(-total // buffer_samples)

    def __iter__(self):
        for k in range(self.n_frames):
            yield FrameTicket(k, -self.lead + k * self.buffer_samples, self.buffer_samples)

    def __len__(self):
        return self.n_frames


def _tx_chunk(setup: SystemSetup, first_symbol: int, n_symbols: int, stream_index: int) -> ComplexFrame:
    tx = setup.tx
    sym = symbols_for_range(setup.constellation, tx.seed, first_symbol, n_symbols)
    bb = shape(sym, tx, start_symbol=first_symbol, stream_index=stream_index)
    fr = add_carrier(bb, tx, nominal_signal_power(tx))
    fr.meta["nominal_power"] = fr.meta["carrier_amplitude"] ** 2 + fr.meta["signal_power"]
    return fr


def simulate_chunk(setup: SystemSetup, start: int, n_samples: int, stream_index: int,
                   reference: float | None = None, guard_symbols: int = GUARD_SYMBOLS):
    """Intensity (before the ADC) for ADC samples ``[start, start + n_samples)``."""
    tx, sps = setup.tx, setup.rx_sps
    if start % sps or n_samples % sps:
        raise ValueError("frame boundaries must fall on symbol boundaries")
    s0 = start // sps - guard_symbols
    # extra trailing guard makes every FFT length 5-smooth
    ns = next_fast_len(n_samples // sps + 2 * guard_symbols)
    fr = _tx_chunk(setup, s0, ns, stream_index)
    if setup.distance_km:
        fr = propagate_link(launch(fr, setup.link), setup.link, setup.distance_km)
    else:
        fr = launch(fr, setup.link)
    res = adc(photodetect(fr, setup.detector), setup.adc, reference)
    g = guard_symbols * sps
    codes = res.frame.samples[g : g + n_samples]
    return res.frame.with_samples(codes, start=start, stream_index=stream_index,
                                  meta={"clip_fraction": res.clip_fraction}), res.reference


def calibrate_reference(setup: SystemSetup, n_symbols: int = 8192) -> float:
    """Mean detected intensity, fixed once per run so every frame shares one ADC scale."""
    if setup.adc.reference is not None:
        return setup.adc.reference
    _, ref = simulate_chunk(setup, 0, n_symbols * setup.rx_sps, stream_index=1 << 30)
    return ref


def channel_stage(setup: SystemSetup, reference: float) -> StageSpec:
    def fn(ticket: FrameTicket, halo):
        frame, _ = simulate_chunk(setup, ticket.start, ticket.n_samples, ticket.stream_index, reference)
        return frame

    return StageSpec("channel", fn)


# ------------------------------------------------------------- receiver


def _shifted(frame: ComplexFrame, samples, delay: int, decimate: int = 1, **meta) -> ComplexFrame:
    start = frame.start - delay
    if start % decimate:
        raise ValueError("frame start is not aligned with the decimation grid")
    return frame.with_samples(samples, start=start // decimate,
                              sample_rate=frame.sample_rate / decimate, meta=meta)


def receiver_stages(setup: SystemSetup) -> list[StageSpec]:
    """int-to-float, KK, downshift, static EQ (4 -> 2 sps), DDLMS, as pipeline stages."""
    kk = setup.kk
    kg = kk.geometry
    filt = rxdsp.design_static_filter(setup.link, setup.tx, setup.distance_km, setup.static_fft_size,
                                      sample_rate=setup.adc.sample_rate)
    sg = filt.geometry
    spec = setup.constellation
    # the ADC maps the mean intensity to 1, so the log floor is fixed
    eps = rxdsp.EPS_REL

    def to_float(frame, halo):
        return rxdsp.int_to_float(frame)

    def kk_fn(frame, halo):
        x = np.concatenate([halo, frame.samples])
        e, _ = rxdsp.kk_stream(x, kk, len(frame), eps)
        clamps = int(np.count_nonzero(frame.samples < eps))
        return _shifted(frame, e, kg.delay, clamp_count=clamps)

    def shift_fn(frame, halo, state):
        return state(frame), state

    def static_fn(frame, halo):
        x = np.concatenate([halo, frame.samples])
        y = rxdsp.static_stream(x, filt, len(frame))
        return _shifted(frame, y, sg.delay, filt.decimation)

    def ddlms_fn(frame, halo, state):
        if state.samples_processed == 0:
            state = state.copy()
            state.hold_symbols = max(0, HOLD_SYMBOLS - frame.start // 2)
        res = rxdsp.ddlms_wl(frame, state)
        out = frame.with_samples(res.decisions, sample_rate=frame.sample_rate / 2, start=frame.start // 2,
                                 meta={"tap_norm": float(np.sqrt(np.sum(np.abs(res.state.w) ** 2)
                                                                  + np.sum(np.abs(res.state.v) ** 2)))})
        return out, res.state

    eq0 = rxdsp.WlEqualizerState.initial(spec, mu=setup.mu, mu_final=setup.mu_final,
                                         mu_switch_symbols=setup.mu_switch_symbols)
    return [
        StageSpec("int_to_float", to_float),
        StageSpec("kk", kk_fn, halo_samples=kg.halo),
        StageSpec("downshift", shift_fn, STATEFUL, 0,
                  rxdsp.Downshifter(setup.tx.carrier_offset, setup.adc.sample_rate)),
        StageSpec("static_eq", static_fn, halo_samples=sg.halo),
        StageSpec("ddlms", ddlms_fn, STATEFUL, 0, eq0),
    ]


class BerCounter:
    """Streaming sink: synchronises once, then counts bit errors in time bins.

    Decision frames carry the nominal index of their first symbol in
    ``start``; the synchroniser measures the remaining offset and the
    quadrant ambiguity. Symbols before ``first_symbol`` are ignored, as are
    those past ``n_symbols``. Memory use is independent of run length.
    """

    SYNC_SYMBOLS = 8192
    SYNC_SEARCH = 64

    def __init__(self, spec: ConstellationSpec, seed: int, first_symbol: int, n_symbols: int,
                 bin_symbols: int | None = None, symbol_rate: float = 1e9, thresholds=None):
        self.spec = spec
        self.seed = seed
        self.first = first_symbol
        self.end = first_symbol + n_symbols
        self.bin_symbols = bin_symbols
        self.symbol_rate = symbol_rate
        self.thresholds = DEFAULT_FEC_THRESHOLDS if thresholds is None else thresholds
        self.sync: rxdsp.SyncInfo | None = None
        self.correction = 0
        self.remap: np.ndarray | None = None
        self._pending: list[tuple[int, np.ndarray]] = []
        self.errors = 0
        self.bits = 0
        self.bins: list[BinRecord] = []
        self._bin_err = 0
        self._bin_bits = 0
        self._bin_start: int | None = None
        self.clamp_count = 0
        self.digest = hashlib.sha256()
        self.sync_error: Exception | None = None

    def __call__(self, frame: ComplexFrame) -> None:
        if self.sync_error is not None:
            return
        if self.sync is None:
            self._pending.append((frame.start, np.asarray(frame.samples)))
            try:
                self._try_sync()
            except rxdsp.SyncError as e:
                self.sync_error = e
                self._pending = []
            return
        self._count(frame.start, np.asarray(frame.samples))

    def _try_sync(self):
        start = self._pending[0][0]
        dec = np.concatenate([d for _, d in self._pending])
        w = self.SYNC_SEARCH
        lo = self.first - w // 2 - start
        if lo < 0:
            raise ValueError("first counted symbol precedes the decision stream")
        if dec.size < lo + self.SYNC_SYMBOLS + w:
            return
        window = self.spec.points[dec[lo : lo + self.SYNC_SYMBOLS + w]]
        ref_bits = bits_for_symbols(self.seed, self.spec.bits_per_symbol, self.first, self.SYNC_SYMBOLS)
        info = rxdsp.synchronize(window, ref_bits, self.spec, max_delay=w)
        self.sync = info
        # window[m] holds nominal symbol first - w/2 + m, which matches
        # reference symbol first + m - delay
        self.correction = w // 2 - info.symbol_offset
        self.remap = decide(self.spec, self.spec.points * np.conj(info.rotation))
        self._pending = []
        self._count(start, dec)

    def _count(self, nominal_start: int, dec: np.ndarray):
        true0 = nominal_start + self.correction
        lo = max(self.first, true0)
        hi = min(self.end, true0 + dec.size)
        if hi <= lo:
            return
        idx = self.remap[dec[lo - true0 : hi - true0]]
        self.digest.update(idx.astype(np.int16).tobytes())
        rx = indices_to_bits(self.spec, idx)
        k = self.spec.bits_per_symbol
        tx = bits_for_symbols(self.seed, k, lo, hi - lo)
        per_symbol = (rx != tx).reshape(-1, k).sum(axis=1)
        self.errors += int(per_symbol.sum())
        self.bits += per_symbol.size * k
        if self.bin_symbols:
            self._bin(lo, per_symbol, k)

    def _bin(self, lo: int, per_symbol: np.ndarray, k: int):
        pos = 0
        n = per_symbol.size
        while pos < n:
            if self._bin_start is None:
                self._bin_start = lo + pos
            take = min(n - pos, self.bin_symbols - self._bin_bits // k)
            self._bin_err += int(per_symbol[pos : pos + take].sum())
            self._bin_bits += take * k
            pos += take
            if self._bin_bits == self.bin_symbols * k:
                self._close_bin()

    def _close_bin(self):
        ber = self._bin_err / self._bin_bits
        t = (self._bin_start - self.first) / self.symbol_rate
        self.bins.append(BinRecord(t, ber, _q_or_nan(ber), self._bin_err, self._bin_bits))
        self._bin_err = self._bin_bits = 0
        self._bin_start = None

    def finish(self) -> QReport:
        if self.sync is None and self._pending:
            try:
                self._try_sync()
            except rxdsp.SyncError as e:
                self.sync_error = e
        if self.sync is None and self.sync_error is None:
            self.sync_error = rxdsp.SyncError("not enough symbols to synchronise")
        if self.bin_symbols and self._bin_bits >= self.bin_symbols * self.spec.bits_per_symbol // 2:
            self._close_bin()
        return make_report(self.errors, self.bits, self.bins, self.thresholds)


@dataclass
class PointResult:
    report: QReport
    sync: rxdsp.SyncInfo | None
    sync_error: Exception | None
    clamp_count: int
    clip_fraction: float
    digest: str
    throughput: object = None
    events: list = field(default_factory=list)

    @property
    def sync_ok(self) -> bool:
        return self.sync is not None and self.sync_error is None


def run_point(setup: SystemSetup, n_symbols: int, pipeline: PipelineConfig | None = None,
              warmup_symbols: int = 4096, bin_symbols: int | None = None, thresholds=None,
              source=None, reference: float | None = None) -> PointResult:
    """Simulate (or replay) one operating point and count errors.

    ``source`` may supply ADC frames directly (replay); otherwise frames are
    simulated. Errors are counted over symbols
    ``[warmup_symbols, warmup_symbols + n_symbols)``.
    """
    pipeline = pipeline or PipelineConfig(buffer_samples=1 << 18)
    stages = receiver_stages(setup)
    if source is None:
        ref = reference if reference is not None else calibrate_reference(setup)
        source = SimulatedSource(setup, warmup_symbols + n_symbols, pipeline.buffer_samples)
        stages = [channel_stage(setup, ref)] + stages
    counter = BerCounter(setup.constellation, setup.tx.seed, warmup_symbols, n_symbols,
                         bin_symbols, setup.tx.baud, thresholds)
    stats = {"clamp": 0, "clip": 0.0}
    lock = threading.Lock()

    def sink(frame):
        counter(frame)

    # clamp and clip statistics ride on intermediate frames; collect them via wrappers
    def tap(stage: StageSpec, key: str, meta_key: str):
        fn = stage.fn

        def wrapped(frame, halo):
            out = fn(frame, halo)
            with lock:
                stats[key] += out.meta.get(meta_key, 0)
            return out

        return replace(stage, fn=wrapped)

    stages = [tap(s, "clamp", "clamp_count") if s.name == "kk" else s for s in stages]
    if stages[0].name == "channel":
        stages[0] = tap(stages[0], "clip", "clip_fraction")
    result = run_pipeline(source, stages, pipeline, sink, sample_rate=setup.adc.sample_rate)
    report = counter.finish()
    n_frames = max(1, result.report.frames)
    return PointResult(report, counter.sync, counter.sync_error, int(stats["clamp"]),
                       stats["clip"] / n_frames, counter.digest.hexdigest(), result.report, result.events)


def ber_confidence(errors: int, bits: int, z: float = 1.96) -> tuple[float, float]:
    """Wilson score interval for a binomial proportion."""
    if bits <= 0:
        return float("nan"), float("nan")
    p = errors / bits
    den = 1 + z * z / bits
    c = (p + z * z / (2 * bits)) / den
    h = z * math.sqrt(p * (1 - p) / bits + z * z / (4 * bits * bits)) / den
    return max(0.0, c - h), min(1.0, c + h)
