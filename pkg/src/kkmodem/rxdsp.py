"""Receiver chain: KK field reconstruction, downshift, static equalisation,
widely-linear DDLMS equalisation and symbol synchronisation.

Every FFT stage has a standalone form (whole signal, output aligned with
input) and a streaming form used by the pipeline (``*_stream``), which takes
``halo + frame`` and returns ``len(frame)`` outputs delayed by the stage's
block delay.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction

import numba
import numpy as np
import scipy.fft as sfft
from scipy.signal import fftconvolve

from .channel import FiberSpec, LinkSpec, codes_to_float
from .constellation import ConstellationSpec, map_bits
from .frames import ComplexFrame
from .ols import BlockGeometry, standalone, stream_apply, stream_filter
from .txdsp import TxConfig, rrc_taps

# relative floor applied before the logarithm
EPS_REL = 1e-12


class EqualizerDiverged(RuntimeError):
    pass


class SyncError(RuntimeError):
    pass


@dataclass(frozen=True)
class KkConfig:
    fft_size: int = 1024
    hop: int | None = None
    window_policy: str = "rectangular"
    upsample_factor: int = 1

    def __post_init__(self):
        if self.window_policy != "rectangular":
            raise ValueError(f"unsupported window policy {self.window_policy!r}")
        if self.upsample_factor < 1:
            raise ValueError("upsample_factor must be >= 1")
        self.geometry  # validates fft_size and hop

    @property
    def geometry(self) -> BlockGeometry:
        return BlockGeometry(self.fft_size, self.hop or self.fft_size // 2)

    @property
    def warmup(self) -> int:
        return self.fft_size // 2


# ---------------------------------------------------------------- KK front end


def int_to_float(frame: ComplexFrame) -> ComplexFrame:
    """ADC codes to intensity in units of the ADC reference level."""
    lsb = frame.meta.get("lsb")
    if lsb is None:
        raise ValueError("ADC frame lacks 'lsb' metadata")
    return frame.with_samples(codes_to_float(frame.samples, lsb))


def _floor(x: np.ndarray, eps: float | None) -> tuple[np.ndarray, int, float]:
    x = np.asarray(x, dtype=np.float64)
    if eps is None:
        m = float(np.mean(x)) if x.size else 0.0
        if not m > 0:
            raise ValueError("intensity frame has no positive mean; no field to reconstruct")
        eps = EPS_REL * m
    low = x < eps
    return np.where(low, eps, x), int(low.sum()), eps


def kk_front_end(intensity: ComplexFrame, eps: float | None = None) -> tuple[ComplexFrame, ComplexFrame]:
    """Square root and half-log of the clamped intensity.

    Samples below ``eps`` (default 1e-12 times the frame mean) are raised to
    ``eps``; the number clamped goes to ``meta['clamp_count']`` of both outputs.
    """
    x = np.asarray(intensity.samples, dtype=np.float64)
    if not np.any(x):
        raise ValueError("all-zero intensity frame; no field to reconstruct")
    clamped, n, eps = _floor(x, eps)
    meta = {"clamp_count": n, "eps": eps}
    return (intensity.with_samples(np.sqrt(clamped), meta=meta),
            intensity.with_samples(0.5 * np.log(clamped), meta=meta))


def hilbert_multiplier(n: int) -> np.ndarray:
    """-i*sign(f) on an rfft grid of length n; DC and Nyquist bins are zero."""
    m = np.full(n // 2 + 1, -1j)
    m[0] = 0.0
    if n % 2 == 0:
        m[-1] = 0.0
    return m


def _hilbert_blocks(n: int):
    mult = hilbert_multiplier(n)

    def fn(blocks):
        return sfft.irfft(sfft.rfft(blocks, axis=1) * mult, n=n, axis=1)

    return fn


def hilbert_stream(x: np.ndarray, config: KkConfig, n_out: int) -> np.ndarray:
    g = config.geometry
    return stream_apply(np.asarray(x, dtype=np.float64), g, _hilbert_blocks(g.fft_size), n_out,
                        out_dtype=np.float64)


def hilbert_block(log_amp: ComplexFrame, config: KkConfig | None = None) -> ComplexFrame:
    """Block-wise Hilbert transform by overlap-save.

    The first and last ``fft_size // 2`` output samples are warm-up
    (``meta['warmup']``) and should not be scored.
    """
    config = config or KkConfig()
    x = np.asarray(log_amp.samples, dtype=np.float64)
    if x.size < config.fft_size:
        raise ValueError(f"frame of {x.size} samples is shorter than fft_size {config.fft_size}")
    # padding with the mean avoids a step at the frame edges
    phase = standalone(x, config.geometry, lambda z, n: hilbert_stream(z, config, n), pad=float(np.mean(x)))
    return log_amp.with_samples(phase, meta={"warmup": config.warmup})


def hilbert_full(x: np.ndarray) -> np.ndarray:
    """Single-shot DFT Hilbert transform over the whole signal."""
    x = np.asarray(x, dtype=np.float64)
    return sfft.irfft(sfft.rfft(x) * hilbert_multiplier(x.size), n=x.size)


def reconstruct_field(amplitude: ComplexFrame, phase: ComplexFrame) -> ComplexFrame:
    a = np.asarray(amplitude.samples, dtype=np.float64)
    p = np.asarray(phase.samples, dtype=np.float64)
    if a.shape != p.shape:
        raise ValueError(f"length mismatch: {a.size} amplitude vs {p.size} phase samples")
    return amplitude.with_samples(a * np.exp(1j * p))


def _kk_upsampled_blocks(n: int, factor: int, eps: float):
    """Per-block KK at ``factor`` times the block rate, field returned at the block rate."""
    nu = n * factor
    mult = hilbert_multiplier(nu)
    half = n // 2

    def fn(blocks):
        spec = sfft.rfft(blocks, axis=1)
        spec[:, -1] *= 0.5  # split the Nyquist bin between +/- fs/2
        up = sfft.irfft(spec, n=nu, axis=1) * factor
        logu = 0.5 * np.log(np.maximum(up, eps))
        phase = sfft.irfft(sfft.rfft(logu, axis=1) * mult, n=nu, axis=1)
        e = sfft.fft(np.exp(logu + 1j * phase), axis=1)
        keep = np.concatenate([e[:, :half], e[:, nu - half :]], axis=1)
        return sfft.ifft(keep, axis=1) / factor

    return fn


def kk_stream(intensity: np.ndarray, config: KkConfig, n_out: int, eps: float) -> tuple[np.ndarray, int]:
    """Field reconstruction over ``halo + frame``; returns the delayed field and clamp count."""
    g = config.geometry
    x = np.asarray(intensity, dtype=np.float64)
    if config.upsample_factor > 1:
        clamps = int(np.count_nonzero(x[g.margin : g.margin + n_out] < eps))
        fn = _kk_upsampled_blocks(g.fft_size, config.upsample_factor, eps)
        return stream_apply(x, g, fn, n_out), clamps
    xc, _, _ = _floor(x, eps)
    log_amp = 0.5 * np.log(xc)
    phase = stream_apply(log_amp, g, _hilbert_blocks(g.fft_size), n_out, out_dtype=np.float64)
    seg = x[g.margin : g.margin + n_out]
    lam = log_amp[g.margin : g.margin + n_out]
    if lam.size < n_out:
        lam = np.concatenate([lam, np.full(n_out - lam.size, 0.5 * math.log(eps))])
    return np.exp(lam + 1j * phase), int(np.count_nonzero(seg < eps))


def kk_receive(intensity: ComplexFrame, config: KkConfig | None = None, eps: float | None = None) -> ComplexFrame:
    """Complete KK reconstruction of a whole intensity frame, aligned with its input."""
    config = config or KkConfig()
    x = np.asarray(intensity.samples, dtype=np.float64)
    if x.size < config.fft_size:
        raise ValueError(f"frame of {x.size} samples is shorter than fft_size {config.fft_size}")
    _, _, eps = _floor(x, eps)
    # a carrier-level pad keeps log-intensity free of steps at the frame edges
    e = standalone(x, config.geometry, lambda z, n: kk_stream(z, config, n, eps)[0], pad=float(np.mean(x)))
    return intensity.with_samples(e, meta={"clamp_count": int(np.count_nonzero(x < eps)),
                                           "warmup": config.warmup})


# ------------------------------------------------------------------ downshift


def _phase_ratio(offset: float, sample_rate: float) -> Fraction:
    return Fraction(offset / sample_rate).limit_denominator(1 << 20)


def downshift_phase(n: np.ndarray, offset: float, sample_rate: float) -> np.ndarray:
    """2*pi*offset*n/fs reduced modulo 2*pi exactly for integer sample indices."""
    r = _phase_ratio(offset, sample_rate)
    if abs(float(r) - offset / sample_rate) > 1e-15:
        frac = np.mod(np.asarray(n, dtype=np.float64) * (offset / sample_rate), 1.0)
    else:
        frac = np.mod(np.asarray(n, dtype=np.int64) * r.numerator, r.denominator) / r.denominator
    return 2 * np.pi * frac


def downshift(frame: ComplexFrame, offset: float) -> ComplexFrame:
    """Multiply by exp(-i*2*pi*offset*n/fs), n the absolute sample index."""
    if abs(offset) >= frame.sample_rate / 2:
        raise ValueError(f"offset {offset:g} Hz is outside +/- half the sample rate")
    n = frame.start + np.arange(len(frame))
    return frame.with_samples(np.asarray(frame.samples) * np.exp(-1j * downshift_phase(n, offset, frame.sample_rate)))


@dataclass
class Downshifter:
    """Stream-order downshift; refuses frames that do not continue the stream."""

    offset: float
    sample_rate: float
    next_start: int | None = None

    def __call__(self, frame: ComplexFrame) -> ComplexFrame:
        if self.next_start is not None and frame.start != self.next_start:
            raise RuntimeError(f"downshift expected sample {self.next_start}, got frame starting at {frame.start}")
        out = downshift(frame, self.offset)
        self.next_start = frame.start + len(frame)
        return out


# ------------------------------------------------------- static equaliser


@dataclass
class StaticEqFilter:
    freq_response: np.ndarray
    taps: np.ndarray
    sample_rate: float
    input_sps: int = 4
    output_sps: int = 2
    fft_size: int = 4096
    hop: int = 2048

    def __post_init__(self):
        if self.freq_response.shape != (self.fft_size,):
            raise ValueError("freq_response length must equal fft_size")
        if not np.all(np.isfinite(self.freq_response)):
            raise ValueError("static filter has non-finite coefficients")

    @property
    def geometry(self) -> BlockGeometry:
        return BlockGeometry(self.fft_size, self.hop)

    @property
    def decimation(self) -> int:
        return self.input_sps // self.output_sps


def raised_cosine_spectrum(f: np.ndarray, baud: float, rolloff: float) -> np.ndarray:
    """Raised-cosine spectrum, unit gain in the flat band."""
    a = np.abs(f) / baud
    lo, hi = (1 - rolloff) / 2, (1 + rolloff) / 2
    h = np.zeros_like(a)
    h[a <= lo] = 1.0
    mid = (a > lo) & (a < hi)
    h[mid] = 0.5 * (1 + np.cos(np.pi / rolloff * (a[mid] - lo)))
    return h


def tx_filter_response(tx: TxConfig, f: np.ndarray, chunk: int = 1 << 14) -> np.ndarray:
    """DTFT of the (centred, real, even) transmit taps at frequencies f."""
    taps = rrc_taps(tx.rolloff, tx.rrc_span_symbols, tx.sps)
    k = np.arange(taps.size) - taps.size // 2
    out = np.empty(f.size)
    for s in range(0, f.size, chunk):
        arg = 2 * np.pi * np.outer(f[s : s + chunk], k) / tx.sample_rate
        out[s : s + chunk] = np.cos(arg) @ taps
    return out


def cd_inverse(f: np.ndarray, spec: FiberSpec, distance_km: float, carrier_offset: float) -> np.ndarray:
    """Inverse fibre dispersion for a band sitting ``carrier_offset`` above the optical carrier."""
    w = 2 * np.pi * (f + carrier_offset)
    return np.exp(-0.5j * spec.beta2 * distance_km * w**2)


def design_static_filter(link: LinkSpec, tx: TxConfig, distance_km: float, fft_size: int = 4096,
                         sample_rate: float | None = None, hop: int | None = None,
                         design_points: int = 1 << 16) -> StaticEqFilter:
    """CD inverse x matched filter x 2-sps band mask, as an FIR run by overlap-save.

    The matched part equalises the received band to a raised-cosine response
    (RC / H_tx), which is the RRC matched filter for an ideal RRC transmitter.
    The gain sqrt(sps_tx * (1 + cspr)) undoes the receiver's normalisation to
    unit mean intensity so that symbols come out at unit energy. The design
    is sampled on a dense grid and truncated to ``fft_size - hop + 1`` taps,
    which makes the overlap-save output equal linear convolution.
    """
    rate = sample_rate or 4 * tx.baud
    sps = rate / tx.baud
    if abs(sps - 4) > 1e-9:
        raise ValueError(f"static filter expects 4 samples per symbol, got {sps:g}")
    hop = hop or fft_size // 2
    geom = BlockGeometry(fft_size, hop)
    m = geom.margin
    nd = max(design_points, fft_size)
    f = sfft.fftfreq(nd, 1 / rate)
    rc = raised_cosine_spectrum(f, tx.baud, tx.rolloff)
    inband = rc > 0
    g = np.zeros(nd, dtype=np.complex128)
    htx = tx_filter_response(tx, f[inband])
    cspr = 10 ** (tx.cspr_db / 10)
    g[inband] = math.sqrt(tx.sps * (1 + cspr)) * rc[inband] / htx
    g *= cd_inverse(f, link.span, distance_km, tx.carrier_offset)
    g[np.abs(f) >= tx.baud] = 0.0
    h = sfft.ifft(g)
    taps = np.concatenate([h[nd - m :], h[: m + 1]])
    padded = np.zeros(fft_size, dtype=np.complex128)
    padded[: m + 1] = taps[m:]
    padded[fft_size - m :] = taps[:m]
    return StaticEqFilter(sfft.fft(padded), taps, rate, 4, 2, fft_size, hop)


def static_stream(x: np.ndarray, filt: StaticEqFilter, n_out: int) -> np.ndarray:
    return stream_filter(x, filt.geometry, filt.freq_response, n_out, filt.decimation)


def static_equalize(frame: ComplexFrame, filt: StaticEqFilter) -> ComplexFrame:
    """Overlap-save static filtering with frequency-domain 4 -> 2 sps decimation."""
    if not math.isclose(frame.sample_rate, filt.sample_rate, rel_tol=1e-9):
        raise ValueError(f"frame rate {frame.sample_rate:g} Hz does not match filter rate {filt.sample_rate:g} Hz")
    d = filt.decimation
    x = np.asarray(frame.samples, dtype=np.complex128)
    n = x.size - x.size % d
    y = standalone(x[:n], filt.geometry, lambda z, k: static_stream(z, filt, k), d)
    return frame.with_samples(y, sample_rate=frame.sample_rate / d, start=frame.start // d,
                              meta={"warmup": filt.geometry.margin // d})


def static_full(x: np.ndarray, filt: StaticEqFilter) -> np.ndarray:
    """Linear convolution with the filter taps, then keep every ``decimation``-th sample."""
    m = (filt.taps.size - 1) // 2
    y = fftconvolve(np.asarray(x, dtype=np.complex128), filt.taps)[m : m + len(x)]
    return y[:: filt.decimation]


# ----------------------------------------------------------- DDLMS equaliser

N_TAPS = 4


@dataclass
class WlEqualizerState:
    w: np.ndarray
    v: np.ndarray
    constellation: ConstellationSpec
    mu: float = 1e-3
    mu_final: float = 2.5e-4
    mu_switch_symbols: int = 10_000
    input_sps: int = 2
    samples_processed: int = 0
    # adaptation is suspended until this many symbols have gone by
    hold_symbols: int = 0
    history: np.ndarray = field(default_factory=lambda: np.zeros(N_TAPS - 1, dtype=np.complex128))
    initial_norm: float = 1.0

    def __post_init__(self):
        self.w = np.asarray(self.w, dtype=np.complex128).copy()
        self.v = np.asarray(self.v, dtype=np.complex128).copy()
        if self.w.shape != (N_TAPS,) or self.v.shape != (N_TAPS,):
            raise ValueError(f"equalizer needs {N_TAPS} taps in both branches")
        if not self.mu > 0 or not self.mu_final > 0:
            raise ValueError("mu must be positive")

    @classmethod
    def initial(cls, constellation: ConstellationSpec, spike: int = 2, **kw) -> "WlEqualizerState":
        w = np.zeros(N_TAPS, dtype=np.complex128)
        w[spike] = 1.0
        return cls(w, np.zeros(N_TAPS, dtype=np.complex128), constellation, **kw)

    @property
    def symbols_processed(self) -> int:
        return self.samples_processed // self.input_sps

    def copy(self) -> "WlEqualizerState":
        return WlEqualizerState(self.w.copy(), self.v.copy(), self.constellation, self.mu, self.mu_final,
                                self.mu_switch_symbols, self.input_sps, self.samples_processed,
                                self.hold_symbols, self.history.copy(), self.initial_norm)


@numba.njit(nogil=True, cache=True)
def _ddlms_kernel(ext, w, v, points, n0, mu, mu_final, switch, hold, limit, adapt):
    ns = (ext.size - 3) // 2
    y = np.empty(ns, dtype=np.complex128)
    dec = np.empty(ns, dtype=np.int64)
    for n in range(ns):
        c = 3 + 2 * n
        acc = 0j
        for k in range(4):
            u = ext[c - k]
            acc += w[k] * u + v[k] * np.conj(u)
        best = 0
        bd = np.inf
        for p in range(points.size):
            dr = acc.real - points[p].real
            di = acc.imag - points[p].imag
            d = dr * dr + di * di
            if d < bd:
                bd = d
                best = p
        y[n] = acc
        dec[n] = best
        idx = n0 + n
        if adapt and idx >= hold:
            step = mu if idx - hold < switch else mu_final
            e = points[best] - acc
            norm = 0.0
            for k in range(4):
                u = ext[c - k]
                w[k] += step * e * np.conj(u)
                v[k] += step * e * u
                norm += abs(w[k]) ** 2 + abs(v[k]) ** 2
            if not norm <= limit:
                return y[: n + 1], dec[: n + 1], n
    return y, dec, -1


@dataclass
class DdlmsResult:
    decisions: np.ndarray  # constellation point indices
    soft: np.ndarray
    state: WlEqualizerState

    @property
    def decided_symbols(self) -> np.ndarray:
        return self.state.constellation.points[self.decisions]


def ddlms_wl(frame: ComplexFrame, state: WlEqualizerState, adapt: bool = True) -> DdlmsResult:
    """Four-tap T/2-spaced widely-linear decision-directed LMS.

    y[n] = sum_k w_k u[2n-k] + v_k conj(u[2n-k]); the last three input
    samples of a frame are kept in the state so consecutive frames equalise
    as one stream. Returns decisions, soft outputs and the updated state
    (the input state is not modified). Raises ``EqualizerDiverged`` when the
    tap norm exceeds ten times its initial value.
    """
    u = np.asarray(frame.samples, dtype=np.complex128)
    if state.input_sps != 2:
        raise ValueError("equalizer expects 2 samples per symbol")
    if u.size % 2:
        raise ValueError("frame must hold an even number of samples")
    st = state.copy()
    ext = np.concatenate([st.history, u])
    limit = (10.0 * st.initial_norm) ** 2
    y, dec, bad = _ddlms_kernel(ext, st.w, st.v, st.constellation.points, st.symbols_processed,
                                st.mu, st.mu_final, st.mu_switch_symbols, st.hold_symbols, limit, adapt)
    if bad >= 0:
        raise EqualizerDiverged(f"DDLMS diverged at symbol {st.symbols_processed + bad}")
    st.history = ext[ext.size - (N_TAPS - 1) :].copy()
    st.samples_processed += u.size
    return DdlmsResult(dec, y, st)


# ------------------------------------------------------------- synchroniser

ROTATIONS = (0, 90, 180, 270)


@dataclass(frozen=True)
class SyncInfo:
    symbol_offset: int
    rotation_deg: int
    delay_samples: int
    correlation: float

    @property
    def rotation(self) -> complex:
        return 1j ** (self.rotation_deg // 90)


def synchronize(decisions, reference_bits, spec: ConstellationSpec, max_delay: int | None = None,
                sps: int = 2, threshold: float = 0.5) -> SyncInfo:
    """Find (delay, rotation) with decisions[n + delay] ~ rotation * reference[n].

    Normalised correlation is computed over the overlap for every delay in
    ``[0, max_delay]`` by FFT; the best delay wins, ties go to the smallest
    delay and then the smallest rotation.
    """
    d = np.asarray(decisions, dtype=np.complex128).ravel()
    ref = map_bits(spec, reference_bits)
    if d.size < 4096:
        raise ValueError(f"synchronisation needs at least 4096 decisions, got {d.size}")
    if max_delay is None:
        max_delay = max(0, d.size - 4096)
    max_delay = min(max_delay, d.size - 1)
    n = min(ref.size, d.size)
    ref = ref[:n]
    size = sfft.next_fast_len(d.size + n)
    c = sfft.ifft(sfft.fft(d, size) * np.conj(sfft.fft(ref, size)))[: max_delay + 1]
    overlap = np.minimum(n, d.size - np.arange(max_delay + 1))
    e_d = np.concatenate([[0.0], np.cumsum(np.abs(d[::-1]) ** 2)])[::-1]
    e_r = np.concatenate([[0.0], np.cumsum(np.abs(ref) ** 2)])
    # energies of d[delay:delay+overlap] and ref[:overlap]
    lags = np.arange(max_delay + 1)
    ed = e_d[lags] - e_d[np.minimum(lags + overlap, d.size)]
    er = e_r[overlap]
    scores = np.empty((4, max_delay + 1))
    for r in range(4):
        scores[r] = (c * (1j ** r)).real / np.sqrt(np.maximum(ed * er, 1e-300))
    best = scores.max()
    tol = 1e-9 * abs(best)
    hits = np.argwhere(scores >= best - tol)
    r_idx, delay = min(((int(r), int(k)) for r, k in hits), key=lambda t: (t[1], t[0]))
    # c*(1j**r) real means decisions ~ (-1j)**r * ref; report that rotation
    rot = (4 - r_idx) % 4
    if best < threshold:
        raise SyncError(f"sync failed: best correlation {best:.3f} below {threshold}")
    return SyncInfo(delay, ROTATIONS[rot], delay * sps, float(best))
