"""Multi-span fibre link, square-law photodetector and band-limited ADC.

Frames in the optical domain carry field samples in sqrt(W) with the
optical carrier of the test channel at 0 Hz. Fibre propagation follows
dE/dz = -(alpha/2) E - i (beta2/2) d2E/dt2 + i gamma |E|^2 E, so the linear
step multiplies the spectrum by exp(+i beta2/2 w^2 L).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from fractions import Fraction

import numpy as np
import scipy.fft as sfft
from scipy.signal import resample_poly

from .frames import ComplexFrame

C_LIGHT = 299_792_458.0
PLANCK = 6.62607015e-34
N2_SILICA = 2.6e-20
WAVELENGTH = 1550.51e-9
# 79 loaded WDM carriers plus the test channel
N_WDM_CHANNELS = 80


class CalibrationError(ValueError):
    """Raised when a frame reaches the link without a launch-power calibration."""


@dataclass(frozen=True)
class FiberSpec:
    alpha_db_km: float = 0.154
    dispersion_ps_nm_km: float = 20.5
    length_km: float = 100.0
    aeff_m2: float = 112e-12
    n2_m2_w: float = N2_SILICA
    wavelength_m: float = WAVELENGTH
    gamma_override: float | None = None

    def __post_init__(self):
        if self.alpha_db_km < 0:
            raise ValueError("alpha must be >= 0")
        if self.length_km <= 0:
            raise ValueError("length_km must be > 0")
        if self.gamma < 0:
            raise ValueError("gamma must be >= 0")

    @property
    def gamma(self) -> float:
        """Nonlinear coefficient in 1/(W km)."""
        if self.gamma_override is not None:
            return self.gamma_override
        return 2 * math.pi * self.n2_m2_w / (self.wavelength_m * self.aeff_m2) * 1e3

    @property
    def alpha_np_km(self) -> float:
        """Power attenuation coefficient in 1/km."""
        return self.alpha_db_km * math.log(10) / 10

    @property
    def beta2(self) -> float:
        """Group-velocity dispersion in s^2/km."""
        d = self.dispersion_ps_nm_km * 1e-12 / 1e-9  # s/m per km
        return -d * self.wavelength_m**2 / (2 * math.pi * C_LIGHT)

    @property
    def carrier_frequency(self) -> float:
        return C_LIGHT / self.wavelength_m

    def effective_length(self, length_km: float | None = None) -> float:
        length = self.length_km if length_km is None else length_km
        a = self.alpha_np_km
        return length if a == 0 else (1 - math.exp(-a * length)) / a


@dataclass(frozen=True)
class LinkSpec:
    spans: int = 100
    span: FiberSpec = field(default_factory=FiberSpec)
    launch_power_total_dbm: float = 20.0
    channel_offset_db: float = 0.0
    n_channels: int = N_WDM_CHANNELS
    amplifier_noise_figure_db: float = 5.0
    ase_enabled: bool = True
    nonlinearity_enabled: bool = True
    ssfm_step_km: float = 50.0
    # extra circular-Gaussian noise per span standing in for inter-channel
    # nonlinear interference from the unsimulated WDM load, total PSD in W/Hz
    loading_psd: float = 0.0
    seed: int = 1

    def __post_init__(self):
        if self.spans < 0:
            raise ValueError("spans must be >= 0")
        if not 0 < self.ssfm_step_km <= self.span.length_km:
            raise ValueError(f"ssfm_step_km must lie in (0, {self.span.length_km}]")

    @property
    def channel_power_dbm(self) -> float:
        return self.launch_power_total_dbm - 10 * math.log10(self.n_channels) + self.channel_offset_db

    @property
    def channel_power_w(self) -> float:
        return 1e-3 * 10 ** (self.channel_power_dbm / 10)

    @property
    def span_gain(self) -> float:
        """Amplifier power gain restoring one span's loss."""
        return math.exp(self.span.alpha_np_km * self.span.length_km)

    def ase_psd(self) -> float:
        """Total (two-quadrature) ASE PSD added by one amplifier, W/Hz."""
        nf = 10 ** (self.amplifier_noise_figure_db / 10)
        return (self.span_gain - 1) * PLANCK * self.span.carrier_frequency * nf

    def with_offset(self, offset_db: float) -> "LinkSpec":
        return replace(self, channel_offset_db=offset_db)


@dataclass(frozen=True)
class DetectorConfig:
    bandwidth: float = 6.5e9
    optical_filter_bandwidth: float | None = 5e9
    optical_filter_center: float = 0.516e9
    # additive Gaussian at the detector output, std relative to mean photocurrent
    noise_std: float = 0.0
    seed: int = 2


@dataclass(frozen=True)
class AdcConfig:
    sample_rate: float = 4e9
    analog_bandwidth: float = 1e9
    bits: int = 8
    # clip level relative to ``reference``
    full_scale: float = 3.0
    # absolute input level mapped to 1.0; None -> mean of the first input
    reference: float | None = None

    def __post_init__(self):
        if self.sample_rate <= 0:
            raise ValueError("sample_rate must be positive")
        if not 4 <= self.bits <= 16:
            raise ValueError(f"bits {self.bits} outside [4, 16]")
        if self.full_scale <= 0:
            raise ValueError("full_scale must be positive")

    @property
    def lsb(self) -> float:
        return 2 * self.full_scale / 2**self.bits


def launch(frame: ComplexFrame, link: LinkSpec) -> ComplexFrame:
    """Scale a transmitter frame to the per-channel launch power in watts.

    Uses ``meta['total_power']`` (the frame's nominal mean power) when
    present so that consecutive frames share one scale factor.
    """
    p = frame.meta.get("nominal_power") or frame.meta.get("total_power") or frame.power
    k = math.sqrt(link.channel_power_w / p)
    return frame.with_samples(frame.samples * k, meta={"power_w": link.channel_power_w, "field_scale": k})


def _omega(n: int, sample_rate: float) -> np.ndarray:
    return 2 * math.pi * sfft.fftfreq(n, 1 / sample_rate)


def cd_response(n: int, sample_rate: float, spec: FiberSpec, length_km: float) -> np.ndarray:
    w = _omega(n, sample_rate)
    return np.exp(0.5j * spec.beta2 * length_km * w**2)


def apply_cd(frame: ComplexFrame, spec: FiberSpec, length_km: float | None = None) -> ComplexFrame:
    """All-pass chromatic dispersion over ``length_km`` (default: the fibre length)."""
    length = spec.length_km if length_km is None else length_km
    if spec.dispersion_ps_nm_km == 0 or length == 0:
        return frame.with_samples(frame.samples.astype(np.complex128, copy=True))
    h = cd_response(len(frame), frame.sample_rate, spec, length)
    return frame.with_samples(sfft.ifft(sfft.fft(frame.samples) * h))


def _noise_spectrum(rng: np.random.Generator, n: int, variance: float) -> np.ndarray:
    """DFT of n complex white Gaussian samples of the given variance."""
    scale = math.sqrt(variance * n / 2)
    return scale * (rng.standard_normal(n) + 1j * rng.standard_normal(n))


def _span_rng(link: LinkSpec, stream_index: int, span_index: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([link.seed, stream_index, span_index])))


def span_noise_variance(link: LinkSpec, sample_rate: float) -> float:
    psd = (link.ase_psd() if link.ase_enabled else 0.0) + link.loading_psd
    return psd * sample_rate


def _require_power(frame: ComplexFrame) -> None:
    if "power_w" not in frame.meta:
        raise CalibrationError("frame has no launch-power calibration; pass it through launch() first")


def _span_spectrum(spec: np.ndarray, frame: ComplexFrame, link: LinkSpec, span_index: int) -> np.ndarray:
    """One span in the frequency domain; ``spec`` is the input field's DFT."""
    f = link.span
    n = spec.size
    w2 = _omega(n, frame.sample_rate) ** 2
    a = f.alpha_np_km
    if link.nonlinearity_enabled and f.gamma > 0:
        steps = max(1, math.ceil(f.length_km / link.ssfm_step_km - 1e-9))
        h = f.length_km / steps
        half = np.exp(0.5j * f.beta2 * (h / 2) * w2) * math.exp(-a * h / 4)
        # power is sampled mid-step, after the first half-step of loss
        nl_len = f.effective_length(h) * math.exp(a * h / 2)
        for _ in range(steps):
            e = sfft.ifft(spec * half)
            e *= np.exp(1j * f.gamma * nl_len * (e.real**2 + e.imag**2))
            spec = sfft.fft(e) * half
    else:
        spec = spec * (np.exp(0.5j * f.beta2 * f.length_km * w2) * math.exp(-a * f.length_km / 2))
    spec = spec * math.sqrt(link.span_gain)
    var = span_noise_variance(link, frame.sample_rate)
    if var > 0:
        spec = spec + _noise_spectrum(_span_rng(link, frame.stream_index, span_index), n, var)
    return spec


def propagate_span(frame: ComplexFrame, link: LinkSpec, span_index: int) -> ComplexFrame:
    """Propagate through one span and its loss-compensating amplifier.

    With nonlinearity on, a symmetric split-step is used: linear half-step
    (dispersion and loss), Kerr phase rotation, linear half-step.
    ASE is drawn from a generator keyed by (seed, stream_index, span_index).
    """
    _require_power(frame)
    spec = _span_spectrum(sfft.fft(frame.samples), frame, link, span_index)
    return frame.with_samples(sfft.ifft(spec))


def pre_amplifier_power(frame: ComplexFrame, link: LinkSpec) -> float:
    """Mean power at the end of the first span, before amplification."""
    _require_power(frame)
    noiseless = replace(link, ase_enabled=False, loading_psd=0.0)
    out = propagate_span(frame, noiseless, 0)
    return out.power / noiseless.span_gain


def spans_for_distance(link: LinkSpec, distance_km: float) -> int:
    n = distance_km / link.span.length_km
    spans = int(round(n))
    if abs(n - spans) > 1e-9 * max(1.0, n) or spans < 0:
        raise ValueError(
            f"distance {distance_km} km is not a whole number of {link.span.length_km} km spans"
        )
    return spans


def propagate_link(frame: ComplexFrame, link: LinkSpec, distance_km: float) -> ComplexFrame:
    """Propagate over ``distance_km / span length`` spans in index order.

    The field stays in the frequency domain between spans. Without
    nonlinearity every span is a diagonal operator, so the accumulated
    dispersion is applied once and each span's noise is rotated by the
    dispersion of the spans after it; this is algebraically the same as the
    span-by-span recursion.
    """
    _require_power(frame)
    n_spans = spans_for_distance(link, distance_km)
    if n_spans == 0:
        return frame.with_samples(frame.samples.copy())
    spec = sfft.fft(frame.samples)
    f = link.span
    if link.nonlinearity_enabled and f.gamma > 0:
        for i in range(n_spans):
            spec = _span_spectrum(spec, frame, link, i)
        return frame.with_samples(sfft.ifft(spec))

    w2 = _omega(spec.size, frame.sample_rate) ** 2
    per_span = np.exp(0.5j * f.beta2 * f.length_km * w2)
    spec = spec * np.exp(0.5j * f.beta2 * f.length_km * n_spans * w2)
    var = span_noise_variance(link, frame.sample_rate)
    if var > 0:
        rotate = np.ones(spec.size, dtype=np.complex128)
        for i in range(n_spans - 1, -1, -1):
            spec += rotate * _noise_spectrum(_span_rng(link, frame.stream_index, i), spec.size, var)
            rotate *= per_span
    return frame.with_samples(sfft.ifft(spec))


def _butterworth_mag(f: np.ndarray, cutoff: float, order: int) -> np.ndarray:
    return 1.0 / np.sqrt(1.0 + (f / cutoff) ** (2 * order))


def optical_filter(frame: ComplexFrame, bandwidth: float, center: float) -> ComplexFrame:
    """Zero-phase 4th-order super-Gaussian band-pass around ``center``."""
    f = sfft.fftfreq(len(frame), 1 / frame.sample_rate)
    h = np.exp(-0.5 * ((f - center) / (bandwidth / 2)) ** 8 * math.log(2) * 2)
    return frame.with_samples(sfft.ifft(sfft.fft(frame.samples) * h))


def photodetect(frame: ComplexFrame, config: DetectorConfig | None = None) -> ComplexFrame:
    """Square-law detection followed by the detector's low-pass response.

    The optional optical band-pass ahead of the diode selects the test
    channel. The minimum of |E|^2 before electrical filtering is recorded in
    ``meta['pre_filter_min']``.
    """
    config = config or DetectorConfig()
    if config.optical_filter_bandwidth:
        frame = optical_filter(frame, config.optical_filter_bandwidth, config.optical_filter_center)
    e = frame.samples
    current = e.real**2 + e.imag**2
    pre_min = float(current.min()) if current.size else 0.0
    if config.bandwidth and config.bandwidth < frame.sample_rate / 2:
        f = np.abs(sfft.rfftfreq(current.size, 1 / frame.sample_rate))
        current = sfft.irfft(sfft.rfft(current) * _butterworth_mag(f, config.bandwidth, 4), n=current.size)
    if config.noise_std > 0:
        rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([config.seed, frame.stream_index])))
        current = current + config.noise_std * float(np.mean(current)) * rng.standard_normal(current.size)
    return frame.with_samples(current, meta={"pre_filter_min": pre_min})


def anti_alias_response(f: np.ndarray, passband: float, stop: float) -> np.ndarray:
    """Flat to ``passband``, raised-cosine roll-off reaching zero at ``stop``."""
    a = np.abs(f)
    h = np.ones_like(a)
    if stop <= passband:
        h[a > passband] = 0.0
        return h
    mid = (a > passband) & (a < stop)
    h[mid] = 0.5 * (1 + np.cos(np.pi * (a[mid] - passband) / (stop - passband)))
    h[a >= stop] = 0.0
    return h


@dataclass
class AdcResult:
    frame: ComplexFrame
    clip_fraction: float
    reference: float


def resample_ratio(input_rate: float, output_rate: float) -> Fraction:
    ratio = Fraction(output_rate / input_rate).limit_denominator(1000)
    if abs(float(ratio) * input_rate - output_rate) > 1e-6 * output_rate:
        raise ValueError(f"cannot resample {input_rate:g} Hz to {output_rate:g} Hz with a small rational ratio")
    return ratio


def adc(signal: ComplexFrame, config: AdcConfig | None = None, reference: float | None = None) -> AdcResult:
    """Anti-alias filter, resample to the ADC rate and quantise.

    Mid-rise quantiser: code k represents ``(k + 0.5) * lsb * reference``,
    clipped to ``[-2**(bits-1), 2**(bits-1) - 1]``.
    """
    config = config or AdcConfig()
    x = np.asarray(signal.samples, dtype=np.float64)
    if signal.sample_rate < config.sample_rate:
        raise ValueError(
            f"input rate {signal.sample_rate:g} Hz is below the ADC rate {config.sample_rate:g} Hz"
        )
    ratio = resample_ratio(signal.sample_rate, config.sample_rate)
    f = sfft.rfftfreq(x.size, 1 / signal.sample_rate)
    x = sfft.irfft(sfft.rfft(x) * anti_alias_response(f, config.analog_bandwidth, config.sample_rate / 2), n=x.size)
    if ratio != 1:
        x = resample_poly(x, ratio.numerator, ratio.denominator)
    ref = reference if reference is not None else config.reference
    if ref is None:
        ref = float(np.mean(x))
    if not ref > 0:
        raise ValueError("ADC reference level must be positive")
    lo, hi = -(2 ** (config.bits - 1)), 2 ** (config.bits - 1) - 1
    codes = np.floor(x / (ref * config.lsb))
    clipped = (codes < lo) | (codes > hi)
    codes = np.clip(codes, lo, hi).astype(np.int16)
    start = int(round(signal.start * float(ratio)))
    out = ComplexFrame(codes, config.sample_rate, signal.stream_index, start,
                       {"lsb": config.lsb, "reference": ref, "bits": config.bits})
    return AdcResult(out, float(clipped.mean()) if codes.size else 0.0, ref)


def codes_to_float(codes: np.ndarray, lsb: float) -> np.ndarray:
    """Mid-rise reconstruction of ADC codes in units of the ADC reference."""
    return (np.asarray(codes, dtype=np.float64) + 0.5) * lsb
