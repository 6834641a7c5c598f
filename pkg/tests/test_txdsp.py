import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from kkmodem.constellation import build_constellation, map_bits
from kkmodem.frames import ComplexFrame, read_cf32, write_cf32
from kkmodem.txdsp import (
    TxConfig,
    add_carrier,
    bits_for_symbols,
    is_minimum_phase,
    nominal_signal_power,
    rrc_taps,
    shape,
    symbols_for_range,
)
from oracles import direct_convolve

# minimum of |E|/A over 1e5 random 4-QAM symbols at CSPR 12 dB, seed 0
MP_MARGIN_4QAM_CSPR12 = 0.4705


def test_rrc_symmetry_and_energy():
    for sps in (2, 4, 12):
        h = rrc_taps(0.01, 64, sps)
        assert h.size == 64 * sps + 1
        assert np.max(np.abs(h - h[::-1])) < 1e-12
        assert abs(np.sum(h**2) - 1) < 1e-9


@pytest.mark.parametrize("sps", [4, 12])
def test_rrc_zero_isi_direct_convolution(sps):
    h = rrc_taps(0.01, 64, sps)
    g = direct_convolve(h, h)
    c = h.size - 1
    off = np.concatenate([g[c - sps :: -sps], g[c + sps :: sps]])
    assert np.max(np.abs(off)) < 1e-3 * g[c]


def test_rrc_spectrum_close_to_root_raised_cosine():
    h = rrc_taps(0.01, 64, 4)
    f = np.fft.rfftfreq(1 << 16) * 4  # in units of the symbol rate
    mag = np.abs(np.fft.rfft(h, 1 << 16))
    mag /= mag[0]
    assert np.all(np.abs(mag[f < 0.49] - 1) < 0.1)
    assert np.max(mag[f > 0.52]) < 0.1  # truncation sidelobes of a 64-symbol span


@pytest.mark.parametrize("args", [(0.0, 64, 4), (1.5, 64, 4), (0.01, 4, 4), (0.01, 64, 1), (0.5, 9, 3)])
def test_rrc_rejects_bad_parameters(args):
    with pytest.raises(ValueError):
        rrc_taps(*args)


def test_txconfig_validation():
    with pytest.raises(ValueError):
        TxConfig(sample_rate=2e9)
    with pytest.raises(ValueError):
        TxConfig(rolloff=0)
    with pytest.raises(ValueError):
        TxConfig(sample_rate=12.5e9 / 2).sps


def test_shape_impulse_and_zero():
    cfg = TxConfig(sample_rate=4e9)
    sym = np.zeros(200, dtype=complex)
    sym[100] = 1
    out = shape(sym, cfg).samples
    h = rrc_taps(cfg.rolloff, cfg.rrc_span_symbols, 4)
    c = h.size // 2
    assert np.allclose(out[400 - c : 400 + c + 1], h, atol=1e-15)
    assert not np.any(shape(np.zeros(50), cfg).samples)


def test_shape_matched_filter_recovers_qpsk():
    cfg = TxConfig(sample_rate=4e9)
    spec = build_constellation(4)
    rng = np.random.default_rng(3)
    sym = map_bits(spec, rng.integers(0, 2, 20_000, dtype=np.uint8))
    x = shape(sym, cfg).samples
    h = rrc_taps(cfg.rolloff, cfg.rrc_span_symbols, 4)
    y = np.convolve(x, h)[h.size // 2 :][: x.size : 4]
    assert np.max(np.abs(y - sym)[64:-64]) < 1e-2


@given(a=st.complex_numbers(max_magnitude=10, allow_nan=False, allow_infinity=False),
       b=st.complex_numbers(max_magnitude=10, allow_nan=False, allow_infinity=False),
       seed=st.integers(0, 1000))
@settings(max_examples=25, deadline=None)
def test_shape_is_linear(a, b, seed):
    cfg = TxConfig(sample_rate=4e9)
    rng = np.random.default_rng(seed)
    s1 = rng.standard_normal(300) + 1j * rng.standard_normal(300)
    s2 = rng.standard_normal(300) + 1j * rng.standard_normal(300)
    lhs = shape(a * s1 + b * s2, cfg).samples
    rhs = a * shape(s1, cfg).samples + b * shape(s2, cfg).samples
    scale = max(1.0, np.max(np.abs(rhs)))
    assert np.max(np.abs(lhs - rhs)) <= 1e-9 * scale


def test_add_carrier_examples():
    cfg = TxConfig(cspr_db=10)
    z = add_carrier(ComplexFrame(np.zeros(100, complex), cfg.sample_rate), cfg, signal_power=0.1)
    assert np.allclose(z.samples, 1.0)
    assert z.meta["carrier_amplitude"] == pytest.approx(1.0)


def _tx_frame(order=4, cspr=12.0, n=20_000, rate=12e9, seed=0):
    cfg = TxConfig(cspr_db=cspr, sample_rate=rate, seed=seed)
    sym = symbols_for_range(build_constellation(order), seed, 0, n)
    return add_carrier(shape(sym, cfg), cfg), cfg


def test_single_sided_spectrum_and_bandwidth():
    fr, cfg = _tx_frame(cspr=6.0)
    x = fr.samples - fr.meta["carrier_amplitude"]
    spec = np.abs(np.fft.fft(x)) ** 2
    f = np.fft.fftfreq(x.size, 1 / cfg.sample_rate)
    assert spec[f > 0].sum() / spec.sum() >= 0.99
    # energy of the full MP signal, tone included
    full = np.abs(np.fft.fft(fr.samples)) ** 2
    order = np.argsort(np.abs(f))
    cum = np.cumsum(full[order]) / full.sum()
    bw99 = np.abs(f[order][np.searchsorted(cum, 0.99)])
    assert bw99 < 1.1e9
    centroid = np.sum(f * spec) / spec.sum()
    assert abs(centroid - cfg.carrier_offset) < 0.02e9


@pytest.mark.parametrize("cspr", [6.0, 12.0, 14.0])
def test_cspr_measured_by_spectral_separation(cspr):
    fr, cfg = _tx_frame(cspr=cspr)
    spec = np.abs(np.fft.fft(fr.samples)) ** 2
    line = spec[0]
    rest = spec[1:].sum()
    assert 10 * np.log10(line / rest) == pytest.approx(cspr, abs=0.1)


def test_minimum_phase_examples():
    t = np.arange(1000) / 1000
    ok, margin = is_minimum_phase(ComplexFrame(1 + 0.5 * np.exp(2j * np.pi * 5 * t), 1.0), 1.0)
    assert ok and margin == pytest.approx(0.5, abs=1e-3)
    ok, _ = is_minimum_phase(ComplexFrame(1 + 1.5 * np.exp(2j * np.pi * 5 * t), 1.0), 1.0)
    assert not ok


def test_random_qpsk_frame_is_minimum_phase():
    fr, _ = _tx_frame(n=100_000, rate=4e9)
    ok, margin = is_minimum_phase(fr)
    assert ok
    assert margin == pytest.approx(MP_MARGIN_4QAM_CSPR12, abs=1e-4)


def test_bits_are_reproducible_by_window():
    full = bits_for_symbols(7, 4, 0, 40_000)
    part = bits_for_symbols(7, 4, 17_000, 5000)
    assert np.array_equal(full[17_000 * 4 : 22_000 * 4], part)
    assert not np.array_equal(bits_for_symbols(8, 4, 0, 100), full[:400])
    spec = build_constellation(16)
    s = symbols_for_range(spec, 7, -5, 10)
    assert np.all(s[:5] == 0) and np.allclose(s[5:], map_bits(spec, full[:20]))


def test_chunked_shaping_matches_single_shot():
    cfg = TxConfig(sample_rate=4e9)
    spec = build_constellation(4)
    whole = shape(symbols_for_range(spec, 0, 0, 4000), cfg).samples
    g = 64
    s0 = 1500
    chunk = shape(symbols_for_range(spec, 0, s0 - g, 1000 + 2 * g), cfg, start_symbol=s0 - g)
    assert np.allclose(chunk.samples[4 * g : 4 * g + 4000], whole[4 * s0 : 4 * s0 + 4000], atol=1e-12)
    c1 = add_carrier(chunk, cfg, nominal_signal_power(cfg))
    c0 = add_carrier(shape(symbols_for_range(spec, 0, 0, 4000), cfg), cfg, nominal_signal_power(cfg))
    assert np.allclose(c1.samples[4 * g : 4 * g + 4000], c0.samples[4 * s0 : 4 * s0 + 4000], atol=1e-12)


def test_cf32_round_trip(tmp_path):
    fr, _ = _tx_frame(n=500, rate=4e9)
    p = tmp_path / "tx.cf32"
    write_cf32(p, fr, seed=0)
    back = read_cf32(p)
    assert back.sample_rate == fr.sample_rate and back.meta["seed"] == 0
    assert np.allclose(back.samples, fr.samples, atol=1e-6)
