"""Acceptance suite: one test per headline criterion, each printing a PASS/FAIL line.

The long-running sweeps share one module-level result so the launch-power
shape and the optimum-versus-distance trend are read from the same table.
"""

import math
import os
import time

import numpy as np
import pytest
from scipy.optimize import brentq

from kkmodem.cli import best_power, run_sweep
from kkmodem.config import from_dict
from kkmodem.constellation import build_constellation, count_errors, demap_hard, map_bits, q_from_ber
from kkmodem.experiment import LEAD_SAMPLES, SystemSetup, calibrate_reference, run_point, simulate_chunk
from kkmodem.frames import ComplexFrame
from kkmodem.channel import LinkSpec
from kkmodem.pipeline import PipelineConfig
from kkmodem.rxdsp import KkConfig, design_static_filter, hilbert_block, hilbert_full, kk_receive
from kkmodem.rxdsp import static_equalize, static_full
from kkmodem.txdsp import TxConfig, add_carrier, shape, symbols_for_range

from oracles import q_db_mp, square_qam_ber

BITS = 100_000
QUIET = LinkSpec(ase_enabled=False, nonlinearity_enabled=False)
SWEEP_DISTANCES = [5000.0, 7500.0, 10000.0]
SWEEP_POWERS = [-12.0, -10.0, -8.0, -6.0, -4.0, -2.0, 0.0]
SHAPE_DISTANCE = 7500.0


@pytest.fixture
def verdict(capsys):
    def report(name, ok, detail):
        with capsys.disabled():
            print(f"\n{'PASS' if ok else 'FAIL'}  {name}: {detail}")
        assert ok, f"{name}: {detail}"

    return report


def _symbols(order):
    k = build_constellation(order).bits_per_symbol
    return -(-BITS // k)


def test_back_to_back_zero_error(verdict):
    t0 = time.perf_counter()
    results = {}
    for order in (4, 8, 16, 32, 64):
        r = run_point(SystemSetup(order=order, link=QUIET), _symbols(order))
        results[order] = (r.sync_ok, r.report.bit_errors, r.report.bits_compared)
    wall = time.perf_counter() - t0
    ok = all(s and e == 0 and b >= BITS for s, e, b in results.values()) and wall < 60
    detail = ", ".join(f"{m}-QAM {e}/{b}" for m, (_, e, b) in results.items())
    verdict("back-to-back zero error", ok, f"{detail}; {wall:.1f} s (limit 60 s)")


def test_digital_cd_absorption(verdict):
    t0 = time.perf_counter()
    results = {}
    for order in (4, 16):
        r = run_point(SystemSetup(order=order, distance_km=10_000.0, link=QUIET), _symbols(order))
        results[order] = (r.sync_ok, r.report.bit_errors, r.report.bits_compared)
    wall = time.perf_counter() - t0
    ok = all(s and e == 0 and b >= BITS for s, e, b in results.values()) and wall < 120
    detail = ", ".join(f"{m}-QAM {e}/{b}" for m, (_, e, b) in results.items())
    verdict("10000 km dispersion absorbed", ok, f"{detail}; {wall:.1f} s (limit 120 s)")


def test_kk_fidelity(verdict):
    evms = []
    for order, seed in [(4, 1), (16, 2), (64, 3)]:
        tx = TxConfig(cspr_db=12.0)
        sym = symbols_for_range(build_constellation(order), seed, 0, 20_000)
        fr = add_carrier(shape(sym, tx), tx)
        out = kk_receive(fr.with_samples(np.abs(fr.samples) ** 2))
        w = out.meta["warmup"]
        err = out.samples[w:-w] - fr.samples[w:-w]
        sig = fr.samples[w:-w] - fr.meta["carrier_amplitude"]
        evms.append(10 * math.log10(np.mean(np.abs(err) ** 2) / np.mean(np.abs(sig) ** 2)))
    ok = max(evms) < -30
    verdict("KK field EVM", ok, " ".join(f"{e:.2f} dB" for e in evms) + " (limit -30 dB)")


def test_oracle_equivalence(verdict):
    kk = KkConfig()
    filt = design_static_filter(QUIET, TxConfig(), 10_000.0)
    h_err, s_err = [], []
    for seed in (0, 1, 2):
        tx = TxConfig(sample_rate=4e9)
        sym = symbols_for_range(build_constellation(16), seed, 0, 16_384)
        fr = add_carrier(shape(sym, tx), tx)
        log_amp = np.log(np.abs(fr.samples))
        block = hilbert_block(ComplexFrame(log_amp, 4e9), kk).samples
        full = hilbert_full(log_amp)
        w = kk.warmup
        h_err.append(float(np.max(np.abs(block[w:-w] - full[w:-w]))))
        rng = np.random.default_rng(seed)
        x = rng.standard_normal(65_536) + 1j * rng.standard_normal(65_536)
        y = static_equalize(ComplexFrame(x, 4e9), filt).samples
        ref = static_full(x, filt)
        ws = filt.geometry.margin // filt.decimation
        s_err.append(float(np.max(np.abs(y[ws:-ws] - ref[ws:-ws]))))
    ok_h = max(h_err) < 1e-4
    ok_s = max(s_err) < 1e-4
    verdict("overlap-save vs single-shot oracles", ok_h and ok_s,
            f"Hilbert max-abs {max(h_err):.2e}, static EQ max-abs {max(s_err):.2e} (limit 1e-4)")


def test_awgn_calibration(verdict):
    lines = []
    ok = True
    for order in (4, 16):
        spec = build_constellation(order)
        for target in (1e-2, 1e-3):
            snr = brentq(lambda s: math.log(square_qam_ber(order, s) / target), -5, 25)
            expected = square_qam_ber(order, snr)
            rng = np.random.default_rng(order * 1000 + int(1 / target))
            n_sym = int(2000 / target / spec.bits_per_symbol)
            bits = rng.integers(0, 2, n_sym * spec.bits_per_symbol, dtype=np.uint8)
            sym = map_bits(spec, bits)
            sigma = math.sqrt(10 ** (-snr / 10) / 2)
            noisy = sym + sigma * (rng.standard_normal(n_sym) + 1j * rng.standard_normal(n_sym))
            r = count_errors(bits, demap_hard(spec, noisy))
            se = math.sqrt(expected * (1 - expected) / r.bits_compared)
            z = (r.ber - expected) / se
            ok &= abs(z) < 3
            lines.append(f"{order}-QAM {r.ber:.3e} vs {expected:.3e} ({z:+.2f} se)")
    verdict("AWGN BER calibration", ok, "; ".join(lines))


def test_q_factor_formula(verdict):
    q = q_from_ber(1e-3)
    oracle = q_db_mp(1e-3)
    ok = abs(q - 9.80) <= 0.01 and abs(q - oracle) < 1e-10
    verdict("q_from_ber(1e-3)", ok, f"{q:.12f} dB, oracle {oracle:.12f} dB, target 9.80 +/- 0.01")


@pytest.fixture(scope="module")
def nonlinear_sweep(tmp_path_factory):
    cfg = from_dict({
        "format": 4,
        "distances_km": SWEEP_DISTANCES,
        "relative_powers_db": SWEEP_POWERS,
        "cspr_db": [12.0],
        "bits_per_point": BITS,
        "link": {"ase_enabled": True, "nonlinearity_enabled": True},
        "pipeline": {"buffer_samples": 1 << 18},
    })
    t0 = time.perf_counter()
    rows = run_sweep(cfg, tmp_path_factory.mktemp("sweep"))
    return rows, time.perf_counter() - t0


def _q(row):
    return row["q_db"] if row["sync_ok"] and math.isfinite(row["q_db"]) else -math.inf


def test_launch_power_interior_optimum(verdict, nonlinear_sweep):
    rows, wall = nonlinear_sweep
    line = [r for r in rows if r["distance_km"] == SHAPE_DISTANCE]
    per_point = wall / len(rows)
    q = [_q(r) for r in line]
    best = int(np.argmax(q))
    ok = 0 < best < len(q) - 1 and per_point * len(line) < 15 * 60
    detail = " ".join(f"{r['rel_power_db']:+.0f}:{_q(r):.2f}" for r in line)
    verdict("Q vs launch power has an interior maximum", ok,
            f"{SHAPE_DISTANCE:.0f} km Q dB [{detail}], best at {line[best]['rel_power_db']:+.0f} dB; "
            f"~{per_point * len(line):.0f} s for 7 points (limit 900 s)")


def test_optimum_power_non_increasing(verdict, nonlinear_sweep):
    rows, _ = nonlinear_sweep
    best = best_power(rows)
    opt = [b["best_rel_power_db"] for b in best]
    ok = all(math.isfinite(o) for o in opt) and all(a >= b for a, b in zip(opt, opt[1:]))
    detail = ", ".join(f"{b['distance_km']:.0f} km: {b['best_rel_power_db']:+.0f} dB (BER {b['ber']:.2e})"
                       for b in best)
    verdict("optimum launch power non-increasing with distance", ok, detail)


def test_pipeline_determinism(verdict):
    setup = SystemSetup(order=16, distance_km=2000.0,
                        link=LinkSpec(ase_enabled=True, nonlinearity_enabled=True, channel_offset_db=0.0))
    ref = calibrate_reference(setup)
    runs = {}
    for workers in (1, 2, 4):
        r = run_point(setup, 25_000, PipelineConfig(buffer_samples=1 << 16, workers=workers), reference=ref)
        runs[workers] = r
    digests = {r.digest for r in runs.values()}
    errors = {w: r.report.bit_errors for w, r in runs.items()}
    ok = len(digests) == 1 and all(r.sync_ok for r in runs.values())
    rr = runs[1].throughput.realtime_ratio
    verdict("demapped bits identical for 1/2/4 workers", ok,
            f"errors per run {errors}; realtime_ratio {rr:.2e} of 4 GS/s (informational)")


def _rx_only_throughput(setup, codes, workers):
    from kkmodem.experiment import receiver_stages
    from kkmodem.pipeline import run

    size = 1 << 16
    x = codes.samples

    def frames():
        for k in range(x.size // size):
            yield ComplexFrame(x[k * size : (k + 1) * size], 4e9, k, codes.start + k * size,
                               {"lsb": codes.meta["lsb"]})

    return run(frames(), receiver_stages(setup), PipelineConfig(buffer_samples=size, workers=workers)).report


def test_pipeline_scaling(verdict, capsys):
    cores = len(os.sched_getaffinity(0)) if hasattr(os, "sched_getaffinity") else os.cpu_count()
    if cores < 4:
        with capsys.disabled():
            print(f"\nN/A   4-worker speedup: host has {cores} core(s); the criterion needs >= 4")
        pytest.skip(f"speedup needs a >= 4-core host, this one has {cores}")
    setup = SystemSetup(order=16)
    ref = calibrate_reference(setup)
    codes, _ = simulate_chunk(setup, -LEAD_SAMPLES, 1 << 21, 0, ref)
    t1 = _rx_only_throughput(setup, codes, 1)
    t4 = _rx_only_throughput(setup, codes, 4)
    speedup = t4.throughput / t1.throughput
    verdict("4-worker speedup", speedup >= 2,
            f"{speedup:.2f}x (limit 2x); realtime_ratio {t4.realtime_ratio:.2e}")


def test_continuous_trace(verdict):
    link = LinkSpec(ase_enabled=True, nonlinearity_enabled=False, channel_offset_db=-17.0)
    limit = 2
    r = run_point(SystemSetup(order=4, distance_km=1000.0, link=link), 1_000_000,
                  PipelineConfig(buffer_samples=1 << 18, workers=1, max_in_flight=limit), bin_symbols=10_000)
    bins = r.report.bins
    q = np.array([b.q_db for b in bins])
    p = r.report.ber
    n = bins[0].bits
    h = 1e-6 * p
    slope = (q_from_ber(p + h) - q_from_ber(p - h)) / (2 * h)
    predicted = slope**2 * p * (1 - p) / n
    ratio = float(np.var(q, ddof=1) / predicted)
    ok = (len(bins) >= 100 and r.sync_ok and np.all(np.isfinite(q))
          and r.throughput.max_in_flight_observed <= limit and 0.5 <= ratio <= 2.0)
    verdict("continuous binned trace", ok,
            f"{len(bins)} bins, BER {p:.2e}, Q variance {ratio:.2f}x binomial (limit 0.5-2), "
            f"peak frames in flight {r.throughput.max_in_flight_observed} (limit {limit})")
