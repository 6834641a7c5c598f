import json
import threading
import time

import numpy as np
import pytest

from kkmodem.constellation import build_constellation, indices_to_bits
from kkmodem.experiment import (
    LEAD_SAMPLES,
    SystemSetup,
    ber_confidence,
    calibrate_reference,
    run_point,
    simulate_chunk,
)
from kkmodem.frames import ComplexFrame
from kkmodem.pipeline import (
    STATEFUL,
    PipelineConfig,
    PipelineError,
    StageSpec,
    binned_metrics,
    export_trace,
    run,
)


def _frames(n_frames, size=64):
    for k in range(n_frames):
        yield ComplexFrame(np.arange(k * size, (k + 1) * size, dtype=float), 1e6, k, k * size)


def _toy_stages(delay=0.0):
    def add_one(frame, halo):
        if delay:
            time.sleep(delay * np.random.default_rng(frame.stream_index).random())
        return frame.with_samples(frame.samples + 1)

    def diff(frame, halo):
        x = np.concatenate([halo, frame.samples])
        return frame.with_samples(x[3:] - x[:-3])

    def cumsum(frame, halo, state):
        y = state + np.cumsum(frame.samples)
        return frame.with_samples(y), float(y[-1])

    return [
        StageSpec("add", add_one),
        StageSpec("diff", diff, halo_samples=3),
        StageSpec("cumsum", cumsum, STATEFUL, initial_state=0.0),
    ]


def _reference(n_frames, size=64):
    x = np.arange(n_frames * size, dtype=float) + 1
    d = x - np.concatenate([np.zeros(3), x[:-3]])
    return np.cumsum(d)


@pytest.mark.parametrize("workers", [1, 2, 4, 8])
def test_stream_order_and_values(workers):
    out = []
    res = run(_frames(20), _toy_stages(delay=2e-3), PipelineConfig(buffer_samples=64, workers=workers),
              sink=out.append, sample_rate=1e6)
    assert [f.stream_index for f in out] == list(range(20))
    assert np.allclose(np.concatenate([f.samples for f in out]), _reference(20))
    assert res.report.frames == 20
    assert res.report.samples_processed == 20 * 64
    assert res.report.max_in_flight_observed <= 2 * workers


def test_in_flight_bound_respected():
    live = []
    lock = threading.Lock()
    count = {"now": 0, "peak": 0}

    def source():
        for f in _frames(30):
            with lock:
                count["now"] += 1
                count["peak"] = max(count["peak"], count["now"])
            yield f

    def sink(frame):
        with lock:
            count["now"] -= 1
        live.append(frame.stream_index)

    res = run(source(), _toy_stages(delay=1e-3), PipelineConfig(buffer_samples=64, workers=4, max_in_flight=5),
              sink=sink)
    assert count["peak"] <= 5
    assert res.report.max_in_flight_observed <= 5
    assert live == list(range(30))


def test_stateful_stage_runs_in_order():
    seen = []

    def record(frame, halo, state):
        seen.append(frame.stream_index)
        return frame, state

    stages = _toy_stages(delay=2e-3)[:1] + [StageSpec("rec", record, STATEFUL)]
    run(_frames(25), stages, PipelineConfig(buffer_samples=64, workers=4))
    assert seen == list(range(25))


def test_stage_error_names_stage_and_frame():
    def bad(frame, halo):
        if frame.stream_index == 3:
            raise RuntimeError("boom")
        return frame

    with pytest.raises(PipelineError) as info:
        run(_frames(8), [StageSpec("ok", lambda f, h: f), StageSpec("bad", bad)],
            PipelineConfig(buffer_samples=64, workers=2))
    assert info.value.stage == "bad"
    assert info.value.stream_index == 3
    assert isinstance(info.value.cause, RuntimeError)


def test_sink_error_is_reported():
    def sink(frame):
        raise OSError("disk full")

    with pytest.raises(PipelineError) as info:
        run(_frames(3), _toy_stages(), PipelineConfig(buffer_samples=64), sink=sink)
    assert info.value.stage == "sink"


def test_config_validation():
    with pytest.raises(ValueError):
        PipelineConfig(workers=0)
    with pytest.raises(ValueError):
        PipelineConfig(workers=4, max_in_flight=2)
    with pytest.raises(ValueError):
        run(_frames(2), [], PipelineConfig())
    with pytest.raises(ValueError):
        run(_frames(2), [StageSpec("h", lambda f, h: f, halo_samples=40)], PipelineConfig(buffer_samples=64))
    with pytest.raises(ValueError):
        StageSpec("x", lambda f, h: f, kind="other")


def test_trace_export_is_chrome_format(tmp_path):
    res = run(_frames(6), _toy_stages(), PipelineConfig(buffer_samples=64, workers=2))
    assert len(res.events) == 6 * 3
    path = tmp_path / "trace.json"
    export_trace(res.events, path)
    data = json.loads(path.read_text())
    ev = data["traceEvents"]
    spans = [e for e in ev if e["ph"] == "X"]
    assert len(spans) == 18
    assert {e["name"] for e in spans} == {"add", "diff", "cumsum"}
    starts = [e for e in ev if e["ph"] == "s"]
    finishes = [e for e in ev if e["ph"] == "f"]
    assert len(starts) == len(finishes) > 0
    # frame k of diff waits on add for k and k-1; cumsum also on its own k-1
    e = next(x for x in res.events if x.stage == "cumsum" and x.stream_index == 2)
    assert set(e.dependency_edges) == {("diff", 2), ("cumsum", 1)}
    e = next(x for x in res.events if x.stage == "diff" and x.stream_index == 2)
    assert set(e.dependency_edges) == {("add", 2), ("add", 1)}


def test_binned_metrics():
    rng = np.random.default_rng(0)
    tx = rng.integers(0, 2, 20_000).astype(np.uint8)
    rx = tx.copy()
    rx[[5, 10_005, 10_006]] ^= 1
    rep = binned_metrics(rx, tx, bin_duration=5e-6, symbol_rate=1e9, bits_per_symbol=2)
    assert rep.bit_errors == 3
    assert [b.bit_errors for b in rep.bins] == [1, 2]
    assert rep.bins[1].time_offset == pytest.approx(5e-6)
    with pytest.raises(ValueError):
        binned_metrics(rx[:-1], tx)


def test_wilson_interval():
    lo, hi = ber_confidence(10, 1000)
    assert lo < 0.01 < hi
    assert ber_confidence(0, 1000)[0] == 0.0


# ------------------------------------------------------- receiver chain


@pytest.fixture(scope="module")
def recorded():
    """One contiguous ADC capture used with different frame sizes and worker counts."""
    setup = SystemSetup(order=16, distance_km=0.0)
    ref = calibrate_reference(setup)
    n_sym = 30_000
    n = LEAD_SAMPLES + (n_sym + 1024) * setup.rx_sps
    n -= n % (1 << 14)
    codes, _ = simulate_chunk(setup, -LEAD_SAMPLES, n, 0, ref)
    return setup, codes, n_sym


def _replay(codes, size):
    x = codes.samples
    for k in range(x.size // size):
        yield ComplexFrame(x[k * size : (k + 1) * size], codes.sample_rate, k, codes.start + k * size,
                           {"lsb": codes.meta["lsb"]})


@pytest.mark.parametrize("buffer,workers", [(1 << 14, 1), (1 << 15, 2), (1 << 16, 4)])
def test_chain_invariant_to_frame_size_and_workers(recorded, buffer, workers):
    setup, codes, n_sym = recorded
    base = run_point(setup, 20_000, PipelineConfig(buffer_samples=1 << 14, workers=1),
                     source=_replay(codes, 1 << 14))
    res = run_point(setup, 20_000, PipelineConfig(buffer_samples=buffer, workers=workers),
                    source=_replay(codes, buffer))
    assert base.sync_ok and res.sync_ok
    assert base.report.bit_errors == 0
    assert res.digest == base.digest
    assert res.report.bits_compared == base.report.bits_compared == 80_000


def test_simulated_point_is_seeded():
    setup = SystemSetup(order=4, distance_km=0.0)
    a = run_point(setup, 10_000, PipelineConfig(buffer_samples=1 << 15, workers=1))
    b = run_point(setup, 10_000, PipelineConfig(buffer_samples=1 << 15, workers=3))
    assert a.sync_ok and a.report.bit_errors == 0
    assert a.digest == b.digest
    assert a.clip_fraction == 0
