"""Buffered multi-worker stage graph with event-style dependencies.

Frame ``k`` at stage ``j`` becomes runnable once

* frame ``k`` finished stage ``j - 1`` (its input),
* frame ``k - 1`` finished stage ``j - 1`` when stage ``j`` needs a halo
  (the halo is the tail of the previous frame's input to the stage),
* frame ``k - 1`` finished stage ``j`` when stage ``j`` is stateful.

Stateful stages therefore run as a chain in stream order while stateless
work on different frames overlaps across workers. The sink sees frames in
stream order.
"""

from __future__ import annotations

import json
import queue
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Callable, Iterable

import numpy as np

from .constellation import QReport, bin_errors, make_report

STATELESS = "stateless"
STATEFUL = "stateful"


class PipelineError(RuntimeError):
    def __init__(self, stage: str, stream_index: int, cause: BaseException):
        super().__init__(f"stage {stage!r} failed on frame {stream_index}: {cause!r}")
        self.stage = stage
        self.stream_index = stream_index
        self.cause = cause


@dataclass
class StageSpec:
    """One processing step.

    Stateless: ``fn(frame, halo) -> frame``.
    Stateful: ``fn(frame, halo, state) -> (frame, state)``, starting from
    ``initial_state``. ``halo`` is ``None`` when ``halo_samples`` is 0 and
    zeros for the first frame.
    """

    name: str
    fn: Callable
    kind: str = STATELESS
    halo_samples: int = 0
    initial_state: Any = None

    def __post_init__(self):
        if self.kind not in (STATELESS, STATEFUL):
            raise ValueError(f"unknown stage kind {self.kind!r}")
        if self.halo_samples < 0:
            raise ValueError("halo_samples must be >= 0")


@dataclass(frozen=True)
class PipelineConfig:
    buffer_samples: int = 1 << 22
    workers: int = 1
    max_in_flight: int | None = None
    seed: int = 0

    def __post_init__(self):
        if self.workers < 1:
            raise ValueError("workers must be >= 1")
        if self.buffer_samples < 1:
            raise ValueError("buffer_samples must be positive")
        if self.max_in_flight is not None and self.max_in_flight < self.workers:
            raise ValueError(f"max_in_flight {self.max_in_flight} is below workers {self.workers}")

    @property
    def in_flight_limit(self) -> int:
        return self.max_in_flight or 2 * self.workers


@dataclass
class TraceEvent:
    stage: str
    stream_index: int
    worker: int
    start: int  # ns since run start
    end: int
    dependency_edges: list[tuple[str, int]] = field(default_factory=list)


@dataclass
class ThroughputReport:
    samples_processed: int
    wall_time: float
    throughput: float
    realtime_ratio: float
    stage_occupancy: dict[str, float]
    frames: int = 0
    max_in_flight_observed: int = 0


@dataclass
class RunResult:
    report: ThroughputReport
    events: list[TraceEvent]


def _samples(frame) -> np.ndarray:
    return frame.samples if hasattr(frame, "samples") else frame


def _halo_of(frame, n: int):
    x = np.asarray(_samples(frame))
    if x.size < n:
        raise ValueError(f"frame of {x.size} samples cannot supply a {n}-sample halo")
    return x[x.size - n :]


def _count(frame) -> int:
    n = getattr(frame, "n_samples", None)
    return int(n) if n is not None else len(_samples(frame))


def run(source: Iterable, stages: list[StageSpec], config: PipelineConfig,
        sink: Callable[[Any], None] | None = None, sample_rate: float = 4e9) -> RunResult:
    """Push every source frame through every stage; see the module docstring."""
    if not stages:
        raise ValueError("pipeline needs at least one stage")
    max_halo = max(s.halo_samples for s in stages)
    if config.buffer_samples <= 2 * max_halo:
        raise ValueError(f"buffer_samples {config.buffer_samples} must exceed twice the largest halo {max_halo}")
    n_st = len(stages)
    limit = config.in_flight_limit
    src = iter(source)
    done_q: queue.Queue = queue.Queue()
    # outputs[(k, j)]: output of stage j for frame k; (k, -1) is the source frame
    outputs: dict[tuple[int, int], Any] = {}
    done: set[tuple[int, int]] = set()
    started: set[tuple[int, int]] = set()
    states = [s.initial_state for s in stages]
    events: list[TraceEvent] = []
    busy = {s.name: 0 for s in stages}
    workers_ids: dict[int, int] = {}
    lock = threading.Lock()
    t0 = time.perf_counter_ns()
    pulled = 0
    delivered = 0
    exhausted = False
    failure: PipelineError | None = None
    running = 0
    samples = 0
    peak = 0

    def worker_id() -> int:
        tid = threading.get_ident()
        with lock:
            return workers_ids.setdefault(tid, len(workers_ids))

    def task(k, j, frame, halo, state):
        wid = worker_id()
        a = time.perf_counter_ns() - t0
        try:
            st = stages[j]
            if st.kind == STATEFUL:
                out, state = st.fn(frame, halo, state)
            else:
                out = st.fn(frame, halo)
            exc = None
        except BaseException as e:  # surfaced to the caller below
            out, exc = None, e
        b = time.perf_counter_ns() - t0
        done_q.put((k, j, out, state, exc, wid, a, b))

    def ready(k, j) -> bool:
        if (k, j) in started or (k, j - 1) not in done:
            return False
        st = stages[j]
        if k > 0 and st.halo_samples and (k - 1, j - 1) not in done:
            return False
        if k > 0 and st.kind == STATEFUL and (k - 1, j) not in done:
            return False
        return True

    def deps(k, j) -> list[tuple[str, int]]:
        d = []
        if j > 0:
            d.append((stages[j - 1].name, k))
            if k > 0 and stages[j].halo_samples:
                d.append((stages[j - 1].name, k - 1))
        if k > 0 and stages[j].kind == STATEFUL:
            d.append((stages[j].name, k - 1))
        return d

    with ThreadPoolExecutor(max_workers=config.workers) as pool:
        def submit(k, j):
            nonlocal running
            st = stages[j]
            frame = outputs[(k, j - 1)]
            halo = None
            if st.halo_samples:
                if k == 0:
                    x = np.asarray(_samples(frame))
                    halo = np.zeros(st.halo_samples, dtype=x.dtype)
                else:
                    halo = _halo_of(outputs[(k - 1, j - 1)], st.halo_samples)
            started.add((k, j))
            running += 1
            pool.submit(task, k, j, frame, halo, states[j] if st.kind == STATEFUL else None)

        def schedule(cands):
            for k, j in sorted(cands):
                if 0 <= j < n_st and k < pulled and ready(k, j):
                    submit(k, j)

        while True:
            while failure is None and not exhausted and pulled - delivered < limit:
                try:
                    frame = next(src)
                except StopIteration:
                    exhausted = True
                    break
                k = pulled
                outputs[(k, -1)] = frame
                done.add((k, -1))
                samples += _count(frame)
                pulled += 1
                peak = max(peak, pulled - delivered)
                schedule([(k, 0)])
            if running == 0:
                break
            k, j, out, state, exc, wid, a, b = done_q.get()
            running -= 1
            events.append(TraceEvent(stages[j].name, k, wid, a, b, deps(k, j)))
            busy[stages[j].name] += b - a
            if exc is not None:
                if failure is None:
                    failure = PipelineError(stages[j].name, k, exc)
                continue
            if failure is not None:
                continue
            outputs[(k, j)] = out
            done.add((k, j))
            if stages[j].kind == STATEFUL:
                states[j] = state
            schedule([(k, j + 1), (k + 1, j), (k + 1, j + 1)])
            while (delivered, n_st - 1) in done and delivered < pulled:
                final = outputs.pop((delivered, n_st - 1))
                if sink is not None:
                    try:
                        sink(final)
                    except BaseException as e:
                        failure = PipelineError("sink", delivered, e)
                        break
                # the next frame may still need this frame's tails as halos;
                # nothing older is referenced any more
                for jj in range(-1, n_st - 1):
                    outputs.pop((delivered - 1, jj), None)
                delivered += 1

    if failure is not None:
        raise failure from failure.cause
    wall = (time.perf_counter_ns() - t0) / 1e9
    thr = samples / wall if wall > 0 else 0.0
    occ = {name: (ns / 1e9) / wall if wall > 0 else 0.0 for name, ns in busy.items()}
    report = ThroughputReport(samples, wall, thr, thr / sample_rate, occ, delivered, peak)
    events.sort(key=lambda e: (e.start, e.stream_index))
    return RunResult(report, events)


def binned_metrics(rx_bits, tx_bits, bin_duration: float = 21e-3, symbol_rate: float = 1e9,
                   bits_per_symbol: int = 2, thresholds=None) -> QReport:
    """Per-bin BER and Q for an aligned demapped stream."""
    if bin_duration <= 0:
        raise ValueError("bin_duration must be positive")
    rx = np.asarray(rx_bits, dtype=np.uint8).ravel()
    tx = np.asarray(tx_bits, dtype=np.uint8).ravel()
    if rx.size != tx.size:
        raise ValueError(f"length mismatch: {tx.size} reference vs {rx.size} received bits")
    bit_rate = symbol_rate * bits_per_symbol
    errors = rx != tx
    bins = bin_errors(errors, max(1, int(round(bin_duration * bit_rate))), bit_rate)
    return make_report(int(errors.sum()), errors.size, bins, thresholds)


def export_trace(events: list[TraceEvent], path, process_name: str = "kkmodem") -> None:
    """Write events as Chrome trace-event JSON; dependencies become flow arrows."""
    out = [{"name": "process_name", "ph": "M", "pid": 0, "tid": 0, "args": {"name": process_name}}]
    index = {(e.stage, e.stream_index): e for e in events}
    flow_id = 0
    for e in events:
        out.append({
            "name": e.stage, "cat": "stage", "ph": "X", "pid": 0, "tid": e.worker,
            "ts": e.start / 1e3, "dur": max(e.end - e.start, 0) / 1e3,
            "args": {"stream_index": e.stream_index},
        })
        for dep in e.dependency_edges:
            src = index.get(dep)
            if src is None:
                continue
            flow_id += 1
            out.append({"name": "dep", "cat": "dependency", "ph": "s", "id": flow_id, "pid": 0,
                        "tid": src.worker, "ts": src.end / 1e3})
            out.append({"name": "dep", "cat": "dependency", "ph": "f", "bp": "e", "id": flow_id, "pid": 0,
                        "tid": e.worker, "ts": e.start / 1e3})
    with open(path, "w") as fh:
        json.dump({"traceEvents": out, "displayTimeUnit": "ns"}, fh)
