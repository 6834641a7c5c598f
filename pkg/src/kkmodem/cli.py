"""Command-line experiment runner.

Verbs: ``b2b``, ``sweep``, ``trace``, ``capture``, ``replay``, ``selftest``.
Results are CSV/JSON data; no figures are drawn.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import math
import sys
from pathlib import Path

import numpy as np

from . import config as cfgmod
from .config import ExperimentConfig
from .constellation import SUPPORTED_ORDERS, q_from_ber
from .experiment import (
    LEAD_SAMPLES,
    PointResult,
    SimulatedSource,
    calibrate_reference,
    channel_stage,
    ber_confidence,
    run_point,
)
from .frames import CaptureFormatError, ComplexFrame, S16Capture, write_s16
from .pipeline import export_trace
from .pipeline import run as run_pipeline

log = logging.getLogger("kkmodem")

SWEEP_COLUMNS = ["format", "distance_km", "rel_power_db", "cspr_db", "ber", "q_db",
                 "ci_low", "ci_high", "clamp_count", "sync_ok"]
BEST_COLUMNS = ["format", "distance_km", "best_rel_power_db", "best_cspr_db", "ber", "q_db"]


def _fmt(v):
    if isinstance(v, float):
        return "nan" if math.isnan(v) else repr(v)
    return v


def result_row(cfg: ExperimentConfig, distance, power, cspr, res: PointResult) -> dict:
    rep = res.report
    lo, hi = ber_confidence(rep.bit_errors, rep.bits_compared)
    ok = res.sync_ok
    return {
        "format": cfg.format, "distance_km": distance, "rel_power_db": power, "cspr_db": cspr,
        "ber": rep.ber if ok else float("nan"), "q_db": rep.q_db if ok else float("nan"),
        "ci_low": lo if ok else float("nan"), "ci_high": hi if ok else float("nan"),
        "clamp_count": res.clamp_count, "sync_ok": ok,
    }


def best_power(rows: list[dict]) -> list[dict]:
    """Lowest-BER row per (format, distance); ties go to the lower power."""
    out = []
    for key in sorted({(r["format"], r["distance_km"]) for r in rows}):
        cand = [r for r in rows if (r["format"], r["distance_km"]) == key and r["sync_ok"]]
        if not cand:
            out.append(dict(zip(BEST_COLUMNS, [*key, float("nan"), float("nan"), float("nan"), float("nan")])))
            continue
        b = min(cand, key=lambda r: (r["ber"], r["rel_power_db"], r["cspr_db"]))
        out.append({"format": key[0], "distance_km": key[1], "best_rel_power_db": b["rel_power_db"],
                    "best_cspr_db": b["cspr_db"], "ber": b["ber"], "q_db": b["q_db"]})
    return out


def _write_csv(path: Path, columns, rows):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, columns)
        w.writeheader()
        for r in rows:
            w.writerow({k: _fmt(v) for k, v in r.items()})


def run_sweep(cfg: ExperimentConfig, out_dir=None) -> list[dict]:
    """Every (distance, power, cspr) grid point; rows are appended to sweep.csv as they finish."""
    out = Path(out_dir or cfg.output_path)
    out.mkdir(parents=True, exist_ok=True)
    cfgmod.dump(cfg, out / "config.yaml")
    rows = []
    with open(out / "sweep.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, SWEEP_COLUMNS)
        w.writeheader()
        for d in cfg.distances_km:
            for p in cfg.relative_powers_db:
                for c in cfg.cspr_db:
                    res = run_point(cfg.setup(d, p, c), cfg.symbols_per_point, cfg.pipeline,
                                    cfg.warmup_symbols, thresholds=cfg.thresholds)
                    row = result_row(cfg, d, p, c, res)
                    if not res.sync_ok:
                        log.warning("sync failed at %s km, %s dB, CSPR %s dB: %s", d, p, c, res.sync_error)
                    rows.append(row)
                    w.writerow({k: _fmt(v) for k, v in row.items()})
                    fh.flush()
                    log.info("%s", row)
    _write_csv(out / "best_power.csv", BEST_COLUMNS, best_power(rows))
    return rows


def run_trace(cfg: ExperimentConfig, duration: float | None = None, out_dir=None):
    """Continuous binned run at the first grid point; writes bins, trace and throughput."""
    out = Path(out_dir or cfg.output_path)
    out.mkdir(parents=True, exist_ok=True)
    duration = duration or cfg.trace.duration
    if duration <= 0:
        raise ValueError("duration must be positive")
    setup = cfg.setup(cfg.distances_km[0], cfg.relative_powers_db[0], cfg.cspr_db[0])
    n_symbols = int(round(duration * cfg.tx.baud))
    bin_symbols = max(1, int(round(cfg.trace.bin_duration * cfg.tx.baud)))
    res = run_point(setup, n_symbols, cfg.pipeline, cfg.warmup_symbols, bin_symbols, cfg.thresholds)
    cfgmod.dump(cfg, out / "config.yaml")
    _write_csv(out / "bins.csv", ["time_offset", "ber", "q_db", "bit_errors", "bits"],
               [r._asdict() for r in res.report.bins])
    export_trace(res.events, out / "trace.json")
    thr = res.throughput
    with open(out / "throughput.json", "w") as fh:
        json.dump(dataclasses.asdict(thr), fh, indent=2)
    return res


# --------------------------------------------------------- capture / replay


def capture(cfg: ExperimentConfig, path, n_symbols: int | None = None) -> dict:
    """Simulate the first grid point and store its ADC stream as s16le + sidecar."""
    setup = cfg.setup(cfg.distances_km[0], cfg.relative_powers_db[0], cfg.cspr_db[0])
    n_symbols = n_symbols or cfg.symbols_per_point
    total = cfg.warmup_symbols + n_symbols
    ref = calibrate_reference(setup)
    src = SimulatedSource(setup, total, cfg.pipeline.buffer_samples)
    chunks = []
    meta = {}

    def sink(frame):
        chunks.append(np.asarray(frame.samples, dtype=np.int16))
        meta.update(lsb=frame.meta["lsb"], reference=frame.meta["reference"], bits=frame.meta["bits"])

    run_pipeline(src, [channel_stage(setup, ref)], cfg.pipeline, sink, sample_rate=setup.adc.sample_rate)
    codes = np.concatenate(chunks)
    side = dict(meta, start=-src.lead, format_order=cfg.format, seed=cfg.tx.seed,
                distance_km=setup.distance_km, rel_power_db=setup.link.channel_offset_db,
                cspr_db=setup.tx.cspr_db, baud=cfg.tx.baud, warmup_symbols=cfg.warmup_symbols,
                n_symbols=n_symbols)
    write_s16(path, codes, setup.adc.sample_rate, **side)
    return side


class ReplaySource:
    def __init__(self, cap: S16Capture, buffer_samples: int):
        self.cap = cap
        self.buffer = buffer_samples
        self.start = int(cap.meta.get("start", 0))

    def __iter__(self):
        n = len(self.cap)
        for k, s in enumerate(range(0, n - n % self.buffer or n, self.buffer)):
            codes = np.array(self.cap.codes[s : s + self.buffer], dtype=np.int16)
            if codes.size < self.buffer:
                break
            yield ComplexFrame(codes, self.cap.sample_rate, k, self.start + s,
                               {"lsb": float(self.cap.meta["lsb"])})


def replay(cfg: ExperimentConfig, path) -> PointResult:
    cap = S16Capture(path, expected_sample_rate=cfg.adc.sample_rate)
    for key in ("lsb", "format_order", "distance_km", "cspr_db", "n_symbols", "seed"):
        if key not in cap.meta:
            raise CaptureFormatError(f"{path}: sidecar lacks {key!r}")
    if int(cap.meta["format_order"]) != cfg.format:
        raise CaptureFormatError(f"{path}: capture holds {cap.meta['format_order']}-QAM, config says {cfg.format}-QAM")
    if int(cap.meta["seed"]) != cfg.tx.seed:
        raise CaptureFormatError(f"{path}: capture seed {cap.meta['seed']} differs from config seed {cfg.tx.seed}")
    setup = cfg.setup(float(cap.meta["distance_km"]), float(cap.meta.get("rel_power_db", 0.0)),
                      float(cap.meta["cspr_db"]))
    warm = int(cap.meta.get("warmup_symbols", cfg.warmup_symbols))
    return run_point(setup, int(cap.meta["n_symbols"]), cfg.pipeline, warm, thresholds=cfg.thresholds,
                     source=ReplaySource(cap, cfg.pipeline.buffer_samples))


# ------------------------------------------------------------------ verbs


def b2b(cfg: ExperimentConfig, formats=None, out_dir=None) -> list[dict]:
    """Noise-free linear zero-distance check for each format."""
    rows = []
    link = dataclasses.replace(cfg.link, ase_enabled=False, nonlinearity_enabled=False, loading_psd=0.0)
    for m in formats or SUPPORTED_ORDERS:
        c = dataclasses.replace(cfg, format=m, link=link)
        res = run_point(c.setup(0.0, 0.0, cfg.cspr_db[0]), c.symbols_per_point, c.pipeline, c.warmup_symbols)
        rows.append(result_row(c, 0.0, 0.0, cfg.cspr_db[0], res))
    if out_dir:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        _write_csv(Path(out_dir) / "b2b.csv", SWEEP_COLUMNS, rows)
    return rows


def selftest(cfg: ExperimentConfig) -> list[tuple[str, bool, str]]:
    checks = []
    q = q_from_ber(1e-3)
    checks.append(("q_from_ber(1e-3) = 9.80 dB", abs(q - 9.80) <= 0.01, f"{q:.4f} dB"))
    small = dataclasses.replace(cfg, bits_per_point=100_000)
    for m in (4, 16):
        r = b2b(small, [m])[0]
        checks.append((f"{m}-QAM back-to-back error free", r["sync_ok"] and r["ber"] == 0, f"ber={r['ber']}"))
    link = dataclasses.replace(cfg.link, ase_enabled=False, nonlinearity_enabled=False, loading_psd=0.0)
    c = dataclasses.replace(small, link=link)
    res = run_point(c.setup(10_000.0, 0.0, cfg.cspr_db[0]), c.symbols_per_point, c.pipeline, c.warmup_symbols)
    checks.append(("4-QAM 10000 km dispersion absorbed", res.sync_ok and res.report.bit_errors == 0,
                   f"ber={res.report.ber}"))
    return checks


def _print_rows(rows):
    w = csv.DictWriter(sys.stdout, SWEEP_COLUMNS)
    w.writeheader()
    for r in rows:
        w.writerow({k: _fmt(v) for k, v in r.items()})


def _floats(s: str) -> list[float]:
    return [float(x) for x in s.split(",") if x.strip()]


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="kkmodem", description="KK minimum-phase modem experiments")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="verb", required=True)

    def common(sp):
        sp.add_argument("-c", "--config", help="YAML experiment file")
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override any config field, e.g. link.spans=20")
        sp.add_argument("--format", type=int, choices=SUPPORTED_ORDERS)
        sp.add_argument("--distances", type=_floats, help="comma-separated km")
        sp.add_argument("--powers", type=_floats, help="comma-separated relative launch powers, dB")
        sp.add_argument("--cspr", type=_floats, help="comma-separated CSPR values, dB")
        sp.add_argument("--bits", type=int, help="bits per grid point")
        sp.add_argument("--workers", type=int)
        sp.add_argument("--buffer", type=int, help="samples per buffer")
        sp.add_argument("--seed", type=int)
        sp.add_argument("-o", "--output", help="output directory")
        sp.add_argument("--strict", action="store_true", help="exit non-zero on any flagged row")
        return sp

    common(sub.add_parser("b2b", help="back-to-back check for every format"))
    common(sub.add_parser("sweep", help="distance x power x CSPR grid"))
    t = common(sub.add_parser("trace", help="continuous binned run with profiler trace"))
    t.add_argument("--duration", type=float, help="signal duration, s")
    t.add_argument("--bin", type=float, help="bin duration, s")
    cp = common(sub.add_parser("capture", help="write the ADC stream of the first grid point"))
    cp.add_argument("path")
    rp = common(sub.add_parser("replay", help="receive a captured ADC stream"))
    rp.add_argument("path")
    common(sub.add_parser("selftest", help="quick end-to-end checks"))
    return p


def resolve_config(args) -> ExperimentConfig:
    cfg = cfgmod.load(args.config) if args.config else ExperimentConfig()
    sets = list(args.set)
    if args.format is not None:
        sets.append(f"format={args.format}")
    if args.distances is not None:
        sets.append(f"distances_km={args.distances}")
    if args.powers is not None:
        sets.append(f"relative_powers_db={args.powers}")
    if args.cspr is not None:
        sets.append(f"cspr_db={args.cspr}")
    if args.bits is not None:
        sets.append(f"bits_per_point={args.bits}")
    if args.workers is not None:
        sets.append(f"pipeline.workers={args.workers}")
        if cfg.pipeline.max_in_flight is not None and cfg.pipeline.max_in_flight < args.workers:
            sets.append(f"pipeline.max_in_flight={args.workers}")
    if args.buffer is not None:
        sets.append(f"pipeline.buffer_samples={args.buffer}")
    if args.seed is not None:
        sets += [f"tx.seed={args.seed}", f"link.seed={args.seed + 1}", f"pipeline.seed={args.seed}"]
    if args.output is not None:
        sets.append(f"output_path={args.output}")
    if getattr(args, "bin", None) is not None:
        sets.append(f"trace.bin_duration={args.bin}")
    return cfgmod.apply_overrides(cfg, sets)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        cfg = resolve_config(args)
    except cfgmod.ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    flagged = False
    if args.verb == "b2b":
        rows = b2b(cfg, [cfg.format] if args.format else None, cfg.output_path)
        _print_rows(rows)
        flagged = any(not r["sync_ok"] or r["ber"] != 0 for r in rows)
    elif args.verb == "sweep":
        rows = run_sweep(cfg)
        _print_rows(rows)
        flagged = any(not r["sync_ok"] for r in rows)
    elif args.verb == "trace":
        res = run_trace(cfg, args.duration)
        rep, thr = res.report, res.throughput
        print(f"bins={len(rep.bins)} ber={rep.ber:.3e} q_db={rep.q_db:.2f} sync_ok={res.sync_ok}")
        print(f"throughput={thr.throughput:.4g} samples/s realtime_ratio={thr.realtime_ratio:.3e}")
        print(f"wrote {cfg.output_path}/bins.csv, trace.json, throughput.json")
        flagged = not res.sync_ok
    elif args.verb == "capture":
        side = capture(cfg, args.path)
        print(f"wrote {args.path} ({side['n_symbols']} symbols) and its sidecar")
    elif args.verb == "replay":
        try:
            res = replay(cfg, args.path)
        except (CaptureFormatError, FileNotFoundError) as e:
            print(f"replay error: {e}", file=sys.stderr)
            return 2
        rep = res.report
        print(f"bits={rep.bits_compared} errors={rep.bit_errors} ber={rep.ber:.3e} "
              f"q_db={rep.q_db:.2f} sync_ok={res.sync_ok} digest={res.digest}")
        flagged = not res.sync_ok
    elif args.verb == "selftest":
        checks = selftest(cfg)
        for name, ok, detail in checks:
            print(f"{'PASS' if ok else 'FAIL'}  {name}  ({detail})")
        flagged = not all(ok for _, ok, _ in checks)
        if flagged:
            return 1
    return 1 if (args.strict and flagged) else 0


if __name__ == "__main__":
    sys.exit(main())
