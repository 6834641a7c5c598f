"""Sample buffers and their on-disk capture/replay formats.

Two raw formats are used, each paired with a JSON sidecar named
``<raw path>.json``:

* ``cf32le`` -- interleaved little-endian float32 (re, im) pairs; transmitter
  frames.
* ``s16le`` -- little-endian signed 16-bit ADC codes; receiver captures.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

SIDECAR_SUFFIX = ".json"


@dataclass
class ComplexFrame:
    """A contiguous block of samples.

    ``start`` is the absolute index of ``samples[0]`` within its stream, so
    ``time_offset`` and any phase reference stay continuous across frames.
    Real-valued signals (intensity, ADC codes) use the same container.
    """

    samples: np.ndarray
    sample_rate: float
    stream_index: int = 0
    start: int = 0
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.sample_rate <= 0:
            raise ValueError("sample_rate must be positive")

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def time_offset(self) -> float:
        return self.start / self.sample_rate

    @property
    def power(self) -> float:
        return float(np.mean(np.abs(self.samples) ** 2))

    def with_samples(self, samples: np.ndarray, **changes) -> "ComplexFrame":
        meta = dict(self.meta)
        meta.update(changes.pop("meta", {}))
        return replace(self, samples=samples, meta=meta, **changes)


class CaptureFormatError(ValueError):
    pass


def sidecar_path(path) -> Path:
    return Path(str(path) + SIDECAR_SUFFIX)


def _write_sidecar(path, meta: dict) -> None:
    with open(sidecar_path(path), "w") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
        fh.write("\n")


def read_sidecar(path) -> dict:
    sc = sidecar_path(path)
    if not sc.exists():
        raise CaptureFormatError(f"missing sidecar {sc}")
    with open(sc) as fh:
        return json.load(fh)


def write_cf32(path, frame: ComplexFrame, **meta) -> None:
    data = np.empty(2 * len(frame), dtype="<f4")
    data[0::2] = frame.samples.real
    data[1::2] = frame.samples.imag
    data.tofile(path)
    side = {
        "format": "cf32le",
        "sample_rate": frame.sample_rate,
        "n_samples": len(frame),
        "start": frame.start,
        "stream_index": frame.stream_index,
    }
    side.update(meta)
    _write_sidecar(path, side)


def read_cf32(path) -> ComplexFrame:
    meta = read_sidecar(path)
    if meta.get("format") != "cf32le":
        raise CaptureFormatError(f"{path}: sidecar format {meta.get('format')!r} is not cf32le")
    raw = np.fromfile(path, dtype="<f4")
    n = int(meta["n_samples"])
    if raw.size != 2 * n:
        raise CaptureFormatError(f"{path}: expected {2 * n} floats, found {raw.size}")
    samples = raw[0::2].astype(np.float64) + 1j * raw[1::2].astype(np.float64)
    return ComplexFrame(samples, float(meta["sample_rate"]), int(meta.get("stream_index", 0)),
                        int(meta.get("start", 0)), meta)


def write_s16(path, codes: np.ndarray, sample_rate: float, **meta) -> None:
    codes = np.asarray(codes)
    if codes.dtype.kind not in "iu":
        raise TypeError("ADC captures hold integer codes")
    codes.astype("<i2").tofile(path)
    side = {"format": "s16le", "sample_rate": sample_rate, "n_samples": int(codes.size)}
    side.update(meta)
    _write_sidecar(path, side)


class S16Capture:
    """Memory-mapped view of an ``s16le`` capture, validated against its sidecar."""

    def __init__(self, path, expected_sample_rate: float | None = None):
        self.path = Path(path)
        self.meta = read_sidecar(path)
        if self.meta.get("format") != "s16le":
            raise CaptureFormatError(f"{path}: sidecar format {self.meta.get('format')!r} is not s16le")
        for key in ("sample_rate", "n_samples"):
            if key not in self.meta:
                raise CaptureFormatError(f"{path}: sidecar lacks {key!r}")
        self.sample_rate = float(self.meta["sample_rate"])
        if expected_sample_rate is not None and not np.isclose(self.sample_rate, expected_sample_rate):
            raise CaptureFormatError(
                f"{path}: sidecar sample_rate {self.sample_rate:g} Hz does not match "
                f"configured {expected_sample_rate:g} Hz"
            )
        self.n_samples = int(self.meta["n_samples"])
        size = os.path.getsize(self.path)
        if size != 2 * self.n_samples:
            raise CaptureFormatError(
                f"{path}: raw file holds {size} bytes, sidecar promises {2 * self.n_samples}"
            )
        self.codes = np.memmap(self.path, dtype="<i2", mode="r", shape=(self.n_samples,))

    def __len__(self) -> int:
        return self.n_samples
