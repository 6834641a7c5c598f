"""QAM alphabets, bit mapping, hard demapping and BER/Q-factor bookkeeping.

Supported orders are 4, 16 and 64 (square, Gray coded per axis), 8
(rectangular 4x2 grid, Gray coded per axis) and 32 (cross: the 6x6 grid
without its corners, obtained by folding the outer columns of an 8x4 Gray
rectangle onto the top and bottom rows; quasi-Gray).

Bit sequences are ``uint8`` arrays of zeros and ones, most significant bit
of each label first.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
from scipy.special import erfcinv

SUPPORTED_ORDERS = (4, 8, 16, 32, 64)

_DEMAP_CHUNK = 1 << 16


def _gray(n: int) -> int:
    return n ^ (n >> 1)


@dataclass(frozen=True, eq=False)
class ConstellationSpec:
    order: int
    points: np.ndarray
    labels: tuple[str, ...]
    name: str
    # integer value of each point's label, same order as ``points``
    label_values: np.ndarray = field(repr=False)
    # point index for every integer label
    index_of_label: np.ndarray = field(repr=False)

    @property
    def bits_per_symbol(self) -> int:
        return int(math.log2(self.order))

    @property
    def min_distance(self) -> float:
        d = np.abs(self.points[:, None] - self.points[None, :])
        np.fill_diagonal(d, np.inf)
        return float(d.min())

    def nearest_neighbor_pairs(self, rtol: float = 1e-9) -> list[tuple[int, int]]:
        """Index pairs (i < j) whose distance equals the minimum distance."""
        d = np.abs(self.points[:, None] - self.points[None, :])
        dmin = self.min_distance
        i, j = np.nonzero(np.triu(np.abs(d - dmin) <= rtol * dmin, k=1))
        return list(zip(i.tolist(), j.tolist()))


def _grid(i_levels, q_levels, i_bits, q_bits):
    pts, labs = [], []
    for a, i in enumerate(i_levels):
        for b, q in enumerate(q_levels):
            pts.append(complex(i, q))
            labs.append((_gray(a) << q_bits) | _gray(b))
    return pts, labs


# outer-column points of the 8x4 rectangle and where they land on the cross
_CROSS32_FOLD = {
    (7, 3): (1, 5),
    (7, 1): (3, 5),
    (7, -1): (3, -5),
    (7, -3): (1, -5),
}


def build_constellation(order: int) -> ConstellationSpec:
    """Build a unit-energy QAM alphabet of the given order."""
    if order not in SUPPORTED_ORDERS:
        raise ValueError(f"unsupported QAM order {order}; expected one of {SUPPORTED_ORDERS}")
    k = int(math.log2(order))
    if order in (4, 16, 64):
        side = int(math.isqrt(order))
        levels = np.arange(-(side - 1), side, 2)
        pts, labs = _grid(levels, levels, k // 2, k // 2)
        name = f"{order}-QAM"
    elif order == 8:
        pts, labs = _grid(np.arange(-3, 4, 2), np.array([-1, 1]), 2, 1)
        name = "8-QAM (rectangular 4x2)"
    else:
        pts, labs = _grid(np.arange(-7, 8, 2), np.arange(-3, 4, 2), 3, 2)
        fold = dict(_CROSS32_FOLD)
        fold.update({(-i, q): (-x, y) for (i, q), (x, y) in _CROSS32_FOLD.items()})
        pts = [complex(*fold.get((int(p.real), int(p.imag)), (p.real, p.imag))) for p in pts]
        name = "32-QAM (cross)"

    points = np.asarray(pts, dtype=np.complex128)
    points = points / np.sqrt(np.mean(np.abs(points) ** 2))
    label_values = np.asarray(labs, dtype=np.int64)
    index_of_label = np.empty(order, dtype=np.int64)
    index_of_label[label_values] = np.arange(order)
    labels = tuple(format(v, f"0{k}b") for v in label_values)
    return ConstellationSpec(order, points, labels, name, label_values, index_of_label)


def _bit_weights(k: int) -> np.ndarray:
    return (1 << np.arange(k - 1, -1, -1)).astype(np.int64)


def map_bits(spec: ConstellationSpec, bits) -> np.ndarray:
    """Map consecutive groups of log2(M) bits onto constellation points."""
    bits = np.asarray(bits, dtype=np.uint8).ravel()
    k = spec.bits_per_symbol
    if bits.size % k:
        raise ValueError(f"bit count {bits.size} is not a multiple of {k} bits per symbol")
    values = bits.reshape(-1, k).astype(np.int64) @ _bit_weights(k)
    return spec.points[spec.index_of_label[values]]


def decide(spec: ConstellationSpec, symbols) -> np.ndarray:
    """Index of the Euclidean-nearest point for every symbol.

    Ties resolve to the lowest point index.
    """
    symbols = np.asarray(symbols, dtype=np.complex128).ravel()
    out = np.empty(symbols.size, dtype=np.int64)
    for s in range(0, symbols.size, _DEMAP_CHUNK):
        blk = symbols[s : s + _DEMAP_CHUNK]
        d2 = np.abs(blk[:, None] - spec.points[None, :]) ** 2
        out[s : s + _DEMAP_CHUNK] = np.argmin(d2, axis=1)
    return out


def indices_to_bits(spec: ConstellationSpec, indices) -> np.ndarray:
    k = spec.bits_per_symbol
    values = spec.label_values[np.asarray(indices, dtype=np.int64)]
    return ((values[:, None] >> np.arange(k - 1, -1, -1)) & 1).astype(np.uint8).ravel()


def demap_hard(spec: ConstellationSpec, symbols) -> np.ndarray:
    """Hard-decision demapping to the label of the nearest point."""
    return indices_to_bits(spec, decide(spec, symbols))


def q_from_ber(ber: float) -> float:
    """Gaussian-equivalent Q-factor in dB, 20*log10(sqrt(2)*erfcinv(2*BER))."""
    if not 0.0 < ber < 0.5:
        raise ValueError(f"Q-factor undefined for BER={ber}; need 0 < BER < 0.5")
    return float(20.0 * np.log10(np.sqrt(2.0) * erfcinv(2.0 * ber)))


def _q_or_nan(ber: float) -> float:
    return q_from_ber(ber) if 0.0 < ber < 0.5 else float("nan")


class BinRecord(NamedTuple):
    time_offset: float
    ber: float
    q_db: float
    bit_errors: int
    bits: int


# Commonly quoted pre-FEC BER limits for hard-decision FEC; configuration
# may replace them.
DEFAULT_FEC_THRESHOLDS = {
    "hd-fec-6.7%": 3.8e-3,
    "hd-fec-20%": 2.0e-2,
}


@dataclass
class QReport:
    bit_errors: int
    bits_compared: int
    ber: float
    q_db: float
    bins: list[BinRecord] = field(default_factory=list)
    threshold_verdicts: dict[str, bool] = field(default_factory=dict)

    @property
    def q_defined(self) -> bool:
        return math.isfinite(self.q_db)


def make_report(
    bit_errors: int,
    bits_compared: int,
    bins: list[BinRecord] | None = None,
    thresholds: dict[str, float] | None = None,
) -> QReport:
    ber = bit_errors / bits_compared if bits_compared else float("nan")
    thresholds = DEFAULT_FEC_THRESHOLDS if thresholds is None else thresholds
    verdicts = {name: bool(ber <= lim) for name, lim in thresholds.items()} if bits_compared else {}
    return QReport(int(bit_errors), int(bits_compared), ber, _q_or_nan(ber), bins or [], verdicts)


def bin_errors(errors: np.ndarray, bits_per_bin: int, bit_rate: float, t0: float = 0.0) -> list[BinRecord]:
    """Split a 0/1 error indicator sequence into consecutive bins.

    A trailing partial bin is kept only when it holds at least half a bin.
    """
    if bits_per_bin <= 0:
        raise ValueError("bits_per_bin must be positive")
    n = errors.size
    out = []
    for i, s in enumerate(range(0, n, bits_per_bin)):
        seg = errors[s : s + bits_per_bin]
        if seg.size < bits_per_bin and seg.size < bits_per_bin // 2:
            break
        e = int(seg.sum())
        ber = e / seg.size
        out.append(BinRecord(t0 + s / bit_rate, ber, _q_or_nan(ber), e, int(seg.size)))
    return out


def count_errors(
    tx_bits,
    rx_bits,
    bin_duration: float | None = None,
    bit_rate: float | None = None,
    thresholds: dict[str, float] | None = None,
) -> QReport:
    """Compare aligned bit sequences; optionally bin the errors in time."""
    tx = np.asarray(tx_bits, dtype=np.uint8).ravel()
    rx = np.asarray(rx_bits, dtype=np.uint8).ravel()
    if tx.size != rx.size:
        raise ValueError(f"length mismatch: {tx.size} transmitted vs {rx.size} received bits")
    errors = tx != rx
    bins: list[BinRecord] = []
    if bin_duration is not None:
        if bit_rate is None or bit_rate <= 0:
            raise ValueError("binning requires a positive bit_rate")
        if bin_duration <= 0:
            raise ValueError("bin_duration must be positive")
        bits_per_bin = max(1, int(round(bin_duration * bit_rate)))
        bins = bin_errors(errors, bits_per_bin, bit_rate)
    return make_report(int(errors.sum()), tx.size, bins, thresholds)
