"""Overlap-save block engine shared by the receiver's FFT stages.

Blocks of ``fft_size`` samples advance by ``hop``; each block is processed
in the frequency domain and only its central ``hop`` outputs are kept.

Streaming contract: a stage fed ``halo + frame`` (``halo = fft_size - hop``
samples from the preceding frame) emits exactly ``len(frame)`` outputs, the
stream delayed by ``delay = ceil((fft_size - hop) / 2)`` input samples.
Because block boundaries are anchored to the start of the halo, the output
is independent of how a stream is cut into frames as long as frame lengths
are multiples of ``hop``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.fft as sfft
from numpy.lib.stride_tricks import sliding_window_view

# blocks transformed per batch, bounds temporary memory
_BATCH_BLOCKS = 512


@dataclass(frozen=True)
class BlockGeometry:
    fft_size: int
    hop: int

    def __post_init__(self):
        n, h = self.fft_size, self.hop
        if n < 2 or n & (n - 1):
            raise ValueError(f"fft_size {n} must be a power of two")
        if not 1 <= h <= n:
            raise ValueError(f"hop {h} outside [1, {n}]")

    @property
    def margin(self) -> int:
        """Discarded samples at the front of each block."""
        return (self.fft_size - self.hop) // 2

    @property
    def halo(self) -> int:
        return self.fft_size - self.hop

    @property
    def delay(self) -> int:
        return self.halo - self.margin


def _blocks(x: np.ndarray, geom: BlockGeometry, n_out: int) -> np.ndarray:
    """Block view covering outputs ``[margin, margin + n_out)`` of ``x``."""
    n_blocks = -(-n_out // geom.hop)
    need = (n_blocks - 1) * geom.hop + geom.fft_size
    if x.size < need:
        x = np.concatenate([x, np.zeros(need - x.size, dtype=x.dtype)])
    return sliding_window_view(x[:need], geom.fft_size)[:: geom.hop]


def stream_apply(x: np.ndarray, geom: BlockGeometry, block_fn, n_out: int, decimate: int = 1,
                 out_dtype=np.complex128) -> np.ndarray:
    """Run ``block_fn`` over blocks of ``x`` and stitch the retained centres.

    ``block_fn`` maps an ``(n_blocks, fft_size)`` array to an
    ``(n_blocks, fft_size // decimate)`` array of time-domain outputs.
    Output sample ``i`` corresponds to input position ``margin + i * decimate``.
    """
    if geom.hop % decimate or geom.margin % decimate:
        raise ValueError("hop and margin must be multiples of the decimation factor")
    view = _blocks(x, geom, n_out)
    keep0 = geom.margin // decimate
    keep = geom.hop // decimate
    out = np.empty(view.shape[0] * keep, dtype=out_dtype)
    for s in range(0, view.shape[0], _BATCH_BLOCKS):
        res = block_fn(view[s : s + _BATCH_BLOCKS])
        out[s * keep : (s + res.shape[0]) * keep] = res[:, keep0 : keep0 + keep].ravel()
    return out[: n_out // decimate]


def stream_filter(x: np.ndarray, geom: BlockGeometry, freq_response: np.ndarray, n_out: int,
                  decimate: int = 1) -> np.ndarray:
    """Complex FIR filtering (optionally decimating) by overlap-save."""
    n = geom.fft_size
    if freq_response.shape != (n,):
        raise ValueError(f"frequency response must have {n} bins")

    def fn(blocks):
        spec = sfft.fft(blocks, axis=1) * freq_response
        if decimate > 1:
            spec = spec.reshape(spec.shape[0], decimate, n // decimate).mean(axis=1)
        return sfft.ifft(spec, axis=1)

    return stream_apply(np.asarray(x, dtype=np.complex128), geom, fn, n_out, decimate)


def standalone(x: np.ndarray, geom: BlockGeometry, run, decimate: int = 1, pad=0.0) -> np.ndarray:
    """Apply a streaming block operation to a whole signal without delay.

    Pads ``halo`` samples of value ``pad`` in front and ``delay`` behind,
    then drops the outputs that precede input sample 0, so output ``i``
    aligns with input ``i * decimate``.
    """
    if geom.delay % decimate:
        raise ValueError("delay must be a multiple of the decimation factor")
    pad_front = np.full(geom.halo, pad, dtype=x.dtype)
    pad_back = np.full(geom.delay, pad, dtype=x.dtype)
    y = run(np.concatenate([pad_front, x, pad_back]), x.size + geom.delay)
    d = geom.delay // decimate
    return y[d : d + x.size // decimate]
