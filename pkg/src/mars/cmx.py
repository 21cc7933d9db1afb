"""Channel multiplexing: a lossless, bijective reshaping that trades spatial
resolution for channel count.

With factors (fh, fw) and output channel k = c*fh*fw + a*fw + b
(0 <= a < fh, 0 <= b < fw):

    interleave mode:  out[k][i][j] = x[c][i*fh + a][j*fw + b]
    block mode:       out[k][i][j] = x[c][a*(H/fh) + i][b*(W/fw) + j]

Interleave samples strided residue grids (alternating-cell layout); block
slices contiguous bands (e.g. splitting frequencies among channels).
"""
from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import InvalidConfigError, InvalidInputError

MODES = ("interleave", "block")


def _is_pow2(n: int) -> bool:
    return n >= 1 and (n & (n - 1)) == 0


@dataclass(frozen=True)
class CmxDescriptor:
    in_shape: tuple[int, int, int]  # (channels, height, width)
    factor_h: int
    factor_w: int
    mode: str = "interleave"

    def __post_init__(self):
        c, h, w = self.in_shape
        if c < 1 or h < 1 or w < 1:
            raise InvalidConfigError(f"invalid input shape {self.in_shape}")
        if self.mode not in MODES:
            raise InvalidConfigError(f"unknown mode {self.mode!r}, expected one of {MODES}")
        if not (_is_pow2(self.factor_h) and _is_pow2(self.factor_w)):
            raise InvalidConfigError(
                f"factors must be powers of two, got ({self.factor_h}, {self.factor_w})"
            )
        if h % self.factor_h != 0:
            raise InvalidConfigError(f"factor_h={self.factor_h} does not divide height {h}")
        if w % self.factor_w != 0:
            raise InvalidConfigError(f"factor_w={self.factor_w} does not divide width {w}")

    @property
    def out_channels(self) -> int:
        return self.in_shape[0] * self.factor_h * self.factor_w

    @property
    def out_shape(self) -> tuple[int, int, int]:
        c, h, w = self.in_shape
        return (self.out_channels, h // self.factor_h, w // self.factor_w)

    def to_bytes(self) -> bytes:
        """Five little-endian u32 fields plus a mode byte (cache header layout)."""
        c, h, w = self.in_shape
        return struct.pack("<5IB", c, h, w, self.factor_h, self.factor_w,
                           MODES.index(self.mode))

    @classmethod
    def from_bytes(cls, raw: bytes) -> "CmxDescriptor":
        if len(raw) != 21:
            raise InvalidInputError("descriptor record must be 21 bytes")
        c, h, w, fh, fw, mode = struct.unpack("<5IB", raw)
        if mode >= len(MODES):
            raise InvalidInputError(f"unknown mode byte {mode}")
        return cls((c, h, w), fh, fw, MODES[mode])


@dataclass
class PackedTensor:
    values: np.ndarray
    descriptor: CmxDescriptor

    def __post_init__(self):
        self.values = np.asarray(self.values)
        if tuple(self.values.shape) != self.descriptor.out_shape:
            raise InvalidInputError(
                f"packed shape {self.values.shape} does not match descriptor "
                f"output {self.descriptor.out_shape}"
            )


def plan_cmx(freq_bins: int, frames: int, target_h: int, target_w: int,
             mode: str = "interleave") -> CmxDescriptor:
    """Descriptor taking a single-channel (freq_bins x frames) map to
    (target_h x target_w) with factor_h * factor_w output channels."""
    if target_h < 1 or target_w < 1:
        raise InvalidConfigError("targets must be positive")
    if freq_bins % target_h != 0:
        raise InvalidConfigError(f"target_h={target_h} does not divide freq_bins={freq_bins}")
    if frames % target_w != 0:
        raise InvalidConfigError(f"target_w={target_w} does not divide frames={frames}")
    return CmxDescriptor((1, freq_bins, frames), freq_bins // target_h,
                         frames // target_w, mode)


def cmx_pack(x: np.ndarray, d: CmxDescriptor) -> PackedTensor:
    """Reshape (C, H, W) -> (C*fh*fw, H/fh, W/fw) losslessly."""
    x = np.asarray(x)
    if tuple(x.shape) != d.in_shape:
        raise InvalidInputError(f"input shape {x.shape} does not match descriptor {d.in_shape}")
    c, h, w = d.in_shape
    fh, fw = d.factor_h, d.factor_w
    if d.mode == "interleave":
        y = x.reshape(c, h // fh, fh, w // fw, fw).transpose(0, 2, 4, 1, 3)
    else:
        y = x.reshape(c, fh, h // fh, fw, w // fw).transpose(0, 1, 3, 2, 4)
    return PackedTensor(np.ascontiguousarray(y.reshape(d.out_shape)), d)


def cmx_unpack(p: PackedTensor) -> np.ndarray:
    """Exact inverse of cmx_pack; bit-identical roundtrip in both modes."""
    d = p.descriptor
    c, h, w = d.in_shape
    fh, fw = d.factor_h, d.factor_w
    y = p.values.reshape(c, fh, fw, h // fh, w // fw)
    if d.mode == "interleave":
        x = y.transpose(0, 3, 1, 4, 2)
    else:
        x = y.transpose(0, 1, 3, 2, 4)
    return np.ascontiguousarray(x.reshape(c, h, w))
