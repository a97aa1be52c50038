"""Hyperspectral cubes: HSC1 file I/O, synthetic scenes, noise, patches and splits."""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

MAGIC = b"HSC1"
_HEADER = struct.Struct("<4sIII")
_FOOTER = struct.Struct("<ffI")


class CubeFormatError(ValueError):
    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


@dataclass
class HsiCube:
    """An ``H x W x C`` image cube with the value range used as the PSNR peak."""

    data: np.ndarray
    value_range: tuple[float, float] = (0.0, 1.0)

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.ndim != 3 or min(self.data.shape) < 1:
            raise ValueError(f"cube data must be H x W x C with all dims >= 1, got {self.data.shape}")
        if not np.all(np.isfinite(self.data)):
            raise ValueError("cube data must be finite")
        self.value_range = (float(self.value_range[0]), float(self.value_range[1]))

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape

    @property
    def peak(self) -> float:
        return self.value_range[1] - self.value_range[0]


def save_cube(cube: HsiCube, path) -> None:
    h, w, c = cube.shape
    payload = np.ascontiguousarray(cube.data, dtype="<f4").tobytes()
    lo, hi = cube.value_range
    with open(path, "wb") as f:
        f.write(_HEADER.pack(MAGIC, h, w, c))
        f.write(payload)
        f.write(_FOOTER.pack(lo, hi, zlib.crc32(payload)))


def load_cube(path) -> HsiCube:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise CubeFormatError(f"file truncated: header needs {_HEADER.size - len(raw)} more bytes",
                              len(raw))
    magic, h, w, c = _HEADER.unpack_from(raw, 0)
    if magic != MAGIC:
        raise CubeFormatError(f"bad magic {magic!r}, expected {MAGIC!r}", 0)
    if min(h, w, c) < 1:
        raise CubeFormatError(f"invalid dimensions {h}x{w}x{c}", 4)
    n_payload = 4 * h * w * c
    expected = _HEADER.size + n_payload + _FOOTER.size
    if len(raw) < expected:
        raise CubeFormatError(
            f"file truncated: missing {expected - len(raw)} bytes for a {h}x{w}x{c} cube",
            len(raw))
    if len(raw) > expected:
        raise CubeFormatError(
            f"payload length does not match header dims {h}x{w}x{c}: "
            f"{len(raw) - expected} unexpected trailing bytes", expected)
    payload = raw[_HEADER.size:_HEADER.size + n_payload]
    lo, hi, crc = _FOOTER.unpack_from(raw, _HEADER.size + n_payload)
    if zlib.crc32(payload) != crc:
        raise CubeFormatError("payload CRC mismatch", _HEADER.size)
    data = np.frombuffer(payload, dtype="<f4").reshape(h, w, c).astype(np.float64)
    try:
        return HsiCube(data, (lo, hi))
    except ValueError as exc:
        raise CubeFormatError(str(exc), _HEADER.size) from exc


def synth_cube(height: int, width: int, bands: int, rng: np.random.Generator,
               components: int = 4) -> HsiCube:
    """Smooth separable scene: low-frequency spatial fields times smooth spectra.

    Values are rescaled to [0, 1].
    """
    if min(height, width, bands) < 1:
        raise ValueError("cube dimensions must be >= 1")
    yy, xx = np.meshgrid(np.linspace(0, 1, height), np.linspace(0, 1, width), indexing="ij")
    lam = np.linspace(0, 1, bands)
    cube = np.zeros((height, width, bands))
    for _ in range(components):
        field = np.zeros((height, width))
        for _ in range(3):
            fy, fx = rng.uniform(0.2, 2.5, size=2)
            phase = rng.uniform(0, 2 * np.pi)
            field += rng.uniform(0.3, 1.0) * np.cos(2 * np.pi * (fy * yy + fx * xx) + phase)
        centre, width_s = rng.uniform(0, 1), rng.uniform(0.3, 0.8)
        spectrum = np.exp(-0.5 * ((lam - centre) / width_s) ** 2) + rng.uniform(0.1, 0.5)
        cube += field[:, :, None] * spectrum[None, None, :]
    lo, hi = cube.min(), cube.max()
    cube = (cube - lo) / (hi - lo) if hi > lo else np.zeros_like(cube)
    return HsiCube(cube, (0.0, 1.0))


def add_gaussian_noise(cube: HsiCube, sigma: float, rng: np.random.Generator) -> HsiCube:
    """Additive i.i.d. Normal(0, sigma**2) noise, unclipped."""
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    if sigma == 0:
        return HsiCube(cube.data.copy(), cube.value_range)
    return HsiCube(cube.data + rng.normal(0.0, sigma, size=cube.shape), cube.value_range)


@dataclass
class PatchSet:
    """Aligned clean/noisy patches stored ``[n, S, S, C]`` with (cube, row, col) provenance."""

    clean: np.ndarray
    noisy: np.ndarray
    provenance: np.ndarray

    def __post_init__(self):
        if self.clean.shape != self.noisy.shape:
            raise ValueError("clean and noisy patches must align")
        if len(self.provenance) != len(self.clean):
            raise ValueError("one provenance row per patch required")

    def __len__(self):
        return len(self.clean)

    def subset(self, index) -> PatchSet:
        index = np.asarray(index, dtype=np.int64)
        return PatchSet(self.clean[index], self.noisy[index], self.provenance[index])

    def nchw(self) -> tuple[np.ndarray, np.ndarray]:
        """(noisy input, clean target) as NCHW float64 arrays."""
        return (np.ascontiguousarray(self.noisy.transpose(0, 3, 1, 2), dtype=np.float64),
                np.ascontiguousarray(self.clean.transpose(0, 3, 1, 2), dtype=np.float64))

    @staticmethod
    def concat(sets) -> PatchSet:
        sets = list(sets)
        return PatchSet(np.concatenate([s.clean for s in sets]),
                        np.concatenate([s.noisy for s in sets]),
                        np.concatenate([s.provenance for s in sets]))


def patch_count(height: int, width: int, size: int, stride: int) -> int:
    return ((height - size) // stride + 1) * ((width - size) // stride + 1)


def patch_positions(height: int, width: int, size: int, stride: int) -> list[tuple[int, int]]:
    if size > height or size > width:
        raise ValueError(f"patch size {size} exceeds cube {height}x{width}")
    if stride < 1:
        raise ValueError("stride must be >= 1")
    return [(r, c) for r in range(0, height - size + 1, stride)
            for c in range(0, width - size + 1, stride)]


def extract_patches(clean: HsiCube, noisy: HsiCube, size: int, stride: int,
                    cube_id: int = 0) -> PatchSet:
    if clean.shape != noisy.shape:
        raise ValueError(f"cubes not aligned: {clean.shape} vs {noisy.shape}")
    h, w, _ = clean.shape
    pos = patch_positions(h, w, size, stride)
    rows = np.array([p[0] for p in pos])
    cols = np.array([p[1] for p in pos])
    ii = rows[:, None, None] + np.arange(size)[None, :, None]
    jj = cols[:, None, None] + np.arange(size)[None, None, :]
    prov = np.column_stack([np.full(len(pos), cube_id), rows, cols])
    return PatchSet(clean.data[ii, jj], noisy.data[ii, jj], prov)


def split_sizes(n: int, fractions) -> tuple[int, int, int]:
    fr = tuple(float(f) for f in fractions)
    if len(fr) != 3 or min(fr) <= 0 or abs(sum(fr) - 1.0) > 1e-6:
        raise ValueError(f"fractions must be three positive values summing to 1, got {fractions}")
    n_eval = int(round(fr[1] * n))
    n_test = int(round(fr[2] * n))
    return n - n_eval - n_test, n_eval, n_test


def split_patches(ps: PatchSet, fractions, rng: np.random.Generator):
    """Random disjoint (train, eval, test) partition; rounding remainder goes to train."""
    n_train, n_eval, _ = split_sizes(len(ps), fractions)
    order = rng.permutation(len(ps))
    return (ps.subset(order[:n_train]),
            ps.subset(order[n_train:n_train + n_eval]),
            ps.subset(order[n_train + n_eval:]))
