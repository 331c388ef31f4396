"""Rectilinear N-d grids holding value functions.

Lookups are multilinear; periodic axes wrap and the others clamp to the
boundary, so closed-loop states that leave the domain still return the
(conservative) boundary value.
"""
from __future__ import annotations

import json
import logging
import os
import struct
import tempfile
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from numba import njit

logger = logging.getLogger(__name__)

MAGIC = b"HJVF"
FORMAT_VERSION = 1
_AXIS_STRUCT = struct.Struct("<ddQB")


class ValueFunctionFormatError(ValueError):
    """Raised when a value-function file cannot be decoded.

    ``reason`` is one of ``bad_magic``, ``version``, ``truncated``,
    ``checksum`` or ``meta``.
    """

    def __init__(self, reason: str, message: str):
        super().__init__(f"{reason}: {message}")
        self.reason = reason


@dataclass(frozen=True)
class Axis:
    lo: float
    hi: float
    count: int
    periodic: bool = False

    def __post_init__(self):
        if not self.lo < self.hi:
            raise ValueError(f"axis needs lo < hi, got {self.lo}, {self.hi}")
        if self.count < 2:
            raise ValueError("axis needs at least two nodes")

    @property
    def spacing(self) -> float:
        if self.periodic:
            return (self.hi - self.lo) / self.count
        return (self.hi - self.lo) / (self.count - 1)

    @property
    def nodes(self) -> np.ndarray:
        return self.lo + self.spacing * np.arange(self.count)


@dataclass(frozen=True)
class GridSpec:
    axes: tuple[Axis, ...]

    def __init__(self, axes: Sequence[Axis]):
        object.__setattr__(self, "axes", tuple(axes))

    @classmethod
    def from_bounds(cls, lo, hi, counts, periodic=None) -> "GridSpec":
        periodic = periodic if periodic is not None else [False] * len(counts)
        return cls([Axis(float(a), float(b), int(n), bool(p)) for a, b, n, p in zip(lo, hi, counts, periodic)])

    @property
    def ndim(self) -> int:
        return len(self.axes)

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(ax.count for ax in self.axes)

    @property
    def spacings(self) -> np.ndarray:
        return np.array([ax.spacing for ax in self.axes])

    @property
    def lo(self) -> np.ndarray:
        return np.array([ax.lo for ax in self.axes])

    @property
    def hi(self) -> np.ndarray:
        return np.array([ax.hi for ax in self.axes])

    def coordinates(self, sparse: bool = True) -> list[np.ndarray]:
        """Node coordinates per axis, broadcastable to ``shape`` when sparse."""
        return np.meshgrid(*[ax.nodes for ax in self.axes], indexing="ij", sparse=sparse)

    def points(self) -> np.ndarray:
        return np.stack(self.coordinates(sparse=False), axis=-1)

    def to_dict(self) -> dict:
        return {"axes": [[ax.lo, ax.hi, ax.count, ax.periodic] for ax in self.axes]}

    def with_counts(self, counts) -> "GridSpec":
        return GridSpec([Axis(ax.lo, ax.hi, int(n), ax.periodic) for ax, n in zip(self.axes, counts)])


def _cell_coordinates(spec: GridSpec, x: np.ndarray):
    """Lower/upper node indices and fractional offsets per axis."""
    lower, upper, frac = [], [], []
    for j, ax in enumerate(spec.axes):
        t = (x[..., j] - ax.lo) / ax.spacing
        if ax.periodic:
            t = np.mod(t, ax.count)
            i0 = np.floor(t).astype(np.intp)
            i0 = np.minimum(i0, ax.count - 1)
            i1 = np.where(i0 + 1 == ax.count, 0, i0 + 1)
        else:
            t = np.clip(t, 0.0, ax.count - 1)
            i0 = np.minimum(np.floor(t).astype(np.intp), ax.count - 2)
            i1 = i0 + 1
        lower.append(i0)
        upper.append(i1)
        frac.append(t - i0)
    return lower, upper, frac


def _multilinear(spec: GridSpec, flat_values: np.ndarray, x: np.ndarray) -> np.ndarray:
    lower, upper, frac = _cell_coordinates(spec, x)
    strides = np.cumprod((spec.shape[1:] + (1,))[::-1])[::-1]
    out = np.zeros(x.shape[:-1])
    d = spec.ndim
    for corner in range(1 << d):
        idx = 0
        w = 1.0
        for j in range(d):
            if corner >> (d - 1 - j) & 1:
                idx = idx + upper[j] * strides[j]
                w = w * frac[j]
            else:
                idx = idx + lower[j] * strides[j]
                w = w * (1.0 - frac[j])
        out = out + w * flat_values[idx]
    return out


@njit(cache=True)
def _multilinear_kernel(lo, spacing, counts, periodic, strides, flat, x):
    """Compiled twin of :func:`_multilinear` over a ``(P, d)`` query block."""
    n, d = x.shape
    out = np.empty(n)
    i0 = np.empty(d, dtype=np.int64)
    i1 = np.empty(d, dtype=np.int64)
    fr = np.empty(d)
    wts = np.empty(1 << d)
    offs = np.empty(1 << d, dtype=np.int64)
    for p in range(n):
        for j in range(d):
            t = (x[p, j] - lo[j]) / spacing[j]
            c = counts[j]
            if periodic[j]:
                t = t - np.floor(t / c) * c
                a = min(int(np.floor(t)), c - 1)
                i0[j] = a
                i1[j] = 0 if a + 1 == c else a + 1
            else:
                if t < 0.0:
                    t = 0.0
                elif t > c - 1:
                    t = c - 1.0
                a = min(int(np.floor(t)), c - 2)
                i0[j] = a
                i1[j] = a + 1
            fr[j] = t - a
        # corner weights and offsets built one axis at a time
        base = 0
        wts[0] = 1.0
        offs[0] = 0
        m = 1
        for j in range(d):
            base += i0[j] * strides[j]
            step = (i1[j] - i0[j]) * strides[j]
            for k in range(m):
                wts[k + m] = wts[k] * fr[j]
                offs[k + m] = offs[k] + step
                wts[k] *= 1.0 - fr[j]
            m *= 2
        acc = 0.0
        for k in range(m):
            acc += wts[k] * flat[base + offs[k]]
        out[p] = acc
    return out


def _fast_multilinear(spec: GridSpec, flat_values: np.ndarray, x: np.ndarray) -> np.ndarray:
    axes = spec.axes
    lo = np.array([ax.lo for ax in axes])
    spacing = np.array([ax.spacing for ax in axes])
    counts = np.array([ax.count for ax in axes], dtype=np.int64)
    periodic = np.array([ax.periodic for ax in axes])
    strides = np.cumprod((spec.shape[1:] + (1,))[::-1])[::-1].astype(np.int64)
    flat_x = np.ascontiguousarray(x.reshape(-1, spec.ndim), dtype=np.float64)
    return _multilinear_kernel(lo, spacing, counts, periodic, strides, flat_values, flat_x).reshape(x.shape[:-1])


def node_gradient(values: np.ndarray, spec: GridSpec, axis: int) -> np.ndarray:
    """Central differences along ``axis``; one-sided at non-periodic ends."""
    ax = spec.axes[axis]
    h = ax.spacing
    v = np.moveaxis(values, axis, 0)
    g = np.empty_like(v)
    if ax.periodic:
        g[:] = (np.roll(v, -1, axis=0) - np.roll(v, 1, axis=0)) / (2 * h)
    else:
        g[1:-1] = (v[2:] - v[:-2]) / (2 * h)
        g[0] = (v[1] - v[0]) / h
        g[-1] = (v[-1] - v[-2]) / h
    return np.moveaxis(g, 0, axis)


@dataclass
class ValueFunction:
    """A gridded value function plus its provenance metadata.

    Values are stored with the grid's shape and frozen read-only.
    """

    spec: GridSpec
    values: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        values = np.array(self.values, dtype=np.float64, copy=True)
        if values.size != int(np.prod(self.spec.shape)):
            raise ValueError(f"{values.size} values for grid of shape {self.spec.shape}")
        values = values.reshape(self.spec.shape)
        if not np.all(np.isfinite(values)):
            raise ValueError("value function holds non-finite entries")
        values.setflags(write=False)
        self.values = values
        self._flat = values.ravel()
        self._grad_cache: list[np.ndarray] | None = None

    @property
    def ndim(self) -> int:
        return self.spec.ndim

    def _check(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if x.shape[-1:] != (self.ndim,):
            raise ValueError(f"query dimension {x.shape[-1:]} does not match grid dimension {self.ndim}")
        return x

    def interpolate(self, x):
        """Multilinear lookup at points ``x`` of shape ``(..., ndim)``."""
        x = self._check(x)
        out = _fast_multilinear(self.spec, self._flat, x)
        return float(out) if out.ndim == 0 else out

    def cache_gradients(self) -> "ValueFunction":
        """Precompute node gradients (trades memory for query speed)."""
        self._grad_cache = [node_gradient(self.values, self.spec, j).ravel() for j in range(self.ndim)]
        return self

    def gradient(self, x) -> np.ndarray:
        """Interpolated node-stencil gradient at ``x``; returns ``(..., ndim)``."""
        x = self._check(x)
        if self._grad_cache is not None:
            comps = [_fast_multilinear(self.spec, g, x) for g in self._grad_cache]
            return np.stack(comps, axis=-1)
        return self._gradient_on_demand(x)

    def _gradient_on_demand(self, x: np.ndarray) -> np.ndarray:
        spec = self.spec
        d = spec.ndim
        lower, upper, frac = _cell_coordinates(spec, x)
        shape = spec.shape
        strides = np.cumprod((shape[1:] + (1,))[::-1])[::-1]
        out = np.zeros(x.shape[:-1] + (d,))
        for corner in range(1 << d):
            node = []
            w = 1.0
            for j in range(d):
                if corner >> (d - 1 - j) & 1:
                    node.append(upper[j])
                    w = w * frac[j]
                else:
                    node.append(lower[j])
                    w = w * (1.0 - frac[j])
            base = sum(node[j] * strides[j] for j in range(d))
            for j, ax in enumerate(spec.axes):
                i = node[j]
                h = ax.spacing
                if ax.periodic:
                    ip = np.where(i + 1 == ax.count, 0, i + 1)
                    im = np.where(i == 0, ax.count - 1, i - 1)
                    denom = 2 * h
                else:
                    ip = np.minimum(i + 1, ax.count - 1)
                    im = np.maximum(i - 1, 0)
                    denom = (ip - im) * h
                fwd = base + (ip - i) * strides[j]
                bwd = base + (im - i) * strides[j]
                out[..., j] += w * (self._flat[fwd] - self._flat[bwd]) / denom
        return out

    def save(self, path) -> None:
        save(self, path)


def _encode(vf: ValueFunction) -> bytes:
    parts = [MAGIC, struct.pack("<II", FORMAT_VERSION, vf.ndim)]
    for ax in vf.spec.axes:
        parts.append(_AXIS_STRUCT.pack(ax.lo, ax.hi, ax.count, 1 if ax.periodic else 0))
    payload = np.ascontiguousarray(vf.values, dtype="<f8").tobytes()
    parts.append(payload)
    parts.append(struct.pack("<I", zlib.crc32(payload)))
    return b"".join(parts)


def atomic_write(path, data: bytes | str) -> None:
    """Write via a temp file in the target directory, then rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    mode = "wb" if isinstance(data, bytes) else "w"
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, mode) as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def meta_path(path) -> Path:
    return Path(str(path) + ".meta.json")


def save(vf: ValueFunction, path) -> None:
    atomic_write(path, _encode(vf))
    atomic_write(meta_path(path), json.dumps(vf.meta, sort_keys=True, indent=2))


def load(path) -> ValueFunction:
    data = Path(path).read_bytes()
    if len(data) < 12:
        raise ValueFunctionFormatError("truncated", f"{path}: header shorter than 12 bytes")
    if data[:4] != MAGIC:
        raise ValueFunctionFormatError("bad_magic", f"{path}: expected {MAGIC!r}, found {data[:4]!r}")
    version, ndim = struct.unpack_from("<II", data, 4)
    if version != FORMAT_VERSION:
        raise ValueFunctionFormatError("version", f"{path}: format version {version}, expected {FORMAT_VERSION}")
    offset = 12
    axes = []
    for _ in range(ndim):
        if len(data) < offset + _AXIS_STRUCT.size:
            raise ValueFunctionFormatError("truncated", f"{path}: axis table cut short")
        lo, hi, count, periodic = _AXIS_STRUCT.unpack_from(data, offset)
        offset += _AXIS_STRUCT.size
        axes.append(Axis(lo, hi, int(count), bool(periodic)))
    spec = GridSpec(axes)
    n = int(np.prod(spec.shape))
    end = offset + 8 * n
    if len(data) < end + 4:
        raise ValueFunctionFormatError("truncated", f"{path}: payload needs {8 * n + 4} bytes, {len(data) - offset} present")
    payload = data[offset:end]
    (crc,) = struct.unpack_from("<I", data, end)
    if zlib.crc32(payload) != crc:
        raise ValueFunctionFormatError("checksum", f"{path}: CRC32 mismatch")
    values = np.frombuffer(payload, dtype="<f8").reshape(spec.shape)
    mp = meta_path(path)
    meta = {}
    if mp.exists():
        try:
            meta = json.loads(mp.read_text())
        except json.JSONDecodeError as exc:
            raise ValueFunctionFormatError("meta", f"{mp}: {exc}") from exc
    return ValueFunction(spec, values, meta)
