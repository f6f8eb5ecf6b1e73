"""Block-structured parameter vectors, deterministic RNG, and basic vector algebra.

Every other module works on ``ParamVector`` values: dense float64 vectors with a
named block structure (e.g. ``layer0.weight`` of shape (8, 64)).  Vectors are
immutable after construction; all operations return new values.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class LayoutError(ValueError):
    """Raised when two vectors (or a vector and a norm) disagree on layout."""


class ZeroVectorError(ValueError):
    """Raised by maps that are undefined at the zero vector (dual vector, sphere projection)."""


@dataclass(frozen=True)
class BlockLayout:
    """Ordered, named partition of a flat parameter vector into shaped blocks."""

    blocks: tuple[tuple[str, tuple[int, ...]], ...]
    offsets: tuple[int, ...] = field(init=False, compare=False)
    total_dim: int = field(init=False, compare=False)

    def __post_init__(self):
        names = [name for name, _ in self.blocks]
        if len(set(names)) != len(names):
            raise LayoutError(f"duplicate block names in layout: {names}")
        offsets = [0]
        for name, shape in self.blocks:
            if len(shape) == 0 or any(int(s) <= 0 for s in shape):
                raise LayoutError(f"block {name!r} has non-positive shape {shape}")
            offsets.append(offsets[-1] + int(np.prod(shape)))
        object.__setattr__(self, "offsets", tuple(offsets))
        object.__setattr__(self, "total_dim", offsets[-1])

    @classmethod
    def of(cls, *blocks) -> "BlockLayout":
        """Build from (name, shape) pairs; shapes may be ints or tuples."""
        norm = []
        for name, shape in blocks:
            if isinstance(shape, int):
                shape = (shape,)
            norm.append((str(name), tuple(int(s) for s in shape)))
        return cls(tuple(norm))

    @classmethod
    def flat(cls, dim: int, name: str = "w") -> "BlockLayout":
        """Single unnamed-structure layout of one flat block."""
        return cls.of((name, (dim,)))

    @property
    def names(self) -> list[str]:
        return [name for name, _ in self.blocks]

    def shape_of(self, name: str) -> tuple[int, ...]:
        for bname, shape in self.blocks:
            if bname == name:
                return shape
        raise LayoutError(f"no block named {name!r}")

    def slice_of(self, index: int) -> slice:
        return slice(self.offsets[index], self.offsets[index + 1])

    def block_slices(self):
        """Yield (name, shape, slice) for every block in order."""
        for i, (name, shape) in enumerate(self.blocks):
            yield name, shape, self.slice_of(i)


class ParamVector:
    """Flat float64 vector with a block layout.  Immutable; views share storage."""

    __slots__ = ("layout", "data")

    def __init__(self, layout: BlockLayout, data: np.ndarray):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim != 1 or arr.shape[0] != layout.total_dim:
            raise LayoutError(
                f"data length {arr.shape} does not match layout total_dim {layout.total_dim}"
            )
        if arr.base is not None or arr.flags.writeable:
            arr = arr.copy()
        arr.flags.writeable = False
        object.__setattr__(self, "layout", layout)
        object.__setattr__(self, "data", arr)

    def __setattr__(self, name, value):
        raise AttributeError("ParamVector is immutable")

    @classmethod
    def zeros(cls, layout: BlockLayout) -> "ParamVector":
        return cls(layout, np.zeros(layout.total_dim))

    @classmethod
    def from_blocks(cls, layout: BlockLayout, blocks: dict) -> "ParamVector":
        data = np.zeros(layout.total_dim)
        for name, shape, sl in layout.block_slices():
            data[sl] = np.asarray(blocks[name], dtype=np.float64).reshape(-1)
        return cls(layout, data)

    def block(self, name: str) -> np.ndarray:
        """Read-only shaped view of one block (flatten→unflatten is the identity)."""
        for bname, shape, sl in self.layout.block_slices():
            if bname == name:
                return self.data[sl].reshape(shape)
        raise LayoutError(f"no block named {name!r}")

    def blocks(self):
        """Yield (name, shaped read-only view) in layout order."""
        for name, shape, sl in self.layout.block_slices():
            yield name, self.data[sl].reshape(shape)

    def block_flat(self, index: int) -> np.ndarray:
        return self.data[self.layout.slice_of(index)]

    def with_data(self, data: np.ndarray) -> "ParamVector":
        return ParamVector(self.layout, data)

    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.data)))

    def __len__(self):
        return self.layout.total_dim

    def __repr__(self):
        return f"ParamVector(dim={self.layout.total_dim}, blocks={self.layout.names})"


def check_same_layout(a: ParamVector, b: ParamVector):
    if a.layout is not b.layout and a.layout != b.layout:
        raise LayoutError(f"layout mismatch: {a.layout.names} vs {b.layout.names}")


def inner(a: ParamVector, b: ParamVector) -> float:
    """Euclidean pairing sum_i a_i b_i in double precision."""
    check_same_layout(a, b)
    return float(np.dot(a.data, b.data))


def axpy(alpha: float, x: ParamVector, y: ParamVector) -> ParamVector:
    """Return y + alpha*x; inputs unmodified."""
    check_same_layout(x, y)
    return ParamVector(x.layout, y.data + float(alpha) * x.data)


def scale(alpha: float, x: ParamVector) -> ParamVector:
    return ParamVector(x.layout, float(alpha) * x.data)


class RngState:
    """Deterministic, platform-independent random stream (counter-based Philox).

    The same seed and call sequence yields bit-identical draws on every
    platform.  Single-owner: do not share one state across threads.
    """

    def __init__(self, seed: int):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self.calls = 0
        self._gen = np.random.Generator(np.random.Philox(key=self.seed))

    def normal(self, n: int) -> np.ndarray:
        self.calls += 1
        return self._gen.standard_normal(int(n), dtype=np.float64)

    def uniform(self, n: int) -> np.ndarray:
        self.calls += 1
        return self._gen.random(int(n), dtype=np.float64)

    def permutation(self, n: int) -> np.ndarray:
        self.calls += 1
        return self._gen.permutation(int(n))

    def integers(self, low: int, high: int, n: int) -> np.ndarray:
        self.calls += 1
        return self._gen.integers(low, high, size=int(n))


def gaussian_like(layout: BlockLayout, rng: RngState) -> ParamVector:
    """I.i.d. standard normal vector for the layout; advances the stream."""
    return ParamVector(layout, rng.normal(layout.total_dim))


# -- serialization: flat little-endian float64 payload + plain-text layout sidecar --

_LAYOUT_SUFFIX = ".layout"


def save_vector(v: ParamVector, path) -> None:
    path = str(path)
    v.data.astype("<f8").tofile(path)
    lines = [f"blocks = {len(v.layout.blocks)}"]
    for i, (name, shape) in enumerate(v.layout.blocks):
        lines.append(f"block.{i}.name = {name}")
        lines.append(f"block.{i}.shape = {' '.join(str(s) for s in shape)}")
    with open(path + _LAYOUT_SUFFIX, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def load_vector(path) -> ParamVector:
    path = str(path)
    kv = {}
    with open(path + _LAYOUT_SUFFIX) as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, _, value = line.partition("=")
            kv[key.strip()] = value.strip()
    nblocks = int(kv["blocks"])
    blocks = []
    for i in range(nblocks):
        name = kv[f"block.{i}.name"]
        shape = tuple(int(s) for s in kv[f"block.{i}.shape"].split())
        blocks.append((name, shape))
    layout = BlockLayout(tuple(blocks))
    data = np.fromfile(path, dtype="<f8")
    return ParamVector(layout, data)
