"""Token position tables and 2-D rotary embeddings.

Text tokens sit at (0, 0). Image tokens take their (row, col) grid coordinates;
a shifted table moves every image token to (row, col + offset) so that a
reference image occupies columns disjoint from the target it is shared with.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from attnshare.errors import ShapeError, ValidationError
from attnshare.tensor import as_matrix, dumps_tensor, load_tensor, save_tensor


@dataclass(frozen=True)
class PositionTable:
    entries: np.ndarray  # (text_len + h*w, 2) int64, text rows first
    grid: Tuple[int, int]
    text_len: int
    offset: int = 0  # column shift applied to image tokens; 0 is the identity mode

    @property
    def shifted(self) -> bool:
        return self.offset != 0

    @property
    def text(self) -> np.ndarray:
        return self.entries[: self.text_len]

    @property
    def image(self) -> np.ndarray:
        return self.entries[self.text_len:]

    def __len__(self) -> int:
        return len(self.entries)


def grid_coords(grid: Tuple[int, int]) -> np.ndarray:
    h, w = grid
    ii, jj = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    return np.stack([ii.ravel(), jj.ravel()], axis=1).astype(np.int64)


def build_positions(grid: Tuple[int, int], text_len: int, shift: Optional[int] = None) -> PositionTable:
    """Positions for ``text_len`` text tokens followed by a row-major ``grid`` of image tokens.

    ``shift=None`` or ``0`` gives the identity layout; ``shift=w`` places the image
    immediately to the right of an unshifted ``h x w`` image.
    """
    h, w = (int(g) for g in grid)
    if h < 1 or w < 1:
        raise ValidationError(f"grid must be at least 1x1, got {grid}")
    if text_len < 0:
        raise ValidationError(f"text_len must be non-negative, got {text_len}")
    offset = int(shift or 0)
    if offset < 0:
        raise ValidationError("shift offset must be non-negative")
    img = grid_coords((h, w))
    img[:, 1] += offset
    entries = np.concatenate([np.zeros((text_len, 2), dtype=np.int64), img], axis=0)
    return PositionTable(entries=entries, grid=(h, w), text_len=int(text_len), offset=offset)


@dataclass(frozen=True)
class RopeParams:
    head_dim: int
    base: float = 10000.0
    axis_split: Optional[Tuple[int, int]] = None  # channels for (row axis, col axis); default even split

    def __post_init__(self):
        if self.head_dim <= 0 or self.head_dim % 2:
            raise ValidationError(f"head_dim must be positive and even, got {self.head_dim}")
        if not self.base > 1:
            raise ValidationError(f"rope base must exceed 1, got {self.base}")
        i_dim, j_dim = self.split
        if i_dim % 2 or j_dim % 2 or i_dim + j_dim != self.head_dim:
            raise ValidationError(f"axis_split {self.split} must be two even counts summing to {self.head_dim}")

    @property
    def split(self) -> Tuple[int, int]:
        if self.axis_split is not None:
            return tuple(int(s) for s in self.axis_split)
        half = self.head_dim // 2
        i_dim = half + (half % 2)  # keep both halves even when head_dim % 4 == 2
        return i_dim, self.head_dim - i_dim

    def axis_frequencies(self) -> Tuple[np.ndarray, np.ndarray]:
        out = []
        for dim in self.split:
            out.append(self.base ** (-np.arange(0, dim, 2, dtype=np.float64) / dim) if dim else np.zeros(0))
        return out[0], out[1]

    def angles(self, positions: np.ndarray) -> np.ndarray:
        """Rotation angle of every channel pair, shape (rows, head_dim // 2)."""
        pos = np.asarray(positions, dtype=np.float64)
        fi, fj = self.axis_frequencies()
        return np.concatenate([np.outer(pos[:, 0], fi), np.outer(pos[:, 1], fj)], axis=1)


def rope_rotate_positions(vectors, positions, params: RopeParams) -> np.ndarray:
    """Rotate channel pairs (2c, 2c+1) of each row by its position's angle."""
    x = as_matrix(vectors, name="vectors", check_finite=False)
    pos = np.asarray(positions)
    if pos.ndim != 2 or pos.shape[1] != 2:
        raise ShapeError(f"positions must be (rows, 2), got {pos.shape}")
    if x.shape[0] != pos.shape[0]:
        raise ShapeError(f"{x.shape[0]} vectors but {pos.shape[0]} positions")
    if x.shape[1] != params.head_dim:
        raise ShapeError(f"vector width {x.shape[1]} != head_dim {params.head_dim}")
    theta = params.angles(pos)
    cos, sin = np.cos(theta), np.sin(theta)
    xd = x.astype(np.float64)
    even, odd = xd[:, 0::2], xd[:, 1::2]
    out = np.empty_like(xd)
    out[:, 0::2] = even * cos - odd * sin
    out[:, 1::2] = even * sin + odd * cos
    return out.astype(np.float32)


def rope_rotate(vectors, table: PositionTable, params: RopeParams) -> np.ndarray:
    return rope_rotate_positions(vectors, table.entries, params)


def dumps_positions(table: PositionTable) -> bytes:
    return dumps_tensor(table.entries.astype(np.uint32))


def save_positions(path, table: PositionTable) -> None:
    save_tensor(path, table.entries.astype(np.uint32))


def load_positions(path) -> np.ndarray:
    entries = load_tensor(path, dtype=np.uint32)
    if entries.ndim != 2 or entries.shape[1] != 2:
        raise ShapeError(f"position file must hold an (E, 2) table, got {entries.shape}")
    return entries.astype(np.int64)
