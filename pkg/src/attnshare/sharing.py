"""AdaIN-aligned attention sharing between a reference stream and a target stream.

Three modes are supported:

``vanilla``
    plain multi-modal attention over the target's own text and image tokens.
``naive``
    the target attends to every reference token; target queries and keys are
    AdaIN-aligned to the reference over the whole text+image sequence.
``selective``
    only reference *image* keys/values are shared; target image queries/keys
    are AdaIN-aligned to the reference image tokens and reference keys are
    scaled by ``lam``.

Rotary embeddings are applied after assembly, so AdaIN statistics never see
position phases. Reference rows carry the reference position table, which is
shifted when ``shift == "shifted"``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import FrozenSet, Iterable, NamedTuple, Optional, Tuple

import numpy as np

from attnshare.errors import ConfigurationError, ShapeError, ValidationError
from attnshare.position import PositionTable, RopeParams, build_positions, rope_rotate_positions
from attnshare.tensor import as_matrix, channel_stats, matmul, row_softmax

MODES = ("vanilla", "naive", "selective")
SHIFT_MODES = ("identity", "shifted")
DEFAULT_LAMBDA = 1.1


@dataclass(frozen=True)
class QkvBundle:
    """Projected queries/keys/values of one stream at one layer, split into text and image rows."""

    q_txt: np.ndarray
    k_txt: np.ndarray
    v_txt: np.ndarray
    q_img: np.ndarray
    k_img: np.ndarray
    v_img: np.ndarray

    ROLES = ("q_txt", "k_txt", "v_txt", "q_img", "k_img", "v_img")

    def __post_init__(self):
        for role in self.ROLES:
            object.__setattr__(self, role, as_matrix(getattr(self, role), name=role, check_finite=False))
        m, n = self.q_txt.shape[0], self.q_img.shape[0]
        width = self.q_txt.shape[1]
        for role in self.ROLES:
            rows, cols = getattr(self, role).shape
            if rows != (m if role.endswith("txt") else n) or cols != width:
                raise ShapeError(f"{role} has shape {(rows, cols)}; expected rows {m}/{n} and width {width}")

    @property
    def text_len(self) -> int:
        return self.q_txt.shape[0]

    @property
    def image_len(self) -> int:
        return self.q_img.shape[0]

    @property
    def width(self) -> int:
        return self.q_txt.shape[1]

    @property
    def q(self) -> np.ndarray:
        return np.concatenate([self.q_txt, self.q_img])

    @property
    def k(self) -> np.ndarray:
        return np.concatenate([self.k_txt, self.k_img])

    @property
    def v(self) -> np.ndarray:
        return np.concatenate([self.v_txt, self.v_img])

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(getattr(self, r))) for r in self.ROLES)

    def stacked(self) -> np.ndarray:
        """(3, M+N, width) array of q, k, v with text rows first."""
        return np.stack([self.q, self.k, self.v])

    @classmethod
    def from_stacked(cls, arr: np.ndarray, text_len: int) -> "QkvBundle":
        arr = np.asarray(arr, dtype=np.float32)
        if arr.ndim != 3 or arr.shape[0] != 3:
            raise ShapeError(f"stacked bundle must be (3, rows, width), got {arr.shape}")
        q, k, v = arr
        m = text_len
        return cls(q[:m], k[:m], v[:m], q[m:], k[m:], v[m:])


@dataclass(frozen=True)
class SharingConfig:
    mode: str = "selective"
    lam: float = DEFAULT_LAMBDA
    layers: FrozenSet[int] = field(default_factory=frozenset)
    shift: str = "shifted"
    shift_offset: Optional[int] = None  # None means "the grid width"

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValidationError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.shift not in SHIFT_MODES:
            raise ValidationError(f"shift must be one of {SHIFT_MODES}, got {self.shift!r}")
        if not (math.isfinite(self.lam) and self.lam > 0):
            raise ValidationError(f"lambda must be a positive finite number, got {self.lam}")
        if self.shift_offset is not None and self.shift_offset < 0:
            raise ValidationError("shift_offset must be non-negative")
        object.__setattr__(self, "layers", frozenset(int(i) for i in self.layers))

    def check_layers(self, num_layers: int) -> None:
        bad = sorted(i for i in self.layers if not 0 <= i < num_layers)
        if bad:
            raise ConfigurationError(f"layers {bad} outside [0, {num_layers})")

    def with_(self, **changes) -> "SharingConfig":
        return replace(self, **changes)


def parse_layer_spec(spec: str) -> FrozenSet[int]:
    """Parse ``"19..57"`` (half-open), ``"0,3,5..7"`` or ``""`` into a layer set."""
    out = set()
    for part in str(spec).replace(" ", "").split(","):
        if not part:
            continue
        if ".." in part:
            lo, hi = part.split("..", 1)
            try:
                a, b = int(lo), int(hi)
            except ValueError:
                raise ValidationError(f"bad layer range {part!r}")
            if a < 0 or b < a:
                raise ValidationError(f"bad layer range {part!r}")
            out.update(range(a, b))
        else:
            try:
                idx = int(part)
            except ValueError:
                raise ValidationError(f"bad layer index {part!r}")
            if idx < 0:
                raise ValidationError(f"bad layer index {part!r}")
            out.add(idx)
    return frozenset(out)


def format_layer_spec(layers: Iterable[int]) -> str:
    """Inverse of :func:`parse_layer_spec`, collapsing runs into ``a..b``."""
    items = sorted(set(layers))
    parts, i = [], 0
    while i < len(items):
        j = i
        while j + 1 < len(items) and items[j + 1] == items[j] + 1:
            j += 1
        parts.append(f"{items[i]}..{items[j] + 1}" if j > i else str(items[i]))
        i = j + 1
    return ",".join(parts)


def adain(x, y) -> np.ndarray:
    """Re-normalize each column of ``x`` to the column mean/std of ``y``."""
    x = as_matrix(x, name="x", check_finite=False)
    y = as_matrix(y, name="y", check_finite=False)
    if x.shape[1] != y.shape[1]:
        raise ShapeError(f"adain channel mismatch: {x.shape[1]} vs {y.shape[1]}")
    mx, sx = channel_stats(x)
    my, sy = channel_stats(y)
    out = sy * (x.astype(np.float64) - mx) / sx + my
    return out.astype(np.float32)


def _check_pair(tar: QkvBundle, ref: QkvBundle) -> None:
    if (tar.text_len, tar.image_len, tar.width) != (ref.text_len, ref.image_len, ref.width):
        raise ShapeError(
            f"target bundle {(tar.text_len, tar.image_len, tar.width)} does not match "
            f"reference {(ref.text_len, ref.image_len, ref.width)}"
        )


def scale_ref_keys(k_ref_img, lam: float) -> np.ndarray:
    if not (math.isfinite(lam) and lam > 0):
        raise ValidationError(f"lambda must be a positive finite number, got {lam}")
    k = as_matrix(k_ref_img, name="k_ref_img", check_finite=False)
    return (k.astype(np.float64) * lam).astype(np.float32)


def naive_share(tar: QkvBundle, ref: QkvBundle, lam: float = 1.0):
    """Full sharing: ``Qf`` has M+N rows, ``Kf``/``Vf`` have 2(M+N) rows.

    ``lam`` scales every reference key; the default of 1 leaves them untouched.
    """
    _check_pair(tar, ref)
    qf = adain(tar.q, ref.q)
    k_ref = ref.k if lam == 1.0 else scale_ref_keys(ref.k, lam)
    kf = np.concatenate([adain(tar.k, ref.k), k_ref])
    vf = np.concatenate([tar.v, ref.v])
    return qf, kf, vf


def selective_share(tar: QkvBundle, ref: QkvBundle, lam: float = DEFAULT_LAMBDA):
    """Image-only sharing: ``Qf`` has M+N rows, ``Kf``/``Vf`` have M+2N rows."""
    _check_pair(tar, ref)
    k_ref = scale_ref_keys(ref.k_img, lam)
    qf = np.concatenate([tar.q_txt, adain(tar.q_img, ref.q_img)])
    kf = np.concatenate([tar.k_txt, adain(tar.k_img, ref.k_img), k_ref])
    vf = np.concatenate([tar.v_txt, tar.v_img, ref.v_img])
    return qf, kf, vf


def layer_policy(layer: int, cfg: SharingConfig) -> str:
    return "shared" if cfg.mode != "vanilla" and layer in cfg.layers else "vanilla"


class SharedPositions(NamedTuple):
    target: PositionTable
    reference: PositionTable


def make_positions(grid: Tuple[int, int], text_len: int, cfg: Optional[SharingConfig] = None) -> SharedPositions:
    """Target (identity) and reference (shifted per ``cfg``) tables."""
    target = build_positions(grid, text_len)
    if cfg is None or cfg.shift == "identity":
        return SharedPositions(target, target)
    offset = grid[1] if cfg.shift_offset is None else cfg.shift_offset
    return SharedPositions(target, build_positions(grid, text_len, shift=offset))


def mm_attention(q, k, v, q_pos, k_pos, heads: int = 1, rope: Optional[RopeParams] = None):
    """Multi-head softmax(QK^T / sqrt(d_k)) V with per-head rotary embedding.

    Returns ``(output, weights)`` where ``weights`` has shape (heads, q_rows, k_rows).
    """
    q = as_matrix(q, name="q", check_finite=False)
    k = as_matrix(k, name="k", check_finite=False)
    v = as_matrix(v, name="v", check_finite=False)
    if k.shape[0] != v.shape[0] or q.shape[1] != k.shape[1] or k.shape[1] != v.shape[1]:
        raise ShapeError(f"attention operands q{q.shape} k{k.shape} v{v.shape}")
    width = q.shape[1]
    if heads < 1 or width % heads:
        raise ShapeError(f"width {width} not divisible into {heads} heads")
    d_k = width // heads
    rope = rope or RopeParams(head_dim=d_k)
    if rope.head_dim != d_k:
        raise ShapeError(f"rope head_dim {rope.head_dim} != d_k {d_k}")
    out = np.empty((q.shape[0], width), dtype=np.float32)
    weights = np.empty((heads, q.shape[0], k.shape[0]), dtype=np.float32)
    for h in range(heads):
        cols = slice(h * d_k, (h + 1) * d_k)
        qh = rope_rotate_positions(q[:, cols], q_pos, rope)
        kh = rope_rotate_positions(k[:, cols], k_pos, rope)
        w = row_softmax(matmul(qh, kh.T), scale=math.sqrt(d_k))
        weights[h] = w
        out[:, cols] = matmul(w, v[:, cols])
    return out, weights


def share_keys_positions(tar: QkvBundle, ref: QkvBundle, cfg: SharingConfig, positions: SharedPositions):
    """Assemble ``(Qf, Kf, Vf, q_pos, k_pos)`` for ``cfg.mode``."""
    if len(positions.target) != tar.text_len + tar.image_len:
        raise ShapeError("target position table does not cover the target tokens")
    if cfg.mode == "vanilla":
        return tar.q, tar.k, tar.v, positions.target.entries, positions.target.entries
    if cfg.mode == "naive":
        qf, kf, vf = naive_share(tar, ref)
        ref_pos = positions.reference.entries
    else:
        qf, kf, vf = selective_share(tar, ref, cfg.lam)
        ref_pos = positions.reference.image
    k_pos = np.concatenate([positions.target.entries, ref_pos])
    if len(k_pos) != len(kf):
        raise ShapeError("reference position table does not cover the shared reference rows")
    return qf, kf, vf, positions.target.entries, k_pos


def shared_mm_attention(
    tar: QkvBundle,
    ref: Optional[QkvBundle],
    cfg: SharingConfig,
    positions: SharedPositions,
    heads: int = 1,
    rope: Optional[RopeParams] = None,
    return_weights: bool = False,
):
    """Attention output for the target's M+N tokens under ``cfg``.

    With ``return_weights`` the (heads, M+N, keys) softmax weights are returned too;
    in shared modes the reference keys are the trailing columns.
    """
    if cfg.mode != "vanilla" and ref is None:
        raise ConfigurationError(f"mode {cfg.mode!r} needs a reference bundle")
    qf, kf, vf, q_pos, k_pos = share_keys_positions(tar, ref, cfg, positions)
    out, weights = mm_attention(qf, kf, vf, q_pos, k_pos, heads=heads, rope=rope)
    return (out, weights) if return_weights else out
