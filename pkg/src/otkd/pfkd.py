"""Feature-level distillation over receptive-field regions.

Each predicted keypoint is traced back to the patch of the feature map that
feeds the network head at that location: the patch extent comes from the head's
conv stack, the center from scaling the keypoint into feature-grid coordinates.
Teacher regions are adapted (1x1 channel projection + average pooling) to the
student's region shape and compared under the transport plan.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import CenterOutsideMap, EmptyHead, ShapeMismatch
from .sinkhorn import TransportPlan


@dataclass(frozen=True)
class ConvLayerSpec:
    kernel: int
    stride: int = 1

    def __post_init__(self):
        if self.kernel < 1 or self.stride < 1:
            raise ValueError(f"kernel/stride must be >= 1, got {self}")


@dataclass(frozen=True)
class FeatureMap:
    data: np.ndarray   # (C, H, W)
    delta: float       # output-pixel -> feature-grid scale

    def __post_init__(self):
        d = np.asarray(self.data, dtype=float)
        if d.ndim != 3 or d.shape[1] < 1 or d.shape[2] < 1:
            raise ValueError(f"feature map must be (C, H, W), got {d.shape}")
        if not np.isfinite(d).all():
            raise ValueError("feature map entries must be finite")
        if not self.delta > 0:
            raise ValueError("delta must be > 0")
        object.__setattr__(self, "data", d)


@dataclass(frozen=True)
class FeatureRegion:
    data: np.ndarray           # (C, Hr, Wr)
    center: tuple[int, int]    # (row, col) in feature-grid coordinates
    source_keypoint: int = -1


def receptive_field_extent(head: list[ConvLayerSpec]) -> int:
    """Side length of the input patch feeding one output unit of the stack."""
    if not head:
        raise EmptyHead("need at least one conv layer")
    extent = 1
    jump = 1  # product of strides of the layers before the current one
    for layer in head:
        extent += (layer.kernel - 1) * jump
        jump *= layer.stride
    return extent


def region_center(keypoint, delta: float) -> tuple[int, int]:
    """Feature-grid (row, col) for an (x, y) keypoint: round-half-even of
    delta*y and delta*x respectively."""
    if not delta > 0:
        raise ValueError("delta must be > 0")
    x, y = float(keypoint[0]), float(keypoint[1])
    # np.round implements round-half-to-even, unlike the schoolbook rule
    return int(np.round(delta * y)), int(np.round(delta * x))


def extract_region(fmap: FeatureMap, center: tuple[int, int],
                   extent: int) -> FeatureRegion:
    """Extent x extent window around center; out-of-bounds cells are zero."""
    C, H, W = fmap.data.shape
    r, c = int(center[0]), int(center[1])
    if not (0 <= r < H and 0 <= c < W):
        raise CenterOutsideMap(f"center {center} outside {H}x{W} map")
    # even extents put the extra cell after the center (bottom/right)
    lo = (extent - 1) // 2
    hi = extent - lo
    out = np.zeros((C, extent, extent))
    r0, r1 = r - lo, r + hi
    c0, c1 = c - lo, c + hi
    rs, re = max(r0, 0), min(r1, H)
    cs, ce = max(c0, 0), min(c1, W)
    out[:, rs - r0:re - r0, cs - c0:ce - c0] = fmap.data[:, rs:re, cs:ce]
    return FeatureRegion(out, (r, c))


def _pool_ceil(data: np.ndarray, th: int, tw: int) -> np.ndarray:
    """Non-overlapping average pooling to (th, tw); edge windows may be short."""
    C, H, W = data.shape
    kh = -(-H // th)  # ceil
    kw = -(-W // tw)
    out = np.empty((C, th, tw))
    for i in range(th):
        for j in range(tw):
            blk = data[:, i * kh:min((i + 1) * kh, H), j * kw:min((j + 1) * kw, W)]
            out[:, i, j] = blk.mean(axis=(1, 2))
    return out


def adapt_region(teacher_region: FeatureRegion, target_c: int, target_h: int,
                 target_w: int, projection: np.ndarray) -> FeatureRegion:
    """Channel-mix with `projection` (target_c x C_T), then pool spatially."""
    data = teacher_region.data
    C, H, W = data.shape
    proj = np.asarray(projection, dtype=float)
    if proj.shape != (target_c, C):
        raise ShapeMismatch(f"projection {proj.shape}, expected {(target_c, C)}")
    if target_h > H or target_w > W:
        raise ShapeMismatch(
            f"cannot pool {H}x{W} region up to {target_h}x{target_w}")
    mixed = np.einsum("sc,chw->shw", proj, data)
    if (H, W) != (target_h, target_w):
        mixed = _pool_ceil(mixed, target_h, target_w)
    return FeatureRegion(mixed, teacher_region.center, teacher_region.source_keypoint)


def init_projection(target_c: int, source_c: int,
                    rng: np.random.Generator | None = None) -> np.ndarray:
    """Scaled identity blocks when source_c is a multiple of target_c, else
    small random entries.  The matrix is trained alongside the student."""
    if source_c % target_c == 0:
        k = source_c // target_c
        return np.hstack([np.eye(target_c)] * k) / k
    rng = rng or np.random.default_rng(0)
    return rng.uniform(-0.1, 0.1, (target_c, source_c))


def pfkd_loss(teacher_regions: list[FeatureRegion],
              student_regions: list[FeatureRegion],
              plan: TransportPlan | np.ndarray) -> tuple[float, np.ndarray]:
    """Plan-weighted mean-squared feature discrepancy.

    The plan arrives student-major (M x N) and is transposed here, once, to
    teacher-major: loss = (1/(N*M)) * sum_ij plan_T[i, j] * mse(T_i, S_j) with
    mse normalized by the region element count.  Returns the loss and the
    gradient with respect to every student region, shape (M, C, H, W).
    """
    P = plan.entries if isinstance(plan, TransportPlan) else np.asarray(plan, dtype=float)
    N, M = len(teacher_regions), len(student_regions)
    if P.shape != (M, N):
        raise ShapeMismatch(f"plan {P.shape}, expected {(M, N)} (student-major)")
    T = np.stack([r.data for r in teacher_regions])
    S = np.stack([r.data for r in student_regions])
    if T.shape[1:] != S.shape[1:]:
        raise ShapeMismatch(
            f"teacher regions {T.shape[1:]} vs student {S.shape[1:]} after adaptation")
    Pt = P.T  # teacher-major from here on
    cells = S.shape[1] * S.shape[2] * S.shape[3]
    norm = N * M * cells
    # ||T_i - S_j||^2 summed via Gram expansions, no (N, M, C, H, W) temporary
    t2 = (T ** 2).sum(axis=(1, 2, 3))
    s2 = (S ** 2).sum(axis=(1, 2, 3))
    ts = np.einsum("ichw,jchw->ij", T, S)
    sq = t2[:, None] + s2[None, :] - 2.0 * ts
    loss = float((Pt * sq).sum() / norm)
    col = Pt.sum(axis=0)  # total plan mass on each student region
    grad = (2.0 / norm) * (col[:, None, None, None] * S
                           - np.einsum("ij,ichw->jchw", Pt, T))
    return loss, grad


def aggregate_ensemble_regions(regions_per_member: list[list[FeatureRegion]]
                               ) -> list[FeatureRegion]:
    """Elementwise mean over members, keypoint by keypoint."""
    if not regions_per_member:
        raise ShapeMismatch("no members")
    n = len(regions_per_member[0])
    if any(len(mem) != n for mem in regions_per_member):
        raise ShapeMismatch("members disagree on keypoint count")
    out = []
    for j in range(n):
        stack = [mem[j].data for mem in regions_per_member]
        shape = stack[0].shape
        if any(d.shape != shape for d in stack):
            raise ShapeMismatch(f"region shapes differ for keypoint {j}")
        out.append(FeatureRegion(np.mean(stack, axis=0),
                                 regions_per_member[0][j].center, j))
    return out


_HEADER = struct.Struct("<iiif")  # C, H, W, delta


def save_feature_map(fmap: FeatureMap, path: str | Path) -> None:
    C, H, W = fmap.data.shape
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(C, H, W, fmap.delta))
        fh.write(fmap.data.astype("<f4").tobytes())


def load_feature_map(path: str | Path) -> FeatureMap:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise ValueError(f"{path}: truncated header")
    C, H, W, delta = _HEADER.unpack_from(raw)
    expect = _HEADER.size + 4 * C * H * W
    if len(raw) != expect:
        raise ValueError(f"{path}: expected {expect} bytes, got {len(raw)}")
    data = np.frombuffer(raw, dtype="<f4", offset=_HEADER.size).astype(float)
    return FeatureMap(data.reshape(C, H, W), float(delta))
