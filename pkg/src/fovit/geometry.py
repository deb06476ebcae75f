"""Fixation-dependent visual field and square average pooling.

The image is a 14x14 grid of blocks (one block per patch).  A fixation
places the image inside a 27x27 visual field so that the fixated block sits
at the field center.  Forty-nine square pooling regions tile the field with
receptive fields of 1, 3, 5 and 7 blocks; regions whose center falls outside
the image are dropped.

Coordinates are ``(x, y)`` with ``x`` the column and ``y`` the row.  Feature
grids are indexed ``grid[y, x]`` and flattened row-major (``14 * y + x``).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

IMAGE_SIDE = 14
FIELD_SIDE = 27
RF_SIZES = (1, 3, 5, 7)

# ring coordinate sets, innermost first
_RINGS = (
    (1, (-1, 0, 1), False),
    (3, (-3, 0, 3), True),
    (5, (-7, -2, 2, 7), True),
    (7, (-10, -6, -2, 2, 6, 10), True),
)


class LayoutError(RuntimeError):
    """Raised when a layout violates its construction-time invariants."""


@dataclass(frozen=True)
class PoolingRegion:
    id: int
    dx: int
    dy: int
    rf: int

    @property
    def area(self) -> int:
        return self.rf * self.rf

    def footprint(self) -> list[tuple[int, int]]:
        """Block offsets covered by the region, relative to the fixation."""
        r = self.rf // 2
        return [
            (self.dx + i, self.dy + j)
            for j in range(-r, r + 1)
            for i in range(-r, r + 1)
        ]


@dataclass(frozen=True)
class Fixation:
    x: int
    y: int

    def __post_init__(self):
        if not (0 <= self.x < IMAGE_SIDE and 0 <= self.y < IMAGE_SIDE):
            raise ValueError(f"fixation ({self.x}, {self.y}) outside the {IMAGE_SIDE}x{IMAGE_SIDE} grid")

    @property
    def index(self) -> int:
        return self.y * IMAGE_SIDE + self.x


@dataclass(frozen=True)
class ActiveSet:
    """Regions active at one fixation, ordered by ascending region id."""

    region_ids: tuple[int, ...]
    centers: tuple[tuple[int, int], ...]

    @property
    def count(self) -> int:
        return len(self.region_ids)


@dataclass(frozen=True)
class FoveaLayout:
    regions: tuple[PoolingRegion, ...]
    visual_field_side: int = FIELD_SIDE
    image_side: int = IMAGE_SIDE
    capacity: int = field(init=False)

    def __post_init__(self):
        _check_layout(self)
        counts = [
            len(active_regions(self, Fixation(x, y)).region_ids)
            for y in range(self.image_side)
            for x in range(self.image_side)
        ]
        object.__setattr__(self, "capacity", max(counts))

    def area_fraction(self, region: PoolingRegion) -> float:
        return region.area / self.visual_field_side**2

    @property
    def image_fraction(self) -> float:
        return self.image_side**2 / self.visual_field_side**2

    @cached_property
    def offsets(self) -> np.ndarray:
        """(49, 2) array of ``(dx, dy)`` center offsets."""
        return np.array([(r.dx, r.dy) for r in self.regions], dtype=np.int64)

    @cached_property
    def rfs(self) -> np.ndarray:
        return np.array([r.rf for r in self.regions], dtype=np.int64)

    def dump(self) -> str:
        """One line per region: ``id dx dy rf``, preceded by ``#`` header lines."""
        lines = [
            "# fovea layout: id dx dy rf",
            f"# regions {len(self.regions)}",
            f"# visual_field_side {self.visual_field_side}",
            f"# image_side {self.image_side}",
            f"# capacity {self.capacity}",
        ]
        if self.capacity != 29:
            lines.append(
                f"# note: computed capacity {self.capacity} differs from the reference "
                "value 29 for the original (unpublished) center coordinates"
            )
        lines += [f"{r.id} {r.dx} {r.dy} {r.rf}" for r in self.regions]
        return "\n".join(lines) + "\n"

    @classmethod
    def parse(cls, text: str) -> "FoveaLayout":
        regions = []
        for line in text.splitlines():
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            rid, dx, dy, rf = (int(v) for v in line.split())
            regions.append(PoolingRegion(rid, dx, dy, rf))
        return cls(tuple(regions))


def _check_layout(layout: FoveaLayout) -> None:
    regions = layout.regions
    if len(regions) != 49:
        raise LayoutError(f"expected 49 regions, got {len(regions)}")
    if [r.id for r in regions] != list(range(len(regions))):
        raise LayoutError("region ids must be 0..48 in order")
    if any(r.rf not in RF_SIZES for r in regions):
        raise LayoutError("receptive fields must be one of 1, 3, 5, 7")
    fovea = {(r.dx, r.dy) for r in regions if r.rf == 1}
    if len([r for r in regions if r.rf == 1]) != 9 or fovea != {
        (i, j) for i in (-1, 0, 1) for j in (-1, 0, 1)
    }:
        raise LayoutError("fovea must be the nine rf=1 regions at offsets {-1,0,1}^2")
    half = layout.visual_field_side // 2
    covered = np.zeros((layout.visual_field_side,) * 2, dtype=bool)
    for r in regions:
        for dx, dy in r.footprint():
            if abs(dx) > half or abs(dy) > half:
                raise LayoutError(f"region {r.id} extends outside the visual field")
            covered[dy + half, dx + half] = True
    if not covered.all():
        missing = np.argwhere(~covered)[0] - half
        raise LayoutError(f"visual field block {tuple(missing[::-1])} is not covered")


def build_canonical_layout() -> FoveaLayout:
    """Concentric square rings: 9 fovea blocks, then 8, 12 and 20 pooling regions."""
    regions = []
    for rf, coords, perimeter_only in _RINGS:
        lo, hi = coords[0], coords[-1]
        for dy in coords:
            for dx in coords:
                if perimeter_only and dx not in (lo, hi) and dy not in (lo, hi):
                    continue
                regions.append(PoolingRegion(len(regions), dx, dy, rf))
    return FoveaLayout(tuple(regions))


def _as_fixation(f) -> Fixation:
    if isinstance(f, Fixation):
        return f
    x, y = f
    return Fixation(int(x), int(y))


def active_regions(layout: FoveaLayout, f) -> ActiveSet:
    """Regions whose absolute center lies inside the image grid."""
    f = _as_fixation(f)
    ids, centers = [], []
    side = layout.image_side
    for r in layout.regions:
        bx, by = f.x + r.dx, f.y + r.dy
        if 0 <= bx < side and 0 <= by < side:
            ids.append(r.id)
            centers.append((bx, by))
    return ActiveSet(tuple(ids), tuple(centers))


def centers_for_confidence(active: ActiveSet) -> list[tuple[int, int]]:
    return list(active.centers)


def pooling_matrix(layout: FoveaLayout, f) -> np.ndarray:
    """(count, 196) matrix mapping a flattened feature grid to pooled tokens.

    Row ``i`` holds ``1 / rf**2`` on every in-image block of region ``i``'s
    footprint; blocks in the zero padding contribute nothing but still count
    toward the divisor.
    """
    f = _as_fixation(f)
    active = active_regions(layout, f)
    side = layout.image_side
    mat = np.zeros((active.count, side * side), dtype=np.float64)
    for row, rid in enumerate(active.region_ids):
        region = layout.regions[rid]
        weight = 1.0 / region.area
        for dx, dy in region.footprint():
            bx, by = f.x + dx, f.y + dy
            if 0 <= bx < side and 0 <= by < side:
                mat[row, by * side + bx] = weight
    return mat


def pool_features(grid: np.ndarray, layout: FoveaLayout, f) -> np.ndarray:
    """Average-pool a ``(14, 14, D)`` feature grid for fixation ``f``.

    Returns ``(count, D)`` pooled tokens in ascending region-id order.
    """
    grid = np.asarray(grid)
    side = layout.image_side
    if grid.ndim != 3 or grid.shape[:2] != (side, side):
        raise ValueError(f"expected a ({side}, {side}, D) grid, got shape {grid.shape}")
    f = _as_fixation(f)
    active = active_regions(layout, f)
    out = np.empty((active.count, grid.shape[2]), dtype=np.result_type(grid.dtype, np.float32))
    for row, rid in enumerate(active.region_ids):
        region = layout.regions[rid]
        if region.rf == 1:
            # fovea tokens are copied, not averaged
            out[row] = grid[f.y + region.dy, f.x + region.dx]
            continue
        r = region.rf // 2
        cx, cy = f.x + region.dx, f.y + region.dy
        x0, x1 = max(cx - r, 0), min(cx + r, side - 1)
        y0, y1 = max(cy - r, 0), min(cy + r, side - 1)
        out[row] = grid[y0 : y1 + 1, x0 : x1 + 1].sum(axis=(0, 1)) / region.area
    return out


def pad_sequence(pooled: np.ndarray, capacity: int) -> tuple[np.ndarray, np.ndarray]:
    """Zero-pad pooled tokens to ``capacity`` rows; returns ``(tokens, mask)``."""
    pooled = np.asarray(pooled)
    n = pooled.shape[0]
    if n == 0 or n > capacity:
        raise RuntimeError(f"pooled length {n} not in [1, {capacity}]")
    tokens = np.zeros((capacity,) + pooled.shape[1:], dtype=pooled.dtype)
    tokens[:n] = pooled
    mask = np.zeros(capacity, dtype=bool)
    mask[:n] = True
    return tokens, mask


@dataclass(frozen=True)
class FoveationTables:
    """Per-fixation pooling tables for all 196 fixations, padded to capacity.

    ``matrices[k]`` is the padded pooling matrix for fixation index ``k``
    (``k = 14 * y + x``); ``mask[k]`` flags valid rows and ``centers[k]``
    holds each row's absolute ``(x, y)`` center (``-1`` for padding).
    """

    matrices: np.ndarray  # (196, capacity, 196)
    mask: np.ndarray  # (196, capacity)
    centers: np.ndarray  # (196, capacity, 2)
    counts: np.ndarray  # (196,)


def foveation_tables(layout: FoveaLayout) -> FoveationTables:
    side = layout.image_side
    cap = layout.capacity
    n = side * side
    matrices = np.zeros((n, cap, n))
    mask = np.zeros((n, cap), dtype=bool)
    centers = np.full((n, cap, 2), -1, dtype=np.int64)
    counts = np.zeros(n, dtype=np.int64)
    for y in range(side):
        for x in range(side):
            k = y * side + x
            mat = pooling_matrix(layout, (x, y))
            c = mat.shape[0]
            matrices[k, :c] = mat
            mask[k, :c] = True
            centers[k, :c] = active_regions(layout, (x, y)).centers
            counts[k] = c
    return FoveationTables(matrices, mask, centers, counts)
