"""
Axis-aligned uniform lattices shared by density tables and grid functions.
"""

import logging
from dataclasses import dataclass
from typing import Dict, Any, List, Sequence, Tuple, Union

import numpy as np

from error_handlers import InvalidParameter

logger = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class Lattice:
    """
    Box center +- half_widths sampled with spacing h along every axis.

    Half widths are snapped to whole multiples of h so the lattice is
    symmetric about its center.
    """
    center: np.ndarray
    half_widths: np.ndarray
    h: float

    def __post_init__(self):
        center = np.atleast_1d(np.asarray(self.center, dtype=float)).copy()
        half = np.atleast_1d(np.asarray(self.half_widths, dtype=float)).copy()
        if half.shape == (1,) and center.shape[0] > 1:
            half = np.full(center.shape[0], half[0])
        if half.shape != center.shape:
            raise InvalidParameter("center and half_widths must have the same length")
        h = float(self.h)
        if not h > 0:
            raise InvalidParameter(f"lattice spacing must be positive, got {h}")
        if np.any(half < 0) or not np.all(np.isfinite(center)):
            raise InvalidParameter("half widths must be >= 0 and center finite")
        counts = np.rint(half / h).astype(int)
        half = counts * h
        center.setflags(write=False)
        half.setflags(write=False)
        object.__setattr__(self, "center", center)
        object.__setattr__(self, "half_widths", half)
        object.__setattr__(self, "h", h)
        object.__setattr__(self, "_counts", counts)

    @classmethod
    def cube(cls, dim: int, half_width: float, h: float, center: Union[float, Sequence[float]] = 0.0) -> "Lattice":
        c = np.broadcast_to(np.asarray(center, dtype=float), (dim,))
        return cls(c, np.full(dim, float(half_width)), h)

    @property
    def dim(self) -> int:
        return int(self.center.shape[0])

    @property
    def shape(self) -> Tuple[int, ...]:
        return tuple(int(2 * n + 1) for n in self._counts)

    @property
    def size(self) -> int:
        return int(np.prod(self.shape))

    @property
    def cell_volume(self) -> float:
        return self.h ** self.dim

    @property
    def lower(self) -> np.ndarray:
        return self.center - self.half_widths

    @property
    def upper(self) -> np.ndarray:
        return self.center + self.half_widths

    def axes(self) -> List[np.ndarray]:
        return [c + self.h * np.arange(-n, n + 1) for c, n in zip(self.center, self._counts)]

    def points(self) -> np.ndarray:
        """All lattice points, C order, shape (size, dim)."""
        mesh = np.meshgrid(*self.axes(), indexing="ij")
        return np.stack([m.reshape(-1) for m in mesh], axis=1)

    def contains(self, points, margin: float = 0.0, slack: float = 1e-12) -> np.ndarray:
        pts = np.asarray(points, dtype=float).reshape(-1, self.dim)
        lo = self.lower + margin - slack
        hi = self.upper - margin + slack
        return np.all((pts >= lo) & (pts <= hi), axis=1)

    def interior_mask(self, margin: float) -> np.ndarray:
        """Boolean array of lattice shape, True at least `margin` away from the boundary."""
        return self.contains(self.points(), margin=margin).reshape(self.shape)

    def index_of(self, point) -> Tuple[int, ...]:
        """Nearest lattice index to a point."""
        p = np.asarray(point, dtype=float).reshape(-1)
        idx = np.rint((p - self.lower) / self.h).astype(int)
        idx = np.clip(idx, 0, np.asarray(self.shape) - 1)
        return tuple(int(i) for i in idx)

    def scaled(self, factor: float) -> "Lattice":
        """Lattice with every coordinate multiplied by factor."""
        return Lattice(self.center * factor, self.half_widths * factor, self.h * factor)

    def refined(self) -> "Lattice":
        """Same box, half the spacing."""
        return Lattice(self.center, self.half_widths, self.h / 2.0)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "center": self.center.tolist(),
            "half_widths": self.half_widths.tolist(),
            "h": self.h,
            "shape": list(self.shape),
        }
