"""Frame containers passed between the simulator and the perception pipeline.

All images are row-major numpy arrays of shape (height, width); row index y
grows downward, column index x grows rightward. Depth values are camera range
in millimetres, IR intensities live in [0, 1]. Instances are treated as
immutable after construction and are safe to share read-only.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError


@dataclass
class DepthImage:
    """Per-pixel camera range in mm, tagged with capture time and pressure."""

    values: np.ndarray
    timestamp: float = 0.0
    pressure_at_capture: float = 0.0

    def __post_init__(self) -> None:
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise ContractError("depth image must be 2-D")
        if not np.all(np.isfinite(self.values)) or np.any(self.values <= 0):
            raise ContractError("depth values must be finite and positive")

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def height(self) -> int:
        return self.values.shape[0]


@dataclass
class IrImage:
    """Per-pixel intensity in [0, 1]."""

    values: np.ndarray
    timestamp: float = 0.0

    def __post_init__(self) -> None:
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise ContractError("IR image must be 2-D")
        if np.any(self.values < 0) or np.any(self.values > 1):
            raise ContractError("IR intensities must lie in [0, 1]")

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def height(self) -> int:
        return self.values.shape[0]


@dataclass
class ContactMask:
    """Boolean contact-patch mask with the same geometry as its source frames."""

    values: np.ndarray

    def __post_init__(self) -> None:
        self.values = np.asarray(self.values, dtype=bool)
        if self.values.ndim != 2:
            raise ContractError("mask must be 2-D")

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def area(self) -> int:
        return int(self.values.sum())

    def centroid(self) -> np.ndarray:
        """Mask centroid as (x, y) in pixels; zeros for an empty mask."""
        if not self.values.any():
            return np.zeros(2)
        ys, xs = np.nonzero(self.values)
        return np.array([xs.mean(), ys.mean()])


@dataclass
class FlowField:
    """Dense displacement field in pixels: vectors[..., 0] = dx, [..., 1] = dy.

    Vectors are meaningful only where ``valid`` is True; invalid entries are
    zeroed so bulk reductions over the valid set stay cheap.
    """

    vectors: np.ndarray
    valid: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self) -> None:
        self.vectors = np.asarray(self.vectors, dtype=np.float64)
        if self.vectors.ndim != 3 or self.vectors.shape[2] != 2:
            raise ContractError("flow field must have shape (H, W, 2)")
        if self.valid is None:
            self.valid = np.ones(self.vectors.shape[:2], dtype=bool)
        self.valid = np.asarray(self.valid, dtype=bool)
        if self.valid.shape != self.vectors.shape[:2]:
            raise ContractError("validity mask must match the flow grid")
        if not np.all(np.isfinite(self.vectors[self.valid])):
            raise ContractError("flow vectors must be finite where valid")
        self.vectors = np.where(self.valid[..., None], self.vectors, 0.0)

    @property
    def valid_count(self) -> int:
        return int(self.valid.sum())
