"""Contact-patch masking, in-patch dense flow and shear aggregation.

The measurement chain per frame pair:

1. a binary patch mask from the per-pixel difference between a no-contact
   reference depth image and the current one (object indentation pushes the
   membrane away from the camera, so the difference is signed),
2. both IR images multiplied by that mask,
3. dense flow over the masked IR pair, trusted only inside the mask eroded by
   the flow window radius (masked-to-zero boundaries create fake gradients),
4. summation of the valid flow into two tangential components plus a torsional
   moment about the patch centroid, scaled by a gain matrix into a force
   estimate.

Reference frames are only valid at the pressure they were captured at; the
pipeline refuses masks against references more than a small tolerance away
and expects the caller to re-reference after every settled pressure change.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np
from scipy import ndimage

from .errors import (
    CalibrationError,
    ContractError,
    ResetRejected,
    StaleReferenceError,
)
from .flow import FlowParams, dense_flow_field
from .images import ContactMask, DepthImage, FlowField, IrImage

DEFAULT_MASK_THRESHOLD = 1.5   # mm of indentation
DEFAULT_STALE_TOLERANCE = 4.0  # hPa, 2x the controller deadband

TELEMETRY_HEADER = (
    "frame,patch_area_px,centroid_x,centroid_y,sum_dx,sum_dy,torsion,fx,fy,ft"
)


@dataclass
class ShearEstimate:
    """Gain-scaled summary of the in-patch displacement field.

    ``force`` is (fx, fy, ft): two tangential components and a torsional
    moment about the patch centroid. Units are N only after calibration;
    with the identity gain they are pixel sums, flagged ``calibrated=False``.
    """

    force: np.ndarray
    raw_displacement_sum: np.ndarray
    torsion: float
    patch_area: int
    patch_centroid: np.ndarray
    calibrated: bool = False


@dataclass
class ReferenceState:
    """No-contact depth/IR pair captured at a settled pressure."""

    depth: DepthImage
    ir: IrImage
    pressure: float

    def __post_init__(self) -> None:
        if self.depth.values.shape != self.ir.values.shape:
            raise ContractError("reference depth/IR dimensions differ")
        if abs(self.depth.pressure_at_capture - self.pressure) > 1e-9:
            raise ContractError(
                "reference depth was not captured at the declared pressure"
            )


def compute_mask(
    reference: DepthImage,
    current: DepthImage,
    threshold: float = DEFAULT_MASK_THRESHOLD,
    stale_tolerance: float = DEFAULT_STALE_TOLERANCE,
    check_reference: bool = True,
) -> ContactMask:
    """Contact mask from signed depth differencing plus morphological cleanup.

    A pixel is a contact candidate when the current range exceeds the
    reference range by more than ``threshold`` (indentation sign only, so
    global membrane motion toward the camera never masks). Cleanup closes
    single-pixel noise gaps, keeps the largest connected component and fills
    its holes.

    ``check_reference=False`` disables the stale-reference pressure guard;
    that exists to demonstrate why the guard matters and must stay on in any
    closed-loop use.
    """
    if reference.values.shape != current.values.shape:
        raise ContractError("depth image dimensions differ")
    if threshold <= 0:
        raise ContractError("threshold must be positive")
    if check_reference:
        drift = abs(
            current.pressure_at_capture - reference.pressure_at_capture
        )
        if drift > stale_tolerance:
            raise StaleReferenceError(
                f"reference captured at {reference.pressure_at_capture:.1f} hPa "
                f"but frame at {current.pressure_at_capture:.1f} hPa "
                f"(tolerance {stale_tolerance:.1f}); reset the reference"
            )

    indentation = current.values - reference.values
    raw = indentation > threshold
    if not raw.any():
        return ContactMask(values=raw)

    cleaned = ndimage.binary_closing(raw, structure=np.ones((3, 3)))
    labels, count = ndimage.label(cleaned)
    if count == 0:
        return ContactMask(values=np.zeros_like(raw))
    sizes = ndimage.sum_labels(
        np.ones_like(labels), labels, index=np.arange(1, count + 1)
    )
    largest = int(np.argmax(sizes)) + 1
    component = labels == largest
    return ContactMask(values=ndimage.binary_fill_holes(component))


def mask_ir(image: IrImage, mask: ContactMask) -> IrImage:
    """Per-pixel product; outside-mask pixels become exactly zero."""
    if image.values.shape != mask.values.shape:
        raise ContractError("IR/mask dimensions differ")
    return IrImage(
        values=image.values * mask.values, timestamp=image.timestamp
    )


def _erode_disk(mask: np.ndarray, radius: int) -> np.ndarray:
    if radius <= 0:
        return mask.copy()
    y, x = np.ogrid[-radius : radius + 1, -radius : radius + 1]
    disk = (x * x + y * y) <= radius * radius
    return ndimage.binary_erosion(mask, structure=disk)


def dense_flow(
    ir_reference: IrImage,
    ir_current: IrImage,
    mask: Optional[ContactMask] = None,
    params: FlowParams = FlowParams(),
) -> FlowField:
    """Dense flow over a masked IR pair, valid inside the eroded mask.

    The solver runs on the images exactly as given (zeros outside the patch
    included); validity excludes a boundary ring of the flow window radius
    where those zeros corrupt the local models. An empty mask yields an
    empty field rather than an error.
    """
    if ir_reference.values.shape != ir_current.values.shape:
        raise ContractError("IR image dimensions differ")
    support = (
        mask.values
        if mask is not None
        else np.ones(ir_reference.values.shape, dtype=bool)
    )
    if support.shape != ir_reference.values.shape:
        raise ContractError("mask dimensions differ from the IR pair")
    if not support.any():
        return FlowField(
            vectors=np.zeros(support.shape + (2,)),
            valid=np.zeros(support.shape, dtype=bool),
        )
    vectors = dense_flow_field(
        ir_reference.values, ir_current.values, params
    )
    valid = _erode_disk(support, params.window_size // 2)
    return FlowField(vectors=vectors, valid=valid)


def aggregate_shear(
    flow: FlowField,
    mask: ContactMask,
    gain: Optional[np.ndarray] = None,
    calibrated: bool = False,
) -> ShearEstimate:
    """Sum the valid flow into (sum_x, sum_y, torsion) and apply the gain.

    Torsion is the z-moment of the flow about the mask centroid with image
    axes (x right, y down). An empty mask yields an all-zero estimate.
    """
    K = np.eye(3) if gain is None else np.asarray(gain, dtype=np.float64)
    if K.shape != (3, 3):
        raise ContractError("gain matrix must be 3x3")
    centroid = mask.centroid()
    if mask.area == 0 or flow.valid_count == 0:
        return ShearEstimate(
            force=np.zeros(3),
            raw_displacement_sum=np.zeros(2),
            torsion=0.0,
            patch_area=mask.area,
            patch_centroid=centroid,
            calibrated=calibrated,
        )
    ys, xs = np.nonzero(flow.valid)
    vx = flow.vectors[ys, xs, 0]
    vy = flow.vectors[ys, xs, 1]
    sum_x = float(vx.sum())
    sum_y = float(vy.sum())
    torsion = float(((xs - centroid[0]) * vy - (ys - centroid[1]) * vx).sum())
    force = K @ np.array([sum_x, sum_y, torsion])
    return ShearEstimate(
        force=force,
        raw_displacement_sum=np.array([sum_x, sum_y]),
        torsion=torsion,
        patch_area=mask.area,
        patch_centroid=centroid,
        calibrated=calibrated,
    )


def calibrate_gain(
    scenarios: list[tuple[np.ndarray, np.ndarray]],
) -> tuple[np.ndarray, float]:
    """Least-squares gain from (applied force, raw aggregate) pairs.

    Solves ``K @ raw = force`` over all scenarios; needs at least three with
    linearly independent raw aggregates. Returns (K, rms residual).
    """
    if len(scenarios) < 3:
        raise CalibrationError("need at least 3 calibration scenarios")
    raws = np.array([np.asarray(r, dtype=np.float64) for _, r in scenarios])
    forces = np.array([np.asarray(f, dtype=np.float64) for f, _ in scenarios])
    if raws.shape[1] != 3 or forces.shape[1] != 3:
        raise CalibrationError("scenarios must pair 3-vectors")
    if np.linalg.matrix_rank(raws) < 3:
        raise CalibrationError("scenario aggregates are rank-deficient")
    # rows of K solved jointly: raws @ K.T ~ forces
    kt, *_ = np.linalg.lstsq(raws, forces, rcond=None)
    K = kt.T
    residual = float(np.sqrt(np.mean((raws @ kt - forces) ** 2)))
    return K, residual


@dataclass
class FrameResult:
    """Outputs of one pipeline step."""

    mask: ContactMask
    flow: FlowField
    estimate: ShearEstimate


@dataclass
class PipelineConfig:
    mask_threshold: float = DEFAULT_MASK_THRESHOLD
    stale_tolerance: float = DEFAULT_STALE_TOLERANCE
    flow: FlowParams = field(default_factory=FlowParams)
    gain: np.ndarray = field(default_factory=lambda: np.eye(3))


class ShearPipeline:
    """Stateful frame-pair processor with explicit reference management.

    One pipeline per bubble, frames processed in capture order. A reference
    must be (re)established after every settled pressure change; processing
    against a stale reference raises instead of silently masking membrane
    motion as contact.
    """

    def __init__(self, config: Optional[PipelineConfig] = None):
        self.config = config or PipelineConfig()
        self.reference: Optional[ReferenceState] = None
        self.calibrated = False

    def set_gain(self, gain: np.ndarray) -> None:
        gain = np.asarray(gain, dtype=np.float64)
        if gain.shape != (3, 3):
            raise ContractError("gain matrix must be 3x3")
        self.config = replace(self.config, gain=gain)
        self.calibrated = True

    def reset_reference(
        self, depth: DepthImage, ir: IrImage, settled: bool = True
    ) -> ReferenceState:
        """Install new no-contact reference frames.

        The caller asserts no object contact; ``settled=False`` (pressure
        loop still moving) rejects the reset with a retry signal, because a
        reference captured mid-transient is stale the moment it lands.
        """
        if not settled:
            raise ResetRejected(
                "pressure loop not settled; retry the reset after settling"
            )
        self.reference = ReferenceState(
            depth=depth, ir=ir, pressure=depth.pressure_at_capture
        )
        return self.reference

    def process(self, depth: DepthImage, ir: IrImage) -> FrameResult:
        """Mask, flow and shear for the current frame pair against the
        installed reference."""
        if self.reference is None:
            raise ContractError("no reference installed; call reset_reference")
        mask = compute_mask(
            self.reference.depth,
            depth,
            threshold=self.config.mask_threshold,
            stale_tolerance=self.config.stale_tolerance,
        )
        ir_ref = mask_ir(self.reference.ir, mask)
        ir_cur = mask_ir(ir, mask)
        flow = dense_flow(ir_ref, ir_cur, mask=mask, params=self.config.flow)
        estimate = aggregate_shear(
            flow, mask, gain=self.config.gain, calibrated=self.calibrated
        )
        return FrameResult(mask=mask, flow=flow, estimate=estimate)


def telemetry_row(frame_index: int, result: FrameResult) -> str:
    est = result.estimate
    return (
        f"{frame_index},{est.patch_area},"
        f"{est.patch_centroid[0]:.4f},{est.patch_centroid[1]:.4f},"
        f"{est.raw_displacement_sum[0]:.4f},{est.raw_displacement_sum[1]:.4f},"
        f"{est.torsion:.4f},"
        f"{est.force[0]:.4f},{est.force[1]:.4f},{est.force[2]:.4f}"
    )
