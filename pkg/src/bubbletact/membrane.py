"""Synthetic air-filled membrane sensor: geometry, contact, shear, rendering.

The membrane is an ellipsoidal cap over an elliptical base, observed by an
orthographic range camera on the bulge side. Bubble frame: x/y span the base
plane (x along the major axis, matching image columns; y along the minor axis,
matching image rows), z is height above the base plane toward the camera.

Pressure model: the cap keeps its shape and lifts uniformly by
``geometry_gain * dp + geometry_quad * dp**2`` (dp relative to rest pressure),
so the apex follows that law exactly and the image-mean camera range falls by
exactly the same amount.

Contact model: a rigid primitive approaching along -z clamps the membrane to
its underside wherever the free membrane would overlap it. The membrane
conforms (counts as contact, and transmits force) only where the overlap
exceeds a conformity margin eps(p); shallower overlap forms a non-contact tent
ring where the surface sags just below the object. Contact force is a linear
spring on the conformed depth, which makes grasp force at a fixed gripper
width an exact quadratic in pressure.

All operations are pure: they return new states and never mutate arguments.
Rendering is bit-deterministic for a fixed seed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np
from scipy.ndimage import map_coordinates

from .errors import ContractError, PressureBandError
from .images import DepthImage, IrImage

# Safe operating band and ambient floor, hPa.
BAND_MIN = 1010.0
BAND_MAX = 1090.0
AMBIENT = 1000.0

GRIPPER_MAX_WIDTH = 66.0  # mm


@dataclass(frozen=True)
class BubbleConfig:
    """Static membrane, camera and contact-response parameters.

    Lengths are mm, pressures hPa, forces N. ``geometry_gain`` is mm/hPa and
    ``geometry_quad`` mm/hPa^2; with the defaults below the mean-depth curve
    has quadratic coefficient +1.3e-4 mm/hPa^2 and the fixed-width grasp force
    curve has -0.00127 N/hPa^2.
    """

    semi_axis_major: float = 60.0
    semi_axis_minor: float = 45.0
    rest_pressure: float = 1050.0
    rest_apex_height: float = 15.0
    geometry_gain: float = 0.08
    geometry_quad: float = -1.3e-4
    marker_count: int = 200
    marker_seed: int = 2026
    image_width: int = 224
    image_height: int = 171
    camera_standoff: float = 60.0
    # simulator-side response constants (config, not claims)
    cap_exponent: float = 2.5
    fov_fraction: float = 0.96          # elliptical radius at the image corner
    contact_stiffness: float = 0.00127 / 1.3e-4  # N/mm, single bubble
    conformity_margin: float = 1.5      # mm of overlap before the membrane conforms
    conformity_gain: float = 0.006      # mm/hPa; conformity improves with pressure
    noise_amplitude: float = 0.5        # default depth sensor noise, mm

    def __post_init__(self) -> None:
        if not (self.semi_axis_major >= self.semi_axis_minor > 0):
            raise ContractError("require semi_axis_major >= semi_axis_minor > 0")
        if self.rest_apex_height <= 0:
            raise ContractError("rest apex height must be positive")
        if not (BAND_MIN <= self.rest_pressure <= BAND_MAX):
            raise PressureBandError(
                f"rest pressure {self.rest_pressure} outside "
                f"[{BAND_MIN}, {BAND_MAX}] hPa"
            )
        if self.marker_count <= 0:
            raise ContractError("marker_count must be positive")
        if self.image_width < 16 or self.image_height < 16:
            raise ContractError("image too small")
        if self.camera_standoff <= self.rest_apex_height:
            raise ContractError("camera standoff must clear the membrane")

    @property
    def mm_per_px(self) -> float:
        """Square pixel pitch chosen so the image corners sit at
        ``fov_fraction`` of the elliptical base radius."""
        diag = math.sqrt(
            (self.image_width / (2 * self.semi_axis_major)) ** 2
            + (self.image_height / (2 * self.semi_axis_minor)) ** 2
        )
        return self.fov_fraction / diag

    def pressure_lift(self, pressure: float) -> float:
        """Uniform cap lift (mm) relative to the rest pressure."""
        dp = pressure - self.rest_pressure
        return self.geometry_gain * dp + self.geometry_quad * dp * dp

    def conformity_at(self, pressure: float) -> float:
        """Overlap depth (mm) below which the membrane bridges instead of
        conforming; shrinks linearly as pressure rises."""
        eps = self.conformity_margin - self.conformity_gain * (
            pressure - self.rest_pressure
        )
        return max(0.2, eps)


@dataclass(frozen=True)
class ObjectPrimitive:
    """Rigid object pressed into the membrane along -z.

    ``kind`` is one of 'plane', 'cylinder', 'sphere'. ``center`` is the (x, y)
    footprint position in mm; cylinders run along the image-y axis rotated by
    ``axis_angle`` radians. A plane with ``edge_x`` set covers only the
    half-plane x' >= edge_x (x' measured across the rotated axis), which
    models a plate edge entering the field.
    """

    kind: str
    radius: float = 0.0
    center: tuple[float, float] = (0.0, 0.0)
    axis_angle: float = 0.0
    edge_x: Optional[float] = None

    def __post_init__(self) -> None:
        if self.kind not in ("plane", "cylinder", "sphere"):
            raise ContractError(f"unknown object kind {self.kind!r}")
        if self.kind in ("cylinder", "sphere") and self.radius <= 0:
            raise ContractError("curved objects need a positive radius")

    def underside(self, x_mm: np.ndarray, y_mm: np.ndarray) -> np.ndarray:
        """Height of the object's lower surface above its lowest point, +inf
        where the footprint does not cover the pixel."""
        u = (x_mm - self.center[0]) * math.cos(self.axis_angle) + (
            y_mm - self.center[1]
        ) * math.sin(self.axis_angle)
        if self.kind == "plane":
            under = np.zeros_like(x_mm)
            if self.edge_x is not None:
                under = np.where(u >= self.edge_x, 0.0, np.inf)
            return under
        if self.kind == "cylinder":
            inside = np.abs(u) < self.radius
            under = np.full_like(x_mm, np.inf)
            under[inside] = self.radius - np.sqrt(
                self.radius**2 - u[inside] ** 2
            )
            return under
        # sphere
        v = (y_mm - self.center[1]) * math.cos(self.axis_angle) - (
            x_mm - self.center[0]
        ) * math.sin(self.axis_angle)
        rr = u**2 + v**2
        inside = rr < self.radius**2
        under = np.full_like(x_mm, np.inf)
        under[inside] = self.radius - np.sqrt(self.radius**2 - rr[inside])
        return under


@dataclass
class MembraneState:
    """Snapshot of the simulated membrane at one pressure + contact situation.

    ``height_field`` is the current surface height (mm above the base plane),
    ``free_height_field`` the same membrane with no object. ``marker_xyz``
    holds marker surface points in mm, ``marker_px`` their image projections.
    ``contact_set`` is the ground-truth conformed patch; it is fixed at press
    time and kept under shear (stiction).
    """

    config: BubbleConfig
    pressure: float
    height_field: np.ndarray
    free_height_field: np.ndarray
    contact_set: np.ndarray
    marker_xyz: np.ndarray
    marker_px: np.ndarray
    obj: Optional[ObjectPrimitive] = None
    object_z: float = 0.0
    object_shear_offset: np.ndarray = field(default_factory=lambda: np.zeros(2))

    @property
    def mm_per_px(self) -> float:
        return self.config.mm_per_px

    def copy(self) -> "MembraneState":
        return MembraneState(
            config=self.config,
            pressure=self.pressure,
            height_field=self.height_field.copy(),
            free_height_field=self.free_height_field.copy(),
            contact_set=self.contact_set.copy(),
            marker_xyz=self.marker_xyz.copy(),
            marker_px=self.marker_px.copy(),
            obj=self.obj,
            object_z=self.object_z,
            object_shear_offset=self.object_shear_offset.copy(),
        )


# ---------------------------------------------------------------------------
# Geometry helpers
# ---------------------------------------------------------------------------

def pixel_grid(config: BubbleConfig) -> tuple[np.ndarray, np.ndarray]:
    """Pixel-center coordinates (x_mm, y_mm) in the bubble frame."""
    s = config.mm_per_px
    xs = (np.arange(config.image_width) - (config.image_width - 1) / 2.0) * s
    ys = (np.arange(config.image_height) - (config.image_height - 1) / 2.0) * s
    return np.meshgrid(xs, ys)


def elliptical_radius(
    config: BubbleConfig, x_mm: np.ndarray, y_mm: np.ndarray
) -> np.ndarray:
    return np.sqrt(
        (x_mm / config.semi_axis_major) ** 2
        + (y_mm / config.semi_axis_minor) ** 2
    )


def cap_profile(config: BubbleConfig, rho: np.ndarray) -> np.ndarray:
    """Superellipsoidal cap, 1 at the apex and 0 at the rim (rho = 1)."""
    r = np.minimum(np.asarray(rho, dtype=np.float64), 1.0)
    e = config.cap_exponent
    return (1.0 - r**e) ** (1.0 / e)


def free_height(config: BubbleConfig, pressure: float) -> np.ndarray:
    x, y = pixel_grid(config)
    rho = elliptical_radius(config, x, y)
    return config.rest_apex_height * cap_profile(config, rho) + config.pressure_lift(
        pressure
    )


def _sample_markers(config: BubbleConfig) -> np.ndarray:
    """Non-uniform, center-dense marker sites (x, y) in mm; deterministic."""
    rng = np.random.default_rng(config.marker_seed)
    a, b = config.semi_axis_major, config.semi_axis_minor
    pts = np.empty((config.marker_count, 2))
    n = 0
    while n < config.marker_count:
        x = rng.uniform(-0.93 * a, 0.93 * a)
        y = rng.uniform(-0.93 * b, 0.93 * b)
        rho = math.sqrt((x / a) ** 2 + (y / b) ** 2)
        if rho > 0.93:
            continue
        # denser toward the apex, sparser toward the rim
        if rng.random() < 0.30 + 0.70 * math.exp(-((rho / 0.55) ** 2)):
            pts[n] = (x, y)
            n += 1
    return pts


def _project_px(config: BubbleConfig, xy_mm: np.ndarray) -> np.ndarray:
    s = config.mm_per_px
    px = xy_mm[:, 0] / s + (config.image_width - 1) / 2.0
    py = xy_mm[:, 1] / s + (config.image_height - 1) / 2.0
    return np.column_stack([px, py])


def _sample_height(
    height_field: np.ndarray, config: BubbleConfig, xy_mm: np.ndarray
) -> np.ndarray:
    """Bilinear height lookup at continuous (x, y) mm positions."""
    px = _project_px(config, xy_mm)
    coords = np.vstack([px[:, 1], px[:, 0]])
    return map_coordinates(height_field, coords, order=1, mode="nearest")


def shear_decay(rho: np.ndarray, rho_patch: float) -> np.ndarray:
    """Stiction falloff: 1 inside the patch radius, smooth cosine decay to 0
    at the rim (rho = 1)."""
    span = max(1e-9, 1.0 - rho_patch)
    s = np.clip((np.asarray(rho, dtype=np.float64) - rho_patch) / span, 0.0, 1.0)
    return 0.5 * (1.0 + np.cos(np.pi * s))


# ---------------------------------------------------------------------------
# Operations
# ---------------------------------------------------------------------------

def inflate_shape(config: BubbleConfig, pressure: float) -> MembraneState:
    """Free membrane at the given pressure (no object attached)."""
    if not (BAND_MIN <= pressure <= BAND_MAX):
        raise PressureBandError(
            f"pressure {pressure} hPa outside the operating band"
        )
    h = free_height(config, pressure)
    marker_xy = _sample_markers(config)
    marker_z = _sample_height(h, config, marker_xy)
    return MembraneState(
        config=config,
        pressure=pressure,
        height_field=h,
        free_height_field=h.copy(),
        contact_set=np.zeros_like(h, dtype=bool),
        marker_xyz=np.column_stack([marker_xy, marker_z]),
        marker_px=_project_px(config, marker_xy),
    )


def grasp_force_model(
    config: BubbleConfig,
    pressure: float,
    width: float,
    object_diameter: float = 0.0,
) -> float:
    """Force reported by a parallel gripper squeezing an object between two
    identical bubbles at a commanded width.

    The two bubbles barely touch at rest pressure and zero width, so the
    geometric interference is ``object_diameter - width + 2*lift(p)``; the
    pair transmits force only once the interference exceeds the combined
    conformity margin. Linear in interference, hence exactly quadratic in
    pressure at fixed width.
    """
    if not (0.0 <= width <= GRIPPER_MAX_WIDTH):
        raise ContractError(
            f"width {width} mm outside the gripper range [0, {GRIPPER_MAX_WIDTH}]"
        )
    if not (BAND_MIN <= pressure <= BAND_MAX):
        raise PressureBandError(f"pressure {pressure} hPa outside the band")
    interference = object_diameter - width + 2 * config.pressure_lift(pressure)
    k_pair = config.contact_stiffness / 2.0
    return k_pair * max(0.0, interference - 2 * config.conformity_at(pressure))


def width_for_force(
    config: BubbleConfig, pressure: float, force: float, object_diameter: float
) -> float:
    """Commanded width at which `grasp_force_model` reports `force`."""
    if force <= 0:
        raise ContractError("force must be positive")
    k_pair = config.contact_stiffness / 2.0
    w = (
        object_diameter
        + 2 * config.pressure_lift(pressure)
        - 2 * config.conformity_at(pressure)
        - force / k_pair
    )
    return min(GRIPPER_MAX_WIDTH, max(0.0, w))


def press_depth_for_force(
    config: BubbleConfig, pressure: float, force: float
) -> float:
    """Deepest membrane overlap of a single bubble carrying `force` (mm)."""
    return config.conformity_at(pressure) + force / config.contact_stiffness


def press_depth_for_width(
    config: BubbleConfig, pressure: float, width: float, object_diameter: float
) -> float:
    """Per-bubble overlap depth when the pair is held at a commanded width."""
    interference = object_diameter - width + 2 * config.pressure_lift(pressure)
    return interference / 2.0


def _pressed_fields(
    config: BubbleConfig,
    h_free: np.ndarray,
    obj: ObjectPrimitive,
    object_z: float,
    pressure: float,
    shear_offset: np.ndarray | None = None,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Object surface, conformed contact set and clamped height field."""
    x, y = pixel_grid(config)
    if shear_offset is not None and np.any(shear_offset):
        obj = replace(
            obj,
            center=(
                obj.center[0] + shear_offset[0],
                obj.center[1] + shear_offset[1],
            ),
        )
    z_obj = object_z + obj.underside(x, y)
    exceed = h_free - z_obj
    eps = config.conformity_at(pressure)
    contact = exceed > eps
    # Tent ring: shallow overlap sags just below the object instead of
    # conforming; the sag vanishes at both the outer rim of the overlap and
    # the conformity edge, keeping the surface continuous.
    t = np.clip(exceed / eps, 0.0, 1.0)
    relief = np.where((exceed > 0) & ~contact, eps * t * (1.0 - t), 0.0)
    h = np.where(exceed > 0, np.minimum(h_free, z_obj) - relief, h_free)
    return z_obj, contact, h


def press_to_depth(
    state: MembraneState, obj: ObjectPrimitive, depth: float
) -> MembraneState:
    """Press `obj` into the free membrane until the deepest overlap is
    `depth` mm; non-positive depth leaves the object clear of the surface."""
    cfg = state.config
    x, y = pixel_grid(cfg)
    under = obj.underside(x, y)
    h_free = state.free_height_field
    reach = np.isfinite(under)

    out = state.copy()
    out.obj = obj
    out.object_shear_offset = np.zeros(2)
    if not reach.any():
        # footprint entirely outside the sensed field
        out.object_z = float(np.max(h_free) + 1.0)
        out.contact_set = np.zeros_like(h_free, dtype=bool)
        out.height_field = h_free.copy()
        _refresh_markers(out)
        return out

    first_touch = float(np.max(h_free[reach] - under[reach]))
    out.object_z = first_touch - depth
    _, contact, h = _pressed_fields(cfg, h_free, obj, out.object_z, out.pressure)
    out.contact_set = contact
    out.height_field = h
    _refresh_markers(out)
    return out


def press_object(
    state: MembraneState, obj: ObjectPrimitive, grasp_force: float
) -> MembraneState:
    """Press `obj` with a given normal force; depth follows the spring law so
    the returned state is consistent with `grasp_force_model`."""
    if grasp_force <= 0:
        raise ContractError("grasp force must be positive")
    depth = press_depth_for_force(state.config, state.pressure, grasp_force)
    return press_to_depth(state, obj, depth)


def press_at_width(
    state: MembraneState, obj: ObjectPrimitive, width: float, object_diameter: float
) -> MembraneState:
    """Press `obj` as one side of a two-bubble grasp held at a commanded
    width. Shares the interference geometry with `grasp_force_model`."""
    depth = press_depth_for_width(
        state.config, state.pressure, width, object_diameter
    )
    return press_to_depth(state, obj, depth)


def contact_force(state: MembraneState) -> float:
    """Normal force transmitted by the current contact (spring law)."""
    if state.obj is None or not state.contact_set.any():
        return 0.0
    cfg = state.config
    x, y = pixel_grid(cfg)
    obj = state.obj
    if np.any(state.object_shear_offset):
        obj = replace(
            obj,
            center=(
                obj.center[0] + state.object_shear_offset[0],
                obj.center[1] + state.object_shear_offset[1],
            ),
        )
    z_obj = state.object_z + obj.underside(x, y)
    exceed = state.free_height_field - z_obj
    depth = float(np.max(exceed[np.isfinite(exceed)]))
    eps = cfg.conformity_at(state.pressure)
    return cfg.contact_stiffness * max(0.0, depth - eps)


def _refresh_markers(state: MembraneState) -> None:
    """Recompute marker positions for the current contact + shear offset.

    Markers at their seeded base sites move laterally by the shear offset,
    exactly inside the patch and with the rim decay outside, then ride the
    current surface vertically.
    """
    cfg = state.config
    base_xy = _sample_markers(cfg)
    offset = state.object_shear_offset
    if np.any(offset) and state.contact_set.any():
        x, y = pixel_grid(cfg)
        rho_patch = float(elliptical_radius(cfg, x, y)[state.contact_set].max())
        rho_m = np.sqrt(
            (base_xy[:, 0] / cfg.semi_axis_major) ** 2
            + (base_xy[:, 1] / cfg.semi_axis_minor) ** 2
        )
        factor = shear_decay(rho_m, rho_patch)
        px = _project_px(cfg, base_xy)
        ix = np.clip(np.round(px[:, 0]).astype(int), 0, cfg.image_width - 1)
        iy = np.clip(np.round(px[:, 1]).astype(int), 0, cfg.image_height - 1)
        factor = np.where(state.contact_set[iy, ix], 1.0, factor)
        marker_xy = base_xy + factor[:, None] * offset[None, :]
    else:
        marker_xy = base_xy
    marker_z = _sample_height(state.height_field, cfg, marker_xy)
    state.marker_xyz = np.column_stack([marker_xy, marker_z])
    state.marker_px = _project_px(cfg, marker_xy)


def apply_shear(state: MembraneState, displacement) -> MembraneState:
    """Translate the grasped object laterally; the patch stays in stiction.

    In-patch markers move by exactly `displacement` (mm); free-region markers
    and the height field follow with the rim-decayed factor. Sequential calls
    accumulate: the state is always rebuilt from the pristine pressed
    geometry plus the total offset, so in-patch shear composes additively.
    """
    d = np.asarray(displacement, dtype=np.float64).reshape(2)
    if state.obj is None or not state.contact_set.any():
        raise ContractError("shear requires an established contact patch")
    out = state.copy()
    if not d.any():
        return out
    out.object_shear_offset = state.object_shear_offset + d

    cfg = state.config
    h_free = state.free_height_field
    # pristine pressed geometry (offset zero) defines the stiction patch
    _, contact0, h0 = _pressed_fields(
        cfg, h_free, state.obj, state.object_z, state.pressure
    )
    x, y = pixel_grid(cfg)
    rho = elliptical_radius(cfg, x, y)
    rho_patch = float(rho[contact0].max())
    factor = shear_decay(rho, rho_patch)

    # pull-back warp of the pristine field by the decayed offset
    s = cfg.mm_per_px
    gy, gx = np.mgrid[0 : cfg.image_height, 0 : cfg.image_width]
    src_x = gx - factor * out.object_shear_offset[0] / s
    src_y = gy - factor * out.object_shear_offset[1] / s
    warped = map_coordinates(
        h0, np.vstack([src_y.ravel(), src_x.ravel()]), order=1, mode="nearest"
    ).reshape(h0.shape)

    # patch pixels stay clamped to the (shifted) object; everything is
    # re-clamped so nothing penetrates it
    z_shift, _, _ = _pressed_fields(
        cfg, h_free, state.obj, state.object_z, state.pressure,
        shear_offset=out.object_shear_offset,
    )
    h = np.where(contact0 & np.isfinite(z_shift), z_shift, warped)
    h = np.where(np.isfinite(z_shift), np.minimum(h, z_shift), h)

    out.contact_set = contact0
    out.height_field = h
    _refresh_markers(out)
    return out


# ---------------------------------------------------------------------------
# Rendering
# ---------------------------------------------------------------------------

MARKER_SIGMA_PX = 1.1
MARKER_PEAK = 0.9
IR_BACKGROUND = 0.05


def render_depth(
    state: MembraneState,
    noise_amplitude: Optional[float] = None,
    rng: Optional[np.random.Generator] = None,
    timestamp: float = 0.0,
) -> DepthImage:
    """Camera range image: standoff minus surface height, plus zero-mean
    uniform per-pixel noise of the given amplitude (mm)."""
    cfg = state.config
    depth = cfg.camera_standoff - state.height_field
    amp = cfg.noise_amplitude if noise_amplitude is None else noise_amplitude
    if amp > 0:
        if rng is None:
            rng = np.random.default_rng(0)
        depth = depth + rng.uniform(-amp, amp, size=depth.shape)
    return DepthImage(
        values=depth, timestamp=timestamp, pressure_at_capture=state.pressure
    )


def render_ir(state: MembraneState, timestamp: float = 0.0) -> IrImage:
    """Dark background with bright Gaussian splats at the marker projections;
    fully deterministic for a given state."""
    cfg = state.config
    img = np.full((cfg.image_height, cfg.image_width), IR_BACKGROUND)
    radius = int(math.ceil(4 * MARKER_SIGMA_PX))
    for px, py in state.marker_px:
        x0 = int(math.floor(px)) - radius
        y0 = int(math.floor(py)) - radius
        x1 = x0 + 2 * radius + 1
        y1 = y0 + 2 * radius + 1
        cx0, cy0 = max(0, x0), max(0, y0)
        cx1 = min(cfg.image_width, x1)
        cy1 = min(cfg.image_height, y1)
        if cx0 >= cx1 or cy0 >= cy1:
            continue
        yy, xx = np.mgrid[cy0:cy1, cx0:cx1]
        rr = (xx - px) ** 2 + (yy - py) ** 2
        img[cy0:cy1, cx0:cx1] += MARKER_PEAK * np.exp(
            -rr / (2 * MARKER_SIGMA_PX**2)
        )
    return IrImage(values=np.clip(img, 0.0, 1.0), timestamp=timestamp)
