"""Dense optical flow from local polynomial expansion, coarse-to-fine.

Every neighborhood of an image is approximated by a quadratic model
``f(p) ~ p^T A p + b^T p + c`` fitted under a separable Gaussian weighting.
If the second image is the first translated by d, the linear coefficients
shift as ``b2 = b1 - 2 A d``, so d solves ``A d = -(b2 - b1) / 2``. Instead of
solving per pixel, the normal-equation terms ``A^T A`` and ``A^T db`` are
averaged over a window before the 2x2 solve, which trades resolution for
robustness. A scaled image pyramid with warping extends the usable range well
beyond the window size; prior flow carried down from a coarser level enters
the constraint as ``db = -(b2_warped - b1)/2 + A d_prior``.

Conventions: images are (H, W) float64; flow is (H, W, 2) with channel 0 the
x (column) displacement and channel 1 the y (row) displacement, describing
motion of content from the first image to the second.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage


@dataclass(frozen=True)
class FlowParams:
    """Solver knobs; defaults suit ~224x171 marker imagery."""

    pyramid_levels: int = 3
    pyr_scale: float = 0.5
    window_size: int = 15
    iterations: int = 3
    poly_n: int = 7
    poly_sigma: float = 1.5
    gaussian_window: bool = False  # box window matches the classic default
    min_level_size: int = 32

    def __post_init__(self) -> None:
        if self.window_size % 2 == 0 or self.window_size < 3:
            raise ValueError("window_size must be odd and >= 3")
        if not (0.1 < self.pyr_scale < 1.0):
            raise ValueError("pyr_scale must lie in (0.1, 1.0)")
        if self.poly_n < 2:
            raise ValueError("poly_n must be >= 2")


def _expansion_weights(n: int, sigma: float):
    """1-D applicability kernels and the sparse rows of the inverse metric.

    With a separable Gaussian applicability the 6x6 metric over the basis
    (1, x, y, x^2, y^2, xy) has a cross term E[x^2 y^2] = E[x^2]E[y^2] that
    makes the (x^2, y^2) block of its inverse diagonal, so only four inverse
    entries are needed.
    """
    x = np.arange(-n, n + 1, dtype=np.float64)
    g = np.exp(-(x**2) / (2.0 * sigma**2))
    g /= g.sum()
    xg = x * g
    xxg = x * x * g

    m2 = float((x**2 * g).sum())
    m4 = float((x**4 * g).sum())
    G = np.zeros((6, 6))
    G[0, 0] = 1.0
    G[1, 1] = G[2, 2] = m2
    G[0, 3] = G[3, 0] = G[0, 4] = G[4, 0] = m2
    G[3, 3] = G[4, 4] = m4
    G[5, 5] = m2 * m2
    G[3, 4] = G[4, 3] = m2 * m2
    inv = np.linalg.inv(G)
    return g, xg, xxg, inv[1, 1], inv[0, 3], inv[3, 3], inv[5, 5]


def poly_expansion(img: np.ndarray, n: int, sigma: float):
    """Per-pixel quadratic model coefficients.

    Returns ``A`` with shape (H, W, 3) holding (a_xx, a_yy, a_xy/... ) packed
    as [A00, A11, A01] of the symmetric matrix, and ``b`` with shape (H, W, 2)
    holding the linear coefficients (b_x, b_y).
    """
    img = np.asarray(img, dtype=np.float64)
    g, xg, xxg, ig11, ig03, ig33, ig55 = _expansion_weights(n, sigma)

    # vertical sweeps (axis 0 = y), then horizontal (axis 1 = x)
    cy0 = ndimage.correlate1d(img, g, axis=0, mode="nearest")
    cy1 = ndimage.correlate1d(img, xg, axis=0, mode="nearest")
    cy2 = ndimage.correlate1d(img, xxg, axis=0, mode="nearest")

    m00 = ndimage.correlate1d(cy0, g, axis=1, mode="nearest")
    m10 = ndimage.correlate1d(cy0, xg, axis=1, mode="nearest")
    m20 = ndimage.correlate1d(cy0, xxg, axis=1, mode="nearest")
    m01 = ndimage.correlate1d(cy1, g, axis=1, mode="nearest")
    m11 = ndimage.correlate1d(cy1, xg, axis=1, mode="nearest")
    m02 = ndimage.correlate1d(cy2, g, axis=1, mode="nearest")

    b = np.stack([ig11 * m10, ig11 * m01], axis=-1)
    a_xx = ig03 * m00 + ig33 * m20
    a_yy = ig03 * m00 + ig33 * m02
    a_xy = ig55 * m11
    A = np.stack([a_xx, a_yy, 0.5 * a_xy], axis=-1)
    return A, b


# weights that fade the unreliable outermost rows/columns of the constraint
_BORDER_TAPER = np.array([0.14, 0.14, 0.4472, 0.4472, 0.4472])


def _border_weight(h: int, w: int) -> np.ndarray:
    wx = np.ones(w)
    wy = np.ones(h)
    k = len(_BORDER_TAPER)
    wx[: min(k, w)] = _BORDER_TAPER[: min(k, w)]
    wx[-min(k, w):] = np.minimum(wx[-min(k, w):], _BORDER_TAPER[: min(k, w)][::-1])
    wy[: min(k, h)] = _BORDER_TAPER[: min(k, h)]
    wy[-min(k, h):] = np.minimum(wy[-min(k, h):], _BORDER_TAPER[: min(k, h)][::-1])
    return np.outer(wy, wx)


def _update_matrices(A1, b1, A2, b2, flow, border) -> np.ndarray:
    """Per-pixel normal-equation terms (G11, G12, G22, h1, h2) for the
    displacement constraint, with the second expansion warped by the current
    flow estimate."""
    h, w = flow.shape[:2]
    gy, gx = np.mgrid[0:h, 0:w].astype(np.float64)
    sx = gx + flow[..., 0]
    sy = gy + flow[..., 1]
    inside = (sx >= 0) & (sx <= w - 1) & (sy >= 0) & (sy <= h - 1)
    coords = np.vstack([sy.clip(0, h - 1).ravel(), sx.clip(0, w - 1).ravel()])

    def warp(channel: np.ndarray) -> np.ndarray:
        return ndimage.map_coordinates(
            channel, coords, order=1, mode="nearest"
        ).reshape(h, w)

    A2w = np.stack([warp(A2[..., i]) for i in range(3)], axis=-1)
    b2w = np.stack([warp(b2[..., i]) for i in range(2)], axis=-1)

    A = 0.5 * (A1 + A2w)
    A = np.where(inside[..., None], A, A1)
    db = -0.5 * (b2w - b1)
    db = np.where(inside[..., None], db, 0.0)
    # fold the prior displacement into the right-hand side
    db = db + np.stack(
        [
            A[..., 0] * flow[..., 0] + A[..., 2] * flow[..., 1],
            A[..., 2] * flow[..., 0] + A[..., 1] * flow[..., 1],
        ],
        axis=-1,
    )

    A = A * border[..., None]
    db = db * border[..., None]

    a00, a11, a01 = A[..., 0], A[..., 1], A[..., 2]
    M = np.empty((h, w, 5))
    M[..., 0] = a00 * a00 + a01 * a01            # G11
    M[..., 1] = (a00 + a11) * a01                # G12
    M[..., 2] = a11 * a11 + a01 * a01            # G22
    M[..., 3] = a00 * db[..., 0] + a01 * db[..., 1]  # h1
    M[..., 4] = a01 * db[..., 0] + a11 * db[..., 1]  # h2
    return M


def _window_average(M: np.ndarray, params: FlowParams) -> np.ndarray:
    size = params.window_size
    out = np.empty_like(M)
    if params.gaussian_window:
        sigma = 0.3 * (size // 2)
        x = np.arange(size) - size // 2
        k = np.exp(-(x**2) / (2 * sigma**2))
        k /= k.sum()
        for i in range(5):
            tmp = ndimage.correlate1d(M[..., i], k, axis=0, mode="nearest")
            out[..., i] = ndimage.correlate1d(tmp, k, axis=1, mode="nearest")
    else:
        for i in range(5):
            out[..., i] = ndimage.uniform_filter(
                M[..., i], size=size, mode="nearest"
            )
    return out


def _solve_flow(M: np.ndarray) -> np.ndarray:
    g11, g12, g22 = M[..., 0], M[..., 1], M[..., 2]
    h1, h2 = M[..., 3], M[..., 4]
    det = g11 * g22 - g12 * g12
    safe = np.abs(det) > 1e-12
    idet = np.where(safe, 1.0 / np.where(safe, det, 1.0), 0.0)
    flow = np.empty(M.shape[:2] + (2,))
    flow[..., 0] = (g22 * h1 - g12 * h2) * idet
    flow[..., 1] = (g11 * h2 - g12 * h1) * idet
    return flow


def _resize_bilinear(img: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    """Pixel-center-aligned bilinear resize (the classic image convention)."""
    h, w = img.shape
    out_h, out_w = shape
    if (out_h, out_w) == (h, w):
        return img.copy()
    ys = (np.arange(out_h) + 0.5) * h / out_h - 0.5
    xs = (np.arange(out_w) + 0.5) * w / out_w - 0.5
    gy, gx = np.meshgrid(ys.clip(0, h - 1), xs.clip(0, w - 1), indexing="ij")
    return ndimage.map_coordinates(
        img, np.vstack([gy.ravel(), gx.ravel()]), order=1, mode="nearest"
    ).reshape(out_h, out_w)


def dense_flow_field(
    img0: np.ndarray, img1: np.ndarray, params: FlowParams = FlowParams()
) -> np.ndarray:
    """Full-resolution flow from img0 to img1, shape (H, W, 2)."""
    img0 = np.asarray(img0, dtype=np.float64)
    img1 = np.asarray(img1, dtype=np.float64)
    if img0.shape != img1.shape:
        raise ValueError("images must share a shape")
    h, w = img0.shape

    # drop pyramid levels that would fall below the minimum size
    levels = 0
    scale = 1.0
    while levels + 1 < params.pyramid_levels:
        scale *= params.pyr_scale
        if min(w, h) * scale < params.min_level_size:
            break
        levels += 1

    flow: np.ndarray | None = None
    for k in range(levels, -1, -1):
        level_scale = params.pyr_scale**k
        wk = max(1, int(round(w * level_scale)))
        hk = max(1, int(round(h * level_scale)))

        if k > 0:
            sigma = (1.0 / level_scale - 1.0) * 0.5
            i0 = ndimage.gaussian_filter(img0, sigma, mode="nearest")
            i1 = ndimage.gaussian_filter(img1, sigma, mode="nearest")
            i0 = _resize_bilinear(i0, (hk, wk))
            i1 = _resize_bilinear(i1, (hk, wk))
        else:
            i0, i1 = img0, img1

        A1, b1 = poly_expansion(i0, params.poly_n, params.poly_sigma)
        A2, b2 = poly_expansion(i1, params.poly_n, params.poly_sigma)

        if flow is None:
            flow = np.zeros((hk, wk, 2))
        else:
            flow = np.stack(
                [
                    _resize_bilinear(flow[..., 0], (hk, wk)),
                    _resize_bilinear(flow[..., 1], (hk, wk)),
                ],
                axis=-1,
            ) * (1.0 / params.pyr_scale)

        border = _border_weight(hk, wk)
        M = _update_matrices(A1, b1, A2, b2, flow, border)
        for i in range(params.iterations):
            flow = _solve_flow(_window_average(M, params))
            if i < params.iterations - 1:
                M = _update_matrices(A1, b1, A2, b2, flow, border)

    assert flow is not None
    return flow
