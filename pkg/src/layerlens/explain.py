"""Per-layer attribution maps: input-gradient saliency, Grad-CAM at any tap,
and LIME over a square superpixel grid, plus Gaussian post-smoothing.

All explainers are pure given an immutable model, so per-image calls can run
concurrently. Maps are nonnegative h x w arrays aligned to input pixels;
coarser taps are bilinearly upsampled.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from . import network as net
from . import numerics as nm
from .errors import DegenerateDesign, ShapeError, SpecError


@dataclass
class AttributionMap:
    """Nonnegative heatmap over input pixels with its provenance tags."""

    values: np.ndarray  # (h, w), float64, >= 0
    method: str
    tap: int
    class_index: int

    def __post_init__(self):
        v = nm.as_f64(self.values)
        if v.ndim != 2:
            raise ShapeError(f"attribution map must be 2-D, got shape {v.shape}")
        if not np.all(np.isfinite(v)):
            raise ShapeError("attribution map contains non-finite values")
        if v.min() < 0:
            raise ShapeError("attribution map contains negative values")
        self.values = v


def bilinear_resize(values: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resize with half-pixel-centre sampling; preserves constants."""
    v = nm.as_f64(values)
    h, w = v.shape
    if (h, w) == (out_h, out_w):
        return v.copy()
    ys = np.clip((np.arange(out_h) + 0.5) * h / out_h - 0.5, 0, h - 1)
    xs = np.clip((np.arange(out_w) + 0.5) * w / out_w - 0.5, 0, w - 1)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = (ys - y0)[:, None]
    wx = (xs - x0)[None, :]
    return ((1 - wy) * (1 - wx) * v[np.ix_(y0, x0)]
            + (1 - wy) * wx * v[np.ix_(y0, x1)]
            + wy * (1 - wx) * v[np.ix_(y1, x0)]
            + wy * wx * v[np.ix_(y1, x1)])


def _single_image(image) -> np.ndarray:
    img = nm.as_f64(image)
    if img.ndim == 3:
        img = img[None]
    if img.ndim != 4 or img.shape[0] != 1:
        raise ShapeError(f"expected one image (c, h, w), got shape {np.shape(image)}")
    return img


def saliency(spec: net.NetworkSpec, params: net.ModelParams, image, class_index: int) -> AttributionMap:
    """Absolute input gradient of the class score, channel-reduced by max."""
    batch = _single_image(image)
    g = net.backward_to_tap(spec, params, batch, class_index, tap=0)
    values = np.abs(g[0]).max(axis=0)
    return AttributionMap(values, "saliency", 0, class_index)


def cam_values(activations: np.ndarray, gradients: np.ndarray) -> np.ndarray:
    """Channel-importance weighted activation map, rectified.

    Each channel's weight is the spatial mean of the class-score gradient
    over that channel's activation map; negative totals are clipped since
    channels that lower the score are not of interest.
    """
    a = nm.as_f64(activations)
    g = nm.as_f64(gradients)
    if a.shape != g.shape or a.ndim != 3:
        raise ShapeError(f"activations {a.shape} and gradients {g.shape} must both be (k, h, w)")
    alphas = g.mean(axis=(1, 2))
    return np.maximum((alphas[:, None, None] * a).sum(axis=0), 0.0)


def grad_cam(spec: net.NetworkSpec, params: net.ModelParams, image, class_index: int, tap: int) -> AttributionMap:
    """Gradient-weighted class activation map at a tap, upsampled to the input."""
    if not 1 <= tap <= spec.tap_count:
        raise SpecError(f"tap {tap} out of range 1..{spec.tap_count}")
    batch = _single_image(image)
    _, taps = net.forward_with_taps(spec, params, batch, depth=tap)
    grads = net.backward_to_tap(spec, params, batch, class_index, tap)
    cam = cam_values(taps[tap][0], grads[0])
    h, w = spec.input_shape[1:]
    return AttributionMap(bilinear_resize(cam, h, w), "grad_cam", tap, class_index)


def gaussian_smooth(amap: AttributionMap, sigma: float) -> AttributionMap:
    """Normalized Gaussian blur with reflective borders; sigma 0 is identity.

    Reflection plus a normalized symmetric kernel preserves total mass; the
    tiny negative round-off is clipped so maps stay nonnegative.
    """
    if sigma < 0:
        raise ValueError(f"sigma must be >= 0, got {sigma}")
    if sigma == 0:
        return AttributionMap(amap.values.copy(), amap.method, amap.tap, amap.class_index)
    out = ndimage.gaussian_filter(amap.values, sigma=sigma, mode="reflect")
    return AttributionMap(np.maximum(out, 0.0), amap.method, amap.tap, amap.class_index)


# ---------------------------------------------------------------------------
# LIME


@dataclass
class SuperpixelGrid:
    """Square tiling of the image; ragged last row/column merge into edge patches."""

    patch_edge: int
    labels: np.ndarray  # (h, w) int patch ids, row-major over patches
    patch_count: int


def superpixel_grid(image_shape: tuple[int, int], patch_edge: int) -> SuperpixelGrid:
    h, w = image_shape
    if patch_edge < 1:
        raise ShapeError(f"patch_edge must be >= 1, got {patch_edge}")
    if patch_edge > h or patch_edge > w:
        raise ShapeError(f"patch_edge {patch_edge} exceeds image shape {(h, w)}")
    rows, cols = h // patch_edge, w // patch_edge
    ri = np.minimum(np.arange(h) // patch_edge, rows - 1)
    ci = np.minimum(np.arange(w) // patch_edge, cols - 1)
    labels = ri[:, None] * cols + ci[None, :]
    return SuperpixelGrid(patch_edge, labels.astype(np.int64), rows * cols)


@dataclass
class LimeExplanation:
    patch_weights: np.ndarray   # (p,)
    selected: tuple[int, ...]   # top-k patch ids
    samples: np.ndarray         # (n, p) binary presence vectors
    scores: np.ndarray          # (n,) black-box outputs
    intercept: float


def _ridge_fit(z: np.ndarray, y: np.ndarray, lam: float) -> tuple[np.ndarray, float]:
    """Ridge regression with an unpenalized intercept, via centering."""
    zc = z - z.mean(axis=0)
    yc = y - y.mean()
    p = z.shape[1]
    w = np.linalg.solve(zc.T @ zc + lam * np.eye(p), zc.T @ yc)
    intercept = float(y.mean() - z.mean(axis=0) @ w)
    return w, intercept


def lime_explain(
    black_box,
    image,
    grid: SuperpixelGrid,
    n_samples: int,
    ridge_lambda: float,
    keep_prob: float,
    k: int,
    rng: np.random.Generator,
) -> LimeExplanation:
    """Perturbation-based patch attribution.

    Draws binary masks keeping each patch with probability ``keep_prob``
    (dropped patches are zeroed in the image), scores each perturbed image
    with ``black_box``, fits a ridge regression of the scores on the presence
    vectors, and selects the k highest-weight patches.
    """
    img = nm.as_f64(image)
    if img.ndim == 2:
        img = img[None]
    p = grid.patch_count
    if not 0 <= k <= p:
        raise ShapeError(f"k must be in 0..{p}, got {k}")
    z = (rng.random((n_samples, p)) < keep_prob).astype(np.float64)
    if n_samples > 1 and np.all(z == z[0]):
        raise DegenerateDesign(
            f"all {n_samples} perturbation masks identical (keep_prob={keep_prob})")
    scores = np.empty(n_samples)
    for i in range(n_samples):
        pixel_keep = z[i][grid.labels]
        scores[i] = float(black_box(img * pixel_keep[None, :, :]))
    weights, intercept = _ridge_fit(z, scores, ridge_lambda)
    order = np.lexsort((np.arange(p), -weights))
    selected = tuple(int(i) for i in order[:k])
    return LimeExplanation(weights, selected, z, scores, intercept)


def lime_mask(image, explanation: LimeExplanation, grid: SuperpixelGrid):
    """Occlude everything outside the selected patches.

    Returns (occluded image, boolean mask true exactly on selected patches).
    """
    img = nm.as_f64(image)
    keep = np.zeros(grid.patch_count, dtype=bool)
    keep[list(explanation.selected)] = True
    mask = keep[grid.labels]
    occluded = img * mask if img.ndim == 2 else img * mask[None, :, :]
    return occluded, mask
