"""Single-scale grid detector on a frozen backbone, and its evaluators.

A detection head is one learnable conv layer over a chosen tap's feature
map; a parameter-free adaptive average pool maps the conv output onto the
S x S prediction grid (so the backbone and head work at any tap
resolution >= S). Per cell each of B box slots predicts (x, y, w, h,
confidence) through a sigmoid squash, plus per-cell class scores.

The coordinate loss is squared error on the cell-relative centre and on the
square roots of width/height, restricted to responsible cells (the cell
containing an object's centre owns it). Evaluation: greedy NMS, then AP as
the area under the all-point interpolated precision-recall curve, averaged
over classes and optionally over an IOU-threshold schedule.
"""

from __future__ import annotations

import time
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nm
from . import network as net
from .errors import ShapeError, TrainingDiverged
from .locmetrics import GtBox
from .seeding import derive_seed, make_rng
from .training import TrainConfig, cache_frozen_features, clip_gradients


# ---------------------------------------------------------------------------
# target encoding


@dataclass
class YoloTarget:
    """Per-cell regression targets for one image.

    Exactly one cell is responsible per object: the cell containing the box
    centre (half-open cells). ``coords`` rows hold (x_rel, y_rel, w_norm,
    h_norm): centre relative to the cell in [0, 1), extent relative to the
    image in (0, 1].
    """

    S: int
    image_shape: tuple[int, int]  # (h, w)
    obj: np.ndarray        # (S, S) bool
    coords: np.ndarray     # (S, S, 4)
    class_ids: np.ndarray  # (S, S) int
    dropped: int = 0       # objects discarded because their centre cell was taken


def encode_targets(annotations, S: int, image_shape: tuple[int, int]) -> YoloTarget:
    """annotations: iterable of (GtBox, class_id) for one image."""
    ih, iw = image_shape
    obj = np.zeros((S, S), dtype=bool)
    coords = np.zeros((S, S, 4))
    class_ids = np.zeros((S, S), dtype=np.int64)
    dropped = 0
    cell_h, cell_w = ih / S, iw / S
    for box, class_id in annotations:
        box.check_bounds(image_shape)
        cx, cy = box.x + box.w / 2, box.y + box.h / 2
        col = min(int(cx / cell_w), S - 1)
        row = min(int(cy / cell_h), S - 1)
        if obj[row, col]:
            dropped += 1
            warnings.warn(
                f"object centre collides with an earlier object in cell "
                f"({row}, {col}); dropping it", stacklevel=2)
            continue
        obj[row, col] = True
        coords[row, col] = (cx / cell_w - col, cy / cell_h - row, box.w / iw, box.h / ih)
        class_ids[row, col] = class_id
    return YoloTarget(S, image_shape, obj, coords, class_ids, dropped)


def target_to_grid(target: YoloTarget, B: int, class_count: int) -> np.ndarray:
    """Render a target as a post-squash prediction grid with confidence 1."""
    S = target.S
    grid = np.zeros((S, S, B * 5 + class_count))
    for j in range(B):
        grid[:, :, j * 5:j * 5 + 4] = target.coords
        grid[:, :, j * 5 + 4] = target.obj.astype(float)
    rows, cols = np.nonzero(target.obj)
    grid[rows, cols, B * 5 + target.class_ids[rows, cols]] = 1.0
    return grid


# ---------------------------------------------------------------------------
# coordinate loss


def coord_loss_arrays(pred: np.ndarray, obj: np.ndarray, coords: np.ndarray):
    """Sum-squared centre error plus sum-squared sqrt-extent error over
    responsible cells, broadcast over all B predictors.

    pred: (..., S, S, B, 4); obj: (..., S, S) bool; coords: (..., S, S, 4).
    Returns (loss, d_pred). Predicted extents must be positive where obj is
    set (the squash guarantees it); asserted, not silently clipped.
    """
    pred = nm.as_f64(pred)
    mask = obj[..., None].astype(float)                      # (..., S, S, 1)
    t = coords[..., None, :]                                  # (..., S, S, 1, 4)
    pw, ph = pred[..., 2], pred[..., 3]
    assert np.all(pw[obj.astype(bool)] > 0) and np.all(ph[obj.astype(bool)] > 0), \
        "predicted extents must be positive on responsible cells"
    d_pred = np.zeros_like(pred)

    dxy = pred[..., :2] - t[..., :2]
    loss_xy = float((mask[..., None] * dxy ** 2).sum())
    d_pred[..., :2] = 2.0 * mask[..., None] * dxy

    # sqrt terms; off-cell entries contribute nothing and get zero gradient
    safe_pred = np.where(mask[..., None] > 0, pred[..., 2:4], 1.0)
    safe_t = np.where(mask[..., None] > 0, t[..., 2:4], 1.0)
    droot = np.sqrt(safe_t) - np.sqrt(safe_pred)
    loss_wh = float((mask[..., None] * droot ** 2).sum())
    d_pred[..., 2:4] = mask[..., None] * (-droot / np.sqrt(safe_pred))
    return loss_xy + loss_wh, d_pred


def yolo_coord_loss(pred: np.ndarray, target: YoloTarget):
    """Coordinate regression loss for one image; returns (loss, d_pred).

    pred is the post-squash (S, S, B, 4) array of (x_rel, y_rel, w, h).
    """
    pred = nm.as_f64(pred)
    if pred.ndim != 4 or pred.shape[:2] != (target.S, target.S) or pred.shape[3] != 4:
        raise ShapeError(
            f"pred shape {pred.shape} incompatible with S={target.S} (want (S, S, B, 4))")
    return coord_loss_arrays(pred, target.obj, target.coords)


# ---------------------------------------------------------------------------
# adaptive average pooling (feature resolution -> S x S grid)


def _bin_edges(n: int, bins: int) -> np.ndarray:
    return (np.arange(bins + 1) * n) // bins


def adaptive_avg_pool(x: np.ndarray, out_size: int) -> np.ndarray:
    x = nm.check_tensor4(x, "pool input")
    n, c, h, w = x.shape
    if h < out_size or w < out_size:
        raise ShapeError(f"adaptive pool needs input >= {out_size}, got {(h, w)}")
    eh, ew = _bin_edges(h, out_size), _bin_edges(w, out_size)
    out = np.empty((n, c, out_size, out_size))
    for i in range(out_size):
        for j in range(out_size):
            out[:, :, i, j] = x[:, :, eh[i]:eh[i + 1], ew[j]:ew[j + 1]].mean(axis=(2, 3))
    return out


def adaptive_avg_pool_backward(d_out: np.ndarray, in_shape) -> np.ndarray:
    n, c, h, w = in_shape
    out_size = d_out.shape[2]
    eh, ew = _bin_edges(h, out_size), _bin_edges(w, out_size)
    d_x = np.zeros(in_shape)
    for i in range(out_size):
        for j in range(out_size):
            area = (eh[i + 1] - eh[i]) * (ew[j + 1] - ew[j])
            d_x[:, :, eh[i]:eh[i + 1], ew[j]:ew[j + 1]] += (
                d_out[:, :, i, j] / area)[:, :, None, None]
    return d_x


# ---------------------------------------------------------------------------
# detection head


@dataclass
class DetectHead:
    tap: int
    S: int
    B: int
    class_count: int
    kernel: np.ndarray  # (B*5 + classes, tap_channels, k, k)
    bias: np.ndarray


@dataclass
class HeadReport:
    train_losses: list[float] = field(default_factory=list)
    val_losses: list[float] = field(default_factory=list)
    wall_time_s: float = 0.0
    dropped_objects: int = 0


def _sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def init_detect_head(spec, tap: int, S: int, B: int, seed: int, kernel_size: int = 3) -> DetectHead:
    c = spec.tap_shape(tap)[0]
    out_c = B * 5 + spec.class_count
    rng = make_rng(seed)
    fan_in = c * kernel_size * kernel_size
    limit = np.sqrt(6.0 / fan_in)
    k = rng.uniform(-limit, limit, size=(out_c, c, kernel_size, kernel_size))
    return DetectHead(tap, S, B, spec.class_count, k, np.zeros(out_c))


def head_raw_grids(head: DetectHead, feats: np.ndarray) -> np.ndarray:
    """Raw (pre-squash) prediction grids (n, S, S, B*5 + classes)."""
    pad = head.kernel.shape[2] // 2
    raw = nm.conv2d(feats, head.kernel, head.bias, stride=1, pad=pad)
    pooled = adaptive_avg_pool(raw, head.S)
    return pooled.transpose(0, 2, 3, 1)


def _head_loss(head: DetectHead, feats, obj, coords, class_ids,
               lambda_coord=5.0, lambda_noobj=0.5, want_grads=True):
    """Full objective: weighted coordinate loss + objectness SSE + class CE."""
    n = feats.shape[0]
    B, S, C = head.B, head.S, head.class_count
    pad = head.kernel.shape[2] // 2
    raw = nm.conv2d(feats, head.kernel, head.bias, stride=1, pad=pad)
    pooled = adaptive_avg_pool(raw, S)
    grid = pooled.transpose(0, 2, 3, 1)                        # (n, S, S, out_c)
    box_raw = grid[..., :B * 5].reshape(n, S, S, B, 5)
    cls_raw = grid[..., B * 5:]
    box_sig = _sigmoid(box_raw)
    pred_xywh, conf = box_sig[..., :4], box_sig[..., 4]

    coord_loss, d_xywh = coord_loss_arrays(pred_xywh, obj, coords)
    obj_f = obj.astype(float)[..., None]                       # (n, S, S, 1)
    conf_loss = float((obj_f * (conf - 1.0) ** 2).sum()
                      + lambda_noobj * ((1 - obj_f) * conf ** 2).sum())
    d_conf = 2.0 * (obj_f * (conf - 1.0) + lambda_noobj * (1 - obj_f) * conf)

    obj_mask = obj.astype(bool)
    logits = cls_raw[obj_mask]
    labels = class_ids[obj_mask]
    m = logits.shape[0]
    if m:
        cls_loss, d_logits = nm.softmax_cross_entropy(logits, labels)
        cls_loss *= m
        d_logits = d_logits * m
    else:
        cls_loss, d_logits = 0.0, None

    total = (lambda_coord * coord_loss + conf_loss + cls_loss) / n
    if not want_grads:
        return total, None, None

    d_box_sig = np.concatenate(
        [lambda_coord * d_xywh, d_conf[..., None]], axis=-1)
    d_box_raw = d_box_sig * box_sig * (1 - box_sig)
    d_cls_raw = np.zeros(cls_raw.shape)
    if m:
        d_cls_raw[obj_mask] = d_logits
    d_grid = np.concatenate(
        [d_box_raw.reshape(n, S, S, B * 5), d_cls_raw], axis=-1) / n
    d_pooled = d_grid.transpose(0, 3, 1, 2)
    d_raw = adaptive_avg_pool_backward(d_pooled, raw.shape)
    d_kernel, d_bias = nm.conv2d_param_grads(
        feats, head.kernel.shape, d_raw, stride=1, pad=pad)
    return total, d_kernel, d_bias


def encode_batch(annotations_per_image, S, image_shape):
    """Stacks per-image targets into batch arrays; returns (obj, coords, cls, dropped)."""
    targets = [encode_targets(a, S, image_shape) for a in annotations_per_image]
    obj = np.stack([t.obj for t in targets])
    coords = np.stack([t.coords for t in targets])
    class_ids = np.stack([t.class_ids for t in targets])
    return obj, coords, class_ids, sum(t.dropped for t in targets)


def train_detection_head(
    spec: net.NetworkSpec,
    frozen_params: net.ModelParams,
    tap: int,
    images: np.ndarray,
    annotations_per_image,
    S: int,
    B: int,
    config: TrainConfig,
    val_images: np.ndarray | None = None,
    val_annotations=None,
    lambda_coord: float = 5.0,
    lambda_noobj: float = 0.5,
) -> tuple[DetectHead, HeadReport]:
    """Fit one conv head at ``tap`` on cached features; the backbone is
    read-only throughout (its arrays are never written)."""
    t0 = time.perf_counter()
    ih, iw = spec.input_shape[1:]
    feats = cache_frozen_features(spec, frozen_params, images, tap)
    with warnings.catch_warnings():
        warnings.simplefilter("always")
        obj, coords, class_ids, dropped = encode_batch(annotations_per_image, S, (ih, iw))
    head = init_detect_head(spec, tap, S, B, derive_seed(config.seed, f"detect-head:{tap}"))
    report = HeadReport(dropped_objects=dropped)

    val_feats = val_obj = val_coords = val_cls = None
    if val_images is not None and len(val_images):
        val_feats = cache_frozen_features(spec, frozen_params, val_images, tap)
        val_obj, val_coords, val_cls, _ = encode_batch(val_annotations, S, (ih, iw))

    rng = make_rng(derive_seed(config.seed, f"order:detect{tap}"))
    vel = [np.zeros_like(head.kernel), np.zeros_like(head.bias)]
    n = feats.shape[0]
    best_val, stall = np.inf, 0
    for _epoch in range(config.epochs):
        order = rng.permutation(n)
        epoch_loss, seen = 0.0, 0
        for s in range(0, n, config.batch_size):
            idx = order[s:s + config.batch_size]
            loss, d_k, d_b = _head_loss(
                head, feats[idx], obj[idx], coords[idx], class_ids[idx],
                lambda_coord, lambda_noobj)
            if not np.isfinite(loss):
                raise TrainingDiverged(f"non-finite loss in detection head at tap {tap}")
            (d_k, d_b), _ = clip_gradients([d_k, d_b], config.clip_norm)
            head.kernel, vel[0] = nm.sgd_update(head.kernel, d_k, config.lr, config.momentum, vel[0])
            head.bias, vel[1] = nm.sgd_update(head.bias, d_b, config.lr, config.momentum, vel[1])
            epoch_loss += loss * len(idx)
            seen += len(idx)
        report.train_losses.append(epoch_loss / seen)
        if val_feats is not None:
            vloss, _, _ = _head_loss(head, val_feats, val_obj, val_coords, val_cls,
                                     lambda_coord, lambda_noobj, want_grads=False)
            report.val_losses.append(vloss)
            if vloss < best_val - 1e-12:
                best_val, stall = vloss, 0
            else:
                stall += 1
                if stall >= config.patience:
                    break
    report.wall_time_s = time.perf_counter() - t0
    return head, report


# ---------------------------------------------------------------------------
# head serialization (same conventions as the backbone weight files)

_HEAD_MAGIC = b"LLH1"


def save_head(head: DetectHead, path) -> None:
    import hashlib
    import struct

    from .network import _write_array

    parts = [_HEAD_MAGIC, struct.pack("<4H", head.tap, head.S, head.B, head.class_count)]
    _write_array(parts, head.kernel)
    _write_array(parts, head.bias)
    payload = b"".join(parts)
    with open(path, "wb") as fh:
        fh.write(payload + hashlib.sha256(payload).digest())


def load_head(path) -> DetectHead:
    import hashlib

    from .errors import BadMagic, ChecksumMismatch
    from .network import _Reader, _read_array

    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != _HEAD_MAGIC:
        raise BadMagic(f"not a head file: magic {raw[:4]!r}")
    payload, digest = raw[:-32], raw[-32:]
    if hashlib.sha256(payload).digest() != digest:
        raise ChecksumMismatch("head file checksum does not match contents")
    r = _Reader(payload)
    r.take(4)
    tap, S, B, class_count = r.unpack("<4H")
    kernel = _read_array(r)
    bias = _read_array(r)
    return DetectHead(tap, S, B, class_count, kernel, bias)


# ---------------------------------------------------------------------------
# decoding


@dataclass(frozen=True)
class Detection:
    box: tuple[float, float, float, float]  # absolute pixels (x, y, w, h)
    class_id: int
    score: float


def decode_grid(grid: np.ndarray, B: int, conf_threshold: float,
                image_shape: tuple[int, int]) -> list[Detection]:
    """Decode one post-squash grid (S, S, B*5 + classes) to detections.

    Per cell and box slot: absolute-pixel box from the cell-relative centre
    and image-relative extent, class = argmax of the cell's class
    probabilities, score = confidence times class probability. Detections
    below ``conf_threshold`` are discarded; boxes are clipped to the image.
    """
    ih, iw = image_shape
    S = grid.shape[0]
    cls = grid[..., B * 5:]
    out: list[Detection] = []
    cell_h, cell_w = ih / S, iw / S
    for row in range(S):
        for col in range(S):
            probs = cls[row, col]
            class_id = int(np.argmax(probs))
            for j in range(B):
                x_rel, y_rel, w_n, h_n, conf = grid[row, col, j * 5:j * 5 + 5]
                score = float(conf * probs[class_id])
                if score < conf_threshold:
                    continue
                w_px, h_px = w_n * iw, h_n * ih
                cx, cy = (col + x_rel) * cell_w, (row + y_rel) * cell_h
                x0, y0 = max(0.0, cx - w_px / 2), max(0.0, cy - h_px / 2)
                x1, y1 = min(float(iw), cx + w_px / 2), min(float(ih), cy + h_px / 2)
                if x1 <= x0 or y1 <= y0:
                    continue
                out.append(Detection((x0, y0, x1 - x0, y1 - y0), class_id, score))
    return out


def decode_predictions(raw_grid: np.ndarray, B: int, conf_threshold: float,
                       image_shape: tuple[int, int]) -> list[Detection]:
    """Decode one raw head output grid: squash boxes/confidence with a sigmoid
    and classes with softmax, then decode."""
    S, _, width = raw_grid.shape
    box_part = _sigmoid(raw_grid[..., :B * 5])
    cls_part = nm.softmax(raw_grid[..., B * 5:])
    return decode_grid(np.concatenate([box_part, cls_part], axis=-1),
                       B, conf_threshold, image_shape)


# ---------------------------------------------------------------------------
# evaluation


def box_iou(a, b) -> float:
    ax, ay, aw, ah = a
    bx, by, bw, bh = b
    x0, y0 = max(ax, bx), max(ay, by)
    x1, y1 = min(ax + aw, bx + bw), min(ay + ah, by + bh)
    inter = max(0.0, x1 - x0) * max(0.0, y1 - y0)
    union = aw * ah + bw * bh - inter
    return inter / union if union > 0 else 0.0


def nms(detections: list[Detection], iou_threshold: float) -> list[Detection]:
    """Greedy per-class suppression by descending score (stable on ties)."""
    kept: list[Detection] = []
    by_class: dict[int, list[Detection]] = {}
    for d in detections:
        by_class.setdefault(d.class_id, []).append(d)
    for class_id in sorted(by_class):
        cand = sorted(by_class[class_id], key=lambda d: -d.score)
        chosen: list[Detection] = []
        for d in cand:
            if all(box_iou(d.box, k.box) <= iou_threshold for k in chosen):
                chosen.append(d)
        kept.extend(chosen)
    return kept


@dataclass
class DetectionSet:
    """Scored detections and ground truth per image, for evaluation."""

    detections: dict = field(default_factory=dict)   # image_id -> list[Detection]
    ground_truth: dict = field(default_factory=dict)  # image_id -> list[(class_id, box)]

    def add_image(self, image_id, detections, ground_truth):
        self.detections[image_id] = list(detections)
        self.ground_truth[image_id] = [(int(c), tuple(b)) for c, b in ground_truth]

    def class_ids(self):
        ids = set()
        for gts in self.ground_truth.values():
            ids.update(c for c, _ in gts)
        return sorted(ids)


def _match_class(dets, gts, iou_threshold):
    """Greedy one-to-one matching of score-ranked detections to ground truth.

    dets: list of (image_id, score, box); gts: list of (image_id, box).
    Returns (tp flags per ranked detection, matched IOUs, gt count).
    """
    order = sorted(range(len(dets)), key=lambda i: -dets[i][1])
    gt_by_image: dict = {}
    for gi, (img, box) in enumerate(gts):
        gt_by_image.setdefault(img, []).append((gi, box))
    used = set()
    tp = np.zeros(len(dets), dtype=bool)
    matched_ious = []
    for rank, i in enumerate(order):
        img, _score, box = dets[i]
        best_iou, best_gi = 0.0, None
        for gi, gt_box in gt_by_image.get(img, ()):
            if gi in used:
                continue
            v = box_iou(box, gt_box)
            if v > best_iou:
                best_iou, best_gi = v, gi
        if best_gi is not None and best_iou >= iou_threshold:
            used.add(best_gi)
            tp[rank] = True
            matched_ious.append(best_iou)
    return tp, matched_ious, len(gts)


def average_precision(detections, ground_truth, iou_threshold: float) -> float:
    """AP for one class.

    detections: list of (image_id, score, box); ground_truth: list of
    (image_id, box). Area under the all-point interpolated precision-recall
    curve (precision envelope, summed over recall increments).
    """
    if not ground_truth:
        raise ValueError("average precision undefined without ground truth")
    if not detections:
        return 0.0
    tp, _, n_gt = _match_class(detections, ground_truth, iou_threshold)
    tp_cum = np.cumsum(tp)
    fp_cum = np.cumsum(~tp)
    recall = tp_cum / n_gt
    precision = tp_cum / (tp_cum + fp_cum)
    # monotone envelope from the right, then integrate over recall steps
    env = np.maximum.accumulate(precision[::-1])[::-1]
    recall_prev = np.concatenate([[0.0], recall[:-1]])
    return float(((recall - recall_prev) * env).sum())


def default_schedule() -> list[float]:
    """The ten matching thresholds 0.50, 0.55, ..., 0.95."""
    return [(50 + 5 * i) / 100 for i in range(10)]


def map_evaluate(detection_set: DetectionSet, schedule=None) -> dict[str, float]:
    """Class-averaged AP at 0.5 and 0.75, the schedule mean, and the mean
    matched-box IOU at 0.5. Classes without ground truth are excluded."""
    schedule = default_schedule() if schedule is None else list(schedule)
    per_class: dict[int, tuple[list, list]] = {}
    for img, gts in detection_set.ground_truth.items():
        for c, box in gts:
            per_class.setdefault(c, ([], []))[1].append((img, box))
    for img, dets in detection_set.detections.items():
        for d in dets:
            if d.class_id in per_class:
                per_class[d.class_id][0].append((img, d.score, d.box))

    def mean_ap(threshold):
        aps = [average_precision(d, g, threshold) for d, g in per_class.values()]
        return float(np.mean(aps)) if aps else 0.0

    all_ious = []
    for dets, gts in per_class.values():
        _, matched, _ = _match_class(dets, gts, 0.5)
        all_ious.extend(matched)
    return {
        "mAP.5": mean_ap(0.5),
        "mAP.75": mean_ap(0.75),
        "mAP.5:.95:.05": float(np.mean([mean_ap(t) for t in schedule])),
        "mIOU": float(np.mean(all_ious)) if all_ious else 0.0,
    }
