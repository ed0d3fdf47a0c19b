"""Experiment driver: generate -> train -> explain/compare/detect/granulometry.

Every command is a pure function of (config, input files): rerunning one
overwrites its outputs with identical bytes. All randomness flows from the
single config seed through named sub-seeds, which are logged in each CSV
header together with the effective config hash. Exit codes: 0 success,
1 runtime failure, 2 configuration error.
"""

from __future__ import annotations

import argparse
import csv
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import data as dat
from . import detect as dt
from . import explain as ex
from . import locmetrics as lm
from . import network as net
from . import numerics as nm
from . import training as tr
from .config import ExperimentConfig, load_config
from .errors import ConfigError, LayerlensError
from .seeding import derive_seed, make_rng

CSV_SCHEMAS = {
    "train": ("layerlens.train.v1", ["record", "stage", "epoch", "train", "val"]),
    "explain": ("layerlens.explain.v1",
                ["image_id", "method", "tap", "iou", "percentile",
                 "granulometry_summary", "lime_overlap_count", "lime_overlap_fraction"]),
    "compare_pairs": ("layerlens.compare_pairs.v1",
                      ["image_id", "method", "tap", "iou_cl", "iou_e2e"]),
    "compare_summary": ("layerlens.compare_summary.v1",
                        ["method", "tap", "n_images", "frac_cl_gt_e2e", "lacc_cl", "lacc_e2e"]),
    "detections": ("layerlens.detections.v1",
                   ["image_id", "class", "score", "x", "y", "w", "h"]),
    "detect_report": ("layerlens.detect_report.v1", ["metric", "mean", "std", "pretty"]),
    "granulometry": ("layerlens.granulometry.v1",
                     ["image_id", "scheme", "tap", "size", "area_removed"]),
    "granulometry_summary": ("layerlens.granulometry_summary.v1",
                             ["scheme", "tap", "mean_size", "n_images"]),
}


def _fmt(v) -> str:
    if isinstance(v, (float, np.floating)):
        return repr(float(v))  # shortest round-trip form: exact and byte-stable
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return "" if v is None else str(v)


def write_csv(path, schema_key: str, rows, cfg: ExperimentConfig, subseeds: dict) -> None:
    name, header = CSV_SCHEMAS[schema_key]
    note = " ".join(f"{k}={v}" for k, v in subseeds.items())
    with open(path, "w", newline="", encoding="utf-8") as fh:
        fh.write(f"# schema={name} config={cfg.hash} seed={cfg.seed} {note}\n".rstrip() + "\n")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([_fmt(v) for v in row])


def read_csv(path):
    """Header comment, column names, and rows of a report CSV."""
    with open(path, encoding="utf-8") as fh:
        comment = fh.readline().rstrip("\n")
        rows = list(csv.reader(fh))
    return comment, rows[0], rows[1:]


# ---------------------------------------------------------------------------
# shared loading helpers


def _dataset_dir(cfg: ExperimentConfig) -> Path:
    return cfg.out_dir / "dataset"


def _load_dataset(cfg: ExperimentConfig):
    manifest_path = _dataset_dir(cfg) / "manifest.txt"
    if not manifest_path.is_file():
        raise LayerlensError(
            f"dataset manifest not found at {manifest_path}; run 'generate' first")
    return dat.load_manifest(manifest_path)


def _build_spec(cfg: ExperimentConfig) -> net.NetworkSpec:
    d, m = cfg["dataset"], cfg["model"]
    return net.build_six_layer_net(
        (d["channels"], d["image_edge"], d["image_edge"]),
        d["class_count"], m["widths"], m["kernel"])


def _train_config(section: dict, seed: int) -> tr.TrainConfig:
    return tr.TrainConfig(
        epochs=section["epochs"], lr=section["lr"], momentum=section["momentum"],
        batch_size=section["batch_size"], seed=seed, patience=section["patience"],
        clip_norm=section["clip_norm"])


def _full_accuracy(spec, params, x, y, batch_size=256) -> float:
    hits = 0
    for s in range(0, len(x), batch_size):
        scores, _ = net.forward_with_taps(spec, params, x[s:s + batch_size])
        hits += int((scores.argmax(axis=1) == y[s:s + batch_size]).sum())
    return hits / len(x) if len(x) else 0.0


def _pool_map(fn, items, jobs: int):
    if jobs <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, items))


# ---------------------------------------------------------------------------
# commands


def cmd_generate(cfg: ExperimentConfig, args) -> int:
    d = cfg["dataset"]
    spec = dat.ShapeSpec(
        image_edge=d["image_edge"], size_range=tuple(d["size_range"]),
        intensity_range=tuple(d["intensity_range"]), noise=d["noise"],
        distractors=d["distractors"], channels=d["channels"])
    data_seed = derive_seed(cfg.seed, "data")
    manifest = dat.generate_shapes_dataset(
        spec, d["n_images"], d["class_count"], data_seed,
        _dataset_dir(cfg), tuple(d["split_fractions"]))
    counts = manifest.split_counts()
    print(f"generated {len(manifest.annotations)} images "
          f"({', '.join(f'{k}={v}' for k, v in counts.items())}) "
          f"classes={','.join(manifest.class_names)} -> {_dataset_dir(cfg)}")
    return 0


def _weights_name(scheme: str, k: int) -> str:
    return "weights_e2e.llw" if scheme == "e2e" else f"weights_cl_k{k}.llw"


def cmd_train(cfg: ExperimentConfig, args) -> int:
    manifest = _load_dataset(cfg)
    root = _dataset_dir(cfg)
    x_tr, y_tr, _ = dat.load_split_arrays(manifest, root, "train")
    x_va, y_va, _ = dat.load_split_arrays(manifest, root, "val")
    train = tr.LabelledSet(x_tr, y_tr)
    val = tr.LabelledSet(x_va, y_va) if len(x_va) else None
    spec = _build_spec(cfg)
    scheme = args.scheme
    k = args.k if args.k is not None else cfg["train"]["k"]

    if scheme == "e2e":
        tcfg = _train_config(cfg["train"]["e2e"], derive_seed(cfg.seed, "train:e2e"))
        params, report = tr.train_e2e(spec, train, tcfg, val)
    else:
        tcfg = _train_config(cfg["train"]["cascade"], derive_seed(cfg.seed, f"train:cl{k}"))
        plan = tr.make_split_plan(spec.tap_count, k)
        params, report = tr.train_cascade(spec, train, tcfg, plan, val)

    pcfg = _train_config(cfg["train"]["probe"], derive_seed(cfg.seed, f"probe:{scheme}"))
    _, probe_acc = tr.train_probes(spec, params, train, pcfg, val)
    train_acc = _full_accuracy(spec, params, x_tr, y_tr)
    val_acc = _full_accuracy(spec, params, x_va, y_va) if len(x_va) else None

    weights_path = cfg.out_dir / _weights_name(scheme, k)
    net.save_weights(spec, params, weights_path)

    rows = []
    for stage in report.stages:
        for epoch, loss in enumerate(stage.train_losses):
            v = stage.val_losses[epoch] if epoch < len(stage.val_losses) else None
            rows.append(("loss", stage.name, epoch, loss, v))
        rows.append(("stage_acc", stage.name, None, stage.train_acc, stage.val_acc))
    for tap in sorted(probe_acc):
        t_acc, v_acc = probe_acc[tap]
        rows.append(("probe", f"tap{tap}", None, t_acc, v_acc))
    rows.append(("final", "full_model", None, train_acc, val_acc))
    report_path = cfg.out_dir / f"train_report_{scheme if scheme == 'e2e' else f'cl_k{k}'}.csv"
    write_csv(report_path, "train", rows, cfg, {"train_seed": tcfg.seed, "probe_seed": pcfg.seed})
    print(f"trained {scheme} (k={k if scheme == 'cl' else '-'}) "
          f"train_acc={train_acc:.4f} val_acc={val_acc if val_acc is None else f'{val_acc:.4f}'} "
          f"-> {weights_path}")
    return 0


def _heatmap_path(out_root: Path, image_id: str, method: str, tap: int) -> Path:
    return out_root / f"{image_id}_{method}_tap{tap}.pgm"


def _save_heatmap(values: np.ndarray, path: Path) -> None:
    lo, hi = float(values.min()), float(values.max())
    scaled = (values - lo) / (hi - lo) if hi > lo else np.zeros_like(values)
    dat.write_image(scaled[None, :, :], path)
    with open(str(path) + ".meta", "w", encoding="utf-8") as fh:
        fh.write(f"min={_fmt(lo)} max={_fmt(hi)}\n")


def _explain_metrics(amap_values, box, edge, percentile, gran_max):
    mask = lm.binarize_percentile(amap_values, percentile)
    gt = lm.rasterize_box(box, (edge, edge))
    spectrum = lm.granulometry(mask, gran_max)
    return lm.iou(mask, gt), spectrum.mean_size


def _lime_for_image(spec, params, image, label, cfg, image_seed):
    lcfg = cfg["explain"]["lime"]
    edge = cfg["dataset"]["image_edge"]
    grid = ex.superpixel_grid((edge, edge), lcfg["patch_edge"])

    def black_box(img):
        scores, _ = net.forward_with_taps(spec, params, img[None])
        return float(nm.softmax(scores[0])[label])

    expl = ex.lime_explain(
        black_box, image, grid, lcfg["n_samples"], lcfg["ridge_lambda"],
        lcfg["keep_prob"], min(lcfg["top_k"], grid.patch_count), make_rng(image_seed))
    _, mask = ex.lime_mask(image, expl, grid)
    weight_map = expl.patch_weights[grid.labels]
    return mask, weight_map


def _explain_image(spec, params, ann, image, cfg, methods, taps, master_seed):
    """All (method, tap) results for one image; pure, thread-safe."""
    edge = cfg["dataset"]["image_edge"]
    percentile = cfg["explain"]["percentile"]
    sigma = cfg["explain"]["sigma"]
    gran_max = cfg["granulometry"]["max_size"]
    label = ann.label
    out = []  # (method, tap, heat values, row)
    cache = {}
    for method in methods:
        for tap in taps:
            if method == "grad_cam":
                amap = ex.grad_cam(spec, params, image, label, tap)
                smooth = ex.gaussian_smooth(amap, sigma)
                iou_v, gsum = _explain_metrics(smooth.values, ann.box, edge, percentile, gran_max)
                out.append((method, tap, smooth.values,
                            (ann.image_id, method, tap, iou_v, percentile, gsum, None, None)))
            elif method == "saliency":
                if "saliency" not in cache:
                    amap = ex.saliency(spec, params, image, label)
                    cache["saliency"] = ex.gaussian_smooth(amap, sigma)
                smooth = cache["saliency"]
                iou_v, gsum = _explain_metrics(smooth.values, ann.box, edge, percentile, gran_max)
                out.append((method, tap, smooth.values,
                            (ann.image_id, method, tap, iou_v, percentile, gsum, None, None)))
            else:  # lime
                if "lime" not in cache:
                    seed = derive_seed(master_seed, f"lime:{ann.image_id}")
                    cache["lime"] = _lime_for_image(spec, params, image, label, cfg, seed)
                mask, weight_map = cache["lime"]
                gt = lm.rasterize_box(ann.box, (edge, edge))
                ov = lm.lime_overlap(mask, ann.box)
                spectrum = lm.granulometry(mask, gran_max)
                out.append((method, tap, np.maximum(weight_map, 0.0),
                            (ann.image_id, method, tap, lm.iou(mask, gt), None,
                             spectrum.mean_size, ov.count, ov.fraction)))
    return out


def _load_weights_for(cfg, path):
    spec = _build_spec(cfg)
    params = net.load_weights(path, spec)
    return spec, params


def cmd_explain(cfg: ExperimentConfig, args) -> int:
    manifest = _load_dataset(cfg)
    root = _dataset_dir(cfg)
    spec, params = _load_weights_for(cfg, args.weights)
    methods = args.methods.split(",") if args.methods else cfg["explain"]["methods"]
    taps = [int(t) for t in args.taps.split(",")] if args.taps else cfg["explain"]["taps"]

    x, y, anns = dat.load_split_arrays(manifest, root, "test")
    stem = Path(args.weights).stem
    out_root = cfg.out_dir / f"explain_{stem}"
    heat_root = out_root / "heatmaps"
    heat_root.mkdir(parents=True, exist_ok=True)

    work = list(zip(anns, x))
    results = _pool_map(
        lambda item: _explain_image(spec, params, item[0], item[1], cfg,
                                    methods, taps, cfg.seed),
        work, cfg["jobs"])
    rows = []
    for per_image in results:
        for method, tap, heat, row in per_image:
            _save_heatmap(heat, _heatmap_path(heat_root, row[0], method, tap))
            rows.append(row)
    write_csv(out_root / "metrics.csv", "explain", rows, cfg,
              {"lime_seed_base": derive_seed(cfg.seed, "lime:000000")})
    print(f"explained {len(anns)} images x {len(taps)} taps x {len(methods)} methods "
          f"-> {out_root}")
    return 0


def cmd_compare(cfg: ExperimentConfig, args) -> int:
    manifest = _load_dataset(cfg)
    root = _dataset_dir(cfg)
    spec, params_cl = _load_weights_for(cfg, args.weights_cl)
    _, params_e2e = _load_weights_for(cfg, args.weights_e2e)
    methods = cfg["explain"]["methods"]
    taps = cfg["explain"]["taps"]
    x, y, anns = dat.load_split_arrays(manifest, root, "test")

    def one(item):
        ann, image = item
        res_cl = _explain_image(spec, params_cl, ann, image, cfg, methods, taps, cfg.seed)
        res_e2e = _explain_image(spec, params_e2e, ann, image, cfg, methods, taps, cfg.seed)
        rows = []
        for (m1, t1, _, row1), (m2, t2, _, row2) in zip(res_cl, res_e2e):
            rows.append((ann.image_id, m1, t1, row1[3], row2[3]))
        return rows

    results = _pool_map(one, list(zip(anns, x)), cfg["jobs"])
    pair_rows = [r for rows in results for r in rows]
    write_csv(cfg.out_dir / "compare_pairs.csv", "compare_pairs", pair_rows, cfg, {})

    summary_rows = []
    for method in methods:
        for tap in taps:
            sel = [r for r in pair_rows if r[1] == method and r[2] == tap]
            ious_cl = np.array([r[3] for r in sel])
            ious_e2e = np.array([r[4] for r in sel])
            summary_rows.append((
                method, tap, len(sel),
                float((ious_cl > ious_e2e).mean()) if len(sel) else 0.0,
                lm.localisation_accuracy(ious_cl) if len(sel) else 0.0,
                lm.localisation_accuracy(ious_e2e) if len(sel) else 0.0,
            ))
    write_csv(cfg.out_dir / "compare_summary.csv", "compare_summary", summary_rows, cfg, {})
    for method, tap, n, frac, lacc_cl, lacc_e2e in summary_rows:
        print(f"{method} tap{tap}: n={n} frac(CL>E2E)={frac:.3f} "
              f"L-ACC cl={lacc_cl:.3f} e2e={lacc_e2e:.3f}")
    return 0


def _annotations_by_image(anns):
    return [[(a.box, a.label)] for a in anns]


def cmd_detect(cfg: ExperimentConfig, args) -> int:
    manifest = _load_dataset(cfg)
    root = _dataset_dir(cfg)
    spec, params = _load_weights_for(cfg, args.weights)
    dcfg = cfg["detect"]
    tap = args.tap if args.tap is not None else dcfg["tap"]
    head_seeds = args.head_seeds if args.head_seeds is not None else dcfg["head_seeds"]
    S, B = dcfg["S"], dcfg["B"]
    edge = cfg["dataset"]["image_edge"]

    x_tr, _, anns_tr = dat.load_split_arrays(manifest, root, "train")
    x_va, _, anns_va = dat.load_split_arrays(manifest, root, "val")
    x_te, _, anns_te = dat.load_split_arrays(manifest, root, "test")

    stem = Path(args.weights).stem
    out_root = cfg.out_dir / f"detect_{stem}_tap{tap}"
    out_root.mkdir(parents=True, exist_ok=True)

    test_feats = tr.cache_frozen_features(spec, params, x_te, tap)
    reports, first_detections = [], None
    for i in range(head_seeds):
        tcfg = _train_config(dcfg["train"], derive_seed(cfg.seed, f"detect:{tap}:{i}"))
        head, _rep = dt.train_detection_head(
            spec, params, tap, x_tr, _annotations_by_image(anns_tr), S, B, tcfg,
            val_images=x_va if len(x_va) else None,
            val_annotations=_annotations_by_image(anns_va) if len(x_va) else None,
            lambda_coord=dcfg["lambda_coord"], lambda_noobj=dcfg["lambda_noobj"])
        dt.save_head(head, out_root / f"head_seed{i}.llh")

        raw = dt.head_raw_grids(head, test_feats)
        det_set = dt.DetectionSet()
        for j, ann in enumerate(anns_te):
            dets = dt.decode_predictions(raw[j], B, dcfg["conf_threshold"], (edge, edge))
            dets = dt.nms(dets, dcfg["nms_iou"])
            det_set.add_image(
                ann.image_id, dets,
                [(ann.label, (ann.box.x, ann.box.y, ann.box.w, ann.box.h))])
        reports.append(dt.map_evaluate(det_set))
        if first_detections is None:
            first_detections = det_set

    det_rows = []
    for image_id in sorted(first_detections.detections):
        for d in first_detections.detections[image_id]:
            det_rows.append((image_id, d.class_id, d.score) + tuple(d.box))
    write_csv(out_root / "detections.csv", "detections", det_rows, cfg,
              {"head_seed0": derive_seed(cfg.seed, f"detect:{tap}:0")})

    metric_rows = []
    for key in ("mAP.5", "mAP.75", "mAP.5:.95:.05", "mIOU"):
        vals = np.array([r[key] for r in reports])
        mean, std = float(vals.mean()), float(vals.std(ddof=0))
        pretty = f"{100 * mean:.2f}±{100 * std:.2f}"
        metric_rows.append((key, mean, std, pretty))
    write_csv(out_root / "report.csv", "detect_report", metric_rows, cfg,
              {"seeds": head_seeds, "tap": tap})
    for key, mean, std, pretty in metric_rows:
        print(f"{key}: {pretty} (tap {tap}, {head_seeds} seed(s))")
    return 0


def cmd_granulometry(cfg: ExperimentConfig, args) -> int:
    manifest = _load_dataset(cfg)
    root = _dataset_dir(cfg)
    spec, params = _load_weights_for(cfg, args.weights)
    taps = [int(t) for t in args.taps.split(",")] if args.taps else cfg["explain"]["taps"]
    percentile = cfg["granulometry"]["percentile"]
    max_size = cfg["granulometry"]["max_size"]
    sigma = cfg["explain"]["sigma"]
    edge = cfg["dataset"]["image_edge"]
    scheme = params.provenance.scheme

    x, _, anns = dat.load_split_arrays(manifest, root, "test")

    def one(item):
        ann, image = item
        rows, summaries = [], []
        for tap in taps:
            amap = ex.grad_cam(spec, params, image, ann.label, tap)
            smooth = ex.gaussian_smooth(amap, sigma)
            mask = lm.binarize_percentile(smooth.values, percentile)
            spectrum = lm.granulometry(mask, max_size)
            for size, removed in zip(spectrum.sizes, spectrum.removed):
                rows.append((ann.image_id, scheme, tap, size, removed))
            summaries.append((tap, spectrum.mean_size))
        return rows, summaries

    results = _pool_map(one, list(zip(anns, x)), cfg["jobs"])
    all_rows = [r for rows, _ in results for r in rows]
    stem = Path(args.weights).stem
    write_csv(cfg.out_dir / f"granulometry_{stem}.csv", "granulometry", all_rows, cfg, {})

    summary_rows = []
    for tap in taps:
        vals = [s for _, summaries in results for t, s in summaries if t == tap]
        summary_rows.append((scheme, tap, float(np.mean(vals)) if vals else 0.0, len(vals)))
    write_csv(cfg.out_dir / f"granulometry_{stem}_summary.csv",
              "granulometry_summary", summary_rows, cfg, {})
    for scheme_name, tap, mean_size, n in summary_rows:
        print(f"{scheme_name} tap{tap}: mean granulometry {mean_size:.3f} over {n} images")
    return 0


# ---------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="layerlens",
        description="Train small conv nets two ways, explain every layer, "
                    "and score localisation against ground-truth boxes.")
    parser.add_argument("--config", required=True,
                        help="config file path, or a preset name "
                             "(preset-localise, preset-detect)")
    parser.add_argument("--seed", type=int, default=None, help="override config seed")
    parser.add_argument("--out", default=None, help="override output directory")
    parser.add_argument("--jobs", type=int, default=None,
                        help="worker threads for per-image work")
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("generate", help="write the synthetic dataset")

    p_train = sub.add_parser("train", help="train one scheme")
    p_train.add_argument("--scheme", choices=["e2e", "cl"], required=True)
    p_train.add_argument("--k", type=int, default=None,
                         help="cascade sub-module count (cl only)")

    p_explain = sub.add_parser("explain", help="heatmaps + localisation metrics")
    p_explain.add_argument("--weights", required=True)
    p_explain.add_argument("--methods", default=None, help="comma-separated")
    p_explain.add_argument("--taps", default=None, help="comma-separated tap indices")

    p_cmp = sub.add_parser("compare", help="paired per-image IOU, CL vs E2E")
    p_cmp.add_argument("--weights-cl", required=True)
    p_cmp.add_argument("--weights-e2e", required=True)

    p_det = sub.add_parser("detect", help="train + evaluate a frozen-backbone head")
    p_det.add_argument("--weights", required=True)
    p_det.add_argument("--tap", type=int, default=None)
    p_det.add_argument("--head-seeds", type=int, default=None)

    p_gran = sub.add_parser("granulometry", help="pattern spectra of binarized maps")
    p_gran.add_argument("--weights", required=True)
    p_gran.add_argument("--taps", default=None)
    return parser


COMMANDS = {
    "generate": cmd_generate,
    "train": cmd_train,
    "explain": cmd_explain,
    "compare": cmd_compare,
    "detect": cmd_detect,
    "granulometry": cmd_granulometry,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        overrides = {"seed": args.seed, "out_dir": args.out, "jobs": args.jobs}
        cfg = load_config(args.config, overrides)
        cfg.out_dir.mkdir(parents=True, exist_ok=True)
        return COMMANDS[args.command](cfg, args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except LayerlensError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except OSError as e:
        print(f"io error: {e}", file=sys.stderr)
        return 1


def console_main() -> None:
    sys.exit(main())
