"""Subcommand implementations and the chained ``run`` pipeline.

Each ``cmd_*`` function takes a fully resolved parameter dict (see
:mod:`cersdx.config`) and writes its artifacts; the CLI is a thin layer over
these.
"""

from __future__ import annotations

import csv
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import adapters, bags, metrics, mil, openset, tiling, zeroshot
from .config import PIPELINE_KEYS, PIPELINE_STEPS, SCHEMAS, check_keys, env_threads, resolve
from .errors import ConfigError, DataError
from .report import EvalReport, config_hash, emit_report, load_report

log = logging.getLogger(__name__)


def _write_csv(path, header, rows) -> None:
    if path is None:
        return
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _read_csv(path) -> list[dict]:
    try:
        with Path(path).open(newline="") as fh:
            return list(csv.DictReader(fh))
    except FileNotFoundError as exc:
        raise DataError(f"file not found: {path}") from exc


def _fmt(x: float) -> str:
    return repr(float(x))


# --------------------------------------------------------------------------
# tile / synth
# --------------------------------------------------------------------------

def cmd_tile(p: dict) -> dict:
    params = tiling.SegmentationParams(
        p["median_window"], p["closing_radius"], p["min_area"], p["min_hole_area"], p["on_uniform"]
    )
    thumb = tiling.load_thumbnail(p["thumb"], scale=float(p["thumb_mag"]))
    raw = tiling.segment_tissue(thumb, params)
    mask = tiling.refine_mask(raw, params)
    grid = tiling.extract_patch_grid(mask, thumb.scale, float(p["target_mag"]), int(p["patch"]), float(p["min_frac"]))
    if p["sample_fraction"] is not None or p["sample_count"] is not None:
        grid = tiling.sample_patch_subset(
            grid,
            fraction=None if p["sample_fraction"] is None else float(p["sample_fraction"]),
            count=None if p["sample_count"] is None else int(p["sample_count"]),
            seed=int(p["seed"]),
        )
    tiling.write_grid_csv(grid, p["out"])
    return {"patches": len(grid), "degenerate": raw.degenerate, "tissue_px": mask.area}


def synth_spec(p: dict) -> bags.SyntheticSpec:
    return bags.SyntheticSpec(
        int(p["n_bags"]), int(p["instances"]), int(p["dim"]), int(p["k_signal"]),
        float(p["mu"]), float(p["nu"]), int(p["n_ood"]), int(p["seed"]),
    )


def cmd_synth(p: dict) -> dict:
    cohort = bags.generate_synthetic_bags(synth_spec(p))
    manifest, ood = bags.write_cohort(cohort, p["out"])
    return {"manifest": str(manifest), "ood_manifest": None if ood is None else str(ood), "bags": len(cohort.bags)}


# --------------------------------------------------------------------------
# MIL
# --------------------------------------------------------------------------

def mil_config(p: dict) -> mil.MilConfig:
    return mil.MilConfig(
        lr=float(p["lr"]), max_epochs=int(p["epochs"]), patience=int(p["patience"]),
        weight_decay=float(p["weight_decay"]), latent=int(p["latent"]), hidden=int(p["hidden"]),
        dropout=float(p["dropout"]), multi_branch=bool(p["multi_branch"]), seed=int(p["seed"]),
    )


def cross_validate_mil(bag_list, labels, folds: int, config: mil.MilConfig, threads: int = 1):
    """Out-of-fold class probabilities from ``folds``-fold stratified CV.

    Fold ``f`` is tested, fold ``f+1`` drives early stopping, the rest
    train.  Fold runs are independent and may run on ``threads`` workers.
    """
    labels = np.asarray(labels, dtype=np.int64)
    if folds < 3:
        raise ConfigError("folds must be at least 3 (separate train, validation and test folds)")
    split = bags.stratified_kfold(labels, folds, config.seed)
    n_classes = int(labels.max()) + 1

    def run(f):
        tr, va, te = split.train_val_test(f)
        cfg = mil.MilConfig(**{**config.__dict__, "seed": config.seed + f})
        model, hist = mil.train_mil(bag_list, labels, tr, va, cfg)
        return f, model, hist, te, mil.predict_proba([bag_list[i] for i in te], model)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            results = list(ex.map(run, range(folds)))
    else:
        results = [run(f) for f in range(folds)]
    probs = np.zeros((len(labels), n_classes))
    models, histories = [], []
    for f, model, hist, te, pr in sorted(results, key=lambda r: r[0]):
        probs[te] = pr
        models.append(model)
        histories.append(hist)
    return probs, models, histories, split


def write_preds(path, slide_ids, probs) -> None:
    C = probs.shape[1]
    header = ["slide_id", "pred", "score"] + [f"prob_{c}" for c in range(C)]
    rows = []
    for sid, pr in zip(slide_ids, probs):
        score = pr[1] if C == 2 else pr.max()
        rows.append([sid, int(np.argmax(pr)), _fmt(score)] + [_fmt(v) for v in pr])
    _write_csv(path, header, rows)


def write_labels(path, slide_ids, labels) -> None:
    _write_csv(path, ["slide_id", "label"], [[s, int(y)] for s, y in zip(slide_ids, labels)])


def cmd_train_mil(p: dict) -> dict:
    bag_list, labels = bags.load_manifest_bags(p["manifest"])
    config = mil_config(p)
    probs, models, histories, _ = cross_validate_mil(bag_list, labels, int(p["folds"]), config, env_threads())
    models[0].save(p["out"])
    ids = [b.slide_id for b in bag_list]
    write_preds(p["preds"], ids, probs)
    write_labels(p["labels_out"], ids, labels)
    bacc = metrics.balanced_accuracy(labels, probs.argmax(axis=1))
    return {"oof_bacc": bacc, "best_epochs": [h.best_epoch for h in histories]}


def cmd_topk(p: dict) -> dict:
    bag = bags.read_bag(p["bag"])
    model = mil.GatedMilModel.load(p["model"])
    coords, att, _ = mil.top_k_patches(bag, model, int(p["k"]))
    rows = [[r + 1, int(x), int(y), _fmt(a)] for r, ((x, y), a) in enumerate(zip(coords, att))]
    header = ["rank", "x", "y", "attention"]
    if p["out"] is None:
        print(",".join(header))
        for row in rows:
            print(",".join(map(str, row)))
    else:
        _write_csv(p["out"], header, rows)
    return {"k": len(rows)}


# --------------------------------------------------------------------------
# open set
# --------------------------------------------------------------------------

def cmd_train_arpl(p: dict) -> dict:
    bag_list, labels = bags.load_manifest_bags(p["manifest"])
    seed = int(p["seed"])
    if p["body"]:
        body = mil.GatedMilModel.load(p["body"])
    else:
        split = bags.stratified_kfold(labels, 5, seed)
        tr, va, _ = split.train_val_test(0)
        tr = np.setdiff1d(np.arange(len(labels)), va)
        cfg = mil.MilConfig(lr=float(p["mil_lr"]), max_epochs=int(p["mil_epochs"]), patience=int(p["mil_patience"]),
                            latent=int(p["latent"]), hidden=int(p["hidden"]), seed=seed)
        body, _ = mil.train_mil(bag_list, labels, tr, va, cfg)
    feats = openset.pooled_features(bag_list, body)
    cfg = openset.ArplConfig(
        gamma=float(p["gamma"]), lambda_o=float(p["lambda_o"]), lr=float(p["lr"]),
        max_epochs=int(p["epochs"]), patience=int(p["patience"]), joint=bool(p["joint"]), seed=seed,
    )
    res = openset.train_arpl(feats, labels, cfg, bags=bag_list, body=body)
    openset.save_head(res.head, p["out"], res.body)
    if p["scores_out"]:
        rows = _score_rows(res.head, res.body, bag_list, False)
        if p["ood_manifest"]:
            ood_bags, _ = bags.load_manifest_bags(p["ood_manifest"])
            rows += _score_rows(res.head, res.body, ood_bags, True)
        _write_csv(p["scores_out"], ["slide_id", "confidence", "is_ood"], rows)
    return {"closed_set_bacc": res.closed_set_bacc, "radius": res.head.radius}


def _score_rows(head, body, bag_list, is_ood):
    feats = openset.pooled_features(bag_list, body)
    _, _, conf = openset.arpl_score(feats, head)
    return [[b.slide_id, _fmt(c), int(is_ood)] for b, c in zip(bag_list, conf)]


def cmd_detect(p: dict) -> dict:
    if p["scores"]:
        rows = _read_csv(p["scores"])
        ids = [r["slide_id"] for r in rows]
        conf = np.array([float(r["confidence"]) for r in rows])
        is_ood = np.array([int(r.get("is_ood") or 0) for r in rows], dtype=bool)
    elif p["head"] and p["manifest"]:
        head, body = openset.load_head(p["head"])
        if body is None:
            raise ConfigError("head file carries no MIL body; pass --scores instead")
        rows = _score_rows(head, body, bags.load_manifest_bags(p["manifest"])[0], False)
        if p["ood_manifest"]:
            rows += _score_rows(head, body, bags.load_manifest_bags(p["ood_manifest"])[0], True)
        ids = [r[0] for r in rows]
        conf = np.array([float(r[1]) for r in rows])
        is_ood = np.array([r[2] for r in rows], dtype=bool)
    else:
        raise ConfigError("detect needs --scores, or --head with --manifest")

    t = float(p["threshold"]) if p["threshold"] is not None else openset.bimodal_threshold(conf)
    res = openset.detect_ood(conf, is_ood, t)
    summary = {"threshold": t, "detection_rate": res.detection_rate, "n": int(len(conf)), "n_ood": int(is_ood.sum())}
    if is_ood.any() and (~is_ood).any():
        summary["gap"] = float(conf[~is_ood].mean() - conf[is_ood].mean())
        summary["gap_ci"] = list(
            metrics.bootstrap_ci(
                _gap_metric, conf, is_ood, n_boot=int(p["bootstrap"]), seed=int(p["seed"])
            )
        )
    else:
        summary["gap"] = None
        summary["note"] = "no OOD samples" if not is_ood.any() else "no in-domain samples"
    table = [[i, _fmt(c), int(f)] for i, c, f in zip(ids, conf, res.flags)]
    if p["out"]:
        _write_csv(p["out"], ["slide_id", "confidence", "flag"], table)
    else:
        print("slide_id,confidence,flag")
        for row in table:
            print(",".join(map(str, row)))
    if p["summary"]:
        Path(p["summary"]).write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return summary


def _gap_metric(conf, is_ood):
    if not is_ood.any() or is_ood.all():
        raise DataError("resample lacks one group")
    return float(conf[~is_ood].mean() - conf[is_ood].mean())


# --------------------------------------------------------------------------
# probe / zero-shot / text metrics
# --------------------------------------------------------------------------

def _load_features(path) -> np.ndarray:
    path = Path(path)
    if path.suffix == ".ceb":
        return bags.read_bag(path).instances.astype(np.float64)
    rows = _read_csv(path)
    if not rows:
        raise DataError(f"{path} holds no rows")
    cols = [c for c in rows[0] if c not in ("slide_id", "id", "label")]
    return np.array([[float(r[c]) for c in cols] for r in rows])


def cmd_probe(p: dict) -> dict:
    x = _load_features(p["features"])
    label_rows = _read_csv(p["labels"])
    if label_rows and "label" not in label_rows[0]:
        raise DataError(f"{p['labels']} has no 'label' column")
    y = np.array([int(r["label"]) for r in label_rows], dtype=np.int64)
    if len(y) != len(x):
        raise DataError(f"{len(x)} feature rows but {len(y)} labels")
    cfg = adapters.ProbeConfig(
        dim=x.shape[1], n_classes=int(p["classes"]), lr=float(p["lr"]), max_epochs=int(p["epochs"]),
        batch_size=int(p["batch_size"]), seed=int(p["seed"]),
    )
    probe, hist = adapters.train_linear_probe(x, y, cfg)
    d = probe.to_dict()
    d["l2"] = cfg.l2
    d["epochs"] = hist.epochs
    Path(p["out"]).write_text(json.dumps(d))
    return {"train_accuracy": float((probe.predict(x) == y).mean()), "l2": cfg.l2, "epochs": hist.epochs}


def cmd_zeroshot(p: dict) -> dict:
    bag = bags.read_bag(p["embeddings"])
    spec = json.loads(Path(p["prompts"]).read_text())
    if p["temperature"] is not None:
        spec["temperature"] = float(p["temperature"])
    prompts = zeroshot.PromptSet.from_dict(spec)
    rows = []
    for i, (emb, (x, y)) in enumerate(zip(bag.instances, bag.coords)):
        label, probs = zeroshot.zero_shot_classify(emb, prompts)
        rows.append([i, int(x), int(y), label, prompts.class_names[label]] + [_fmt(v) for v in probs])
    header = ["index", "x", "y", "label", "class_name"] + [f"prob_{c}" for c in range(len(prompts.class_names))]
    _write_csv(p["out"], header, rows)
    return {"n": len(rows)}


def cmd_textmetrics(p: dict) -> dict:
    cand = Path(p["cand"]).read_text().splitlines()
    ref = Path(p["ref"]).read_text().splitlines()
    if len(cand) != len(ref):
        raise DataError(f"{len(cand)} candidate lines vs {len(ref)} reference lines")
    names = [m.strip() for m in p["metrics"].split(",") if m.strip()]
    out = zeroshot.text_metrics(cand, ref, names)
    text = json.dumps(out, indent=2, sort_keys=True)
    if p["out"]:
        Path(p["out"]).write_text(text + "\n")
    else:
        print(text)
    return out


# --------------------------------------------------------------------------
# eval / calibrate / report
# --------------------------------------------------------------------------

def _joined(preds_path, labels_path):
    preds = {r["slide_id"]: r for r in _read_csv(preds_path)}
    labels = _read_csv(labels_path)
    ids, y, rows = [], [], []
    for r in labels:
        sid = r["slide_id"]
        if sid not in preds:
            raise DataError(f"no prediction for slide {sid!r}")
        ids.append(sid)
        y.append(int(r["label"]))
        rows.append(preds[sid])
    return ids, np.array(y, dtype=np.int64), rows


def _metric_fn(name: str):
    if name == "bacc":
        return lambda y, pred, score: metrics.balanced_accuracy(y, pred)
    if name == "accuracy":
        return lambda y, pred, score: float(np.mean(y == pred))
    if name == "auc":
        return lambda y, pred, score: metrics.roc_auc(score, y == 1)
    if name in ("f1", "precision", "sensitivity", "specificity"):
        return lambda y, pred, score: metrics.classification_metrics(y, pred, max(2, int(max(y.max(), pred.max())) + 1))[name]
    raise ConfigError(f"unknown metric {name!r}")


def evaluate(y, pred, score, names, n_boot: int, seed: int, chash: str) -> EvalReport:
    report = EvalReport(seed=seed, n_bootstrap=n_boot, config_hash=chash)
    for name in names:
        fn = _metric_fn(name)
        value = fn(y, pred, score)
        ci = metrics.bootstrap_ci(fn, y, pred, score, n_boot=n_boot, seed=seed) if n_boot > 0 else None
        report.add(name, float(value), ci)
    return report


def cmd_eval(p: dict) -> dict:
    _, y, rows = _joined(p["preds"], p["labels"])
    score = np.array([float(r["score"]) for r in rows])
    if p["threshold"] is not None:
        pred = (score >= float(p["threshold"])).astype(np.int64)
    else:
        pred = np.array([int(r["pred"]) for r in rows], dtype=np.int64)
    names = [m.strip() for m in str(p["metrics"]).split(",") if m.strip()]
    report = evaluate(y, pred, score, names, int(p["bootstrap"]), int(p["seed"]), config_hash(_hashable(p)))
    emit_report(report, p["out"], p["format"])
    return report.to_dict()


def cmd_calibrate(p: dict) -> dict:
    _, y, rows = _joined(p["preds"], p["labels"])
    score = np.array([float(r["score"]) for r in rows])
    t = metrics.calibrate_threshold(score, y == 1, float(p["target"]))
    rep = metrics.binary_report(score, y, t)
    out = {"threshold": t, "target_sensitivity": float(p["target"]), "sensitivity": rep["sensitivity"],
           "specificity": rep["specificity"], "bacc": rep["bacc"], "f1": rep["f1"]}
    if p["out"]:
        Path(p["out"]).write_text(json.dumps(out, indent=2, sort_keys=True) + "\n")
    else:
        print(json.dumps(out, indent=2, sort_keys=True))
    return out


def cmd_report(p: dict) -> dict:
    report = load_report(p["input"])
    emit_report(report, p["out"], p["format"])
    return {"metrics": len(report.metrics)}


def _hashable(p: dict, root: Path | None = None) -> dict:
    """Paths become strings; those under ``root`` are made relative so the
    digest does not depend on where a run is written."""
    out = {}
    for k, v in p.items():
        if isinstance(v, Path):
            v = v.relative_to(root).as_posix() if root is not None and v.is_relative_to(root) else str(v)
        out[k] = v
    return out


COMMANDS = {
    "tile": cmd_tile,
    "synth": cmd_synth,
    "train-mil": cmd_train_mil,
    "topk": cmd_topk,
    "train-arpl": cmd_train_arpl,
    "detect": cmd_detect,
    "probe": cmd_probe,
    "zeroshot": cmd_zeroshot,
    "textmetrics": cmd_textmetrics,
    "calibrate": cmd_calibrate,
    "eval": cmd_eval,
    "report": cmd_report,
}


# --------------------------------------------------------------------------
# chained pipeline
# --------------------------------------------------------------------------

def run_pipeline(cfg: dict, out_dir=None) -> EvalReport:
    """Run ``synth -> train-mil -> eval -> calibrate`` (or the listed subset)
    from one config; writes everything under ``out_dir`` and returns the
    evaluation report (also saved as ``report.json``)."""
    check_keys(cfg, PIPELINE_KEYS, "pipeline config")
    steps = cfg.get("steps", list(PIPELINE_STEPS))
    for s in steps:
        if s not in PIPELINE_STEPS:
            raise ConfigError(f"unknown pipeline step {s!r}")
    out = Path(out_dir or cfg.get("out_dir") or ".")
    out.mkdir(parents=True, exist_ok=True)
    seed = int(cfg.get("seed", 0))
    sections = {s: dict(cfg.get(s.replace("-", "_"), {})) for s in PIPELINE_STEPS}
    for s, sec in sections.items():
        check_keys(sec, SCHEMAS[s], f"pipeline section {s.replace('-', '_')!r}")

    data = out / "data"
    paths = {
        "synth": {"out": data, "seed": seed},
        "train-mil": {"manifest": data / "manifest.csv", "out": out / "model.json", "seed": seed,
                      "preds": out / "preds.csv", "labels_out": out / "labels.csv"},
        "eval": {"preds": out / "preds.csv", "labels": out / "labels.csv", "out": out / "report.json", "seed": seed},
        "calibrate": {"preds": out / "preds.csv", "labels": out / "labels.csv", "out": out / "calibration.json"},
    }
    resolved = {s: resolve(s, {**paths[s], **{k: v for k, v in sections[s].items() if k not in paths[s]}}) for s in steps}
    chash = config_hash({"seed": seed, "steps": steps, **{s: _hashable(v, out) for s, v in resolved.items()}})

    results = {}
    for s in steps:
        log.info("pipeline step %s", s)
        if s == "eval":
            continue
        results[s] = COMMANDS[s](resolved[s])

    report = EvalReport(seed=seed, config_hash=chash)
    if "eval" in steps:
        p = resolved["eval"]
        _, y, rows = _joined(p["preds"], p["labels"])
        score = np.array([float(r["score"]) for r in rows])
        pred = np.array([int(r["pred"]) for r in rows], dtype=np.int64)
        names = [m.strip() for m in str(p["metrics"]).split(",") if m.strip()]
        report = evaluate(y, pred, score, names, int(p["bootstrap"]), int(p["seed"]), chash)
    if "calibrate" in results:
        report.add("threshold_at_target_sensitivity", results["calibrate"]["threshold"])
        report.add("sensitivity_at_threshold", results["calibrate"]["sensitivity"])
        report.add("specificity_at_threshold", results["calibrate"]["specificity"])
    if "train-mil" in results:
        report.extra["best_epochs"] = results["train-mil"]["best_epochs"]
    emit_report(report, out / "report.json")
    return report
