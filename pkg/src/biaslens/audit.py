"""Audit pipeline: dataset analysis -> baseline training -> bias impact
assessment -> mitigation -> reassessment, emitting a reproducible
BiasReport (canonical JSON + text summary) and run-directory artifacts."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
from scipy.stats import spearmanr

from .augment import (
    DEFAULT_KAPPA,
    DEFAULT_TAU_ATT,
    DEFAULT_TAU_REL,
    AugmentRequest,
    SampleRelevanceStat,
    apply_augment,
    attention_guided_augment_plan,
    lrp_informed_sample_plan,
)
from .behavior import (
    BehaviorTracker,
    balanced_probe,
    extract_attention,
    lrp_propagate,
    mass_by_cell,
    relevance_mass_in_box,
    sensitivity_score,
    unit_class_activations,
    selectivity_score,
)
from .detmetrics import (
    Detection,
    iou,
    match_detections,
    mean_ap,
    nds,
    per_class_ap,
    per_class_errors,
    tp_errors_from_matches,
    write_metrics_csv,
)
from .losses import ClassWeights, compute_class_weights, dynamic_weight_adjust, weighted_ce_from_logits
from .manifest import AnnotationRecord, ClassDistribution, DatasetManifest, compute_distribution
from .nn.models import build_model
from .nn.snapshot import ModelSnapshot
from .nn.train import ArrayDataset, TrainConfig, evaluate, stratified_split, train
from .sampling import ResamplePlan, combined_resample
from .synthetic import SyntheticData

MIN_BOX_EXTENT = 1e-3  # fraction of the frame; keeps decoded boxes non-degenerate


class AuditError(ValueError):
    pass


class Strategy(Enum):
    COST_SENSITIVE = "CostSensitive"
    RESAMPLE = "Resample"
    AUGMENT = "Augment"
    COMBINED = "Combined"


@dataclass(frozen=True)
class AuditOptions:
    """Fully-resolved knobs for one audit run. ``seed`` drives the split,
    model initialization, batching and probe selection."""

    model_kind: str = "tiny_cnn"
    train: TrainConfig = TrainConfig()
    seed: int = 0
    split: tuple[float, float, float] = (0.7, 0.15, 0.15)
    iou_threshold: float = 0.5
    probe_per_class: int = 32
    sensitivity_samples: int = 16
    tau_att: float = DEFAULT_TAU_ATT
    kappa: float = DEFAULT_KAPPA
    tau_rel: float = DEFAULT_TAU_REL
    eta: float = 0.5
    target_recall: float | None = None
    max_recal_iterations: int = 10
    epsilon_gap: float = 0.05
    fn_delta_threshold: float = -0.02
    ap_delta_threshold: float = 0.01
    arch: dict = field(default_factory=dict)
    track_sensitivity: bool = False

    def to_json_dict(self) -> dict:
        return {
            "model_kind": self.model_kind,
            "train": self.train.to_json_dict(),
            "seed": self.seed,
            "split": list(self.split),
            "iou_threshold": self.iou_threshold,
            "probe_per_class": self.probe_per_class,
            "sensitivity_samples": self.sensitivity_samples,
            "tau_att": self.tau_att,
            "kappa": self.kappa,
            "tau_rel": self.tau_rel,
            "eta": self.eta,
            "target_recall": self.target_recall,
            "max_recal_iterations": self.max_recal_iterations,
            "epsilon_gap": self.epsilon_gap,
            "fn_delta_threshold": self.fn_delta_threshold,
            "ap_delta_threshold": self.ap_delta_threshold,
            "arch": dict(sorted(self.arch.items())),
            "track_sensitivity": self.track_sensitivity,
        }

    def config_hash(self) -> str:
        blob = canonical_json(self.to_json_dict()).encode("utf-8")
        return hashlib.sha256(blob).hexdigest()[:12]


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False)


@dataclass
class BiasReport:
    """Pre (and optionally post) bias metrics plus the mitigation record."""

    dataset: dict
    options: dict
    seed: int
    config_hash: str
    pre: dict
    correlation: dict
    post: dict | None = None
    mitigation: dict | None = None
    deltas: dict | None = None
    verdicts: dict | None = None

    def to_json_dict(self) -> dict:
        out = {
            "dataset": self.dataset,
            "options": self.options,
            "seed": self.seed,
            "config_hash": self.config_hash,
            "pre": self.pre,
            "correlation": self.correlation,
        }
        if self.post is not None:
            out["post"] = self.post
            out["mitigation"] = self.mitigation
            out["deltas"] = self.deltas
            out["verdicts"] = self.verdicts
        return out

    def to_json(self) -> str:
        return canonical_json(self.to_json_dict()) + "\n"

    def text_summary(self) -> str:
        lines = [
            "bias audit report",
            f"  seed {self.seed}  config {self.config_hash}",
            f"  samples {self.dataset['total']}",
        ]
        for c in sorted(self.dataset["counts"]):
            lines.append(
                f"  {c}: {self.dataset['counts'][c]} ({self.dataset['percentages'][c]:.2f}%)"
            )
        for name, side in (("pre", self.pre), ("post", self.post)):
            if side is None:
                continue
            lines.append(
                f"{name}-mitigation: accuracy {side['accuracy']:.4f}  mAP {side['map']:.4f}"
                f"  NDS {side['nds']:.4f}  macro-IoU {side['macro_iou']:.4f}"
            )
            for c in sorted(side["per_class"]):
                m = side["per_class"][c]
                lines.append(
                    f"  {c}: AP {m['ap']:.4f} recall {m['recall']:.4f} IoU {m['mean_iou']:.4f}"
                    f" FN-rate {m['fn_rate']:.4f} selectivity {m['selectivity']:.4f}"
                )
        if self.correlation.get("undefined"):
            lines.append("correlation (FN rate vs selectivity): undefined (constant series)")
        else:
            lines.append(
                f"correlation (FN rate vs selectivity): {self.correlation['coefficient']:.4f}"
            )
        if self.verdicts is not None:
            lines.append("verdicts: " + ", ".join(f"{c}={v}" for c, v in sorted(self.verdicts.items())))
        if self.mitigation is not None:
            lines.append(f"mitigation: {self.mitigation['strategy']}")
        return "\n".join(lines) + "\n"


@dataclass
class AuditRun:
    """A report plus everything needed to extend or reproduce it."""

    data: SyntheticData
    options: AuditOptions
    report: BiasReport
    model: object
    snapshot: ModelSnapshot
    trace: object
    behavior: object
    splits: tuple[np.ndarray, np.ndarray, np.ndarray]
    run_dir: Path | None = None


# ---------------------------------------------------------------------------
# detection decoding and evaluation of one model


def decode_center_box(
    box: Sequence[float], image_size: tuple[int, int]
) -> tuple[float, float, float, float]:
    """Normalized (cx, cy, w, h) -> clipped pixel corners, never degenerate."""
    w, h = image_size
    cx, cy, bw, bh = box
    eps_x, eps_y = MIN_BOX_EXTENT * w, MIN_BOX_EXTENT * h
    x1 = max(0.0, cx * w - bw * w / 2)
    x2 = min(float(w), cx * w + bw * w / 2)
    y1 = max(0.0, cy * h - bh * h / 2)
    y2 = min(float(h), cy * h + bh * h / 2)
    if x2 - x1 < eps_x:
        mid = min(max(cx * w, eps_x / 2), w - eps_x / 2)
        x1, x2 = mid - eps_x / 2, mid + eps_x / 2
    if y2 - y1 < eps_y:
        mid = min(max(cy * h, eps_y / 2), h - eps_y / 2)
        y1, y2 = mid - eps_y / 2, mid + eps_y / 2
    return (x1, y1, x2, y2)


def model_detections(model, data: SyntheticData) -> list[Detection]:
    """One detection per sample: argmax class, decoded box, max-prob score."""
    stats = evaluate(model, data.dataset)
    if stats["boxes"] is None:
        raise AuditError("model has no box head; detection metrics unavailable")
    dets = []
    for i, record in enumerate(data.manifest.records):
        k = int(stats["preds"][i])
        dets.append(
            Detection(
                sample_id=record.sample_id,
                class_label=data.dataset.class_order[k],
                bbox=decode_center_box(stats["boxes"][i], record.image_size),
                score=float(stats["probs"][i, k]),
            )
        )
    return dets


def _per_class_mean_iou(match) -> dict[str, float]:
    """Matched-detection IoU averaged over ground truths: each missed
    ground truth contributes zero, so the score reflects localization
    quality and coverage together."""
    out: dict[str, float] = {}
    for c, total in sorted(match.n_gt.items()):
        if total == 0:
            continue
        pairs = match.matched_pairs.get(c, ())
        out[c] = float(sum(iou(d.bbox, g.bbox) for d, g in pairs) / total)
    return out


def evaluate_side(model, test: SyntheticData, options: AuditOptions) -> dict:
    """All report metrics for one trained model on the held-out split."""
    class_order = test.dataset.class_order
    stats = evaluate(model, test.dataset)
    detections = model_detections(model, test)
    match = match_detections(detections, test.manifest.records, options.iou_threshold)
    ap = per_class_ap(match)
    errors = per_class_errors(match)
    mean_iou = _per_class_mean_iou(match)
    skipped = sorted(set(match.n_gt) - set(ap))

    all_pairs = [p for pairs in match.matched_pairs.values() for p in pairs]
    overall_nds = nds(mean_ap(ap), tp_errors_from_matches(all_pairs))

    probe = balanced_probe(test.dataset, options.probe_per_class, seed=options.seed)
    sel_sums: dict[str, list[float]] = {c: [] for c in class_order}
    for tap in model.trunk_taps:
        for _unit, acts in unit_class_activations(model, probe, tap).items():
            for c, s in selectivity_score(acts).items():
                sel_sums[c].append(s)
    selectivity = {c: float(np.mean(v)) for c, v in sel_sums.items()}

    last_tap = model.trunk_taps[-1]
    sensitivity: dict[str, float] = {}
    for k, c in enumerate(class_order):
        imgs = probe.images[probe.labels == k][: options.sensitivity_samples]
        scores = [
            sensitivity_score(model, imgs, last_tap, unit)
            for unit in range(model.tap_units(last_tap))
        ]
        sensitivity[c] = float(np.mean(scores))

    per_class: dict[str, dict] = {}
    for c in class_order:
        err = errors.get(c)
        pairs = match.matched_pairs.get(c, ())
        class_nds = nds(ap[c], tp_errors_from_matches(pairs)) if c in ap else None
        per_class[c] = {
            "ap": ap.get(c),
            "recall": stats["recalls"][c],
            "mean_iou": mean_iou.get(c),
            "fp": err.fp if err else 0,
            "fn": err.fn if err else 0,
            "fp_rate": err.fp_rate if err else 0.0,
            "fn_rate": err.fn_rate if err else 0.0,
            "nds": class_nds,
            "sensitivity": sensitivity[c],
            "selectivity": selectivity[c],
        }

    by_condition: dict[str, dict] = {}
    for cond in sorted({c.value for c in test.conditions}):
        idx = np.array([i for i, c in enumerate(test.conditions) if c.value == cond])
        sub = test.subset(idx)
        sub_dets = [detections[i] for i in idx]
        sub_match = match_detections(sub_dets, sub.manifest.records, options.iou_threshold)
        sub_ap = per_class_ap(sub_match)
        row: dict = {c: sub_ap.get(c) for c in class_order}
        row["total"] = mean_ap(sub_ap) if sub_ap else None
        by_condition[cond] = row

    return {
        "accuracy": stats["accuracy"],
        "map": mean_ap(ap),
        "nds": overall_nds,
        "macro_iou": float(np.mean(list(mean_iou.values()))),
        "per_class": per_class,
        "by_condition": by_condition,
        "skipped_classes": skipped,
    }


# ---------------------------------------------------------------------------
# correlation


def correlate_errors(
    fn_rates: Mapping[str, float], selectivity: Mapping[str, float]
) -> dict:
    """Rank correlation (ties averaged) between per-class FN rate and
    mean selectivity. Constant series leave the coefficient undefined."""
    classes = sorted(set(fn_rates) & set(selectivity))
    if len(classes) < 3:
        raise AuditError(f"correlation needs >= 3 classes, got {len(classes)}")
    x = [fn_rates[c] for c in classes]
    y = [selectivity[c] for c in classes]
    if len(set(x)) == 1 or len(set(y)) == 1:
        return {"coefficient": None, "undefined": True, "classes": classes}
    rho = float(spearmanr(x, y).statistic)
    return {"coefficient": rho, "undefined": False, "classes": classes}


# ---------------------------------------------------------------------------
# pipeline stages


def _split_data(
    data: SyntheticData, options: AuditOptions
) -> tuple[SyntheticData, SyntheticData, SyntheticData, tuple]:
    idx = stratified_split(data.dataset.labels, options.split, seed=options.seed)
    names = ("train", "val", "test")
    for split_name, part in zip(names, idx):
        present = set(data.dataset.labels[part].tolist())
        for k, c in enumerate(data.dataset.class_order):
            if k not in present:
                raise AuditError(f"class {c!r} absent from {split_name} split")
    return data.subset(idx[0]), data.subset(idx[1]), data.subset(idx[2]), idx


def _build_audit_model(options: AuditOptions, n_classes: int):
    arch = {"kind": options.model_kind, "n_classes": n_classes, **options.arch}
    if options.model_kind == "tiny_vit":
        arch.setdefault("dropout", options.train.dropout)
    return build_model(arch, seed=options.seed)


def _train_once(
    options: AuditOptions,
    train_data: ArrayDataset,
    val_data: ArrayDataset,
    weights: ClassWeights | None = None,
):
    model = _build_audit_model(options, len(train_data.class_order))
    probe = balanced_probe(val_data, options.probe_per_class, seed=options.seed)
    tracker = BehaviorTracker(probe, with_sensitivity=options.track_sensitivity)
    if weights is not None:
        w_vec = weights.as_vector(train_data.class_order)

        def loss_fn(logits, labels):
            return weighted_ce_from_logits(logits, labels, w_vec)

    else:
        loss_fn = None
    cfg = options.train.with_seed(options.seed)
    snapshot, trace = train(
        model, train_data, cfg, loss_fn=loss_fn, val_set=val_data, epoch_hook=tracker.hook()
    )
    return model, snapshot, trace, tracker


def run_audit(
    data: SyntheticData, options: AuditOptions, out_dir: str | Path | None = None
) -> AuditRun:
    """Train the unweighted baseline and assemble the pre-mitigation report."""
    dist = compute_distribution(data.manifest)
    train_d, val_d, test_d, splits = _split_data(data, options)
    model, snapshot, trace, tracker = _train_once(options, train_d.dataset, val_d.dataset)
    pre = evaluate_side(model, test_d, options)
    correlation = correlate_errors(
        {c: m["fn_rate"] for c, m in pre["per_class"].items()},
        {c: m["selectivity"] for c, m in pre["per_class"].items()},
    )
    report = BiasReport(
        dataset=_dist_json(dist),
        options=options.to_json_dict(),
        seed=options.seed,
        config_hash=options.config_hash(),
        pre=pre,
        correlation=correlation,
    )
    run = AuditRun(
        data=data,
        options=options,
        report=report,
        model=model,
        snapshot=snapshot,
        trace=trace,
        behavior=tracker.scores,
        splits=splits,
    )
    if out_dir is not None:
        run.run_dir = write_run_artifacts(run, out_dir)
    return run


def _dist_json(dist: ClassDistribution) -> dict:
    return {
        "counts": dict(sorted(dist.counts.items())),
        "percentages": dict(sorted(dist.percentages.items())),
        "per_condition": {
            cond.value: dict(sorted(classes.items()))
            for cond, classes in sorted(dist.per_condition.items(), key=lambda kv: kv[0].value)
        },
        "total": dist.total,
    }


def _indices_by_id(data: SyntheticData) -> dict[str, int]:
    ids = data.dataset.sample_ids
    if ids is None:
        raise AuditError("dataset lacks sample ids; cannot re-index")
    return {sid: i for i, sid in enumerate(ids)}


def _resample_training(
    train_d: SyntheticData, seed: int
) -> tuple[SyntheticData, ResamplePlan]:
    """Median-equalize the training manifest and mirror it in the tensors."""
    balanced_manifest, plan = combined_resample(train_d.manifest, seed=seed)
    index = _indices_by_id(train_d)
    order = np.array([index[r.sample_id] for r in balanced_manifest.records], dtype=np.int64)
    resampled = SyntheticData(
        manifest=balanced_manifest,
        dataset=train_d.dataset.subset(order),
        conditions=tuple(train_d.conditions[i] for i in order),
    )
    return resampled, plan


def _lrp_informed_ids(model, train_d: SyntheticData, tau_rel: float) -> list[str]:
    """Misclassified training samples whose relevance misses the box."""
    res = model.forward(train_d.dataset.images, train=False)
    preds = res.probs.argmax(axis=1)
    stats, missed = [], []
    for i, record in enumerate(train_d.manifest.records):
        true_k = int(train_d.dataset.labels[i])
        if int(preds[i]) == true_k:
            continue
        missed.append(record.sample_id)
        rmap = lrp_propagate(res.attention, int(preds[i]), sample=i, grid=model.grid)
        stats.append(
            SampleRelevanceStat(
                sample_id=record.sample_id,
                in_box_fraction=relevance_mass_in_box(rmap, model.patch, record.bbox),
                loss=float(-np.log(max(res.probs[i, true_k], 1e-12))),
            )
        )
    return lrp_informed_sample_plan(stats, missed, tau_rel)


def _augment_training(
    run: AuditRun, train_d: SyntheticData
) -> tuple[SyntheticData, list[AugmentRequest], list[str]]:
    """Attention-guided augmentation + LRP-informed duplication (ViT only)."""
    model = run.model
    if getattr(model, "kind", None) != "tiny_vit":
        raise AuditError(
            "Augment strategy needs attention data: train with model_kind='tiny_vit'"
        )
    options = run.options
    summary = extract_attention(
        model, train_d.dataset, conditions=[c.value for c in train_d.conditions]
    )
    masses = mass_by_cell(summary, train_d.manifest.records)
    plan = attention_guided_augment_plan(
        masses, compute_distribution(train_d.manifest), options.tau_att, options.kappa
    )

    images = [train_d.dataset.images]
    labels = [train_d.dataset.labels]
    boxes = [train_d.dataset.boxes]
    ids = list(train_d.dataset.sample_ids)
    records = list(train_d.manifest.records)
    conditions = list(train_d.conditions)
    class_index = {c: k for k, c in enumerate(train_d.dataset.class_order)}

    cells: dict[tuple[str, object], list[int]] = {}
    for i, record in enumerate(train_d.manifest.records):
        cells.setdefault((record.class_label, record.condition), []).append(i)

    from .synthetic import normalize_box_to_center_form

    for request in plan:
        sources = cells.get((request.class_label, request.condition), [])
        if not sources:
            continue
        for j in range(request.count):
            src = sources[j % len(sources)]
            base = train_d.manifest.records[src]
            new_record, new_image = apply_augment(
                base, request.op, train_d.dataset.images[src, 0]
            )
            sid = f"{base.sample_id}-aug{j}"
            new_record = AnnotationRecord(
                sample_id=sid,
                class_label=new_record.class_label,
                bbox=new_record.bbox,
                condition=new_record.condition,
                image_size=new_record.image_size,
            )
            records.append(new_record)
            conditions.append(new_record.condition)
            ids.append(sid)
            images.append(new_image[None, None, :, :])
            labels.append(np.array([class_index[new_record.class_label]]))
            boxes.append(
                normalize_box_to_center_form(new_record.bbox, new_record.image_size)[None, :]
            )

    dup_ids = _lrp_informed_ids(model, train_d, options.tau_rel)
    index = _indices_by_id(train_d)
    for n, sid in enumerate(dup_ids):
        src = index[sid]
        base = train_d.manifest.records[src]
        new_id = f"{sid}-rel{n}"
        records.append(
            AnnotationRecord(
                sample_id=new_id,
                class_label=base.class_label,
                bbox=base.bbox,
                condition=base.condition,
                image_size=base.image_size,
            )
        )
        conditions.append(base.condition)
        ids.append(new_id)
        images.append(train_d.dataset.images[src : src + 1])
        labels.append(train_d.dataset.labels[src : src + 1])
        boxes.append(train_d.dataset.boxes[src : src + 1])

    augmented = SyntheticData(
        manifest=DatasetManifest(
            records=tuple(records),
            taxonomy=train_d.manifest.taxonomy,
            seed=train_d.manifest.seed,
        ),
        dataset=ArrayDataset(
            images=np.concatenate(images, axis=0),
            labels=np.concatenate(labels, axis=0),
            class_order=train_d.dataset.class_order,
            boxes=np.concatenate(boxes, axis=0),
            sample_ids=tuple(ids),
        ),
        conditions=tuple(conditions),
    )
    return augmented, plan, dup_ids


def run_mitigation(
    run: AuditRun, strategy: Strategy, out_dir: str | Path | None = None
) -> AuditRun:
    """Apply a mitigation strategy, retrain with the same seed/config,
    and extend the report with post metrics, deltas, and verdicts."""
    options = run.options
    train_d, val_d, test_d, splits = _split_data(run.data, options)
    weights: ClassWeights | None = None
    mitigation: dict = {"strategy": strategy.value}

    if strategy is Strategy.COST_SENSITIVE:
        weights = compute_class_weights(compute_distribution(train_d.manifest))
        new_train = train_d
    elif strategy is Strategy.RESAMPLE:
        new_train, plan = _resample_training(train_d, options.seed)
        mitigation["resample_plan"] = plan.to_json_dict()
    elif strategy is Strategy.AUGMENT:
        new_train, plan_requests, dup_ids = _augment_training(run, train_d)
        mitigation["augment_plan"] = [r.to_json_dict() for r in plan_requests]
        mitigation["relevance_duplicated"] = dup_ids
        mitigation["added_samples"] = len(new_train.dataset) - len(train_d.dataset)
    elif strategy is Strategy.COMBINED:
        new_train, plan = _resample_training(train_d, options.seed)
        mitigation["resample_plan"] = plan.to_json_dict()
        weights = compute_class_weights(compute_distribution(new_train.manifest))
    else:  # pragma: no cover - exhaustive enum
        raise AuditError(f"unknown strategy {strategy}")

    if weights is not None:
        mitigation["weights_history"] = [weights.to_json_dict()]

    model, snapshot, trace, tracker = _train_once(
        options, new_train.dataset, val_d.dataset, weights=weights
    )
    post = evaluate_side(model, test_d, options)

    deltas: dict[str, dict] = {}
    verdicts: dict[str, str] = {}
    for c, pre_m in run.report.pre["per_class"].items():
        post_m = post["per_class"][c]
        d_fn = post_m["fn_rate"] - pre_m["fn_rate"]
        d_ap = (post_m["ap"] or 0.0) - (pre_m["ap"] or 0.0)
        deltas[c] = {
            "fn_rate": d_fn,
            "ap": d_ap,
            "recall": post_m["recall"] - pre_m["recall"],
            "mean_iou": (post_m["mean_iou"] or 0.0) - (pre_m["mean_iou"] or 0.0),
        }
        if d_fn <= options.fn_delta_threshold and d_ap >= options.ap_delta_threshold:
            verdicts[c] = "improved"
        elif d_fn >= -options.fn_delta_threshold or d_ap <= -options.ap_delta_threshold:
            verdicts[c] = "regressed"
        else:
            verdicts[c] = "unchanged"

    report = BiasReport(
        dataset=run.report.dataset,
        options=run.report.options,
        seed=run.report.seed,
        config_hash=run.report.config_hash,
        pre=run.report.pre,
        correlation=run.report.correlation,
        post=post,
        mitigation=mitigation,
        deltas=deltas,
        verdicts=verdicts,
    )
    new_run = AuditRun(
        data=run.data,
        options=options,
        report=report,
        model=model,
        snapshot=snapshot,
        trace=trace,
        behavior=tracker.scores,
        splits=splits,
    )
    if out_dir is not None:
        new_run.run_dir = write_run_artifacts(new_run, out_dir, suffix=strategy.value.lower())
    return new_run


# ---------------------------------------------------------------------------
# recalibration


@dataclass(frozen=True)
class RecalibrationState:
    """Weight-adjustment loop state; the weight history is append-only."""

    weights: ClassWeights
    iteration: int = 0
    max_iterations: int = 10
    epsilon_gap: float = 0.05
    eta: float = 0.5
    target_recall: float | None = None
    history: tuple[ClassWeights, ...] = ()
    last_metrics: dict | None = None
    converged: bool = False

    def __post_init__(self) -> None:
        if not self.history:
            object.__setattr__(self, "history", (self.weights,))
        if self.iteration > self.max_iterations:
            raise AuditError(
                f"iteration {self.iteration} exceeds max {self.max_iterations}"
            )


def recalibrate(
    state: RecalibrationState, val_metrics: Mapping[str, float]
) -> RecalibrationState:
    """One recalibration step: adjust weights toward the recall target
    unless the recall gap has already closed or iterations ran out."""
    for c, v in val_metrics.items():
        if not np.isfinite(v):
            raise AuditError(f"non-finite validation metric for class {c!r}: {v}")
    recalls = dict(val_metrics)
    gap = max(recalls.values()) - min(recalls.values())
    if gap < state.epsilon_gap:
        return replace(state, converged=True, last_metrics=recalls)
    if state.iteration >= state.max_iterations:
        return replace(state, converged=True, last_metrics=recalls)
    target = state.target_recall if state.target_recall is not None else max(recalls.values())
    new_weights = dynamic_weight_adjust(state.weights, recalls, target, state.eta)
    return replace(
        state,
        weights=new_weights,
        iteration=state.iteration + 1,
        history=state.history + (new_weights,),
        last_metrics=recalls,
    )


def recalibration_loop(
    data: SyntheticData, options: AuditOptions
) -> tuple[RecalibrationState, list[dict]]:
    """Iteratively retrain with adjusted weights until the validation
    recall gap closes or the iteration budget is spent. Returns the
    final state and one {iteration, gap, recalls} row per training."""
    train_d, val_d, _test_d, _ = _split_data(data, options)
    weights = compute_class_weights(compute_distribution(train_d.manifest))
    state = RecalibrationState(
        weights=weights,
        max_iterations=options.max_recal_iterations,
        epsilon_gap=options.epsilon_gap,
        eta=options.eta,
        target_recall=options.target_recall,
    )
    rows: list[dict] = []
    while True:
        _model, _snap, trace, _tracker = _train_once(
            options, train_d.dataset, val_d.dataset, weights=state.weights
        )
        recalls = trace.final_recalls()
        rows.append(
            {
                "iteration": state.iteration,
                "gap": max(recalls.values()) - min(recalls.values()),
                "recalls": recalls,
            }
        )
        state = recalibrate(state, recalls)
        if state.converged or state.iteration >= state.max_iterations:
            return state, rows


# ---------------------------------------------------------------------------
# artifacts


def write_run_artifacts(run: AuditRun, out_dir: str | Path, suffix: str = "") -> Path:
    """Write report JSON/text, traces, behavior CSV, snapshot, and the
    per-condition AP table under a seed+config-hash run directory."""
    tag = f"run-s{run.options.seed}-{run.options.config_hash()}"
    if suffix:
        tag += f"-{suffix}"
    run_dir = Path(out_dir) / tag
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "report.json").write_text(run.report.to_json(), encoding="utf-8")
    (run_dir / "report.txt").write_text(run.report.text_summary(), encoding="utf-8")
    (run_dir / "config.json").write_text(
        canonical_json(run.options.to_json_dict()) + "\n", encoding="utf-8"
    )
    run.trace.write_csv(run_dir / "trace.csv")
    run.behavior.write_csv(run_dir / "behavior.csv")
    run.snapshot.save(run_dir / "model.snapshot")
    side = run.report.post if run.report.post is not None else run.report.pre
    class_names = list(run.data.dataset.class_order)
    rows = [
        {**{c: v for c, v in row.items() if c != "total"}, "total": row["total"], "condition": cond}
        for cond, row in sorted(side["by_condition"].items())
    ]
    write_metrics_csv(rows, class_names, "ap", run_dir / "condition_ap.csv")
    return run_dir
