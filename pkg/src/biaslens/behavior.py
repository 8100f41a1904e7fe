"""Model-behavior bias metrics: neuron sensitivity and selectivity,
per-epoch tracking with plateau detection, attention extraction and
aggregation, and relevance propagation through self-attention."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .manifest import AnnotationRecord
from .nn.snapshot import ModelSnapshot, model_from_snapshot
from .nn.train import ArrayDataset
from .pgm import write_pgm

PLATEAU_DELTA = 0.01
PLATEAU_WINDOW = 5

_log = logging.getLogger(__name__)


class BehaviorError(ValueError):
    pass


class UnsupportedArchitectureError(BehaviorError):
    pass


# ---------------------------------------------------------------------------
# sensitivity / selectivity


def unit_activation_matrix(model, images: np.ndarray, tap: str, batch_size: int = 256) -> np.ndarray:
    """Per-sample mean activation of every unit at a trunk tap.

    Units are conv channels (spatial mean) or embedding dims (patch
    mean); result shape (n_samples, n_units).
    """
    rows = []
    for start in range(0, images.shape[0], batch_size):
        res = model.forward(images[start : start + batch_size], train=False)
        act = dict(res.trunk)[tap]
        if act.ndim == 4:  # (N, C, H, W) conv channels
            rows.append(act.mean(axis=(2, 3)))
        elif act.ndim == 3:  # (N, P, d) token embeddings
            rows.append(act.mean(axis=1))
        else:
            rows.append(act)
    return np.concatenate(rows, axis=0)


def sensitivity_score(model, images: np.ndarray, tap: str, unit: int) -> float:
    """Mean over samples of mean |d activation / d input pixel|.

    The probed activation is the unit's spatial (or patch) mean. A dead
    unit yields 0 and is logged.
    """
    if images.shape[0] == 0:
        raise BehaviorError("sensitivity needs a non-empty sample set")
    res = model.forward(images, train=False)
    act = dict(res.trunk)[tap]
    seed = np.zeros_like(act)
    if act.ndim == 4:
        seed[:, unit] = 1.0 / (act.shape[2] * act.shape[3])
    elif act.ndim == 3:
        seed[:, :, unit] = 1.0 / act.shape[1]
    else:
        seed[:, unit] = 1.0
    model.zero_grads()
    grad = model.backward_from_tap(tap, seed)
    model.zero_grads()
    per_sample = np.abs(grad.reshape(grad.shape[0], -1)).mean(axis=1)
    score = float(per_sample.mean())
    if score == 0.0:
        _log.warning("unit %d at tap %r is dead (zero gradient path)", unit, tap)
    return score


def selectivity_score(activations: Mapping[str, float]) -> dict[str, float]:
    """Per class: (a_c - a_avg) / max(a_c, a_avg); the average includes
    the target class. When the max is not positive the score is 0.

    Scores are clipped to [-1, 1]: the ratio stays inside that interval
    for non-negative activations (ReLU features) but can escape it when
    activations go negative (e.g. transformer embedding means).
    """
    if len(activations) < 2:
        raise BehaviorError("selectivity needs at least two classes")
    a_avg = sum(activations.values()) / len(activations)
    out: dict[str, float] = {}
    for c, a_c in activations.items():
        m = max(a_c, a_avg)
        s = 0.0 if m <= 0 else (a_c - a_avg) / m
        out[c] = min(1.0, max(-1.0, s))
    return out


def unit_class_activations(
    model, dataset: ArrayDataset, tap: str
) -> dict[int, dict[str, float]]:
    """unit -> class -> mean activation over the dataset's samples."""
    acts = unit_activation_matrix(model, dataset.images, tap)
    out: dict[int, dict[str, float]] = {}
    for unit in range(acts.shape[1]):
        per_class: dict[str, float] = {}
        for k, name in enumerate(dataset.class_order):
            mask = dataset.labels == k
            if not mask.any():
                raise BehaviorError(f"probe set has no samples of class {name!r}")
            per_class[name] = float(acts[mask, unit].mean())
        out[unit] = per_class
    return out


# ---------------------------------------------------------------------------
# per-epoch tracking


@dataclass(frozen=True)
class BehaviorRecord:
    epoch: int
    layer: str
    neuron: int
    class_label: str
    sensitivity: float
    selectivity: float


@dataclass
class BehaviorScores:
    """Time series of per-(layer, neuron, class) scores across epochs."""

    records: list[BehaviorRecord] = field(default_factory=list)

    def epochs(self) -> list[int]:
        return sorted({r.epoch for r in self.records})

    def mean_selectivity_by_class(self, epoch: int | None = None) -> dict[str, float]:
        """Mean selectivity per class over all tracked units (last epoch
        by default)."""
        if not self.records:
            raise BehaviorError("no behavior records collected")
        if epoch is None:
            epoch = self.epochs()[-1]
        sums: dict[str, list[float]] = {}
        for r in self.records:
            if r.epoch == epoch:
                sums.setdefault(r.class_label, []).append(r.selectivity)
        return {c: sum(v) / len(v) for c, v in sums.items()}

    def selectivity_series(self, class_label: str) -> list[tuple[int, float]]:
        """Mean-over-units selectivity of one class per epoch."""
        by_epoch: dict[int, list[float]] = {}
        for r in self.records:
            if r.class_label == class_label:
                by_epoch.setdefault(r.epoch, []).append(r.selectivity)
        return [(e, sum(v) / len(v)) for e, v in sorted(by_epoch.items())]

    def plateaued_classes(
        self, delta: float = PLATEAU_DELTA, window: int = PLATEAU_WINDOW
    ) -> frozenset[str]:
        """Classes whose mean selectivity improved less than ``delta``
        over the last ``window`` epochs (shorter series use their span)."""
        flagged = set()
        for c in {r.class_label for r in self.records}:
            series = [v for _, v in self.selectivity_series(c)]
            if len(series) < 2:
                continue
            lo = max(0, len(series) - 1 - window)
            if series[-1] - series[lo] < delta:
                flagged.add(c)
        return frozenset(flagged)

    def write_csv(self, path: str | Path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["epoch", "layer", "neuron", "class", "sensitivity", "selectivity"])
            for r in self.records:
                writer.writerow(
                    [r.epoch, r.layer, r.neuron, r.class_label, r.sensitivity, r.selectivity]
                )


class BehaviorTracker:
    """Collects selectivity (and optionally sensitivity) per epoch on a
    fixed probe set; usable directly as a train() epoch hook."""

    def __init__(
        self,
        probe_set: ArrayDataset,
        taps: Sequence[str] | None = None,
        with_sensitivity: bool = False,
        sensitivity_samples: int = 16,
    ) -> None:
        for k, name in enumerate(probe_set.class_order):
            if not (probe_set.labels == k).any():
                raise BehaviorError(f"probe set has no samples of class {name!r}")
        self.probe_set = probe_set
        self.taps = list(taps) if taps is not None else None
        self.with_sensitivity = with_sensitivity
        self.sensitivity_samples = sensitivity_samples
        self.scores = BehaviorScores()

    def observe(self, model, epoch: int) -> dict[str, float]:
        taps = self.taps if self.taps is not None else model.trunk_taps
        class_means: dict[str, list[float]] = {c: [] for c in self.probe_set.class_order}
        for tap in taps:
            per_unit = unit_class_activations(model, self.probe_set, tap)
            for unit, acts in per_unit.items():
                sel = selectivity_score(acts)
                for c, s in sel.items():
                    sens = float("nan")
                    if self.with_sensitivity:
                        k = self.probe_set.class_order.index(c)
                        imgs = self.probe_set.images[self.probe_set.labels == k][
                            : self.sensitivity_samples
                        ]
                        sens = sensitivity_score(model, imgs, tap, unit)
                    self.scores.records.append(
                        BehaviorRecord(epoch, tap, unit, c, sens, s)
                    )
                    class_means[c].append(s)
        return {f"selectivity_{c}": sum(v) / len(v) for c, v in class_means.items() if v}

    def hook(self):
        def _hook(model, epoch: int, _row: dict) -> dict:
            return self.observe(model, epoch)

        return _hook


def track_behavior(
    snapshots: Iterable[ModelSnapshot],
    probe_set: ArrayDataset,
    taps: Sequence[str] | None = None,
    with_sensitivity: bool = False,
) -> BehaviorScores:
    """Replay mode: recompute the behavior time series from saved
    per-epoch snapshots (equals the live hook's series)."""
    tracker = BehaviorTracker(probe_set, taps, with_sensitivity)
    for epoch, snap in enumerate(snapshots):
        tracker.observe(model_from_snapshot(snap), epoch)
    return tracker.scores


# ---------------------------------------------------------------------------
# attention extraction


@dataclass
class AttentionSummary:
    """Cached attention for a batch: per-layer (N, heads, P, P) weights,
    final-layer mean-query mass per sample, and per-class/condition mean
    maps (entrywise means of row-stochastic matrices)."""

    image_hw: tuple[int, int]
    patch: int
    grid: tuple[int, int]
    per_layer: tuple[np.ndarray, ...]
    sample_ids: tuple[str, ...]
    class_labels: tuple[str, ...]
    conditions: tuple[str, ...]
    mean_by_class: dict[str, np.ndarray]
    mean_by_condition: dict[str, np.ndarray]
    patch_mass: np.ndarray  # (N, P): head-averaged mean-query distribution

    def sample_index(self, sample_id: str) -> int:
        try:
            return self.sample_ids.index(sample_id)
        except ValueError:
            raise BehaviorError(f"sample {sample_id!r} not in attention summary") from None

    def mass_on_gt(self, record: AnnotationRecord) -> float:
        if tuple(record.image_size) != tuple(self.image_hw[::-1]):
            raise BehaviorError(
                f"record frame {record.image_size} does not match summary "
                f"image {self.image_hw[::-1]}"
            )
        mask = patch_centers_in_box(self.grid, self.patch, record.bbox)
        return float(self.patch_mass[self.sample_index(record.sample_id)][mask].sum())

    def sample_attention(self, sample_id: str, layer: int) -> np.ndarray:
        """(heads, P, P) attention for one sample at one layer."""
        return self.per_layer[layer][self.sample_index(sample_id)]


def patch_centers_in_box(
    grid: tuple[int, int], patch: int, bbox: Sequence[float]
) -> np.ndarray:
    """Boolean mask (row-major over the patch grid) of patches whose
    centers fall inside the box."""
    gh, gw = grid
    x1, y1, x2, y2 = bbox
    rows, cols = np.mgrid[0:gh, 0:gw]
    cx = (cols + 0.5) * patch
    cy = (rows + 0.5) * patch
    return ((cx >= x1) & (cx <= x2) & (cy >= y1) & (cy <= y2)).reshape(-1)


def extract_attention(
    model_or_snapshot,
    dataset: ArrayDataset,
    conditions: Sequence[str] | None = None,
) -> AttentionSummary:
    """Run the batch through a ViT and collect per-layer/head attention
    plus class- and condition-mean maps from the final layer."""
    model = (
        model_from_snapshot(model_or_snapshot)
        if isinstance(model_or_snapshot, ModelSnapshot)
        else model_or_snapshot
    )
    if getattr(model, "kind", None) != "tiny_vit":
        raise UnsupportedArchitectureError(
            f"attention extraction needs a tiny_vit model, got {getattr(model, 'kind', type(model).__name__)!r}"
        )
    res = model.forward(dataset.images, train=False)
    if res.attention is None:
        raise BehaviorError("model forward produced no attention caches")
    n = len(dataset)
    sample_ids = dataset.sample_ids or tuple(f"sample-{i}" for i in range(n))
    class_labels = tuple(dataset.class_order[k] for k in dataset.labels)
    conds = tuple(conditions) if conditions is not None else ("",) * n

    final_mean_heads = res.attention[-1].mean(axis=1)  # (N, P, P)
    patch_mass = final_mean_heads.mean(axis=1)  # (N, P) mean-query rows

    def _group_mean(key: Sequence[str]) -> dict[str, np.ndarray]:
        out = {}
        for g in sorted(set(key)):
            idx = [i for i, v in enumerate(key) if v == g]
            out[g] = final_mean_heads[idx].mean(axis=0)
        return out

    h, w = model.arch["input_hw"]
    return AttentionSummary(
        image_hw=(h, w),
        patch=model.patch,
        grid=model.grid,
        per_layer=res.attention,
        sample_ids=tuple(sample_ids),
        class_labels=class_labels,
        conditions=conds,
        mean_by_class=_group_mean(class_labels),
        mean_by_condition=_group_mean(conds) if conditions is not None else {},
        patch_mass=patch_mass,
    )


def attention_mass_on_gt(summary: AttentionSummary, record: AnnotationRecord) -> float:
    """Fraction of final-layer mean-query attention mass on patches
    whose centers lie inside the record's box."""
    return summary.mass_on_gt(record)


def mass_by_cell(
    summary: AttentionSummary, records: Iterable[AnnotationRecord]
) -> dict[tuple[str, object], float]:
    """Mean attention-on-ground-truth per (class_label, condition) cell,
    in the shape the augmentation planner consumes."""
    sums: dict[tuple[str, object], list[float]] = {}
    for record in records:
        key = (record.class_label, record.condition)
        sums.setdefault(key, []).append(summary.mass_on_gt(record))
    return {k: sum(v) / len(v) for k, v in sums.items()}


# ---------------------------------------------------------------------------
# relevance propagation


@dataclass(frozen=True)
class RelevanceMap:
    """Relevance over patches per propagation step, outermost first:
    index 0 is the pooled-output initialization, the last entry is the
    input-level patch relevance."""

    class_index: int
    per_layer: tuple[np.ndarray, ...]
    grid: tuple[int, int]

    @property
    def final(self) -> np.ndarray:
        return self.per_layer[-1]

    def as_grid(self) -> np.ndarray:
        return self.final.reshape(self.grid)


def lrp_step(attention: np.ndarray, relevance: np.ndarray) -> np.ndarray:
    """One propagation step: R_j = sum_i A_ij R_i for a row-stochastic A."""
    a = np.asarray(attention, dtype=np.float64)
    r = np.asarray(relevance, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1] or a.shape[0] != r.shape[0]:
        raise BehaviorError(f"attention {a.shape} and relevance {r.shape} disagree")
    return a.T @ r


def lrp_propagate(
    attention_layers: Sequence[np.ndarray] | None,
    class_index: int,
    sample: int = 0,
    grid: tuple[int, int] | None = None,
) -> RelevanceMap:
    """Propagate relevance for one sample from the pooled output down
    through every attention layer (heads averaged uniformly).

    ``attention_layers`` is the per-layer cache from a forward pass:
    each entry (N, heads, P, P) or (heads, P, P). The classifier's unit
    relevance reaches patches uniformly through mean pooling, then each
    layer redistributes it with R_j = sum_i A_ij R_i; the total is
    conserved at every step.
    """
    if attention_layers is None or len(attention_layers) == 0:
        raise BehaviorError("no attention caches: run a ViT forward pass first")
    mats = []
    for a in attention_layers:
        a = np.asarray(a, dtype=np.float64)
        if a.ndim == 4:
            a = a[sample]
        if a.ndim != 3:
            raise BehaviorError(f"expected (heads, P, P) attention, got shape {a.shape}")
        mats.append(a.mean(axis=0))
    p = mats[0].shape[0]
    if grid is None:
        side = int(round(p**0.5))
        grid = (side, p // side)
    relevance = np.full(p, 1.0 / p)
    per_layer = [relevance]
    for a in reversed(mats):
        relevance = lrp_step(a, relevance)
        per_layer.append(relevance)
    return RelevanceMap(class_index=class_index, per_layer=tuple(per_layer), grid=grid)


def relevance_mass_in_box(
    rmap: RelevanceMap, patch: int, bbox: Sequence[float]
) -> float:
    """Fraction of input-level relevance on patches centered in the box."""
    mask = patch_centers_in_box(rmap.grid, patch, bbox)
    total = float(rmap.final.sum())
    if total <= 0:
        return 0.0
    return float(rmap.final[mask].sum() / total)


# ---------------------------------------------------------------------------
# heatmap export


def export_heatmap(heatmap: np.ndarray, path: str | Path) -> tuple[Path, Path]:
    """Min-max normalize a matrix to 0..255 and write `<path>.pgm` plus
    `<path>.csv`; a constant map maps to uniform 128."""
    m = np.asarray(heatmap, dtype=np.float64)
    if m.ndim != 2:
        raise BehaviorError(f"heatmap must be 2-D, got shape {m.shape}")
    if not np.isfinite(m).all():
        raise BehaviorError("heatmap contains non-finite entries")
    lo, hi = m.min(), m.max()
    if hi > lo:
        levels = np.rint((m - lo) / (hi - lo) * 255.0).astype(np.int64)
    else:
        levels = np.full(m.shape, 128, dtype=np.int64)

    base = Path(path)
    if base.suffix in {".pgm", ".csv"}:
        base = base.with_suffix("")
    base.parent.mkdir(parents=True, exist_ok=True)
    pgm_path = base.with_suffix(".pgm")
    csv_path = base.with_suffix(".csv")
    write_pgm(levels / 255.0, pgm_path)
    with csv_path.open("w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        for row in levels:
            writer.writerow([int(v) for v in row])
    return pgm_path, csv_path


def balanced_probe(dataset: ArrayDataset, per_class: int, seed: int = 0) -> ArrayDataset:
    """Seeded fixed-size probe set with ``per_class`` samples per class."""
    rng = np.random.default_rng(seed)
    chosen: list[int] = []
    for k, name in enumerate(dataset.class_order):
        idx = np.flatnonzero(dataset.labels == k)
        if idx.size == 0:
            raise BehaviorError(f"dataset has no samples of class {name!r}")
        take = min(per_class, idx.size)
        chosen.extend(rng.choice(idx, size=take, replace=False))
    return dataset.subset(np.array(sorted(chosen), dtype=np.int64))
