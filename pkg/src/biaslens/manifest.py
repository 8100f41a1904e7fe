"""Annotation manifests and class-distribution statistics.

A manifest is a JSONL file: one annotation record per line, optionally
preceded by a header line declaring extra taxonomy labels and the seed.
All types are immutable; operations are pure functions.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterable, Mapping


class Condition(Enum):
    """Capture condition tag of an annotation."""

    NORMAL = "Normal"
    NIGHT = "Night"
    WEATHER = "Weather"
    ROTATED = "Rotated"
    MIXED = "Mixed"


class ManifestError(ValueError):
    """Malformed manifest line or record invariant violation."""


@dataclass(frozen=True, slots=True)
class AnnotationRecord:
    """One labeled object instance.

    bbox is (x1, y1, x2, y2) in pixels, axis-aligned, with x1 < x2 and
    y1 < y2, contained in [0, width] x [0, height].
    """

    sample_id: str
    class_label: str
    bbox: tuple[float, float, float, float]
    condition: Condition
    image_size: tuple[int, int]
    image_ref: str | None = None

    def __post_init__(self) -> None:
        if not self.class_label:
            raise ManifestError(f"record {self.sample_id!r}: empty class_label")
        x1, y1, x2, y2 = self.bbox
        w, h = self.image_size
        if w <= 0 or h <= 0:
            raise ManifestError(
                f"record {self.sample_id!r}: non-positive image_size {self.image_size}"
            )
        if not (x1 < x2 and y1 < y2):
            raise ManifestError(
                f"record {self.sample_id!r}: degenerate bbox {self.bbox}"
            )
        if x1 < 0 or y1 < 0 or x2 > w or y2 > h:
            raise ManifestError(
                f"record {self.sample_id!r}: bbox {self.bbox} outside "
                f"image frame {w}x{h}"
            )

    def to_json_dict(self) -> dict:
        out = {
            "sample_id": self.sample_id,
            "class_label": self.class_label,
            "bbox": list(self.bbox),
            "condition": self.condition.value,
            "image_size": list(self.image_size),
        }
        if self.image_ref is not None:
            out["image_ref"] = self.image_ref
        return out

    @classmethod
    def from_json_dict(cls, obj: Mapping) -> "AnnotationRecord":
        try:
            condition = Condition(obj["condition"])
        except ValueError:
            raise ManifestError(f"unknown condition {obj.get('condition')!r}") from None
        except KeyError:
            raise ManifestError("missing key 'condition'") from None
        try:
            bbox = tuple(float(v) for v in obj["bbox"])
            size = tuple(int(v) for v in obj["image_size"])
        except KeyError as exc:
            raise ManifestError(f"missing key {exc.args[0]!r}") from None
        if len(bbox) != 4:
            raise ManifestError(f"bbox must have 4 elements, got {len(bbox)}")
        if len(size) != 2:
            raise ManifestError(f"image_size must have 2 elements, got {len(size)}")
        try:
            return cls(
                sample_id=str(obj["sample_id"]),
                class_label=str(obj["class_label"]),
                bbox=bbox,  # type: ignore[arg-type]
                condition=condition,
                image_size=size,  # type: ignore[arg-type]
                image_ref=obj.get("image_ref"),
            )
        except KeyError as exc:
            raise ManifestError(f"missing key {exc.args[0]!r}") from None


@dataclass(frozen=True)
class DatasetManifest:
    """Ordered annotation corpus. Record order is the canonical iteration order."""

    records: tuple[AnnotationRecord, ...]
    taxonomy: frozenset[str] = field(default_factory=frozenset)
    seed: int = 0

    def __post_init__(self) -> None:
        object.__setattr__(self, "records", tuple(self.records))
        taxonomy = frozenset(self.taxonomy) | {r.class_label for r in self.records}
        object.__setattr__(self, "taxonomy", taxonomy)

    def __len__(self) -> int:
        return len(self.records)

    def class_records(self, class_label: str) -> tuple[AnnotationRecord, ...]:
        return tuple(r for r in self.records if r.class_label == class_label)


@dataclass(frozen=True)
class ClassDistribution:
    """Per-class counts and percentages plus a per-condition breakdown."""

    counts: dict[str, int]
    percentages: dict[str, float]
    per_condition: dict[Condition, dict[str, int]]
    total: int


def load_manifest(path: str | Path) -> DatasetManifest:
    """Parse a JSONL manifest file.

    An optional first line without a ``sample_id`` key is treated as a
    header declaring ``taxonomy`` (list of labels) and ``seed``.

    Raises ManifestError with the 1-based line number on malformed lines.
    """
    path = Path(path)
    records: list[AnnotationRecord] = []
    header_taxonomy: set[str] = set()
    seed = 0
    with path.open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ManifestError(f"{path}:{lineno}: malformed JSON: {exc}") from None
            if lineno == 1 and isinstance(obj, dict) and "sample_id" not in obj:
                header_taxonomy = set(obj.get("taxonomy", ()))
                seed = int(obj.get("seed", 0))
                continue
            try:
                records.append(AnnotationRecord.from_json_dict(obj))
            except ManifestError as exc:
                raise ManifestError(f"{path}:{lineno}: {exc}") from None
    return DatasetManifest(
        records=tuple(records),
        taxonomy=frozenset(header_taxonomy),
        seed=seed,
    )


def write_manifest(manifest: DatasetManifest, path: str | Path) -> None:
    """Write a manifest as JSONL (header line + one record per line).

    Numeric fields round-trip bit-exactly: json emits the shortest repr
    that parses back to the same IEEE-754 double.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as fh:
        header = {"taxonomy": sorted(manifest.taxonomy), "seed": manifest.seed}
        fh.write(json.dumps(header) + "\n")
        for record in manifest.records:
            fh.write(json.dumps(record.to_json_dict()) + "\n")


def compute_distribution(manifest: DatasetManifest) -> ClassDistribution:
    """Count instances per class and derive full-precision percentages.

    The per-condition map covers only observed conditions. Raises on an
    empty manifest (percentages undefined).
    """
    if len(manifest) == 0:
        raise ManifestError("cannot compute distribution of an empty manifest")
    counts: dict[str, int] = {}
    per_condition: dict[Condition, dict[str, int]] = {}
    for record in manifest.records:
        counts[record.class_label] = counts.get(record.class_label, 0) + 1
        cond_map = per_condition.setdefault(record.condition, {})
        cond_map[record.class_label] = cond_map.get(record.class_label, 0) + 1
    total = len(manifest)
    percentages = {c: 100.0 * n / total for c, n in counts.items()}
    return ClassDistribution(
        counts=counts,
        percentages=percentages,
        per_condition=per_condition,
        total=total,
    )


def condition_breakdown(
    dist: ClassDistribution, class_label: str
) -> dict[Condition, float]:
    """Percent split of one class's instances across capture conditions.

    Only conditions where the class actually occurs appear; the values
    sum to 100.
    """
    if class_label not in dist.counts:
        raise ManifestError(f"unknown class {class_label!r}")
    class_total = dist.counts[class_label]
    out: dict[Condition, float] = {}
    for condition, cond_counts in dist.per_condition.items():
        n = cond_counts.get(class_label, 0)
        if n:
            out[condition] = 100.0 * n / class_total
    return out


def labels_with_prefix(manifest: DatasetManifest, prefix: str) -> list[str]:
    """Taxonomy labels under a dotted-hierarchy prefix, sorted.

    The hierarchy is otherwise uninterpreted; this is the one explicit
    prefix query.
    """
    dotted = prefix if prefix.endswith(".") else prefix + "."
    return sorted(
        label
        for label in manifest.taxonomy
        if label == prefix or label.startswith(dotted)
    )


def records_from_iter(
    items: Iterable[AnnotationRecord], seed: int = 0
) -> DatasetManifest:
    """Build a manifest from records, taxonomy inferred from observed labels."""
    return DatasetManifest(records=tuple(items), seed=seed)
