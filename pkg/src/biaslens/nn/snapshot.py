"""Immutable model snapshots: JSON header (architecture, seed, train
config, parameter table) followed by a little-endian float64 blob."""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

MAGIC = b"BLSNAP1\n"


class SnapshotError(ValueError):
    pass


@dataclass(frozen=True)
class ModelSnapshot:
    arch: dict
    seed: int
    config: dict
    params: dict[str, np.ndarray]

    @classmethod
    def from_model(cls, model, config: dict | None = None) -> "ModelSnapshot":
        return cls(
            arch=dict(model.arch),
            seed=model.seed,
            config=dict(config or {}),
            params={k: v.copy() for k, v in model.named_parameters().items()},
        )

    def restore_into(self, model) -> None:
        model.load_parameters(self.params)

    def save(self, path: str | Path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        names = sorted(self.params)
        header = {
            "arch": self.arch,
            "seed": self.seed,
            "config": self.config,
            "params": [{"name": n, "shape": list(self.params[n].shape)} for n in names],
        }
        header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
        with path.open("wb") as fh:
            fh.write(MAGIC)
            fh.write(struct.pack("<Q", len(header_bytes)))
            fh.write(header_bytes)
            for n in names:
                fh.write(np.ascontiguousarray(self.params[n], dtype="<f8").tobytes())


def load_snapshot(path: str | Path) -> ModelSnapshot:
    path = Path(path)
    with path.open("rb") as fh:
        magic = fh.read(len(MAGIC))
        if magic != MAGIC:
            raise SnapshotError(f"{path}: not a model snapshot (bad magic {magic!r})")
        (header_len,) = struct.unpack("<Q", fh.read(8))
        header = json.loads(fh.read(header_len).decode("utf-8"))
        params: dict[str, np.ndarray] = {}
        for entry in header["params"]:
            shape = tuple(entry["shape"])
            count = int(np.prod(shape)) if shape else 1
            raw = fh.read(count * 8)
            if len(raw) != count * 8:
                raise SnapshotError(f"{path}: truncated blob at parameter {entry['name']!r}")
            params[entry["name"]] = np.frombuffer(raw, dtype="<f8").reshape(shape).copy()
        trailing = fh.read(1)
        if trailing:
            raise SnapshotError(f"{path}: trailing bytes after parameter blob")
    return ModelSnapshot(
        arch=header["arch"], seed=header["seed"], config=header["config"], params=params
    )


def model_from_snapshot(snapshot: ModelSnapshot):
    from .models import build_model

    model = build_model(snapshot.arch, seed=snapshot.seed)
    snapshot.restore_into(model)
    return model
