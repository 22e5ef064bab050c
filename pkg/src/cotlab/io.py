"""File formats: dataset CSV, instance and checkpoint JSON, trace CSV, run metadata."""

from __future__ import annotations

import csv
import json
import platform
from importlib import metadata
from pathlib import Path

import numpy as np

from .model import AttentionWeights, MaskKind, make_mask
from .task import ParityInstance, TokenMatrix, build_instance, build_tree
from .training import EpochRecord, Trace


def package_version() -> str:
    try:
        return metadata.version("artifact")
    except metadata.PackageNotFoundError:
        return "0+unknown"


def _write_json(path, obj) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=False) + "\n", encoding="utf-8")


def _read_json(path):
    return json.loads(Path(path).read_text(encoding="utf-8"))


# ---------------------------------------------------------------- datasets


def write_dataset(path, tokens: TokenMatrix) -> None:
    """``sample_id,x_1,...`` with integer entries; unset columns are 0."""
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        out = csv.writer(fh)
        out.writerow(["sample_id"] + [f"x_{j}" for j in range(1, tokens.width + 1)])
        for i, row in enumerate(np.rint(tokens.tokens).astype(int)):
            out.writerow([i, *row.tolist()])


def read_dataset(path) -> TokenMatrix:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], rows[1:]
    if header[0] != "sample_id":
        raise ValueError("dataset CSV must start with sample_id")
    x = np.array([[float(v) for v in r[1:]] for r in body]).reshape(len(body), len(header) - 1)
    return TokenMatrix(x, np.any(x != 0, axis=0))


def write_instance(path, instance: ParityInstance) -> None:
    _write_json(path, instance.to_json())


def read_instance(path) -> ParityInstance:
    doc = _read_json(path)
    return build_instance(doc["d"], doc["k"], target=doc["target"], seed=doc.get("seed"))


# ---------------------------------------------------------------- weights and gradients


def weights_to_json(weights: AttentionWeights, d: int, k: int, field: str = "w") -> dict:
    entries = [
        {"j": int(j) + 1, "m": int(m) + 1, field: float(weights.w[j, m])}
        for m in range(weights.size)
        for j in range(weights.size)
        if not weights.mask[j, m]
    ]
    return {"d": d, "k": k, "maskKind": weights.kind.value, "entries": entries}


def weights_from_json(doc: dict, field: str = "w") -> AttentionWeights:
    d, k = int(doc["d"]), int(doc["k"])
    # the masks only depend on (d, k), so any target yields the same layout
    tree = build_tree(build_instance(d, k, target=list(range(1, k + 1))))
    kind = MaskKind(doc["maskKind"])
    mask = make_mask(tree, kind)
    w = np.zeros(mask.shape)
    for e in doc["entries"]:
        j, m = int(e["j"]) - 1, int(e["m"]) - 1
        if mask[j, m]:
            raise ValueError(f"entry ({j + 1}, {m + 1}) is masked")
        w[j, m] = float(e[field])
    return AttentionWeights(w, mask, kind)


def write_checkpoint(path, weights: AttentionWeights, d: int, k: int) -> None:
    _write_json(path, weights_to_json(weights, d, k))


def read_checkpoint(path) -> AttentionWeights:
    return weights_from_json(_read_json(path))


def write_gradient(path, grad: np.ndarray, like: AttentionWeights, d: int, k: int) -> None:
    _write_json(path, weights_to_json(like.with_w(grad), d, k, field="grad"))


def read_gradient(path) -> np.ndarray:
    return weights_from_json(_read_json(path), field="grad").w


# ---------------------------------------------------------------- traces


def trace_header(levels: int) -> list[str]:
    return ["epoch", "cot_loss", "pred_loss", *[f"filter_l{ell}" for ell in range(1, levels + 1)], "child_mass_mean"]


def write_trace(path, trace: Trace) -> None:
    levels = len(trace.records[0].filter_active) if trace.records else 0
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        out = csv.writer(fh)
        out.writerow(trace_header(levels))
        for r in trace.records:
            # repr keeps every float exact on re-read
            out.writerow([r.epoch, repr(r.cot_loss), repr(r.pred_loss), *[int(f) for f in r.filter_active],
                          repr(r.child_mass_mean)])


def read_trace(path) -> list[EpochRecord]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        levels = sorted((c for c in reader.fieldnames if c.startswith("filter_l")), key=lambda c: int(c[8:]))
        return [
            EpochRecord(int(row["epoch"]), float(row["cot_loss"]), float(row["pred_loss"]),
                        [row[c] == "1" for c in levels], float(row["child_mass_mean"]))
            for row in reader
        ]


def write_series(path, epochs, values, name: str) -> None:
    """Two-column ``epoch,<name>`` CSV used for the per-regime loss curves."""
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        out = csv.writer(fh)
        out.writerow(["epoch", name])
        for e, v in zip(epochs, values):
            out.writerow([int(e), repr(float(v))])


def run_metadata(config: dict, **extra) -> dict:
    return {
        "config": config,
        "version": package_version(),
        "python": platform.python_version(),
        "numpy": np.__version__,
        **extra,
    }


def write_metadata(path, config: dict, **extra) -> None:
    _write_json(path, run_metadata(config, **extra))


def write_json(path, obj) -> None:
    _write_json(path, obj)


def read_json(path):
    return _read_json(path)
