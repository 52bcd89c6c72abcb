"""File formats: JSONL datasets, TOML configs, JSON checkpoints, CSV exports.

Every writer goes through :func:`atomic_write` so an interrupted command
never leaves a half-written file behind.
"""

from __future__ import annotations

import csv
import io
import json
import os
import sys
import tempfile
from pathlib import Path

import numpy as np

from .errors import InvalidArgumentError
from .model import EncoderModel
from .training import TrainConfig, TrainState

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

CHECKPOINT_FORMAT = "umm-ckpt-v1"
HISTORY_COLUMNS = ("epoch", "l_s", "l_n", "l_r", "total", "mean_sigma", "knn_acc")


def atomic_write(path, text: str) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def _jsonl(records) -> str:
    return "".join(json.dumps(r, separators=(",", ":")) + "\n" for r in records)


def write_dataset(path, x, labels) -> Path:
    x = np.asarray(x, dtype=np.float64)
    records = ({"x": row.tolist(), "label": int(lab)} for row, lab in zip(x, labels))
    return atomic_write(path, _jsonl(records))


def read_dataset(path):
    """Return ``(x, labels)``; raises InvalidArgumentError on malformed or ragged input."""
    rows, labels = [], []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                rows.append([float(v) for v in rec["x"]])
                labels.append(int(rec["label"]))
            except (ValueError, KeyError, TypeError) as exc:
                raise InvalidArgumentError(f"{path}:{lineno}: malformed record ({exc})") from exc
    if not rows:
        raise InvalidArgumentError(f"{path}: dataset is empty")
    if len({len(r) for r in rows}) != 1:
        raise InvalidArgumentError(f"{path}: records have differing input dimensions")
    return np.array(rows), np.array(labels, dtype=np.int64)


def write_flags(path, outlier) -> Path:
    return atomic_write(path, _jsonl({"index": i, "outlier": bool(f)} for i, f in enumerate(outlier)))


def read_flags(path) -> np.ndarray:
    with open(path, encoding="utf-8") as fh:
        recs = [json.loads(line) for line in fh if line.strip()]
    return np.array([r["outlier"] for r in sorted(recs, key=lambda r: r["index"])], dtype=bool)


def load_config(path) -> TrainConfig:
    try:
        with open(path, "rb") as fh:
            data = tomllib.load(fh)
    except tomllib.TOMLDecodeError as exc:
        raise InvalidArgumentError(f"{path}: {exc}") from exc
    return TrainConfig.from_dict(data)


def dump_config(cfg: TrainConfig) -> str:
    """Render a config as TOML that :func:`load_config` reads back."""
    data = cfg.to_dict()
    lines, sections = [], []
    for key, value in data.items():
        if isinstance(value, dict):
            sections.append((key, value))
        else:
            lines.append(f"{key} = {json.dumps(value)}")
    for name, body in sections:
        lines.append(f"\n[{name}]")
        lines.extend(f"{k} = {json.dumps(v)}" for k, v in body.items())
    return "\n".join(lines) + "\n"


def _tensor(a: np.ndarray) -> dict:
    return {"shape": list(a.shape), "data": a.reshape(-1).tolist()}


def _array(rec: dict) -> np.ndarray:
    return np.array(rec["data"], dtype=np.float64).reshape(rec["shape"])


def checkpoint_text(state: TrainState, cfg: TrainConfig) -> str:
    model = state.model
    doc = {
        "format": CHECKPOINT_FORMAT,
        "config": cfg.to_dict(),
        "epoch": state.epoch,
        "architecture": {"input_dim": model.input_dim, "hidden": list(model.hidden), "dim": model.dim},
        "params": {k: _tensor(v) for k, v in model.params.items()},
        "velocity": {k: _tensor(v) for k, v in state.velocity.items()},
        "rng_state": state.rng.bit_generator.state,
    }
    return json.dumps(doc, sort_keys=True) + "\n"


def save_checkpoint(path, state: TrainState, cfg: TrainConfig) -> Path:
    return atomic_write(path, checkpoint_text(state, cfg))


def load_checkpoint(path):
    """Return ``(state, cfg)`` restored from a checkpoint file."""
    try:
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise InvalidArgumentError(f"{path}: not a checkpoint ({exc})") from exc
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise InvalidArgumentError(f"{path}: unsupported checkpoint format {doc.get('format')!r}")
    arch = doc["architecture"]
    model = object.__new__(EncoderModel)
    model.input_dim, model.hidden, model.dim = arch["input_dim"], tuple(arch["hidden"]), arch["dim"]
    model.params = {k: _array(v) for k, v in doc["params"].items()}
    rng = np.random.default_rng()
    rng.bit_generator.state = doc["rng_state"]
    state = TrainState(model, {k: _array(v) for k, v in doc["velocity"].items()}, int(doc["epoch"]), rng)
    return state, TrainConfig.from_dict(doc["config"])


def _csv(header, rows) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    return buf.getvalue()


def _cell(v):
    return "" if v is None else repr(float(v)) if isinstance(v, (float, np.floating)) else v


def write_history(path, history) -> Path:
    rows = ([_cell(rec.get(c)) for c in HISTORY_COLUMNS] for rec in history)
    return atomic_write(path, _csv(HISTORY_COLUMNS, rows))


def read_history(path) -> list:
    with open(path, encoding="utf-8") as fh:
        return [{k: (float(v) if v != "" else None) for k, v in row.items()} for row in csv.DictReader(fh)]


def write_metrics(path, metrics: dict) -> Path:
    return atomic_write(path, _csv(("metric", "value"), ((k, _cell(v)) for k, v in metrics.items())))


def read_metrics(path) -> dict:
    with open(path, encoding="utf-8") as fh:
        return {row["metric"]: float(row["value"]) for row in csv.DictReader(fh)}


def write_histogram(path, centers, counts) -> Path:
    return atomic_write(path, _csv(("bin_center", "count"),
                                   ((_cell(c), int(n)) for c, n in zip(centers, counts))))


def write_embeddings(path, mu, sigma, labels) -> Path:
    records = ({"mu": m.tolist(), "sigma": s.tolist(), "label": int(lab)}
               for m, s, lab in zip(mu, sigma, labels))
    return atomic_write(path, _jsonl(records))
