"""Checkpoints, metrics files and the threshold metric reported next to AUC.

Checkpoint (one JSON document)::

    {"format_version": 1, "kind": "pretrain" | "finetune", "step": int,
     "config": {...run config...}, "encoder": {...architecture...},
     "schema": {...}, "rng_state": {...},
     "params": {"name": {"shape": [...], "values": [float64, ...]}, ...}}

Floats are written with ``repr`` precision so every value round-trips exactly.
"""

from __future__ import annotations

import json
import math
import os
import time
from dataclasses import asdict

import numpy as np

from .config import from_dict as config_from_dict
from .data import Schema
from .errors import CheckpointError, ContractError
from .model import UserModel
from .moe import EncoderConfig

FORMAT_VERSION = 1


# -- checkpoints --------------------------------------------------------------

def _encode_params(model):
    return {name: {"shape": list(p.shape), "values": p.data.astype(np.float64).reshape(-1).tolist()}
            for name, p in model.named_parameters()}


def checkpoint_dict(model, run_config=None, rng=None, step=0, kind="pretrain"):
    return {
        "format_version": FORMAT_VERSION,
        "kind": kind,
        "step": int(step),
        "config": run_config.to_dict() if run_config is not None else None,
        "encoder": asdict(model.config),
        "pooling": model._pooling,
        "schema": model.schema.to_dict(),
        "rng_state": rng.bit_generator.state if rng is not None else None,
        "params": _encode_params(model),
    }


def save_checkpoint(model, path, run_config=None, rng=None, step=0, kind="pretrain"):
    doc = checkpoint_dict(model, run_config, rng, step, kind)
    text = json.dumps(doc, sort_keys=True)
    tmp = f"{path}.tmp"
    try:
        with open(tmp, "w", encoding="utf-8") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except OSError as exc:
        raise CheckpointError(f"cannot write checkpoint {path}: {exc.strerror}") from None


class Checkpoint:
    """A parsed checkpoint document; nothing is built until asked for."""

    def __init__(self, doc, path="<memory>"):
        self.doc = doc
        self.path = path

    @property
    def step(self):
        return self.doc["step"]

    @property
    def kind(self):
        return self.doc.get("kind", "pretrain")

    @property
    def schema(self):
        return Schema.from_dict(self.doc["schema"])

    @property
    def encoder_config(self):
        return EncoderConfig(**self.doc["encoder"])

    @property
    def run_config(self):
        cfg = self.doc.get("config")
        return None if cfg is None else config_from_dict(cfg)

    def rng(self):
        rng = np.random.default_rng()
        if self.doc.get("rng_state") is not None:
            rng.bit_generator.state = self.doc["rng_state"]
        return rng

    def state(self):
        out = {}
        for name, entry in self.doc["params"].items():
            shape = tuple(entry["shape"])
            values = np.asarray(entry["values"], dtype=np.float64)
            if values.size != math.prod(shape):
                raise CheckpointError(f"{self.path}: tensor {name} has {values.size} values for shape {shape}")
            out[name] = values.reshape(shape)
        return out

    def build_model(self, schema=None, seed=0):
        schema = schema if schema is not None else self.schema
        model = UserModel(schema, self.encoder_config, np.random.default_rng(seed),
                          self.doc.get("pooling", "max"))
        model.load_state_dict(self.state())
        return model


def load_checkpoint(path):
    """Parse and validate a checkpoint; raises :class:`CheckpointError` on any corruption."""
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc.strerror}") from None
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"{path}: corrupt or truncated checkpoint ({exc.msg} at char {exc.pos})") from None
    if not isinstance(doc, dict) or "format_version" not in doc:
        raise CheckpointError(f"{path}: not a checkpoint")
    if doc["format_version"] != FORMAT_VERSION:
        raise CheckpointError(f"{path}: checkpoint format {doc['format_version']} is incompatible "
                              f"with this build (expects {FORMAT_VERSION})")
    missing = [k for k in ("params", "schema", "encoder", "step") if k not in doc]
    if missing:
        raise CheckpointError(f"{path}: checkpoint lacks {', '.join(missing)}")
    ckpt = Checkpoint(doc, path)
    ckpt.state()  # shape/value consistency
    return ckpt


def load_model(path, schema=None):
    return load_checkpoint(path).build_model(schema)


# -- metrics ------------------------------------------------------------------

class MetricsWriter:
    """Append-only line-delimited JSON metrics.

    Every record has ``step``, ``split`` and ``wall_clock``; known metric
    fields default to empty so records share one layout.  Steps must not go
    backwards.
    """

    FIELDS = ("task_loss", "task_auc", "mcp_accuracy", "expert_utilization", "lambda")

    def __init__(self, path=None, clock=time.time):
        self.path = path
        self.records = []
        self._clock = clock
        self._fh = None
        if path is not None:
            try:
                self._fh = open(path, "w", encoding="utf-8")
            except OSError as exc:
                raise OSError(exc.errno, f"cannot open metrics file {path}: {exc.strerror}") from None

    def emit(self, step, split, lambda_=None, **fields):
        if self.records and step < self.records[-1]["step"]:
            raise ContractError(f"metrics step went backwards ({self.records[-1]['step']} -> {step})")
        rec = {"step": int(step), "split": split}
        for name in self.FIELDS:
            rec[name] = {} if name != "lambda" else []
        if lambda_ is not None:
            rec["lambda"] = list(lambda_)
        rec.update({k: v for k, v in fields.items() if v is not None})
        rec["wall_clock"] = self._clock()
        self.records.append(rec)
        if self._fh is not None:
            self._fh.write(json.dumps(rec, sort_keys=True) + "\n")
            self._fh.flush()
        return rec

    def close(self):
        if self._fh is not None:
            self._fh.close()
            self._fh = None

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def read_metrics(path):
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


def strip_wall_clock(records):
    return [{k: v for k, v in r.items() if k != "wall_clock"} for r in records]


# -- recall at precision ---------------------------------------------------------

def recall_at_precision(scores, labels, p):
    """Best recall over thresholds whose precision is at least ``p`` percent.

    Thresholds are the distinct scores; a sample is predicted positive when
    its score is at least the threshold.  Returns ``(recall, feasible)``
    where ``feasible`` is False (and recall 0) if no threshold qualifies.
    """
    if not 0 < p <= 100:
        raise ContractError(f"precision level {p} outside (0, 100]")
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    labels = np.asarray(labels).reshape(-1)
    n_pos = int((labels == 1).sum())
    if n_pos == 0 or n_pos == labels.size:
        raise ContractError("recall at precision undefined for single-class labels")
    order = np.argsort(-scores, kind="stable")
    s, y = scores[order], labels[order] == 1
    tp = np.cumsum(y)
    predicted = np.arange(1, s.size + 1)
    # only cut at the last element of each run of equal scores
    ends = np.r_[np.flatnonzero(s[1:] != s[:-1]), s.size - 1]
    tp, predicted = tp[ends], predicted[ends]
    ok = tp * 100.0 >= p * predicted
    if not ok.any():
        return 0.0, False
    return float(tp[ok].max() / n_pos), True
