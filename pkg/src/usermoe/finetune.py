"""Fine-tuning on labelled tasks and export of pooled user embeddings."""

from __future__ import annotations

import json
import logging

import numpy as np

from . import tensor as T
from .data import collate
from .errors import CheckpointError, ContractError
from .io import Checkpoint, load_checkpoint
from .model import UserModel
from .moe import RoutingStats
from .multitask import exact_auc, per_task_losses, train_loop
from .parallel import ordered_map

log = logging.getLogger(__name__)

MODES = ("trainable", "frozen")
EMBEDDING_FORMAT = "usermoe-embeddings/1"


def init_from_pretrained(checkpoint, schema=None, mode="trainable", seed=0):
    """Model whose encoder comes from ``checkpoint`` and whose towers are freshly drawn.

    ``checkpoint`` is a path or a loaded :class:`Checkpoint`.  In ``frozen``
    mode the encoder stops receiving gradients.
    """
    if mode not in MODES:
        raise ContractError(f"mode must be one of {MODES}, got {mode!r}")
    ckpt = checkpoint if isinstance(checkpoint, Checkpoint) else load_checkpoint(checkpoint)
    schema = schema if schema is not None else ckpt.schema
    try:
        model = UserModel(schema, ckpt.encoder_config, np.random.default_rng([seed, 2]),
                          ckpt.doc.get("pooling", "max"))
    except Exception as exc:
        raise CheckpointError(f"cannot rebuild the checkpoint architecture: {exc}") from None
    state = ckpt.state()
    enc = {k[len("encoder."):]: v for k, v in state.items() if k.startswith("encoder.")}
    model.encoder.load_state_dict(enc)
    if mode == "frozen":
        model.encoder.set_requires_grad(False)
    return model


def forward_tasks(batch, model):
    return model.forward_tasks(batch)


def _batches(ds, batch_size, max_len=None):
    for start in range(0, len(ds), batch_size):
        yield collate(ds.instances[start:start + batch_size], ds.schema, max_len)


def predict(model, ds, batch_size=64, max_len=None):
    """Raw scores per task, stacked over the dataset in order."""
    out = {t.name: [] for t in model.schema.tasks}
    with T.no_grad():
        for batch in _batches(ds, batch_size, max_len):
            for name, s in model.forward_tasks(batch).items():
                out[name].append(s.data)
    return {k: np.concatenate(v) if v else np.zeros(0) for k, v in out.items()}


def evaluate(model, ds, batch_size=64, max_len=None):
    """Per-task loss, and AUC (classification) or RMSE (regression), over labelled samples."""
    scores = predict(model, ds, batch_size, max_len)
    names = model.schema.task_names
    labels = np.array([[inst.labels.get(t, 0.0) for t in names] for inst in ds.instances]).reshape(-1, len(names))
    ind = np.array([[inst.indicators.get(t, 0) for t in names] for inst in ds.instances]).reshape(-1, len(names))
    report = {"task_loss": {}, "task_auc": {}, "task_rmse": {}}
    for k, task in enumerate(model.schema.tasks):
        active = ind[:, k] > 0
        if not active.any():
            continue
        s, y = scores[task.name][active], labels[active, k]
        if task.is_classification:
            report["task_loss"][task.name] = float(np.mean(np.logaddexp(0.0, s) - y * s))
            if 0 < y.sum() < y.size:
                report["task_auc"][task.name] = exact_auc(s, y)
        else:
            mse = float(np.mean((s - y) ** 2))
            report["task_loss"][task.name] = mse
            report["task_rmse"][task.name] = float(np.sqrt(mse))
    aucs = list(report["task_auc"].values())
    report["mean_auc"] = float(np.mean(aucs)) if aucs else None
    return report


def validation_loss(model, ds, batch_size=64, max_len=None):
    """Uniform-weight sum of the per-task training losses over ``ds``."""
    total, n = 0.0, 0
    with T.no_grad():
        for batch in _batches(ds, batch_size, max_len):
            losses = [l for l in per_task_losses(model, batch) if l is not None]
            total += sum(l.item() for l in losses) * batch.shape[0]
            n += batch.shape[0]
    return total / max(1, n)


def finetune(train, validation, cfg, checkpoint=None, test=None, metrics=None, model=None):
    """Train towers (and the encoder unless frozen) on the labelled tasks.

    Without a checkpoint or model the encoder is freshly initialised.
    Returns ``(model, report)`` with the lambda history, the evaluation
    records, and final validation/test metrics.
    """
    schema = train.schema
    if not schema.tasks:
        raise ContractError("fine-tuning needs at least one task")
    if not any(any(inst.indicators.get(t.name, 0) for t in schema.tasks) for inst in train.instances):
        raise ContractError("no training sample carries a task label")
    mode = "frozen" if cfg.freeze_encoder else "trainable"
    if model is None:
        if checkpoint is not None:
            model = init_from_pretrained(checkpoint, schema, mode, cfg.seed)
        else:
            max_len = cfg.max_len or max((i.length for i in train.instances), default=0)
            model = UserModel(schema, cfg.encoder_config(max_len), np.random.default_rng(cfg.seed),
                              cfg.pooling)
            if cfg.freeze_encoder:
                model.encoder.set_requires_grad(False)
    eval_ds = validation if validation is not None and len(validation) else None
    max_len = cfg.max_len or None

    def on_eval(step, lam):
        rec = {"step": step, "lambda": lam.tolist()}
        if eval_ds is not None:
            model.encoder.stats.reset()
            rep = evaluate(model, eval_ds, cfg.batch_size, max_len)
            rec.update(rep)
            if metrics is not None:
                metrics.emit(step=step, split="validation", task_loss=rep["task_loss"],
                             task_auc=rep["task_auc"], task_rmse=rep["task_rmse"],
                             expert_utilization=model.encoder.stats.fractions(), lambda_=lam.tolist())
        elif metrics is not None:
            metrics.emit(step=step, split="train", lambda_=lam.tolist())
        return rec

    model, history, records = train_loop(model, train, eval_ds, cfg, metrics, on_eval)
    report = {"lambda_history": [h.tolist() for h in history], "records": records}
    if eval_ds is not None:
        report["validation"] = evaluate(model, eval_ds, cfg.batch_size, max_len)
    if test is not None and len(test):
        report["test"] = evaluate(model, test, cfg.batch_size, max_len)
        if metrics is not None:
            metrics.emit(step=records[-1]["step"] if records else 0, split="test",
                         task_loss=report["test"]["task_loss"], task_auc=report["test"]["task_auc"],
                         task_rmse=report["test"]["task_rmse"], lambda_=history[-1].tolist())
    return model, report


# -- embeddings -----------------------------------------------------------------

def _first_per_user(ds):
    seen = {}
    for inst in ds.instances:
        seen.setdefault(inst.user_id, inst)
    return [seen[u] for u in sorted(seen)]


def compute_embeddings(model, ds, batch_size=64, max_len=None):
    """``(user_ids, H)`` sorted by user id; a user with several instances uses the first one."""
    insts = _first_per_user(ds)
    chunks = [insts[i:i + batch_size] for i in range(0, len(insts), batch_size)]

    def run(chunk):
        with T.no_grad():
            batch = collate(chunk, ds.schema, max_len)
            h = model.encoder(batch, RoutingStats())
            return model.pool(h, batch.mask).data

    parts = ordered_map(run, chunks)
    d = model.config.d_model
    emb = np.concatenate(parts) if parts else np.zeros((0, d))
    return np.array([i.user_id for i in insts], dtype=np.int64), emb


def export_embeddings(ds, model, path, batch_size=64, max_len=None, source=""):
    """Write a header line, then one ``{"user_id", "embedding"}`` line per user in user-id order."""
    users, emb = compute_embeddings(model, ds, batch_size, max_len)
    header = {"format": EMBEDDING_FORMAT, "dim": int(model.config.d_model), "source": source,
              "count": int(users.size)}
    lines = [json.dumps(header, sort_keys=True)]
    lines += [json.dumps({"user_id": int(u), "embedding": row.astype(np.float64).tolist()})
              for u, row in zip(users, emb)]
    try:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("\n".join(lines) + "\n")
    except OSError as exc:
        raise OSError(exc.errno, f"cannot write embeddings to {path}: {exc.strerror}") from None
    return users, emb


def read_embeddings(path):
    with open(path, encoding="utf-8") as fh:
        header = json.loads(fh.readline())
        rows = [json.loads(line) for line in fh if line.strip()]
    users = np.array([r["user_id"] for r in rows], dtype=np.int64)
    emb = np.array([r["embedding"] for r in rows], dtype=np.float64).reshape(len(rows), header["dim"])
    return header, users, emb


__all__ = ["init_from_pretrained", "forward_tasks", "predict", "evaluate", "finetune",
           "compute_embeddings", "export_embeddings", "read_embeddings", "validation_loss"]
