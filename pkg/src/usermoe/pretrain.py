"""Masked channel prediction pre-training.

Selected channels have random positions replaced by the mask token; the
encoder state at each masked position is decoded by a per-channel head and
scored by negative log-likelihood of the original token.  Each masked channel
is one task of the indicator-weighted multi-task loss.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .data import MASK_ID, PAD_ID, Instance, collate
from .errors import ContractError, NumericError
from .model import UserModel
from .multitask import total_loss
from .optim import make_optimizer
from .tensor import Tensor, no_grad

log = logging.getLogger(__name__)


@dataclass
class MaskPlan:
    """Masked positions (flat indices ``b * N + t``) and original tokens, per channel."""

    positions: dict = field(default_factory=dict)
    originals: dict = field(default_factory=dict)

    def count(self, channel):
        return len(self.positions.get(channel, ()))

    @staticmethod
    def combine(plans, seq_len):
        """Merge per-instance plans into one batch plan for padded length ``seq_len``."""
        out = MaskPlan()
        names = []
        for p in plans:
            names += [n for n in p.positions if n not in names]
        for name in names:
            pos = [p.positions[name] + b * seq_len for b, p in enumerate(plans) if name in p.positions]
            orig = [p.originals[name] for p in plans if name in p.positions]
            out.positions[name] = np.concatenate(pos).astype(np.int64) if pos else np.zeros(0, np.int64)
            out.originals[name] = np.concatenate(orig).astype(np.int64) if orig else np.zeros(0, np.int64)
        return out


def apply_mask(instance, mcp_channels, rate, rng):
    """Mask each eligible position of each MCP channel with probability ``rate``.

    Eligible means inside the sequence and not padding.  When ``rate > 0``
    and a channel has eligible positions but none were drawn, the draw is
    repeated once; if it is still empty one eligible position is forced.
    """
    if not 0.0 <= rate <= 1.0:
        raise ContractError(f"mask rate {rate} outside [0, 1]")
    chans = dict(instance.channels)
    plan = MaskPlan()
    for spec in mcp_channels:
        name = spec.name if hasattr(spec, "name") else spec
        seq = np.asarray(chans[name])
        eligible = np.flatnonzero(seq != PAD_ID)
        hit = eligible[rng.random(eligible.size) < rate]
        if rate > 0 and eligible.size and hit.size == 0:
            hit = eligible[rng.random(eligible.size) < rate]
            if hit.size == 0:
                hit = eligible[rng.integers(eligible.size)][None]
        plan.positions[name] = hit.astype(np.int64)
        plan.originals[name] = seq[hit].astype(np.int64)
        if hit.size:
            seq = seq.copy()
            seq[hit] = MASK_ID
        chans[name] = seq
    return Instance(instance.user_id, chans, instance.labels, instance.indicators), plan


def _rows(logits):
    return logits.reshape(-1, logits.shape[-1]) if logits.ndim > 2 else logits


def _plan_rows(logits, plan, channel):
    if channel not in plan.positions:
        raise ContractError(f"channel {channel!r} not in mask plan")
    rows = _rows(logits)
    pos = plan.positions[channel]
    if pos.size and (pos.min() < 0 or pos.max() >= rows.shape[0]):
        raise ContractError(f"mask plan position outside the {rows.shape[0]} logit rows")
    return T.gather_rows(rows, pos), plan.originals[channel]


def mcp_log_prob(logits, plan, channel):
    """Log of the product of per-position probabilities of the true tokens."""
    rows, truth = _plan_rows(logits, plan, channel)
    return T.tsum(T.pick(T.log_softmax(rows, axis=-1), truth))


def masked_nll(logits, targets, weights=None):
    """Mean (or ``weights``-weighted mean) negative log-likelihood of ``targets`` under row-wise ``logits``."""
    lp = T.pick(T.log_softmax(logits, axis=-1), targets)
    if weights is None:
        return -T.mean(lp)
    w = np.asarray(weights, dtype=logits.dtype)
    return -T.tsum(lp * Tensor(w / w.sum()))


def mcp_loss(logits, plan, channel):
    """Mean NLL of the original tokens over the channel's masked positions."""
    if plan.count(channel) == 0:
        raise ContractError(f"channel {channel!r} has no masked positions")
    rows, truth = _plan_rows(logits, plan, channel)
    return masked_nll(rows, truth)


def per_sample_loss(predictions, labels, objective):
    if objective == "binary-classification":
        return T.bce_with_logits(predictions, labels)
    if objective == "regression":
        diff = predictions - Tensor(np.asarray(labels, dtype=predictions.dtype))
        return diff * diff
    raise ContractError(f"unknown objective {objective!r}")


def task_loss(predictions, labels, indicators, objective="binary-classification"):
    """Indicator-weighted mean loss: ``sum_i d_i * loss_i / sum_i d_i``.

    Returns ``None`` when no sample carries a label for the task.
    """
    delta = np.asarray(indicators, dtype=predictions.dtype)
    total = delta.sum()
    if total == 0:
        return None
    losses = per_sample_loss(predictions, labels, objective)
    return T.tsum(losses * Tensor(delta / total))


def mask_batch(instances, schema, rate, seed, epoch, indices, max_len=None):
    """Mask instances with per-instance generators, then collate."""
    masked, plans = [], []
    for inst, idx in zip(instances, indices):
        rng = np.random.default_rng([seed, epoch, int(idx)])
        m, p = apply_mask(inst, schema.mcp_channels, rate, rng)
        masked.append(m)
        plans.append(p)
    batch = collate(masked, schema, max_len)
    n = batch.mask.shape[1]
    for p in plans:
        for name in p.positions:
            keep = p.positions[name] < n
            p.positions[name] = p.positions[name][keep]
            p.originals[name] = p.originals[name][keep]
    return batch, MaskPlan.combine(plans, n)


def mcp_forward(model, batch, plan):
    """Per-channel (loss, n_correct, n_masked) for one masked batch."""
    h = model.encode(batch)
    out = {}
    for spec in model.schema.mcp_channels:
        pos = plan.positions.get(spec.name)
        if pos is None or pos.size == 0:
            continue
        logits = model.mcp_logits(h, spec.name, pos)
        truth = plan.originals[spec.name]
        correct = int((np.argmax(logits.data, axis=-1) == truth).sum())
        out[spec.name] = (masked_nll(logits, truth), correct, int(pos.size))
    return out


EVAL_STREAM = 2**31 - 1  # masking stream reserved for evaluation, never used as a training epoch


def evaluate_mcp(model, ds, rate, seed, batch_size=64, max_len=None, epoch=EVAL_STREAM):
    """Masked-prediction accuracy and mean loss per channel on a fresh masking of ``ds``."""
    correct, total, loss_sum = {}, {}, {}
    with no_grad():
        for start in range(0, len(ds), batch_size):
            idx = np.arange(start, min(len(ds), start + batch_size))
            batch, plan = mask_batch([ds.instances[i] for i in idx], ds.schema, rate, seed,
                                     epoch, idx, max_len)
            for name, (loss, c, n) in mcp_forward(model, batch, plan).items():
                correct[name] = correct.get(name, 0) + c
                total[name] = total.get(name, 0) + n
                loss_sum[name] = loss_sum.get(name, 0.0) + loss.item() * n
    return ({k: correct[k] / total[k] for k in total},
            {k: loss_sum[k] / total[k] for k in total})


@dataclass
class PretrainResult:
    model: UserModel
    history: list
    steps: int


def pretrain(dataset, cfg, model=None, metrics=None, validation=None, after_step=None):
    """Run masked-channel pre-training and return the trained model and per-epoch records.

    ``after_step(step, model)`` is called after every update; returning True stops training.
    """
    schema = dataset.schema
    if not schema.mcp_channels:
        raise ContractError("pre-training needs at least one MCP channel")
    rng = np.random.default_rng(cfg.seed)
    max_len = cfg.max_len or max((inst.length for inst in dataset.instances), default=0)
    if model is None:
        model = UserModel(schema, cfg.encoder_config(max_len), rng, cfg.pooling)
    params = model.encoder_parameters() + model.head_parameters()
    steps_per_epoch = -(-len(dataset) // cfg.batch_size)
    total_steps = steps_per_epoch * cfg.epochs
    if cfg.max_steps:
        total_steps = min(total_steps, cfg.max_steps)
    opt = make_optimizer(cfg.optimizer, params, cfg.lr, int(cfg.warmup_frac * total_steps))
    names = [c.name for c in schema.mcp_channels]
    lam = np.ones(len(names))
    history = []
    if metrics is not None:
        metrics.emit(step=0, split="train", task_loss={}, mcp_accuracy={},
                     expert_utilization={}, lambda_=lam.tolist())
    step = 0
    stop = False
    for epoch in range(cfg.epochs):
        if stop or (cfg.max_steps and step >= cfg.max_steps):
            break
        model.encoder.stats.reset()
        start = time.perf_counter()
        correct = dict.fromkeys(names, 0)
        count = dict.fromkeys(names, 0)
        loss_sum = dict.fromkeys(names, 0.0)
        order = rng.permutation(len(dataset))
        for b0 in range(0, len(dataset), cfg.batch_size):
            if cfg.max_steps and step >= cfg.max_steps:
                break
            idx = order[b0:b0 + cfg.batch_size]
            batch, plan = mask_batch([dataset.instances[i] for i in idx], schema, cfg.mask_rate,
                                     cfg.seed, epoch, idx, cfg.max_len or None)
            results = mcp_forward(model, batch, plan)
            if not results:
                continue
            losses = [results[n][0] if n in results else None for n in names]
            loss = total_loss(losses, lam)
            if cfg.aux_balance_loss > 0:
                loss = loss + model.encoder.aux_loss() * cfg.aux_balance_loss
            if not np.isfinite(loss.item()):
                raise NumericError(f"pre-training diverged at step {step}: loss {loss.item()}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            step += 1
            for n, (l, c, k) in results.items():
                correct[n] += c
                count[n] += k
                loss_sum[n] += l.item() * k
            if after_step is not None and after_step(step, model):
                stop = True
                break
        record = {
            "epoch": epoch,
            "step": step,
            "task_loss": {n: loss_sum[n] / count[n] for n in names if count[n]},
            "mcp_accuracy": {n: correct[n] / count[n] for n in names if count[n]},
            "expert_utilization": model.encoder.stats.fractions(),
            "seconds": time.perf_counter() - start,
        }
        if validation is not None and len(validation):
            acc, vloss = evaluate_mcp(model, validation, cfg.mask_rate, cfg.seed,
                                      cfg.batch_size, cfg.max_len or None)
            record["val_mcp_accuracy"] = acc
            record["val_task_loss"] = vloss
        history.append(record)
        log.info("epoch %d step %d loss %s acc %s", epoch, step, record["task_loss"], record["mcp_accuracy"])
        if metrics is not None:
            metrics.emit(step=step, split="train", task_loss=record["task_loss"],
                         mcp_accuracy=record["mcp_accuracy"],
                         expert_utilization=record["expert_utilization"], lambda_=lam.tolist())
            if "val_mcp_accuracy" in record:
                metrics.emit(step=step, split="validation", task_loss=record["val_task_loss"],
                             mcp_accuracy=record["val_mcp_accuracy"])
    return PretrainResult(model, history, step)
