"""Loss weighting across tasks and its bi-level tuning against validation AUC.

The inner problem trains the model on ``sum_k lambda_k * L_k``.  The outer
problem picks ``lambda`` to maximise validation AUC, replaced by the mean
pairwise hinge ``max(0, 1 - (f(x+) - f(x-)))``.  The hypergradient comes from
one unrolled SGD step::

    theta' = theta - eta_in * sum_k lambda_k grad L_k(theta)
    d S(theta') / d lambda_k = -eta_in * <grad S(theta'), grad L_k(theta)>

which is exact for the one-step problem because the weighted loss is linear
in ``lambda``.  A derivative-free central-difference estimate is available
for cross-checking.  After each update ``lambda`` is projected back onto
``{lambda >= 0, sum(lambda) = K}``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy.stats import rankdata

from . import tensor as T
from .errors import ContractError, NumericError
from .tensor import Tensor

log = logging.getLogger(__name__)


# -- weights ----------------------------------------------------------------

def project_lambda(lam, total=None):
    """Euclidean projection onto ``{x >= 0, sum(x) = total}`` (``total`` defaults to ``len(lam)``).

    Already-feasible inputs are returned unchanged.
    """
    lam = np.asarray(lam, dtype=np.float64)
    k = lam.size
    total = float(k if total is None else total)
    if k == 0:
        return lam.copy()
    if np.all(lam >= 0) and abs(lam.sum() - total) <= 1e-12 * max(1.0, total):
        return lam.copy()
    u = np.sort(lam)[::-1]
    css = np.cumsum(u) - total
    ind = np.arange(1, k + 1)
    rho = np.nonzero(u - css / ind > 0)[0][-1]
    theta = css[rho] / (rho + 1)
    out = np.maximum(lam - theta, 0.0)
    # push the rounding residue onto the largest coordinate
    out[np.argmax(out)] += total - out.sum()
    return out


def uniform_lambda(k):
    return np.ones(k)


def total_loss(losses, lam):
    """``sum_k lam_k * L_k``; ``None`` entries (tasks without labels this step) contribute nothing.

    ``lam`` may be an array or a :class:`Tensor` (to differentiate in lambda).
    """
    lam_t = lam if isinstance(lam, Tensor) else None
    lam_a = lam.data if lam_t is not None else np.asarray(lam, dtype=np.float64)
    if len(losses) != lam_a.size:
        raise ContractError(f"{len(losses)} losses but {lam_a.size} weights")
    out = None
    for k, loss in enumerate(losses):
        if loss is None:
            continue
        loss = T.as_tensor(loss)
        w = lam_t[k] if lam_t is not None else float(lam_a[k])
        term = loss * w
        out = term if out is None else out + term
    if out is None:
        return Tensor(np.zeros(()))
    return out


# -- AUC ----------------------------------------------------------------------

def _check_binary(scores, labels):
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    labels = np.asarray(labels).reshape(-1)
    if scores.shape != labels.shape:
        raise ContractError("scores and labels differ in length")
    if not np.all((labels == 0) | (labels == 1)):
        raise ContractError("labels must be 0/1")
    n_pos = int((labels == 1).sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ContractError("AUC undefined: need at least one positive and one negative")
    return scores, labels.astype(bool), n_pos, n_neg


def exact_auc(scores, labels):
    """Mann-Whitney AUC via average ranks; ties count one half.  O(n log n)."""
    scores, pos, n_pos, n_neg = _check_binary(scores, labels)
    ranks = rankdata(scores, method="average")
    u = ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def brute_force_auc(scores, labels):
    """Reference AUC counting every (positive, negative) pair."""
    scores, pos, n_pos, n_neg = _check_binary(scores, labels)
    p = scores[pos][:, None]
    n = scores[~pos][None, :]
    wins = float((p > n).sum()) + 0.5 * float((p == n).sum())
    return wins / (n_pos * n_neg)


def surrogate_auc_loss(pos_scores, neg_scores, p_max=100_000, rng=None):
    """Mean pairwise hinge ``max(0, 1 - (f+ - f-))``.

    Uses every pair when there are at most ``p_max``; otherwise ``p_max``
    pairs drawn uniformly with replacement.
    """
    pos = T.as_tensor(pos_scores).reshape(-1)
    neg = T.as_tensor(neg_scores).reshape(-1)
    n_pos, n_neg = pos.shape[0], neg.shape[0]
    if n_pos == 0 or n_neg == 0:
        raise ContractError("surrogate AUC needs positive and negative scores")
    if n_pos * n_neg <= p_max:
        diff = pos.reshape(n_pos, 1) - neg.reshape(1, n_neg)
    else:
        rng = rng if rng is not None else np.random.default_rng(0)
        i = rng.integers(n_pos, size=p_max)
        j = rng.integers(n_neg, size=p_max)
        diff = pos[i] - neg[j]
    return T.mean(T.relu(1.0 - diff))


@dataclass(frozen=True)
class OuterObjective:
    """How the validation surrogate is formed.

    ``space`` picks what the hinge compares: predicted probabilities (bounded,
    so growing the logit scale cannot move the loss by itself) or raw logits.
    ``aggregate`` averages tasks uniformly (``mean``) or by labelled count.
    """

    p_max: int = 100_000
    aggregate: str = "mean"
    space: str = "probability"

    def __post_init__(self):
        if self.space not in ("probability", "logit"):
            raise ContractError(f"unknown score space {self.space!r}")
        if self.aggregate not in ("mean", "weighted"):
            raise ContractError(f"unknown aggregate {self.aggregate!r}")


def validation_surrogate(model, batch, objective=OuterObjective(), seed=0):
    """Surrogate loss over the classification tasks that have both classes in ``batch``.

    Returns ``(loss or None, included task names)``.
    """
    scores = model.forward_tasks(batch)
    rng = np.random.default_rng(seed)
    terms, weights, names = [], [], []
    for k, task in enumerate(model.schema.tasks):
        if not task.is_classification:
            continue
        active = batch.indicators[:, k] > 0
        if not active.any():
            continue
        y = batch.labels[:, k]
        pos = np.flatnonzero(active & (y == 1))
        neg = np.flatnonzero(active & (y == 0))
        if pos.size == 0 or neg.size == 0:
            log.warning("task %s has a single class in the validation batch; excluded", task.name)
            continue
        s = scores[task.name]
        if objective.space == "probability":
            s = T.sigmoid(s)
        terms.append(surrogate_auc_loss(s[pos], s[neg], objective.p_max, rng))
        weights.append(float(active.sum()))
        names.append(task.name)
    if not terms:
        return None, names
    w = np.asarray(weights) if objective.aggregate == "weighted" else np.ones(len(terms))
    w = w / w.sum()
    out = None
    for term, wk in zip(terms, w):
        out = term * float(wk) if out is None else out + term * float(wk)
    return out, names


# -- bi-level step -----------------------------------------------------------

def per_task_losses(model, batch):
    from .pretrain import task_loss

    preds = model.forward_tasks(batch)
    return [task_loss(preds[t.name], batch.labels[:, k], batch.indicators[:, k], t.objective)
            for k, t in enumerate(model.schema.tasks)]


def _grads(params):
    return [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]


def _task_gradients(model, batch, params):
    losses = per_task_losses(model, batch)
    grads = []
    for loss in losses:
        T.zero_grad(params)
        if loss is None or not loss.requires_grad:
            grads.append(None)
            continue
        loss.backward()
        grads.append(_grads(params))
    T.zero_grad(params)
    return grads


def _lookahead(model, params, step, eta_in, val_batch, objective, seed, with_grad):
    """Surrogate (and optionally its parameter gradient) at ``theta - eta_in * step``."""
    saved = [p.data for p in params]
    try:
        for p, s in zip(params, step):
            p.data = p.data - eta_in * s
        if not with_grad:
            with T.no_grad():
                s_val, _ = validation_surrogate(model, val_batch, objective, seed)
            return (None if s_val is None else s_val.item()), None
        s_val, _ = validation_surrogate(model, val_batch, objective, seed)
        if s_val is None:
            return None, None
        T.zero_grad(params)
        if s_val.requires_grad:
            s_val.backward()
        return s_val.item(), _grads(params)
    finally:
        for p, d in zip(params, saved):
            p.data = d
        T.zero_grad(params)


def _combine(lam, grads, params):
    step = [np.zeros_like(p.data) for p in params]
    for k, g in enumerate(grads):
        if g is None:
            continue
        for s, gk in zip(step, g):
            s += lam[k] * gk
    return step


def _trainable(model, params):
    return params if params is not None else [p for p in model.parameters() if p.requires_grad]


def hypergradient(lam, model, train_batch, val_batch, eta_in, params=None,
                  objective=OuterObjective(), seed=0):
    """``d S(theta'(lam)) / d lam`` for the one-step unrolled problem, and the surrogate value."""
    params = _trainable(model, params)
    lam = np.asarray(lam, dtype=np.float64)
    grads = _task_gradients(model, train_batch, params)
    value, v = _lookahead(model, params, _combine(lam, grads, params), eta_in, val_batch,
                          objective, seed, with_grad=True)
    hyper = np.zeros(lam.size)
    if v is None:
        return hyper, value
    for k, g in enumerate(grads):
        if g is not None:
            hyper[k] = -eta_in * sum(float(np.vdot(vi, gi)) for vi, gi in zip(v, g))
    return hyper, value


def hypergradient_fd(lam, model, train_batch, val_batch, eta_in, params=None,
                     objective=OuterObjective(), seed=0, eps=1e-3):
    """Central-difference estimate of the same quantity: 2K extra inner steps, no unrolling."""
    params = _trainable(model, params)
    lam = np.asarray(lam, dtype=np.float64)

    def surrogate_at(weights):
        T.zero_grad(params)
        loss = total_loss(per_task_losses(model, train_batch), weights)
        if loss.requires_grad:
            loss.backward()
        step = _grads(params)
        T.zero_grad(params)
        value, _ = _lookahead(model, params, step, eta_in, val_batch, objective, seed, with_grad=False)
        return value

    hyper = np.zeros(lam.size)
    for k in range(lam.size):
        up, down = lam.copy(), lam.copy()
        up[k] += eps
        down[k] -= eps
        hi, lo = surrogate_at(up), surrogate_at(down)
        if hi is None or lo is None:
            continue
        hyper[k] = (hi - lo) / (2 * eps)
    return hyper, surrogate_at(lam)


def outer_step(lam, model, train_batch, val_batch, eta_in, eta_out, params=None,
               objective=OuterObjective(), seed=0, method="unrolled"):
    """One projected hypergradient step on the loss weights.  Returns ``(new_lam, info)``."""
    lam = np.asarray(lam, dtype=np.float64)
    if eta_out == 0 or lam.size <= 1:
        return project_lambda(lam), {"hypergradient": np.zeros(lam.size), "surrogate": None}
    if method not in ("unrolled", "finite-difference"):
        raise ContractError(f"unknown hypergradient method {method!r}")
    fn = hypergradient if method == "unrolled" else hypergradient_fd
    hyper, value = fn(lam, model, train_batch, val_batch, eta_in, params, objective, seed)
    return project_lambda(lam - eta_out * hyper), {"hypergradient": hyper, "surrogate": value}


# -- training loop -------------------------------------------------------------

def trainable_parameters(model, freeze_encoder=False):
    if freeze_encoder:
        return model.tower_parameters()
    return model.encoder_parameters() + model.tower_parameters()


def train_loop(model, train, validation, cfg, metrics=None, on_eval=None):
    """Alternate ``inner_outer_ratio`` weighted-loss steps with one outer lambda step.

    Each outer step draws fresh train and validation samples of
    ``outer_batch_size`` so the hypergradient is not dominated by minibatch noise.

    With ``cfg.bilevel`` off lambda stays uniform.  Returns
    ``(model, lambda_history, records)``.
    """
    from .data import collate, iter_batches
    from .optim import make_optimizer

    tasks = model.schema.tasks
    k = len(tasks)
    if cfg.bilevel and (validation is None or len(validation) == 0):
        raise ContractError("bi-level optimisation needs a non-empty validation split")
    params = trainable_parameters(model, cfg.freeze_encoder)
    objective = OuterObjective(cfg.p_max, cfg.outer_aggregate, cfg.surrogate_space)
    if cfg.freeze_encoder:
        model.encoder.set_requires_grad(False)
    rng = np.random.default_rng([cfg.seed, 1])
    outer_rng = np.random.default_rng([cfg.seed, 3])  # keeps batch order identical with bi-level off
    steps_per_epoch = -(-len(train) // cfg.batch_size)
    total_steps = steps_per_epoch * cfg.epochs
    if cfg.max_steps:
        total_steps = min(total_steps, cfg.max_steps)
    opt = make_optimizer(cfg.optimizer, params, cfg.lr, int(cfg.warmup_frac * total_steps))
    if cfg.lambda_init:
        if len(cfg.lambda_init) != k:
            raise ContractError(f"lambda_init has {len(cfg.lambda_init)} entries for {k} tasks")
        lam = project_lambda(np.asarray(cfg.lambda_init, dtype=np.float64))
    else:
        lam = uniform_lambda(k)
    history = [lam.copy()]
    records = []
    val_size = min(len(validation), cfg.outer_batch_size) if validation is not None else 0
    hyper_size = min(len(train), cfg.outer_batch_size)
    step = 0
    outer = 0
    if on_eval is not None:
        records.append(on_eval(step, lam))
    done = False
    for epoch in range(cfg.epochs):
        for _, batch in iter_batches(train, cfg.batch_size, rng, cfg.max_len or None):
            if cfg.max_steps and step >= cfg.max_steps:
                done = True
                break
            losses = per_task_losses(model, batch)
            loss = total_loss(losses, lam)
            if cfg.aux_balance_loss > 0 and not cfg.freeze_encoder:
                loss = loss + model.encoder.aux_loss() * cfg.aux_balance_loss
            if not np.isfinite(loss.item()):
                raise NumericError(f"training diverged at step {step}")
            opt.zero_grad()
            if loss.requires_grad:
                loss.backward()
            opt.step()
            step += 1
            if cfg.bilevel and k > 1 and step % cfg.inner_outer_ratio == 0:
                vidx = outer_rng.choice(len(validation), size=val_size, replace=False)
                vbatch = collate([validation.instances[i] for i in sorted(vidx)], validation.schema,
                                 cfg.max_len or None)
                tidx = outer_rng.choice(len(train), size=hyper_size, replace=False)
                tbatch = collate([train.instances[i] for i in sorted(tidx)], train.schema,
                                 cfg.max_len or None)
                lam, info = outer_step(lam, model, tbatch, vbatch, cfg.lr, cfg.eta_out, params,
                                       objective, seed=int(outer_rng.integers(2**31)),
                                       method=cfg.hypergrad)
                outer += 1
                history.append(lam.copy())
                if metrics is not None:
                    metrics.emit(step=step, split="train", lambda_=lam.tolist(),
                                 hypergradient=info["hypergradient"].tolist(),
                                 surrogate=info["surrogate"])
            if on_eval is not None and cfg.eval_every and step % cfg.eval_every == 0:
                records.append(on_eval(step, lam))
        if done:
            break
        if on_eval is not None and not cfg.eval_every:
            records.append(on_eval(step, lam))
    if on_eval is not None and (not records or records[-1].get("step") != step):
        records.append(on_eval(step, lam))
    return model, history, records

