"""Small synthetic experiments that exercise the model end to end.

Each function is deterministic in its seed and returns plain numbers, so the
acceptance tests and the command line can share them.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .config import RunConfig
from .data import generate_synthetic, preset_config, split_dataset
from .finetune import finetune
from .moe import MoeFfn
from .optim import Adam
from .pretrain import evaluate_mcp, pretrain

# -- masked channel prediction on a planted copy channel -------------------------

def copy_dataset(seed=0, n_instances=2000, length=32, vocab=32):
    """Two category channels; the second is a fixed permutation of the first and is the masked one."""
    cfg = preset_config("custom", n_channels=2, kinds=("category", "category"),
                        category_vocab=(vocab, vocab), n_instances=n_instances, mean_length=length,
                        n_mcp=1, mcp_pattern="copy", n_tasks=1)
    return generate_synthetic(cfg, seed=seed)


def mcp_overfit(seed=0, max_steps=2000, target=0.99, check_every=50, probe_size=500, **overrides):
    """Pre-train on :func:`copy_dataset` until a fresh masking is predicted with ``target`` accuracy."""
    ds = copy_dataset(seed)
    params = dict(seed=seed, d_model=32, d_ff=64, heads=2, blocks=2, experts=4, lr=3e-3,
                  batch_size=32, epochs=10_000, max_steps=max_steps, mask_rate=0.15,
                  warmup_frac=0.02)
    params.update(overrides)
    cfg = RunConfig(**params)
    probe = ds.subset(np.arange(min(probe_size, len(ds))))
    state = {"accuracy": 0.0, "reached": None}

    def check(step, model):
        if step % check_every and step != max_steps:
            return False
        acc, _ = evaluate_mcp(model, probe, cfg.mask_rate, seed + 1)
        state["accuracy"] = min(acc.values())
        if state["accuracy"] >= target:
            state["reached"] = step
            return True
        return False

    start = time.perf_counter()
    result = pretrain(ds, cfg, after_step=check)
    return {"accuracy": state["accuracy"], "reached_at": state["reached"], "steps": result.steps,
            "seconds": time.perf_counter() - start}


# -- seesaw: a weak, conflicting auxiliary task ------------------------------------

SEESAW_DATA = dict(n_channels=5, kinds=("category",) * 5, n_instances=2000, mean_length=16, n_mcp=0,
                   n_tasks=2, task_mode="conflict", task_strengths=(1.0, 0.1), label_noise=0.5)

SEESAW_RUN = dict(d_model=16, d_ff=32, heads=2, blocks=1, experts=2, optimizer="adam", lr=3e-3,
                  batch_size=32, epochs=100, max_steps=600, warmup_frac=0.0, eta_out=100.0,
                  inner_outer_ratio=10, outer_batch_size=256, surrogate_space="probability")


def seesaw_dataset(seed):
    """Conflict-mode data where task1 shares a feature with the opposite sign and carries little signal."""
    return generate_synthetic(preset_config("custom", **SEESAW_DATA), seed=seed)


def seesaw_pair(seed, **overrides):
    """Validation AUCs with fixed uniform weights and with bi-level weights, same data and budget."""
    ds = seesaw_dataset(seed)
    train, val, _ = split_dataset(ds, (0.6, 0.4, 0.0), seed)
    base = RunConfig(seed=seed, **{**SEESAW_RUN, **overrides})
    out = {}
    for name, bilevel in (("uniform", False), ("bilevel", True)):
        start = time.perf_counter()
        _, rep = finetune(train, val, base.with_overrides(bilevel=bilevel))
        out[name] = {"auc": rep["validation"]["task_auc"], "mean_auc": rep["validation"]["mean_auc"],
                     "lambda": rep["lambda_history"][-1], "seconds": time.perf_counter() - start}
    return out


# -- capacity: clustered teacher maps ----------------------------------------------

def cluster_regression(seed, n=2048, d=8, clusters=4, hidden=16, spread=3.0):
    """Tokens from ``clusters`` Gaussian blobs, each mapped by its own random two-layer ReLU teacher."""
    rng = np.random.default_rng(seed)
    centers = rng.normal(size=(clusters, d)) * spread
    c = rng.integers(clusters, size=n)
    x = centers[c] + rng.normal(size=(n, d))
    w1 = rng.normal(size=(clusters, d, hidden)) / np.sqrt(d)
    w2 = rng.normal(size=(clusters, hidden, d)) / np.sqrt(hidden)
    y = np.einsum("nh,nhd->nd", np.maximum(0.0, np.einsum("nd,ndh->nh", x, w1[c])), w2[c])
    return x, y, c


@dataclass
class CapacityResult:
    loss: float
    expert_counts: np.ndarray


def fit_ffn(x, y, experts, seed, d_ff=16, steps=1500, lr=3e-3, init_std=0.3):
    """Full-batch Adam fit of one top-1 FFN layer; returns the final training MSE."""
    ffn = MoeFfn(x.shape[1], d_ff, experts, np.random.default_rng([seed, experts]), init_std)
    opt = Adam(ffn.parameters(), lr)
    xs, ys = T.Tensor(x), T.Tensor(y)
    for _ in range(steps):
        diff = ffn(xs) - ys
        loss = T.mean(diff * diff)
        opt.zero_grad()
        loss.backward()
        opt.step()
    with T.no_grad():
        diff = ffn(xs) - ys
    return CapacityResult(float(np.mean(diff.data ** 2)),
                          np.bincount(ffn.last_decision.expert, minlength=experts))


def capacity_pair(seed, experts=4, **kw):
    """Final training loss of the ``experts``-way layer and of a single expert of the same width."""
    x, y, _ = cluster_regression(seed, clusters=experts)
    return {"moe": fit_ffn(x, y, experts, seed, **kw), "dense": fit_ffn(x, y, 1, seed, **kw)}
