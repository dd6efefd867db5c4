"""Central finite-difference check of every parameter coordinate.

The forward pass is cut into stages (feature projection, then attention and
the two FFN sublayers of each block, then pooling, heads and loss).  Each
stage's input is cached from the base pass, so a probe on a parameter only
reruns the stages from its owner onwards.

Probes are processed in chunks: the owning stage runs once per perturbed
copy, the copies are stacked along the batch axis, and the remaining stages
run once on the stack, producing one loss per copy.

Top-1 routing, ReLU and max-pooling are piecewise smooth.  Any probe whose
error is not negligible is re-evaluated on its own with every discrete
choice recorded; if ``theta +/- h`` choose differently from the base pass the
probe straddles a kink and is skipped (and counted) rather than compared.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .data import Batch, ChannelSpec, Instance, Schema, TaskSpec, collate
from .model import UserModel
from .moe import EncoderConfig
from .pretrain import MaskPlan, per_sample_loss


@dataclass
class Stage:
    name: str
    params: list        # [(qualified name, Tensor)]
    run: object         # callable: input -> output Tensor


@dataclass
class GradCheckReport:
    max_rel_error: float
    worst: str
    checked: int
    skipped: int
    seconds: float
    per_tensor: dict = field(default_factory=dict)

    def passed(self, tol=1e-4):
        return self.max_rel_error < tol


def tiny_problem(seed=0, d_model=16, d_ff=32, heads=2, blocks=2, experts=3, seq_len=8,
                 batch=2, init_std=0.2):
    """A small model touching every channel kind, both objectives and one masked channel."""
    channels = [
        ChannelSpec("cat0", "category", 10, 4),
        ChannelSpec("id0", "id", 12, 4, False, 2),
        ChannelSpec("den0", "dense"),
        ChannelSpec("cat1", "category", 10, 4, True),
    ]
    schema = Schema(channels, [TaskSpec("task0", "binary-classification"), TaskSpec("task1", "regression")])
    rng = np.random.default_rng(seed)
    cfg = EncoderConfig(d_model=d_model, d_ff=d_ff, heads=heads, blocks=blocks, experts=experts,
                        init_std=init_std)
    model = UserModel(schema, cfg, rng)
    instances = []
    for i in range(batch):
        n = seq_len - 2 * (i % 2)  # ragged, so padding is exercised
        instances.append(Instance(i, {
            "cat0": rng.integers(2, 10, n), "id0": rng.integers(2, 12, n),
            "den0": rng.normal(size=n), "cat1": rng.integers(2, 10, n),
        }, {"task0": float(i % 2), "task1": float(rng.normal())}, {"task0": 1, "task1": 1}))
    b = collate(instances, schema, seq_len)
    # mask two real positions of the masked channel in every row
    positions = np.concatenate([np.array([0, 3]) + r * seq_len for r in range(batch)])
    originals = b.tokens["cat1"].reshape(-1)[positions].copy()
    b.tokens["cat1"].reshape(-1)[positions] = 0
    plan = MaskPlan({"cat1": positions}, {"cat1": originals})
    return model, b, plan


def tile(batch, plan, groups):
    """``groups`` stacked copies of ``batch`` (and of the mask plan, with shifted positions)."""
    b, n = batch.mask.shape
    rep = lambda a: np.concatenate([a] * groups, axis=0)
    tiled = Batch({k: rep(v) for k, v in batch.tokens.items()}, rep(batch.mask), rep(batch.user_ids),
                  rep(batch.labels), rep(batch.indicators))
    shifted = MaskPlan()
    for name, pos in plan.positions.items():
        shifted.positions[name] = np.concatenate([pos + g * b * n for g in range(groups)])
        shifted.originals[name] = np.concatenate([plan.originals[name]] * groups)
    return tiled, shifted


def _head(model, batch, plan, groups):
    """Loss per stacked copy: summed indicator-weighted task losses plus masked-token NLL."""
    def run(h):
        preds = model.towers_from_embedding(model.pool(h, batch.mask))
        total = None
        for k, task in enumerate(model.schema.tasks):
            delta = batch.indicators[:, k].reshape(groups, -1)
            weights = delta / np.maximum(delta.sum(axis=1, keepdims=True), 1e-300)
            per = per_sample_loss(preds[task.name], batch.labels[:, k], task.objective)
            term = T.tsum(per.reshape(groups, -1) * T.Tensor(weights), axis=1)
            total = term if total is None else total + term
        for spec in model.schema.mcp_channels:
            pos = plan.positions.get(spec.name)
            if pos is not None and pos.size:
                logits = model.mcp_logits(h, spec.name, pos)
                lp = T.pick(T.log_softmax(logits, axis=-1), plan.originals[spec.name])
                total = total - T.mean(lp.reshape(groups, -1), axis=1)
        return total
    return run


def build_stages(model, batch, plan, groups=1):
    """Stages over ``batch`` (already holding ``groups`` stacked copies); the last returns ``[groups]`` losses."""
    enc = model.encoder
    b, n = batch.mask.shape
    d = model.config.d_model
    mask = batch.mask
    named = lambda prefix, mod: [(f"{prefix}.{k}", p) for k, p in mod.named_parameters()]
    stages = [Stage("mfp", named("encoder.mfp", enc.mfp), lambda _: enc.mfp(batch))]
    for i, blk in enumerate(enc.blocks):
        p = f"encoder.blocks.{i}"
        stages.append(Stage(f"{p}.msa", named(f"{p}.msa", blk.msa) + named(f"{p}.ln_msa", blk.ln_msa),
                            lambda x, blk=blk: blk.ln_msa(x + blk.msa(x, mask)).reshape(b * n, d)))
        stages.append(Stage(f"{p}.ffn1", named(f"{p}.ffn1", blk.ffn1) + named(f"{p}.ln_ffn1", blk.ln_ffn1),
                            lambda x, blk=blk: blk.ln_ffn1(x + blk.ffn1(x))))
        stages.append(Stage(f"{p}.ffn2", named(f"{p}.ffn2", blk.ffn2) + named(f"{p}.ln_ffn2", blk.ln_ffn2),
                            lambda x, blk=blk: blk.ln_ffn2(x + blk.ffn2(x)).reshape(b, n, d)))
    head_params = named("mcp_heads", _Group(model.mcp_heads)) + named("towers", _Group(model.towers))
    stages.append(Stage("head", head_params, _head(model, batch, plan, groups)))
    return stages


class _Group:
    """Adapter giving a dict of modules the ``named_parameters`` interface."""

    def __init__(self, modules):
        self.modules = modules

    def named_parameters(self):
        for key, mod in self.modules.items():
            for name, p in mod.named_parameters():
                yield f"{key}.{name}", p


def _run(stages, j, x):
    for stage in stages[j:]:
        x = stage.run(x)
    return x


def _fingerprinted(stages, j, x):
    """Output of stages ``j..`` and a byte fingerprint of every discrete choice they made."""
    with T.record_decisions() as log:
        x = _run(stages, j, x)
    return x, b"".join(d.tobytes() + str(d.shape).encode() for d in log)


def _probe_single(stages, j, x, flat, i, h, base_fp):
    """Central difference at one coordinate, or None if either side crosses a kink."""
    orig = flat[i]
    try:
        flat[i] = orig + h
        up, fp_up = _fingerprinted(stages, j, x)
        flat[i] = orig - h
        down, fp_down = _fingerprinted(stages, j, x)
    finally:
        flat[i] = orig
    if fp_up != base_fp or fp_down != base_fp:
        return None
    return (up.item() - down.item()) / (2 * h)


def check_gradients(model, batch, plan, h=1e-4, floor=1e-6, chunk=32, recheck=1e-6):
    """Compare the analytic gradient with central differences at every parameter coordinate.

    Relative error is ``|a - n| / max(|a|, |n|, floor)``.  Probes whose
    chunked error exceeds ``recheck`` are redone singly with kink detection.
    """
    start = time.perf_counter()
    single = build_stages(model, batch, plan)
    stacked = build_stages(model, *tile(batch, plan, 2 * chunk), groups=2 * chunk)
    params = [p for s in single for _, p in s.params]

    T.zero_grad(params)
    loss = T.tsum(_run(single, 0, None))
    loss.backward()
    analytic = {id(p): (np.zeros_like(p.data) if p.grad is None else p.grad.copy()) for p in params}
    T.zero_grad(params)

    worst, worst_name, checked, skipped, per_tensor = 0.0, "", 0, 0, {}
    with T.no_grad():
        inputs = [None]
        for stage in single[:-1]:
            inputs.append(stage.run(inputs[-1]))
        base_fp = [_fingerprinted(single, j, inputs[j])[1] for j in range(len(single))]
        last = len(single) - 1
        for j, stage in enumerate(single):
            for name, p in stage.params:
                flat = p.data.reshape(-1)
                if not np.shares_memory(flat, p.data):
                    raise RuntimeError(f"parameter {name} is not contiguous; cannot perturb in place")
                grad = analytic[id(p)].reshape(-1)
                tensor_worst = 0.0
                for c0 in range(0, flat.size, chunk):
                    idx = range(c0, min(flat.size, c0 + chunk))
                    outs = []
                    for i in idx:
                        orig = flat[i]
                        for sign in (1.0, -1.0):
                            flat[i] = orig + sign * h
                            outs.append(stage.run(inputs[j]).data)
                        flat[i] = orig
                    if j == last:
                        losses = np.array([o.sum() for o in outs])
                    else:
                        outs += [outs[-1]] * (2 * chunk - len(outs))
                        losses = _run(stacked, j + 1, T.Tensor(np.concatenate(outs, axis=0))).data
                    for k, i in enumerate(idx):
                        numeric = (losses[2 * k] - losses[2 * k + 1]) / (2 * h)
                        a = grad[i]
                        rel = abs(a - numeric) / max(abs(a), abs(numeric), floor)
                        if rel > recheck:
                            numeric = _probe_single(single, j, inputs[j], flat, i, h, base_fp[j])
                            if numeric is None:
                                skipped += 1
                                continue
                            rel = abs(a - numeric) / max(abs(a), abs(numeric), floor)
                        checked += 1
                        tensor_worst = max(tensor_worst, rel)
                        if rel > worst:
                            worst, worst_name = rel, f"{name}{[int(v) for v in np.unravel_index(i, p.shape)]}"
                per_tensor[name] = tensor_worst
    return GradCheckReport(float(worst), worst_name, checked, skipped, time.perf_counter() - start,
                           per_tensor)


def run_default(seed=0, **kw):
    """Grad-check the small two-block, three-expert model on a ragged batch of two sequences."""
    model, batch, plan = tiny_problem(seed)
    return check_gradients(model, batch, plan, **kw)
