"""Sparse mixture-of-experts transformer encoder with top-1 routing.

A block is expert-routed multi-head self-attention followed by two
point-wise expert feed-forward layers, each sublayer wrapped as
``LayerNorm(x + sublayer(x))``.

Routing follows the switch convention: the router softmax runs over all
expert logits, the argmax expert (lowest index on ties) is selected, and its
probability is the gate weight, so gradients reach the router through the
gate.  ``gate_convention="literal"`` instead softmaxes the single surviving
top-1 logit, giving a constant gate of 1.0.
"""

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ConfigError, ContractError, DimensionError
from .mfp import Mfp
from .module import Module, const_param, normal_param
from .tensor import Tensor

MASK_BIAS = -1e9
GATE_CONVENTIONS = ("switch", "literal")


@dataclass
class GateDecision:
    expert: np.ndarray      # chosen expert per position
    weight: Tensor          # gate value per position
    probs: Tensor           # full router distribution, last axis = experts


def gate_from_logits(logits, convention="switch"):
    if logits.shape[-1] < 1:
        raise ConfigError("router needs at least one expert")
    if convention not in GATE_CONVENTIONS:
        raise ConfigError(f"unknown gate convention {convention!r}")
    probs = T.softmax(logits, axis=-1)
    expert = np.argmax(logits.data, axis=-1)
    T._note_decision(expert)
    if convention == "switch":
        weight = T.pick(probs, expert)
    else:
        weight = Tensor(np.ones(expert.shape, dtype=logits.dtype))
    return GateDecision(expert, weight, probs)


def gate(x, router, convention="switch"):
    """Top-1 routing decision for every row of ``x`` (``[..., D]``) under ``router`` (``[D, E]``)."""
    if router.shape[-1] < 1:
        raise ConfigError("router needs at least one expert")
    return gate_from_logits(x @ router, convention)


def balance_loss(decision, n_experts):
    """Switch-style auxiliary loss ``E * sum_e fraction_e * mean_prob_e`` (1.0 when balanced)."""
    probs = decision.probs.reshape(-1, n_experts)
    frac = np.bincount(decision.expert.reshape(-1), minlength=n_experts) / probs.shape[0]
    return T.tsum(T.mean(probs, axis=0) * Tensor(frac.astype(probs.dtype))) * float(n_experts)


@dataclass
class RoutingStats:
    """Token counts per expert, per MoE layer, with a top-1 exclusivity check."""

    counts: dict = field(default_factory=dict)
    violations: int = 0

    def record(self, layer, expert, n_experts, executions=None):
        c = np.bincount(np.asarray(expert).reshape(-1), minlength=n_experts)
        prev = self.counts.get(layer)
        self.counts[layer] = c if prev is None else prev + c
        if executions is not None and not np.all(executions == 1):
            self.violations += int(np.sum(executions != 1))

    def fractions(self):
        return {k: (v / max(1, v.sum())).tolist() for k, v in sorted(self.counts.items())}

    def reset(self):
        self.counts.clear()
        self.violations = 0


class MoeFfn(Module):
    """``y = g * w_out[e*] . relu(w_in[e*] . x)`` with sparse dispatch: each expert runs only on its tokens."""

    def __init__(self, d_model, d_ff, n_experts, rng, init_std=0.02, dtype=np.float64,
                 convention="switch", name="ffn"):
        if n_experts < 1:
            raise ConfigError("MoE layer needs at least one expert")
        self._name = name
        self._convention = convention
        self._n_experts = n_experts
        self.router = normal_param(rng, (d_model, n_experts), init_std, dtype)
        self.w_in = [normal_param(rng, (d_model, d_ff), init_std, dtype) for _ in range(n_experts)]
        self.w_out = [normal_param(rng, (d_ff, d_model), init_std, dtype) for _ in range(n_experts)]
        self.last_decision = None
        self.last_executions = None

    def expert(self, e, x):
        return T.relu(x @ self.w_in[e]) @ self.w_out[e]

    def __call__(self, x, stats=None):
        if x.ndim != 2:
            raise DimensionError(f"MoeFfn expects [tokens, d_model], got {x.shape}")
        n = x.shape[0]
        dec = gate(x, self.router, self._convention)
        parts, rows_list = [], []
        executions = np.zeros(n, dtype=np.int64)
        for e in range(self._n_experts):
            rows = np.flatnonzero(dec.expert == e)
            if rows.size == 0:
                continue
            parts.append(self.expert(e, T.gather_rows(x, rows)))
            rows_list.append(rows)
            executions[rows] += 1
        self.last_decision = dec
        self.last_executions = executions
        if stats is not None:
            stats.record(self._name, dec.expert, self._n_experts, executions)
        if n == 0:
            return x * 0.0
        out = T.scatter_rows(parts, rows_list, n)
        return out * dec.weight.reshape(n, 1)


class MoeMsa(Module):
    """Self-attention whose q/k/v projections are chosen per head and per token by top-1 routers.

    Expert projection matrices are stored expert-major as ``[D, E*H*d_k]``;
    routers as ``[D, H*E]``.  All experts' projections are computed in one
    matmul and the routed one selected, so unselected experts get zero gradient.
    """

    def __init__(self, d_model, n_heads, n_experts, rng, init_std=0.02, dtype=np.float64,
                 convention="switch", name="msa"):
        if d_model % n_heads:
            raise ConfigError(f"d_model {d_model} not divisible by {n_heads} heads")
        if n_experts < 1:
            raise ConfigError("MoE layer needs at least one expert")
        self._name = name
        self._convention = convention
        self.n_heads = n_heads
        self.n_experts = n_experts
        self.d_k = d_model // n_heads
        width = n_experts * d_model
        self.w_q = normal_param(rng, (d_model, width), init_std, dtype)
        self.w_k = normal_param(rng, (d_model, width), init_std, dtype)
        self.w_v = normal_param(rng, (d_model, width), init_std, dtype)
        self.router_q = normal_param(rng, (d_model, n_heads * n_experts), init_std, dtype)
        self.router_k = normal_param(rng, (d_model, n_heads * n_experts), init_std, dtype)
        self.router_v = normal_param(rng, (d_model, n_heads * n_experts), init_std, dtype)
        self.w_o = normal_param(rng, (d_model, d_model), init_std, dtype)
        self.b_o = const_param((d_model,), 0.0, dtype)
        self.last_decisions = {}

    def _project(self, x2, w, router, tag, b, n, stats):
        t = x2.shape[0]
        h, e, dk = self.n_heads, self.n_experts, self.d_k
        dec = gate_from_logits((x2 @ router).reshape(t, h, e), self._convention)
        self.last_decisions[tag] = dec
        if stats is not None:
            stats.record(f"{self._name}.{tag}", dec.expert, e)
        allp = (x2 @ w).reshape(t, e, h, dk)
        sel = T.select_expert(allp, dec.expert) * dec.weight.reshape(t, h, 1)
        return sel.reshape(b, n, h, dk).transpose(0, 2, 1, 3)

    def __call__(self, x, mask, stats=None):
        b, n, d = x.shape
        mask = np.asarray(mask, dtype=bool)
        if not mask.any(axis=1).all():
            raise ContractError("attention over an empty set: a sequence has no valid positions")
        x2 = x.reshape(b * n, d)
        q = self._project(x2, self.w_q, self.router_q, "q", b, n, stats)
        k = self._project(x2, self.w_k, self.router_k, "k", b, n, stats)
        v = self._project(x2, self.w_v, self.router_v, "v", b, n, stats)
        bias = np.where(mask, 0.0, MASK_BIAS).astype(x.dtype)[:, None, None, :]
        scores = (q @ k.transpose(0, 1, 3, 2)) * (1.0 / np.sqrt(self.d_k)) + Tensor(bias)
        att = T.softmax(scores, axis=-1)
        ctx = (att @ v).transpose(0, 2, 1, 3).reshape(b * n, d)
        return (ctx @ self.w_o + self.b_o).reshape(b, n, d)


class LayerNorm(Module):
    def __init__(self, d_model, dtype=np.float64, eps=1e-5):
        self._eps = eps
        self.gain = const_param((d_model,), 1.0, dtype)
        self.bias = const_param((d_model,), 0.0, dtype)

    def __call__(self, x):
        return T.layer_norm(x, self.gain, self.bias, self._eps)


class MoeBlock(Module):
    """MoE-MSA then two MoE-FFN sublayers, each as ``LayerNorm(x + sublayer(x))``."""

    def __init__(self, d_model, d_ff, n_heads, n_experts, rng, init_std=0.02, dtype=np.float64,
                 convention="switch", ln_eps=1e-5, name="block"):
        self.msa = MoeMsa(d_model, n_heads, n_experts, rng, init_std, dtype, convention, f"{name}.msa")
        self.ln_msa = LayerNorm(d_model, dtype, ln_eps)
        self.ffn1 = MoeFfn(d_model, d_ff, n_experts, rng, init_std, dtype, convention, f"{name}.ffn1")
        self.ln_ffn1 = LayerNorm(d_model, dtype, ln_eps)
        self.ffn2 = MoeFfn(d_model, d_ff, n_experts, rng, init_std, dtype, convention, f"{name}.ffn2")
        self.ln_ffn2 = LayerNorm(d_model, dtype, ln_eps)

    def moe_layers(self):
        return [self.msa, self.ffn1, self.ffn2]

    def __call__(self, x, mask, stats=None):
        b, n, d = x.shape
        h = self.ln_msa(x + self.msa(x, mask, stats))
        h2 = h.reshape(b * n, d)
        h2 = self.ln_ffn1(h2 + self.ffn1(h2, stats))
        h2 = self.ln_ffn2(h2 + self.ffn2(h2, stats))
        return h2.reshape(b, n, d)


@dataclass
class EncoderConfig:
    d_model: int = 32
    d_ff: int = 64
    heads: int = 2
    blocks: int = 2
    experts: int = 4
    init_std: float = 0.02
    gate_convention: str = "switch"
    positional_encoding: bool = False
    max_len: int = 0
    ln_eps: float = 1e-5
    dtype: str = "float64"


class Encoder(Module):
    """Feature projection followed by ``blocks`` MoE transformer blocks; returns ``h_o``."""

    def __init__(self, schema, cfg, rng):
        if cfg.gate_convention not in GATE_CONVENTIONS:
            raise ConfigError(f"unknown gate convention {cfg.gate_convention!r}")
        dtype = np.dtype(cfg.dtype)
        self._cfg = cfg
        self.mfp = Mfp(schema, cfg.d_model, rng, cfg.init_std, dtype,
                       cfg.positional_encoding, cfg.max_len, cfg.ln_eps)
        self.blocks = [MoeBlock(cfg.d_model, cfg.d_ff, cfg.heads, cfg.experts, rng, cfg.init_std,
                                dtype, cfg.gate_convention, cfg.ln_eps, name=f"block{i}")
                       for i in range(cfg.blocks)]
        self.stats = RoutingStats()

    def moe_layers(self):
        return [layer for blk in self.blocks for layer in blk.moe_layers()]

    def decisions(self):
        """All gate decisions made by the most recent forward pass."""
        out = []
        for blk in self.blocks:
            out.extend(blk.msa.last_decisions.values())
            out.extend([blk.ffn1.last_decision, blk.ffn2.last_decision])
        return [d for d in out if d is not None]

    def aux_loss(self):
        """Mean balance loss over the MoE layers of the last forward pass."""
        decs = self.decisions()
        if not decs:
            return None
        total = None
        for d in decs:
            term = balance_loss(d, d.probs.shape[-1])
            total = term if total is None else total + term
        return total * (1.0 / len(decs))

    def __call__(self, batch, stats=None):
        stats = self.stats if stats is None else stats
        h = self.mfp(batch)
        for blk in self.blocks:
            h = blk(h, batch.mask, stats)
        return h
