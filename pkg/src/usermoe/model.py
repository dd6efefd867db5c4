"""Encoder plus the heads used by both training stages.

Masked-channel heads map encoder states to token logits for the pre-training
objective; towers are per-task linear layers (no activation) applied to the
pooled user representation during fine-tuning.
"""

import numpy as np

from . import tensor as T
from .errors import ConfigError
from .module import Module, const_param, normal_param
from .moe import Encoder

POOLINGS = ("max", "mean")


class Linear(Module):
    def __init__(self, d_in, d_out, rng, init_std=0.02, dtype=np.float64):
        self.w = normal_param(rng, (d_in, d_out), init_std, dtype)
        self.b = const_param((d_out,), 0.0, dtype)

    def __call__(self, x):
        return x @ self.w + self.b


class UserModel(Module):

    def __init__(self, schema, cfg, rng, pooling="max"):
        if pooling not in POOLINGS:
            raise ConfigError(f"unknown pooling {pooling!r}")
        dtype = np.dtype(cfg.dtype)
        self._schema = schema
        self._cfg = cfg
        self._pooling = pooling
        self.encoder = Encoder(schema, cfg, rng)
        self.mcp_heads = {c.name: Linear(cfg.d_model, c.vocab_size, rng, cfg.init_std, dtype)
                          for c in schema.mcp_channels}
        self.towers = {t.name: Linear(cfg.d_model, 1, rng, cfg.init_std, dtype)
                       for t in schema.tasks}

    @property
    def schema(self):
        return self._schema

    @property
    def config(self):
        return self._cfg

    def encode(self, batch):
        return self.encoder(batch)

    def pool(self, h, mask):
        """User representation from ``h_o``: max (or mean) over the valid time steps."""
        if self._pooling == "max":
            return T.max_pool_over_time(h, mask)
        return T.mean_pool_over_time(h, mask)

    def embed(self, batch):
        return self.pool(self.encode(batch), batch.mask)

    def towers_from_embedding(self, emb):
        b = emb.shape[0]
        return {name: tower(emb).reshape(b) for name, tower in self.towers.items()}

    def forward_tasks(self, batch):
        """Raw per-task scores ``Tower_k(pool(h_o))``, shape ``[B]`` each."""
        return self.towers_from_embedding(self.embed(batch))

    def mcp_logits(self, h, channel, flat_positions):
        """Token logits ``[n, V]`` for the given flat (``b * N + t``) positions."""
        b, n, d = h.shape
        rows = T.gather_rows(h.reshape(b * n, d), flat_positions)
        return self.mcp_heads[channel](rows)

    def encoder_parameters(self):
        return self.encoder.parameters()

    def head_parameters(self):
        return [p for head in self.mcp_heads.values() for p in head.parameters()]

    def tower_parameters(self):
        return [p for tower in self.towers.values() for p in tower.parameters()]
