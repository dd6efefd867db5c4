"""Multi-channel feature projection.

Per position the layer concatenates category-channel embeddings, embeddings
from the (row-sharded) id-channel tables and the raw dense values, maps the
concatenation to the model width with a learned linear layer, then applies
layer normalisation and ReLU.
"""

import math

import numpy as np

from . import tensor as T
from .errors import ContractError
from .module import Module, const_param, normal_param
from .tensor import Tensor


def split_table(table, num_shards):
    """Cut a ``[V, d]`` array into contiguous row blocks of ``ceil(V / num_shards)`` rows."""
    rows = T.shard_rows(table.shape[0], num_shards)
    return [table[s * rows:(s + 1) * rows] for s in range(num_shards)]


def shard_ranges(vocab_size, num_shards):
    rows = T.shard_rows(vocab_size, num_shards)
    return [(s * rows, min((s + 1) * rows, vocab_size)) for s in range(num_shards)]


def locate(token, vocab_size, num_shards):
    """(shard, local row) owning ``token``."""
    rows = T.shard_rows(vocab_size, num_shards)
    return token // rows, token % rows


class Mfp(Module):

    def __init__(self, schema, d_model, rng, init_std=0.02, dtype=np.float64,
                 positional=False, max_len=0, ln_eps=1e-5):
        self._schema = schema
        self._ln_eps = ln_eps
        self.tables = {}
        width = 0
        for spec in schema.channels:
            if spec.kind == "dense":
                width += 1
                continue
            bound = 1.0 / math.sqrt(spec.embed_dim)
            full = rng.uniform(-bound, bound, size=(spec.vocab_size, spec.embed_dim)).astype(dtype)
            if spec.kind == "id":
                self.tables[spec.name] = [Tensor(part.copy(), requires_grad=True)
                                          for part in split_table(full, spec.num_shards)]
            else:
                self.tables[spec.name] = Tensor(full, requires_grad=True)
            width += spec.embed_dim
        if width == 0:
            raise ContractError("feature projection needs at least one channel")
        self.concat_dim = width
        self.proj_w = normal_param(rng, (width, d_model), init_std, dtype)
        self.proj_b = const_param((d_model,), 0.0, dtype)
        if positional:
            if max_len <= 0:
                raise ContractError("positional encoding needs max_len > 0")
            self.positions = normal_param(rng, (max_len, d_model), init_std, dtype)
        self.ln_gain = const_param((d_model,), 1.0, dtype)
        self.ln_bias = const_param((d_model,), 0.0, dtype)

    def lookup(self, spec, ids):
        table = self.tables[spec.name]
        if spec.kind == "id":
            return T.sharded_lookup(table, ids, spec.vocab_size, channel=spec.name)
        return T.embedding_lookup(table, ids, channel=spec.name)

    def concat_features(self, batch):
        """Pre-projection features ``[B, N, concat_dim]`` and each channel's slice."""
        parts, slices = [], {}
        offset = 0
        dtype = self.proj_w.dtype
        for spec in self._schema.channels:
            values = batch.tokens[spec.name]
            if spec.kind == "dense":
                part = Tensor(np.asarray(values, dtype=dtype)[..., None])
            else:
                part = self.lookup(spec, values)
            parts.append(part)
            width = part.shape[-1]
            slices[spec.name] = slice(offset, offset + width)
            offset += width
        return T.concat(parts, axis=-1), slices

    def __call__(self, batch):
        feats, _ = self.concat_features(batch)
        h = feats @ self.proj_w + self.proj_b
        if hasattr(self, "positions"):
            n = h.shape[1]
            if n > self.positions.shape[0]:
                raise ContractError(f"sequence length {n} exceeds positional table")
            h = h + self.positions[:n]
        return T.relu(T.layer_norm(h, self.ln_gain, self.ln_bias, self._ln_eps))
