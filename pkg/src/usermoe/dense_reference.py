"""Plain-numpy dense transformer used as an oracle for one-expert encoders.

No routing and no autodiff: a standard post-norm transformer whose
attention projections and feed-forward weights are read straight from an
encoder built with ``experts=1``.
"""

import numpy as np

from .errors import ConfigError
from .moe import MASK_BIAS
from .tensor import no_grad


def _layer_norm(x, gain, bias, eps):
    scale = 1.0 / x.shape[-1]
    mu = x.sum(axis=-1, keepdims=True) * scale
    c = x - mu
    var = (c * c).sum(axis=-1, keepdims=True) * scale
    return c * (1.0 / np.sqrt(var + eps)) * gain + bias


def _softmax(x):
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def _attention(x, mask, msa):
    b, n, d = x.shape
    h, dk = msa.n_heads, msa.d_k
    x2 = x.reshape(b * n, d)

    def heads(w):
        return (x2 @ w.data).reshape(b, n, h, dk).transpose(0, 2, 1, 3)

    q, k, v = heads(msa.w_q), heads(msa.w_k), heads(msa.w_v)
    bias = np.where(mask, 0.0, MASK_BIAS).astype(x.dtype)[:, None, None, :]
    att = _softmax((q @ k.transpose(0, 1, 3, 2)) * (1.0 / np.sqrt(dk)) + bias)
    ctx = (att @ v).transpose(0, 2, 1, 3).reshape(b * n, d)
    return (ctx @ msa.w_o.data + msa.b_o.data).reshape(b, n, d)


def _ffn(x2, ffn):
    return np.maximum(x2 @ ffn.w_in[0].data, 0.0) @ ffn.w_out[0].data


def dense_forward(encoder, batch):
    if any(layer.n_experts != 1 for layer in encoder.moe_layers() if hasattr(layer, "n_experts")) \
            or any(len(layer.w_in) != 1 for layer in encoder.moe_layers() if hasattr(layer, "w_in")):
        raise ConfigError("dense reference requires a one-expert encoder")
    eps = encoder._cfg.ln_eps
    with no_grad():
        x = encoder.mfp(batch).data
    mask = np.asarray(batch.mask, dtype=bool)
    for blk in encoder.blocks:
        b, n, d = x.shape
        x = _layer_norm(x + _attention(x, mask, blk.msa), blk.ln_msa.gain.data, blk.ln_msa.bias.data, eps)
        x2 = x.reshape(b * n, d)
        x2 = _layer_norm(x2 + _ffn(x2, blk.ffn1), blk.ln_ffn1.gain.data, blk.ln_ffn1.bias.data, eps)
        x2 = _layer_norm(x2 + _ffn(x2, blk.ffn2), blk.ln_ffn2.gain.data, blk.ln_ffn2.bias.data, eps)
        x = x2.reshape(b, n, d)
    return x
