"""Transformer encoder over the combined node+edge token sequence, the
node classification head, and the class-weighted focal cross-entropy loss.

Layers are pre-norm: x + MHSA(LN(x)) then x + FFN(LN(x)).  No positional
information is added inside the encoder (it already lives in the tokens),
so the encoder is permutation-equivariant over its input rows.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .config import ModelConfig
from .errors import ContractError
from .tensor import Tensor
from .tokens import TokenSet

PROB_FLOOR = 1e-12  # clamp applied to probabilities before log


def init_encoder(cfg: ModelConfig, rng: np.random.Generator) -> dict[str, Tensor]:
    c = cfg.width
    hidden = cfg.ffn_mult * c

    def lin(name, cin, cout):
        bound = 1.0 / np.sqrt(cin)
        params[f"{name}.w"] = Tensor(rng.uniform(-bound, bound, (cin, cout)), requires_grad=True)
        params[f"{name}.b"] = Tensor(rng.uniform(-bound, bound, (cout,)), requires_grad=True)

    params: dict[str, Tensor] = {}
    lin("enc.input", 3 * c, c)
    for layer in range(cfg.encoder_layers):
        p = f"enc.{layer}"
        for part in ("wq", "wk", "wv", "wo"):
            lin(f"{p}.{part}", c, c)
        lin(f"{p}.ffn1", c, hidden)
        lin(f"{p}.ffn2", hidden, c)
        for norm in ("ln1", "ln2"):
            params[f"{p}.{norm}.g"] = Tensor(np.ones(c), requires_grad=True)
            params[f"{p}.{norm}.b"] = Tensor(np.zeros(c), requires_grad=True)
    return params


def init_head(cfg: ModelConfig, rng: np.random.Generator) -> dict[str, Tensor]:
    c, b = cfg.width, cfg.num_classes
    bound = 1.0 / np.sqrt(c)
    return {
        "head.w": Tensor(rng.uniform(-bound, bound, (c, b)), requires_grad=True),
        "head.b": Tensor(rng.uniform(-bound, bound, (b,)), requires_grad=True),
    }


def encode(
    tokens: TokenSet,
    params: dict[str, Tensor],
    cfg: ModelConfig,
    return_attention: bool = False,
):
    """Dense self-attention over all n + D tokens, no masking.

    Returns the (n+D, C) output, plus per-layer lists of per-head
    attention matrices when requested.
    """
    if tokens.edge_tokens.data.shape[0]:
        x = T.concat([tokens.node_tokens, tokens.edge_tokens], axis=0)
    else:
        x = tokens.node_tokens
    x = T.linear(x, params["enc.input.w"], params["enc.input.b"])

    c = cfg.width
    dh = c // cfg.heads
    scale = 1.0 / np.sqrt(dh)
    attention_maps: list[list[np.ndarray]] = []

    t = x.data.shape[0]
    for layer in range(cfg.encoder_layers):
        p = f"enc.{layer}"
        h = T.layer_norm(x, params[f"{p}.ln1.g"], params[f"{p}.ln1.b"], cfg.ln_eps)
        # Column block hd*dh:(hd+1)*dh of each projection is head hd; the
        # reshape+permute below computes all heads in one batched product.
        q = T.linear(h, params[f"{p}.wq.w"], params[f"{p}.wq.b"])
        kk = T.linear(h, params[f"{p}.wk.w"], params[f"{p}.wk.b"])
        v = T.linear(h, params[f"{p}.wv.w"], params[f"{p}.wv.b"])
        q3 = T.permute(T.reshape(q, (t, cfg.heads, dh)), (1, 0, 2))
        k3 = T.permute(T.reshape(kk, (t, cfg.heads, dh)), (1, 2, 0))
        v3 = T.permute(T.reshape(v, (t, cfg.heads, dh)), (1, 0, 2))
        attn = T.softmax(T.mul(T.bmm(q3, k3), scale), axis=-1)  # (heads, t, t)
        if return_attention:
            attention_maps.append([attn.data[hd].copy() for hd in range(cfg.heads)])
        mixed = T.reshape(T.permute(T.bmm(attn, v3), (1, 0, 2)), (t, c))
        x = T.add(x, T.linear(mixed, params[f"{p}.wo.w"], params[f"{p}.wo.b"]))

        h2 = T.layer_norm(x, params[f"{p}.ln2.g"], params[f"{p}.ln2.b"], cfg.ln_eps)
        ffn = T.linear(T.relu(T.linear(h2, params[f"{p}.ffn1.w"], params[f"{p}.ffn1.b"])),
                       params[f"{p}.ffn2.w"], params[f"{p}.ffn2.b"])
        x = T.add(x, ffn)

    if return_attention:
        return x, attention_maps
    return x


def classify(encoded: Tensor, n: int, params: dict[str, Tensor]) -> Tensor:
    """Class posteriors for the first n rows (the node tokens); edge rows
    are discarded."""
    if encoded.data.shape[0] < n:
        raise ContractError(f"need at least {n} encoded rows, got {encoded.data.shape[0]}")
    nodes = T.narrow(encoded, 0, 0, n)
    return T.softmax_rows(T.linear(nodes, params["head.w"], params["head.b"]))


def node_loss(probs: Tensor, onehot: np.ndarray, class_weights: np.ndarray, gamma: float) -> Tensor:
    """Mean over nodes of CE plus a class-weighted focal term:

        -sum_b y_b log p_b  -  sum_b w_b (1 - p_b)^gamma y_b log p_b

    ``onehot`` must be exactly one-hot per row; probabilities are clamped
    to [1e-12, 1] before the log.
    """
    y = np.asarray(onehot, dtype=np.float64)
    if y.shape != probs.data.shape:
        raise ContractError(f"label shape {y.shape} != probability shape {probs.data.shape}")
    if not (np.all((y == 0.0) | (y == 1.0)) and np.all(y.sum(axis=1) == 1.0)):
        raise ContractError("labels must be one-hot rows")
    w = np.asarray(class_weights, dtype=np.float64).reshape(1, -1)

    logp = T.log(T.clamp_min(probs, PROB_FLOOR))
    focal = T.mul(w, T.power(T.sub(1.0, probs), gamma))
    per_elem = T.mul(T.mul(T.add(1.0, focal), y), logp)
    return T.neg(T.reduce_mean(T.reduce_sum(per_elem, axis=1)))


def class_weights_from_counts(counts: np.ndarray) -> np.ndarray:
    """Reciprocal-frequency weights scaled so the smallest weight is 1.

    Classes absent from the split get the count floor 1 so the weights
    stay finite.
    """
    counts = np.maximum(np.asarray(counts, dtype=np.float64), 1.0)
    inv = 1.0 / (counts / counts.sum())
    return inv / inv.min()
