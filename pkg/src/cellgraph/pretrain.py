"""Topology-guided pretraining of the feature extractor.

A two-layer message-passing classifier over the fixed cell graph replaces
the transformer during pretraining: messages flow only along stored edges,
are softmax-weighted per receiving node, and the update is a two-layer MLP
with a residual.  Instance classification shares the focal+CE loss used by
the main model; two coarse pixel losses (Dice and cross-entropy on the
stride-4 semantic mask) regularize the extractor.  Only the extractor
weights survive pretraining; the GCN head and its input projections are
discarded.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .config import ModelConfig, TrainConfig
from .errors import ContractError
from .features import bilinear_sample, edge_midpoints, extract, sinusoidal_position_codes
from .graphs import build_knn_graph
from .tensor import Tape, Tensor
from .transformer import PROB_FLOOR, node_loss

MESSAGE_EPS = 1e-7  # keeps aggregated messages strictly positive


def init_gcn(cfg: ModelConfig, rng: np.random.Generator) -> dict[str, Tensor]:
    c, b = cfg.width, cfg.num_classes

    def lin(name, cin, cout):
        bound = 1.0 / np.sqrt(cin)
        params[f"{name}.w"] = Tensor(rng.uniform(-bound, bound, (cin, cout)), requires_grad=True)
        params[f"{name}.b"] = Tensor(rng.uniform(-bound, bound, (cout,)), requires_grad=True)

    params: dict[str, Tensor] = {}
    lin("gcn.node_in", 2 * c, c)
    lin("gcn.edge_in", c, c)
    for layer in range(2):
        lin(f"gcn.{layer}.mlp1", c, c)
        lin(f"gcn.{layer}.mlp2", c, c)
    lin("gcn.cls", c, b)
    return params


def _aggregate(msg: Tensor, receivers: np.ndarray, n: int, weights_out=None):
    """Softmax-weighted per-node aggregation of incoming messages.

    When every node receives the same contiguous block of messages (the
    k-NN layout) the whole thing reduces to one reshaped softmax; arbitrary
    edge lists fall back to a per-node loop.
    """
    d, c = msg.data.shape
    if d % n == 0 and np.array_equal(receivers, np.repeat(np.arange(n), d // n)):
        k = d // n
        m3 = T.reshape(msg, (n, k, c))
        wgt = T.softmax(m3, axis=1)
        if weights_out is not None:
            weights_out.extend(wgt.data[i] for i in range(n))
        return T.reshape(T.reduce_sum(T.mul(wgt, m3), axis=1), (n, c))

    rows = []
    for i in range(n):
        idx = np.flatnonzero(receivers == i)
        if idx.size == 0:
            rows.append(Tensor(np.zeros((1, c))))
            if weights_out is not None:
                weights_out.append(np.zeros((0, c)))
            continue
        block = T.take_rows(msg, idx)
        wgt = T.softmax(block, axis=0)
        if weights_out is not None:
            weights_out.append(wgt.data)
        rows.append(T.reduce_sum(T.mul(wgt, block), axis=0, keepdims=True))
    return T.concat(rows, axis=0)


def gcn_forward(
    node_feats: Tensor,
    edge_feats: Tensor,
    edge_list: np.ndarray,
    params: dict[str, Tensor],
    return_weights: bool = False,
):
    """Two rounds of message passing, then a linear classifier.

    Edge (i, j) carries the features of node j into node i; reverse flow
    happens only through the reverse edge when it is stored too.
    """
    n = node_feats.data.shape[0]
    edge_list = np.asarray(edge_list, dtype=np.intp).reshape(-1, 2)
    if edge_list.size and (edge_list.min() < 0 or edge_list.max() >= n):
        raise ContractError(f"edge list references nodes outside 0..{n - 1}")
    if edge_list.shape[0] != edge_feats.data.shape[0]:
        raise ContractError("edge features must align with the edge list")

    receivers, senders = edge_list[:, 0], edge_list[:, 1]
    x = node_feats
    all_weights: list[list[np.ndarray]] = []
    for layer in range(2):
        if edge_list.shape[0]:
            sent = T.take_rows(x, senders)
            msg = T.add(T.relu(T.add(sent, edge_feats)), MESSAGE_EPS)
            collected: list[np.ndarray] | None = [] if return_weights else None
            agg = _aggregate(msg, receivers, n, collected)
            if return_weights:
                all_weights.append(collected)
        else:
            agg = Tensor(np.zeros_like(x.data))
            if return_weights:
                all_weights.append([np.zeros((0, x.data.shape[1]))] * n)
        u = T.add(x, agg)
        h = T.relu(T.linear(u, params[f"gcn.{layer}.mlp1.w"], params[f"gcn.{layer}.mlp1.b"]))
        h = T.linear(h, params[f"gcn.{layer}.mlp2.w"], params[f"gcn.{layer}.mlp2.b"])
        x = T.add(u, h)

    logits = T.linear(x, params["gcn.cls.w"], params["gcn.cls.b"])
    if return_weights:
        return x, logits, all_weights
    return x, logits


# ---------------------------------------------------------------------------
# pixel-level auxiliary losses


def dice_loss(probs: Tensor, target_onehot: np.ndarray, smooth: float = 1.0) -> Tensor:
    """1 - mean over classes of (2*intersection + s) / (sum p + sum t + s)."""
    c = probs.data.shape[0]
    t = np.asarray(target_onehot, dtype=np.float64).reshape(c, -1)
    p = T.reshape(probs, (c, -1))
    inter = T.reduce_sum(T.mul(p, t), axis=1)
    psum = T.reduce_sum(p, axis=1)
    num = T.add(T.mul(inter, 2.0), smooth)
    den = T.add(psum, t.sum(axis=1) + smooth)
    return T.sub(1.0, T.reduce_mean(T.div(num, den)))


def pixel_cross_entropy(seg_logits: Tensor, mask: np.ndarray) -> Tensor:
    """Mean per-pixel cross-entropy of the stride-4 semantic logits."""
    c = seg_logits.data.shape[0]
    flat = np.asarray(mask).reshape(-1)
    onehot = np.zeros((flat.size, c), dtype=np.float64)
    onehot[np.arange(flat.size), flat] = 1.0
    probs = T.softmax_rows(T.transpose(T.reshape(seg_logits, (c, -1))))
    logp = T.log(T.clamp_min(probs, PROB_FLOOR))
    return T.neg(T.reduce_mean(T.reduce_sum(T.mul(logp, onehot), axis=1)))


@dataclass
class PretrainLosses:
    instance_cls: float
    dice: float
    pixel_ce: float
    total: float


def pretrain_forward(sample, params: dict[str, Tensor], tcfg: TrainConfig, class_weights: np.ndarray):
    """Losses for one sample; returns (total loss Tensor, PretrainLosses)."""
    cfg = tcfg.model
    fmap, seg_logits = extract(Tensor(sample.image), params, cfg)
    g = build_knn_graph(sample.centroids, tcfg.gcn_edges)

    z = bilinear_sample(fmap, g.centroids)
    codes = sinusoidal_position_codes(g.centroids, cfg.width)
    nodes = T.linear(T.concat([z, Tensor(codes)], axis=1), params["gcn.node_in.w"], params["gcn.node_in.b"])
    if g.num_edges:
        ze = bilinear_sample(fmap, edge_midpoints(g.centroids, g.edge_list))
        edges = T.linear(ze, params["gcn.edge_in.w"], params["gcn.edge_in.b"])
    else:
        edges = Tensor(np.zeros((0, cfg.width)))
    _, logits = gcn_forward(nodes, edges, g.edge_list, params)

    onehot = np.zeros((g.n, cfg.num_classes), dtype=np.float64)
    onehot[np.arange(g.n), sample.labels] = 1.0
    instance = node_loss(T.softmax_rows(logits), onehot, class_weights, cfg.focal_gamma)

    mask_onehot = np.zeros((cfg.num_classes + 1,) + sample.mask.shape, dtype=np.float64)
    for b in range(cfg.num_classes + 1):
        mask_onehot[b] = sample.mask == b
    seg_probs = T.reshape(
        T.transpose(T.softmax_rows(T.transpose(T.reshape(seg_logits, (cfg.num_classes + 1, -1))))),
        seg_logits.data.shape,
    )
    dice = dice_loss(seg_probs, mask_onehot)
    pce = pixel_cross_entropy(seg_logits, sample.mask)

    total = T.add(instance, T.add(T.mul(dice, tcfg.dice_weight), T.mul(pce, tcfg.pixel_ce_weight)))
    report = PretrainLosses(
        instance_cls=instance.item(), dice=dice.item(), pixel_ce=pce.item(), total=total.item()
    )
    return total, report


def pretrain_step(sample, params: dict[str, Tensor], tcfg: TrainConfig, class_weights: np.ndarray) -> PretrainLosses:
    """Forward + backward for one sample; gradients accumulate into params."""
    with Tape() as tape:
        total, report = pretrain_forward(sample, params, tcfg, class_weights)
        tape.backward(total)
    return report
