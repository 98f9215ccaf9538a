"""Token assembly: one 3C-wide token per node and per directed edge.

A node token is the concatenation of three C-wide blocks: a projection of
its sampled visual feature and positional code, a projection of its link
marker paired with itself, and the learnable node-kind marker.  An edge
token pairs the markers of its two endpoints and appends the edge-kind
marker instead.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .config import ModelConfig
from .errors import ShapeError
from .features import bilinear_sample, edge_midpoints, sinusoidal_position_codes
from .graphs import CellGraph, LinkMarkers
from .tensor import Tensor


@dataclass
class TokenSet:
    """n node tokens and D edge tokens, each 3C wide; row order matches the
    node order and the graph's edge_list order."""

    node_tokens: Tensor  # (n, 3C)
    edge_tokens: Tensor  # (D, 3C)

    @property
    def width(self) -> int:
        return self.node_tokens.data.shape[1]


def init_tokenizer(cfg: ModelConfig, rng: np.random.Generator) -> dict[str, Tensor]:
    c, cl = cfg.width, cfg.link_dim

    def lin(name, cin, cout):
        bound = 1.0 / np.sqrt(cin)
        params[f"{name}.w"] = Tensor(rng.uniform(-bound, bound, (cin, cout)), requires_grad=True)
        params[f"{name}.b"] = Tensor(rng.uniform(-bound, bound, (cout,)), requires_grad=True)

    params: dict[str, Tensor] = {}
    lin("tok.node_proj", 2 * c, c)  # visual feature + positional code
    lin("tok.edge_proj", c, c)  # midpoint visual feature
    lin("tok.link_proj", 2 * cl, c)  # marker pair
    params["tok.node_marker"] = Tensor(rng.normal(0.0, cfg.marker_init_sd, (1, c)), requires_grad=True)
    params["tok.edge_marker"] = Tensor(rng.normal(0.0, cfg.marker_init_sd, (1, c)), requires_grad=True)
    return params


def tokenize(
    g: CellGraph,
    fmap: Tensor,
    lm: LinkMarkers,
    params: dict[str, Tensor],
    cfg: ModelConfig,
) -> TokenSet:
    """Assemble the token set for one image-graph pair."""
    c = cfg.width
    if lm.markers.shape != (g.n, cfg.link_dim):
        raise ShapeError(
            f"marker matrix {lm.markers.shape} does not match n={g.n}, link_dim={cfg.link_dim}"
        )

    z_nodes = bilinear_sample(fmap, g.centroids)
    codes = sinusoidal_position_codes(g.centroids, c)
    vis = T.linear(T.concat([z_nodes, Tensor(codes)], axis=1), params["tok.node_proj.w"], params["tok.node_proj.b"])
    self_pair = np.concatenate([lm.markers, lm.markers], axis=1)
    links = T.linear(Tensor(self_pair), params["tok.link_proj.w"], params["tok.link_proj.b"])
    node_tokens = T.concat([vis, links, T.tile_rows(params["tok.node_marker"], g.n)], axis=1)

    d = g.num_edges
    if d == 0:
        edge_tokens = Tensor(np.zeros((0, 3 * c)))
    else:
        z_edges = bilinear_sample(fmap, edge_midpoints(g.centroids, g.edge_list))
        evis = T.linear(z_edges, params["tok.edge_proj.w"], params["tok.edge_proj.b"])
        pair = np.concatenate(
            [lm.markers[g.edge_list[:, 0]], lm.markers[g.edge_list[:, 1]]], axis=1
        )
        elinks = T.linear(Tensor(pair), params["tok.link_proj.w"], params["tok.link_proj.b"])
        edge_tokens = T.concat([evis, elinks, T.tile_rows(params["tok.edge_marker"], d)], axis=1)

    return TokenSet(node_tokens=node_tokens, edge_tokens=edge_tokens)
