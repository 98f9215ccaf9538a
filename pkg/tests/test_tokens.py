"""Token assembly: counts, widths, marker blocks, and a naive re-assembly
oracle."""

import numpy as np
import pytest

from cellgraph import tensor as T
from cellgraph.config import ModelConfig
from cellgraph.features import bilinear_sample, edge_midpoints, sinusoidal_position_codes
from cellgraph.graphs import build_knn_graph, link_markers, normalized_laplacian
from cellgraph.tensor import Tensor
from cellgraph.tokens import init_tokenizer, tokenize

from helpers import spot_check_gradients


def make_inputs(rng, n_points, cfg, k=None):
    pts = rng.uniform(4, 28, (n_points, 2))
    g = build_knn_graph(pts, k or cfg.knn)
    lm = link_markers(normalized_laplacian(g), cfg.link_dim)
    fmap = Tensor(rng.standard_normal((cfg.width, 8, 8)), requires_grad=True)
    params = init_tokenizer(cfg, rng)
    return g, lm, fmap, params


def naive_tokens(g, fmap, lm, params, cfg):
    """Independent re-assembly: per node/edge, plain numpy affine maps and
    concatenation."""

    def affine(vec, name):
        return vec @ params[f"{name}.w"].data + params[f"{name}.b"].data

    node_rows = []
    for i in range(g.n):
        z = bilinear_sample(fmap, [g.centroids[i]]).data[0]
        rho = sinusoidal_position_codes([g.centroids[i]], cfg.width)[0]
        block1 = affine(np.concatenate([z, rho]), "tok.node_proj")
        block2 = affine(np.concatenate([lm.markers[i], lm.markers[i]]), "tok.link_proj")
        node_rows.append(np.concatenate([block1, block2, params["tok.node_marker"].data[0]]))
    edge_rows = []
    for i, j in g.edge_list:
        mid = 0.5 * (g.centroids[i] + g.centroids[j])
        z = bilinear_sample(fmap, [mid]).data[0]
        block1 = affine(z, "tok.edge_proj")
        block2 = affine(np.concatenate([lm.markers[i], lm.markers[j]]), "tok.link_proj")
        edge_rows.append(np.concatenate([block1, block2, params["tok.edge_marker"].data[0]]))
    return np.array(node_rows), np.array(edge_rows).reshape(len(edge_rows), -1)


class TestTokenize:
    def test_counts_and_width(self):
        rng = np.random.default_rng(0)
        cfg = ModelConfig(width=16, link_dim=4, knn=3)
        g, lm, fmap, params = make_inputs(rng, 12, cfg)
        toks = tokenize(g, fmap, lm, params, cfg)
        assert toks.node_tokens.data.shape == (12, 48)
        assert toks.edge_tokens.data.shape == (36, 48)
        assert toks.width == 3 * cfg.width

    def test_single_node_degenerate(self):
        rng = np.random.default_rng(1)
        cfg = ModelConfig(width=16, link_dim=4)
        g, lm, fmap, params = make_inputs(rng, 1, cfg)
        toks = tokenize(g, fmap, lm, params, cfg)
        assert toks.node_tokens.data.shape == (1, 48)
        assert toks.edge_tokens.data.shape == (0, 48)

    def test_marker_blocks_are_constant(self):
        rng = np.random.default_rng(2)
        cfg = ModelConfig(width=16, link_dim=4, knn=2)
        g, lm, fmap, params = make_inputs(rng, 9, cfg)
        toks = tokenize(g, fmap, lm, params, cfg)
        c = cfg.width
        node_block = toks.node_tokens.data[:, 2 * c :]
        edge_block = toks.edge_tokens.data[:, 2 * c :]
        np.testing.assert_array_equal(node_block, np.repeat(params["tok.node_marker"].data, 9, 0))
        np.testing.assert_array_equal(edge_block, np.repeat(params["tok.edge_marker"].data, g.num_edges, 0))

    def test_zero_map_makes_first_block_position_only(self):
        rng = np.random.default_rng(3)
        cfg = ModelConfig(width=16, link_dim=4)
        g, lm, _, params = make_inputs(rng, 5, cfg)
        params["tok.node_proj.b"] = Tensor(np.zeros(cfg.width), requires_grad=True)
        fmap = Tensor(np.zeros((cfg.width, 8, 8)))
        toks = tokenize(g, fmap, lm, params, cfg)
        codes = sinusoidal_position_codes(g.centroids, cfg.width)
        w = params["tok.node_proj.w"].data
        expected = np.concatenate([np.zeros((5, cfg.width)), codes], axis=1) @ w
        np.testing.assert_allclose(toks.node_tokens.data[:, : cfg.width], expected, atol=1e-12)

    def test_identity_link_projection_exposes_marker_pair(self):
        # with link_dim = width//2 and the link projection pinned to the
        # identity, the middle block of an edge token is exactly (m_i, m_j)
        rng = np.random.default_rng(4)
        cfg = ModelConfig(width=16, link_dim=8, knn=1)
        g, lm, fmap, params = make_inputs(rng, 2, cfg)
        params["tok.link_proj.w"] = Tensor(np.eye(16), requires_grad=True)
        params["tok.link_proj.b"] = Tensor(np.zeros(16), requires_grad=True)
        toks = tokenize(g, fmap, lm, params, cfg)
        i, j = g.edge_list[0]
        middle = toks.edge_tokens.data[0, 16:32]
        np.testing.assert_allclose(middle, np.concatenate([lm.markers[i], lm.markers[j]]), atol=1e-12)

    def test_naive_assembly_oracle(self):
        for seed in range(4):
            rng = np.random.default_rng(seed)
            cfg = ModelConfig(width=16, link_dim=4, knn=3)
            g, lm, fmap, params = make_inputs(rng, 7 + seed, cfg)
            toks = tokenize(g, fmap, lm, params, cfg)
            nodes, edges = naive_tokens(g, fmap, lm, params, cfg)
            np.testing.assert_allclose(toks.node_tokens.data, nodes, atol=1e-10)
            np.testing.assert_allclose(toks.edge_tokens.data, edges, atol=1e-10)

    def test_gradients_flow_to_map_and_all_parameters(self):
        rng = np.random.default_rng(5)
        cfg = ModelConfig(width=16, link_dim=4, knn=2)
        g, lm, fmap, params = make_inputs(rng, 5, cfg)

        def build():
            toks = tokenize(g, fmap, lm, params, cfg)
            both = T.concat([toks.node_tokens, toks.edge_tokens], axis=0)
            w = np.sin(np.arange(both.data.size)).reshape(both.data.shape)
            return T.reduce_sum(T.mul(both, w))

        targets = [fmap] + [params[k] for k in sorted(params)]
        spot_check_gradients(build, targets, rng, entries_per_param=3)
