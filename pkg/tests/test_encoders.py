import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from biclkt import encoders as enc
from biclkt import numerics as nx
from biclkt.augmentation import identity_view, make_view
from biclkt.encoders import EncoderConfig
from biclkt.graph import InfluenceGraph, normalize_adjacency_matrix

CFG = EncoderConfig(d_in=5, hidden=(4, 3), d=6, d_z=2)


def random_graph(n, seed):
    rng = np.random.default_rng(seed)
    edges = [(i, j, float(rng.uniform(0.1, 1))) for i in range(n) for j in range(n)
             if i != j and rng.random() < 0.4]
    return InfluenceGraph("c", tuple(f"e{k}" for k in range(n)), edges)


def setup(n=6, seed=0, cfg=CFG):
    g = random_graph(n, seed)
    params = enc.init_encoder(n, cfg, np.random.default_rng(seed))
    return g, params, {e: k for k, e in enumerate(g.nodes)}


def test_gc_layer_zero_weight():
    out = enc.gc_layer(np.ones((3, 2)), np.eye(3), np.zeros((2, 4)))
    assert np.array_equal(out.value, np.zeros((3, 4)))


def test_gc_layer_single_node_is_dense_layer():
    x, w = np.array([[1.0, -2.0]]), np.array([[0.5, -1.0], [0.25, 1.0]])
    assert np.array_equal(enc.gc_layer(x, [[1.0]], w).value, np.maximum(x @ w, 0))


def test_gc_layer_matches_dense_triple_product():
    g, _, _ = setup()
    a = normalize_adjacency_matrix(g.adjacency)
    rng = np.random.default_rng(1)
    x, w = rng.normal(size=(6, 5)), rng.normal(size=(5, 4))
    want = np.zeros((6, 4))
    for i in range(6):
        for j in range(6):
            for k in range(4):
                want[i, k] += a[i, j] * sum(x[j, m] * w[m, k] for m in range(5))
    assert np.max(np.abs(enc.gc_layer(x, a, w).value - np.maximum(want, 0))) < 1e-12


def test_gc_layer_shape_error():
    with pytest.raises(nx.DimensionError):
        enc.gc_layer(np.ones((3, 2)), np.eye(4), np.ones((2, 2)))


def test_encode_nodes_is_two_gc_layers_plus_concat():
    g, p, index = setup()
    view = identity_view(g, CFG.d_in)
    layers, h = enc.encode_nodes(view, p, CFG, index)
    x1 = enc.gc_layer(p["X0"].value, view.adjacency, p["gc0"].value)
    x2 = enc.gc_layer(x1, view.adjacency, p["gc1"].value)
    want = np.concatenate([x1.value, x2.value], axis=1) @ p["W_cat"].value
    assert np.max(np.abs(h.value - want)) < 1e-12
    assert [x.shape for x in layers] == [(6, 4), (6, 3)]


def test_single_layer_skip_concat_is_projection():
    cfg = EncoderConfig(d_in=5, hidden=(4,), d=6, d_z=2)
    g, p, index = setup(cfg=cfg)
    layers, h = enc.encode_nodes(identity_view(g, 5), p, cfg, index)
    assert np.array_equal(h.value, (layers[0] @ p["W_cat"]).value)


def test_masked_features_give_zero_nodes():
    g, p, index = setup()
    view = make_view(g, np.arange(6), np.arange(len(g.edges)), np.zeros(CFG.d_in))
    _, h = enc.encode_nodes(view, p, CFG, index)
    assert not h.value.any()


def test_readout_closed_forms():
    assert np.array_equal(enc.readout(np.zeros((4, 3))).value, np.full((1, 3), 0.5))
    h = np.array([[0.3, -2.0]])
    assert np.array_equal(enc.readout(h).value, nx.sigmoid_array(h))


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000))
def test_permutation_equivariance(seed):
    g, p, index = setup(6, seed)
    perm = np.random.default_rng(seed).permutation(6)
    base = identity_view(g, CFG.d_in)
    shuffled = make_view(g, perm, np.arange(len(g.edges)), np.ones(CFG.d_in))
    _, h = enc.encode_nodes(base, p, CFG, index)
    _, hp = enc.encode_nodes(shuffled, p, CFG, index)
    assert np.allclose(hp.value, h.value[perm], atol=1e-12)
    r = enc.readout(h).value
    assert np.max(np.abs(enc.readout(hp).value - r)) < 1e-12
    assert np.all((r > 0) & (r < 1))


def test_project_closed_forms():
    d = 3
    zero = {"head_W1": np.zeros((d, d)), "head_b1": np.zeros((1, d)),
            "head_W2": np.zeros((d, d)), "head_b2": np.zeros((1, d))}
    h = np.array([[0.2, 1.0, 3.0]])
    assert not enc.project(nx.tensor(h), zero).value.any()
    ident = {**zero, "head_W1": np.eye(d), "head_W2": np.eye(d)}
    assert np.array_equal(enc.project(nx.tensor(h), ident).value, h)


def test_identical_views_identical_representations():
    g, p, index = setup()
    a = enc.encode_nodes(identity_view(g, CFG.d_in), p, CFG, index)[1].value
    b = enc.encode_nodes(identity_view(g, CFG.d_in), p, CFG, index)[1].value
    assert np.array_equal(a, b)


def test_full_encoder_gradcheck():
    g, p, index = setup(5, 3)
    view = identity_view(g, CFG.d_in)
    weights = np.random.default_rng(4).normal(size=(1, CFG.d_z))

    def loss():
        _, h = enc.encode_nodes(view, p, CFG, index)
        z = enc.project(nx.concat([h, enc.readout(h)], axis=0), p)
        return nx.sum(nx.mul(nx.tanh(z), weights))

    assert max(nx.gradcheck(loss, p).values()) < 1e-4


def test_checkpoint_round_trip(tmp_path):
    _, p, _ = setup()
    path = tmp_path / "enc.npz"
    enc.save_checkpoint(path, p, {"cfg": CFG})
    back, meta = enc.load_checkpoint(path)
    assert meta["cfg"]["hidden"] == [4, 3]
    for k in p:
        assert np.array_equal(back[k].value, p[k].value)


def test_config_validation():
    with pytest.raises(ValueError):
        EncoderConfig(hidden=())
    with pytest.raises(ValueError):
        EncoderConfig(activation="gelu")
