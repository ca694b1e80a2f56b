import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from biclkt import contrastive as cl
from biclkt import numerics as nx
from biclkt.augmentation import AugmentationConfig, identity_view, make_view, make_views
from biclkt.contrastive import ContrastiveConfig, PairBatch
from biclkt.encoders import EncoderConfig
from biclkt.graph import InfluenceGraph

TINY = EncoderConfig(d_in=6, hidden=(5, 4), d=5, d_z=3)


def cos(a, b):
    return float(a @ b / (np.linalg.norm(a) * np.linalg.norm(b)))


def graph_oracle(z1, z2, tau, include_positive=False):
    n = len(z1)
    total = 0.0
    for a, b in ((z1, z2), (z2, z1)):
        for i in range(n):
            denom = 0.0
            for j in range(n):
                if j != i or include_positive:
                    denom += math.exp(cos(a[i], b[j]) / tau)
            total += -math.log(math.exp(cos(a[i], b[i]) / tau) / denom)
    return total / (2 * n)


def node_oracle(z1, z2, batch, tau):
    views = (z1, z2)
    total = 0.0
    for a, p, negs in zip(batch.anchors, batch.positives, batch.negatives):
        denom = sum(math.exp(cos(z1[a], views[v][r]) / tau) for v, r in negs)
        total += -math.log(math.exp(cos(z1[a], z2[p]) / tau) / denom)
    return total / len(batch)


def random_graph(n, seed, density=0.4):
    rng = np.random.default_rng(seed)
    edges = [(i, j, float(rng.uniform(0.1, 1))) for i in range(n) for j in range(n)
             if i != j and rng.random() < density]
    return InfluenceGraph(f"c{seed}", tuple(f"e{k}" for k in range(n)), edges)


def test_cosine_cases():
    a = np.array([1.0, 2.0, -1.0])
    assert cl.cosine_sim(a, a) == pytest.approx(1.0, abs=1e-15)
    assert cl.cosine_sim([1, 0], [0, 3]) == 0.0
    assert cl.cosine_sim(a, -a) == pytest.approx(-1.0, abs=1e-15)
    with pytest.warns(UserWarning):
        assert cl.cosine_sim([0, 0], [1, 1]) == 0.0


def test_graph_loss_zero_for_two_identical_pairs():
    z = np.ones((2, 4))
    assert cl.nt_xent_graph(z, z, tau=0.5).value[0, 0] == 0.0


def test_graph_loss_negative_under_printed_denominator():
    # positives at +1, cross pairs at -1/2: each term is log 2 - 3/2
    angles = np.array([0.0, 2 * np.pi / 3, 4 * np.pi / 3])
    z = np.stack([np.cos(angles), np.sin(angles)], axis=1)
    sims = z @ z.T
    assert np.allclose(sims[~np.eye(3, dtype=bool)], -0.5)
    loss = cl.nt_xent_graph(z, z, tau=1.0).value[0, 0]
    assert loss == pytest.approx(math.log(2) - 1.5, abs=1e-12)
    assert loss < 0


def test_graph_loss_needs_two_pairs():
    with pytest.raises(nx.ContractError):
        cl.nt_xent_graph(np.ones((1, 3)), np.ones((1, 3)))


@settings(max_examples=40, deadline=None)
@given(st.integers(2, 8), st.integers(0, 10_000), st.booleans())
def test_graph_loss_matches_double_loop(n, seed, include_positive):
    rng = np.random.default_rng(seed)
    z1, z2 = rng.normal(size=(n, 4)), rng.normal(size=(n, 4))
    got = cl.nt_xent_graph(z1, z2, 0.5, include_positive).value[0, 0]
    assert abs(got - graph_oracle(z1, z2, 0.5, include_positive)) < 1e-10


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.01, 100))
def test_graph_loss_scale_and_permutation_invariance(seed, c):
    rng = np.random.default_rng(seed)
    z1, z2 = rng.normal(size=(5, 3)), rng.normal(size=(5, 3))
    base = cl.nt_xent_graph(z1, z2).value[0, 0]
    assert cl.nt_xent_graph(c * z1, c * z2).value[0, 0] == pytest.approx(base, abs=1e-12)
    perm = rng.permutation(5)
    assert cl.nt_xent_graph(z1[perm], z2[perm]).value[0, 0] == pytest.approx(base, abs=1e-12)


def test_triangle_negatives():
    g = InfluenceGraph("c", ("a", "b", "c"), [(0, 1, 1.0), (1, 2, 1.0), (2, 0, 1.0)])
    v = identity_view(g, 2)
    batch = cl.sample_node_pairs(v, v)
    assert len(batch) == 3
    assert all(len(n) == 4 for n in batch.negatives)


def test_isolated_node_is_skipped():
    g = InfluenceGraph("c", ("a", "b", "c"), [(0, 1, 1.0)])
    v = identity_view(g, 2)
    assert cl.sample_node_pairs(v, v).nodes == [0, 1]


def test_negatives_match_adjacency_scan():
    g = random_graph(10, 7)
    cfg = AugmentationConfig(p_f1=0.4, p_f2=0.5, p_tau=0.8)
    for k in range(10):
        v1, v2 = make_views(g, cfg, 4, rng_key=[k])
        batch = cl.sample_node_pairs(v1, v2)
        for node, anchor, positive, negs in zip(batch.nodes, batch.anchors, batch.positives, batch.negatives):
            assert v1.kept_nodes[anchor] == node and v2.kept_nodes[positive] == node
            want = set()
            for view_id, view in enumerate((v1, v2)):
                alive = list(view.kept_nodes)
                for e in view.kept_edges:
                    i, j, _ = g.edges[e]
                    if node in (i, j):
                        other = j if i == node else i
                        want.add((view_id, alive.index(other)))
            assert set(negs) == want


def test_node_loss_closed_forms():
    z1 = np.array([[1.0, 0.0], [1.0, 0.0]])
    batch = PairBatch([0], [0], [[(0, 1)]], [0])
    assert cl.nt_xent_node(z1, z1, batch).value[0, 0] == 0.0
    k = 3
    z1 = np.array([[1.0, 0.0]] + [[-1.0, 0.0]] * k)
    z2 = np.array([[1.0, 0.0]])
    batch = PairBatch([0], [0], [[(0, r) for r in range(1, k + 1)]], [0])
    assert cl.nt_xent_node(z1, z2, batch, tau=1.0).value[0, 0] == pytest.approx(math.log(k) - 2, abs=1e-12)


def test_node_loss_empty_batch():
    with pytest.raises(nx.ContractError):
        cl.nt_xent_node(np.ones((2, 2)), np.ones((2, 2)), PairBatch())


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_node_loss_matches_direct_sum(seed):
    g = random_graph(8, seed, 0.5)
    v1, v2 = make_views(g, AugmentationConfig(p_f1=0.3, p_f2=0.3), 4, rng_key=[seed])
    batch = cl.sample_node_pairs(v1, v2)
    if not len(batch):
        return
    rng = np.random.default_rng(seed)
    z1, z2 = rng.normal(size=(len(v1.kept_nodes), 3)), rng.normal(size=(len(v2.kept_nodes), 3))
    got = cl.nt_xent_node(z1, z2, batch, 0.5).value[0, 0]
    assert abs(got - node_oracle(z1, z2, batch, 0.5)) < 1e-10
    assert cl.nt_xent_node(7 * z1, 7 * z2, batch, 0.5).value[0, 0] == pytest.approx(got, abs=1e-12)


def test_joint_loss_mixing():
    a, b = np.array([[0.4]]), np.array([[0.8]])
    assert cl.joint_loss(a, b, 1.0).value[0, 0] == 0.4
    assert cl.joint_loss(a, b, 0.0).value[0, 0] == 0.8
    assert cl.joint_loss(a, b, 0.5).value[0, 0] == pytest.approx(0.6, abs=1e-15)


def test_loss_gradchecks():
    for seed in range(20):
        rng = np.random.default_rng(seed)
        z1, z2 = nx.parameter(rng.normal(size=(4, 3))), nx.parameter(rng.normal(size=(4, 3)))
        errs = nx.gradcheck(lambda: cl.nt_xent_graph(z1, z2, 0.5), {"z1": z1, "z2": z2})
        assert max(errs.values()) < 1e-4
        batch = PairBatch([0, 1, 2], [0, 1, 2], [[(0, 1), (1, 3)], [(0, 0), (1, 2)], [(1, 0)]], [0, 1, 2])
        errs = nx.gradcheck(lambda: cl.nt_xent_node(z1, z2, batch, 0.5), {"z1": z1, "z2": z2})
        assert max(errs.values()) < 1e-4


def toy_graphs():
    return [random_graph(5, s, 0.6) for s in range(4)]


def exercises_of(graphs):
    return tuple(sorted({e for g in graphs for e in g.nodes}))


def test_zero_epochs_is_initial_forward_pass():
    graphs = toy_graphs()
    con = ContrastiveConfig(epochs=0)
    a = cl.pretrain(graphs, exercises_of(graphs), enc=TINY, con=con, seed=3)
    b = cl.pretrain(graphs, exercises_of(graphs), enc=TINY, con=con, seed=3)
    assert a.trace == []
    assert np.array_equal(a.e2e.vectors, b.e2e.vectors)
    e2e, c2c = cl.embed(graphs, exercises_of(graphs), a.node_params, a.graph_params, TINY)
    assert np.array_equal(e2e.vectors, a.e2e.vectors) and np.array_equal(c2c.vectors, a.c2c.vectors)


def test_pretraining_is_bit_reproducible():
    graphs = toy_graphs()
    con = ContrastiveConfig(epochs=3, batch_size=2)
    a = cl.pretrain(graphs, exercises_of(graphs), enc=TINY, con=con, seed=1)
    b = cl.pretrain(graphs, exercises_of(graphs), enc=TINY, con=con, seed=1)
    assert np.array_equal(a.e2e.vectors, b.e2e.vectors)
    assert np.array_equal(a.c2c.vectors, b.c2c.vectors)
    assert [(r.node_loss, r.graph_loss) for r in a.trace] == [(r.node_loss, r.graph_loss) for r in b.trace]


def test_lambda_zero_gives_node_encoder_zero_gradient():
    graphs = toy_graphs()
    ex = exercises_of(graphs)
    index = {e: k for k, e in enumerate(ex)}
    rng = np.random.default_rng(0)
    from biclkt.encoders import init_encoder
    node, graph_p = init_encoder(len(ex), TINY, rng), init_encoder(len(ex), TINY, rng)
    con = ContrastiveConfig(lam=0.0)
    *_, joint = cl.batch_losses(graphs, node, graph_p, index, AugmentationConfig(), TINY, con,
                                lambda g: [0, int(g.concept[1:])])
    joint.backward()
    assert all(not p.grad.any() for p in node.values() if p.grad is not None)
    assert any(p.grad is not None and p.grad.any() for p in graph_p.values())


def test_full_loss_gradcheck_on_toy_graph():
    g = random_graph(6, 2, 0.5)
    graphs = [g, random_graph(6, 3, 0.5)]
    ex = exercises_of(graphs)
    index = {e: k for k, e in enumerate(ex)}
    from biclkt.encoders import init_encoder
    rng = np.random.default_rng(5)
    node, graph_p = init_encoder(len(ex), TINY, rng), init_encoder(len(ex), TINY, rng)
    # zero-initialised biases put dead-ReLU nodes exactly on the cosine kink at z = 0
    for p in (*node.values(), *graph_p.values()):
        p.value = p.value + rng.normal(scale=0.1, size=p.shape)
    aug = AugmentationConfig(p_mask=0.0)

    def loss():
        return cl.batch_losses(graphs, node, graph_p, index, aug, TINY, ContrastiveConfig(),
                               lambda gr: [1, int(gr.concept[1:])])[2]

    params = {**{f"n.{k}": p for k, p in node.items()}, **{f"g.{k}": p for k, p in graph_p.items()}}
    errs = nx.gradcheck(loss, params)
    assert max(errs.values()) < 1e-4, errs


def test_divergence_aborts_with_epoch():
    graphs = toy_graphs()
    with pytest.raises(cl.DivergenceError) as err:
        cl.pretrain(graphs, exercises_of(graphs), enc=TINY,
                    con=ContrastiveConfig(epochs=2, lr=float("nan")), seed=0)
    assert err.value.epoch == 2


def test_embedding_table_round_trip(tmp_path):
    t = cl.EmbeddingTable(("a", "b"), np.array([[0.1, 1 / 3], [-2.5, 1e-300]]))
    t.save(tmp_path / "e.txt")
    back = cl.EmbeddingTable.load(tmp_path / "e.txt")
    assert back.ids == t.ids and np.array_equal(back.vectors, t.vectors)
    with pytest.raises(KeyError):
        t.row("zz")


def test_margin_variant_is_finite_and_zero_when_separated():
    z = np.eye(3)
    assert cl.margin_graph(z, z, margin=0.75).value[0, 0] == 0.0
    assert cl.margin_graph(z, z, margin=1.5).value[0, 0] == pytest.approx(0.5, abs=1e-15)


def test_trace_csv(tmp_path):
    rows = [cl.TraceRow(1, 0.5, 0.25, 0.375, 1.0)]
    cl.write_trace(tmp_path / "t.csv", rows)
    cl.write_trace(tmp_path / "t.csv", [cl.TraceRow(2, 0.4, 0.2, 0.3, 1.0)], append=True)
    lines = (tmp_path / "t.csv").read_text().splitlines()
    assert lines[0] == "epoch,node_loss,graph_loss,joint_loss,wall_ms"
    assert [ln.split(",")[0] for ln in lines[1:]] == ["1", "2"]


@settings(max_examples=60, deadline=None)
@given(st.integers(2, 40), st.integers(1, 12), st.integers(0, 1000))
def test_batches_partition_without_singletons(n, size, seed):
    batches = cl._batches(n, size, np.random.default_rng(seed))
    assert sorted(np.concatenate(batches).tolist()) == list(range(n))
    assert all(len(b) >= 2 for b in batches) or size == 1
