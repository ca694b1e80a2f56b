"""Node- and graph-level contrastive objectives and the pretraining loop."""
from __future__ import annotations

import csv
import logging
import time
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nx
from .augmentation import AugmentationConfig, identity_view, make_views, stream_key
from .encoders import EncoderConfig, encode_nodes, init_encoder, project, readout
from .graph import InfluenceGraph

log = logging.getLogger(__name__)


class DivergenceError(FloatingPointError):
    def __init__(self, epoch, what="loss"):
        super().__init__(f"{what} became non-finite at epoch {epoch}")
        self.epoch = epoch


@dataclass(frozen=True)
class ContrastiveConfig:
    tau: float = 0.5
    batch_size: int = 4
    epochs: int = 100
    lam: float = 0.5
    margin: float = 0.75
    loss: str = "nt_xent"  # or "margin"
    include_positive: bool = False
    lr: float = 1e-3

    def __post_init__(self):
        if self.tau <= 0:
            raise ValueError("tau must be > 0")
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2")
        if not 0 <= self.lam <= 1:
            raise ValueError("lam must lie in [0, 1]")
        if self.loss not in ("nt_xent", "margin"):
            raise ValueError(f"unknown loss {self.loss!r}")


# ---------------------------------------------------------------- similarity

def cosine_sim(a, b) -> float:
    a, b = np.ravel(a).astype(float), np.ravel(b).astype(float)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        warnings.warn("cosine similarity of a zero vector is taken as 0", stacklevel=2)
        return 0.0
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def similarity_matrix(za, zb):
    """Pairwise cosine similarities between the rows of ``za`` and ``zb``."""
    return nx.matmul(nx.l2_normalize_rows(za), nx.transpose(nx.l2_normalize_rows(zb)))


# --------------------------------------------------------------- graph level

def nt_xent_graph(z1, z2, tau=0.5, include_positive=False):
    """NT-Xent over ``N`` aligned view pairs, averaged over both directions.

    Negatives for row ``n`` of one view are rows ``n' != n`` of the other
    view. The positive is left out of the denominator unless
    ``include_positive`` is set.
    """
    z1, z2 = nx.tensor(z1), nx.tensor(z2)
    n = z1.shape[0]
    if n < 2:
        raise nx.ContractError("nt_xent_graph needs N >= 2 (no negatives otherwise)")
    if z2.shape != z1.shape:
        raise nx.DimensionError(f"view batches differ: {z1.shape} vs {z2.shape}")
    s = nx.mul(similarity_matrix(z1, z2), 1.0 / tau)
    eye = np.eye(n)
    denom_mask = np.ones((n, n)) if include_positive else 1.0 - eye
    e = nx.mul(nx.exp(s), denom_mask)
    forward = nx.sum(nx.log(nx.sum(e, axis=1)))
    backward = nx.sum(nx.log(nx.sum(e, axis=0)))
    positives = nx.sum(nx.mul(s, eye))
    return nx.mul(nx.sub(nx.add(forward, backward), nx.mul(positives, 2.0)), 1.0 / (2 * n))


def margin_graph(z1, z2, margin=0.75):
    """Hinge variant: mean over ordered pairs of ``max(0, margin - sim_pos + sim_neg)``."""
    z1, z2 = nx.tensor(z1), nx.tensor(z2)
    n = z1.shape[0]
    if n < 2:
        raise nx.ContractError("margin_graph needs N >= 2")
    s = similarity_matrix(z1, z2)
    eye = np.eye(n)
    pos = nx.sum(nx.mul(s, eye), axis=1, keepdims=True)
    hinge = nx.relu(nx.add(nx.sub(s, pos), margin))
    return nx.mul(nx.sum(nx.mul(hinge, 1.0 - eye)), 1.0 / (n * (n - 1)))


# ---------------------------------------------------------------- node level

@dataclass
class PairBatch:
    """Anchors from view 1, positives from view 2.

    ``negatives[k]`` lists ``(view, row)`` pairs (view 0 or 1) for anchor k.
    ``nodes[k]`` is the anchor's position in the source graph.
    """

    anchors: list = field(default_factory=list)
    positives: list = field(default_factory=list)
    negatives: list = field(default_factory=list)
    nodes: list = field(default_factory=list)

    def __len__(self):
        return len(self.anchors)


def sample_node_pairs(view1, view2) -> PairBatch:
    """Positives are the same node across views; negatives are its 1-hop
    neighbours in both views. Anchors without any negative are skipped."""
    if view1.source is not view2.source:
        raise ValueError("views must come from the same graph")
    row1 = {int(k): r for r, k in enumerate(view1.kept_nodes)}
    row2 = {int(k): r for r, k in enumerate(view2.kept_nodes)}
    nb1, nb2 = view1.neighbours(), view2.neighbours()
    batch = PairBatch()
    for v in sorted(row1.keys() & row2.keys()):
        neg = [(0, row1[u]) for u in sorted(nb1[v])] + [(1, row2[u]) for u in sorted(nb2[v])]
        if not neg:
            continue
        batch.anchors.append(row1[v])
        batch.positives.append(row2[v])
        batch.negatives.append(neg)
        batch.nodes.append(v)
    return batch


def _pair_masks(batch: PairBatch, n1: int, n2: int):
    pos = np.zeros((len(batch), n1 + n2))
    neg = np.zeros_like(pos)
    for k, (p, negs) in enumerate(zip(batch.positives, batch.negatives)):
        pos[k, n1 + p] = 1.0
        for view, row in negs:
            neg[k, row + (n1 if view else 0)] = 1.0
    return pos, neg


def node_anchor_losses(z1, z2, batch: PairBatch, tau=0.5, include_positive=False):
    """Per-anchor NT-Xent terms as a ``len(batch) x 1`` tensor."""
    if not len(batch):
        raise nx.ContractError("empty pair batch")
    z1, z2 = nx.tensor(z1), nx.tensor(z2)
    pos_mask, neg_mask = _pair_masks(batch, z1.shape[0], z2.shape[0])
    anchors = nx.take_rows(z1, batch.anchors)
    s = nx.mul(similarity_matrix(anchors, nx.concat([z1, z2], axis=0)), 1.0 / tau)
    pos = nx.sum(nx.mul(s, pos_mask), axis=1, keepdims=True)
    denom_mask = neg_mask + pos_mask if include_positive else neg_mask
    lse = nx.log(nx.sum(nx.mul(nx.exp(s), denom_mask), axis=1, keepdims=True))
    return nx.sub(lse, pos)


def nt_xent_node(z1, z2, batch: PairBatch, tau=0.5, include_positive=False):
    losses = node_anchor_losses(z1, z2, batch, tau, include_positive)
    return nx.mean(losses)


def node_anchor_margins(z1, z2, batch: PairBatch, margin=0.75):
    """Per-anchor hinge ``mean_neg max(0, margin - sim_pos + sim_neg)``."""
    if not len(batch):
        raise nx.ContractError("empty pair batch")
    z1, z2 = nx.tensor(z1), nx.tensor(z2)
    pos_mask, neg_mask = _pair_masks(batch, z1.shape[0], z2.shape[0])
    s = similarity_matrix(nx.take_rows(z1, batch.anchors), nx.concat([z1, z2], axis=0))
    pos = nx.sum(nx.mul(s, pos_mask), axis=1, keepdims=True)
    hinge = nx.mul(nx.relu(nx.add(nx.sub(s, pos), margin)), neg_mask)
    return nx.mul(nx.sum(hinge, axis=1, keepdims=True), 1.0 / neg_mask.sum(axis=1, keepdims=True))


def joint_loss(node_loss, graph_loss, lam=0.5):
    return nx.add(nx.mul(node_loss, lam), nx.mul(graph_loss, 1.0 - lam))


# ----------------------------------------------------------------- embedding

@dataclass
class EmbeddingTable:
    ids: tuple
    vectors: np.ndarray

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def row(self, key) -> np.ndarray:
        try:
            return self.vectors[self.ids.index(key)]
        except ValueError:
            raise KeyError(f"{key!r} not in embedding table") from None

    def as_dict(self) -> dict:
        return dict(zip(self.ids, self.vectors))

    def save(self, path) -> None:
        """``id,dim,values...`` per line, floats in shortest round-trip form."""
        with open(path, "w", encoding="utf-8") as fh:
            for key, vec in zip(self.ids, self.vectors):
                fh.write(",".join([key, str(len(vec)), *map(repr, vec.tolist())]) + "\n")

    @classmethod
    def load(cls, path) -> EmbeddingTable:
        ids, rows = [], []
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                parts = line.rstrip("\n").split(",")
                dim = int(parts[1])
                if len(parts) != dim + 2:
                    raise ValueError(f"{path}: row {parts[0]!r} declares {dim} values, has {len(parts) - 2}")
                ids.append(parts[0])
                rows.append([float(v) for v in parts[2:]])
        return cls(tuple(ids), np.array(rows, dtype=float))


# ----------------------------------------------------------------- training

@dataclass
class TraceRow:
    epoch: int
    node_loss: float
    graph_loss: float
    joint_loss: float
    wall_ms: float


def write_trace(path, trace, append=False) -> None:
    new = not append
    with open(path, "a" if append else "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        if new:
            w.writerow(("epoch", "node_loss", "graph_loss", "joint_loss", "wall_ms"))
        for r in trace:
            w.writerow((r.epoch, repr(r.node_loss), repr(r.graph_loss), repr(r.joint_loss), f"{r.wall_ms:.1f}"))


@dataclass
class PretrainResult:
    e2e: EmbeddingTable
    c2c: EmbeddingTable
    trace: list
    node_params: dict
    graph_params: dict


def _batches(n, size, rng):
    order = rng.permutation(n)
    batches = [order[k:k + size] for k in range(0, n, size)]
    if len(batches) > 1 and len(batches[-1]) < 2:
        tail = batches.pop()
        batches[-1] = np.concatenate([batches[-1], tail])
    return batches


def batch_losses(graphs, node_params, graph_params, exercise_index, aug: AugmentationConfig,
                 enc: EncoderConfig, con: ContrastiveConfig, view_key):
    """Node, graph and joint losses on one minibatch of graphs."""
    anchor_terms, zg1, zg2 = [], [], []
    for g in graphs:
        v1, v2 = make_views(g, aug, enc.d_in, rng_key=view_key(g))
        pairs = sample_node_pairs(v1, v2)
        if len(pairs):
            z1 = project(encode_nodes(v1, node_params, enc, exercise_index)[1], node_params)
            z2 = project(encode_nodes(v2, node_params, enc, exercise_index)[1], node_params)
            if con.loss == "margin":
                anchor_terms.append(node_anchor_margins(z1, z2, pairs, con.margin))
            else:
                anchor_terms.append(node_anchor_losses(z1, z2, pairs, con.tau, con.include_positive))
        for view, bucket in ((v1, zg1), (v2, zg2)):
            h = readout(encode_nodes(view, graph_params, enc, exercise_index)[1])
            bucket.append(project(h, graph_params))

    zg1, zg2 = nx.concat(zg1, axis=0), nx.concat(zg2, axis=0)
    if con.loss == "margin":
        graph_loss = margin_graph(zg1, zg2, con.margin)
    else:
        graph_loss = nt_xent_graph(zg1, zg2, con.tau, con.include_positive)
    if anchor_terms:
        node_loss = nx.mean(nx.concat(anchor_terms, axis=0))
    else:
        # keeps node parameters on the tape so they still receive a (zero) gradient
        node_loss = nx.mul(nx.sum(node_params["W_cat"]), 0.0)
    return node_loss, graph_loss, joint_loss(node_loss, graph_loss, con.lam)


def pretrain(graphs, exercises, aug: AugmentationConfig | None = None, enc: EncoderConfig | None = None,
             con: ContrastiveConfig | None = None, seed: int = 0, callback=None) -> PretrainResult:
    """Jointly train node-level (exercise) and graph-level (concept) encoders.

    ``exercises`` fixes the row order of the feature tables and of the
    exercise embedding table.
    """
    aug, enc, con = aug or AugmentationConfig(), enc or EncoderConfig(), con or ContrastiveConfig()
    graphs = list(graphs)
    if len(graphs) < 2:
        raise ValueError("pretraining needs at least 2 graphs")
    exercises = tuple(exercises)
    index = {e: i for i, e in enumerate(exercises)}
    rng = np.random.default_rng(seed)
    node_params = init_encoder(len(exercises), enc, rng)
    graph_params = init_encoder(len(exercises), enc, rng)
    params = {**{f"node.{k}": p for k, p in node_params.items()},
              **{f"graph.{k}": p for k, p in graph_params.items()}}
    opt = nx.Adam(params, lr=con.lr)

    trace = []
    for epoch in range(1, con.epochs + 1):
        start = time.perf_counter()
        totals = np.zeros(3)
        batches = _batches(len(graphs), con.batch_size, np.random.default_rng([seed, epoch]))
        for b in batches:
            def key(g, _epoch=epoch):
                return stream_key(seed, g.concept, aug.seed, _epoch)
            losses = batch_losses([graphs[k] for k in b], node_params, graph_params, index,
                                  aug, enc, con, key)
            values = np.array([float(t.value[0, 0]) for t in losses])
            if not np.all(np.isfinite(values)):
                raise DivergenceError(epoch)
            opt.zero_grad()
            losses[2].backward()
            opt.step()
            totals += values
        totals /= len(batches)
        row = TraceRow(epoch, *totals.tolist(), (time.perf_counter() - start) * 1e3)
        trace.append(row)
        if callback is not None:
            callback(row)
        log.debug("epoch %d joint=%.4f", epoch, row.joint_loss)

    e2e, c2c = embed(graphs, exercises, node_params, graph_params, enc)
    return PretrainResult(e2e, c2c, trace, node_params, graph_params)


def embed(graphs, exercises, node_params, graph_params, enc: EncoderConfig):
    """Uncorrupted forward passes.

    An exercise's row is the mean of its node representations over every
    graph containing it; exercises left out of all graphs (node cap) are
    encoded as an isolated node. Concept rows are graph readouts.
    """
    exercises = tuple(exercises)
    index = {e: i for i, e in enumerate(exercises)}
    sums = np.zeros((len(exercises), enc.d))
    counts = np.zeros(len(exercises))
    concept_ids, concept_rows = [], []
    for g in graphs:
        view = identity_view(g, enc.d_in)
        h = encode_nodes(view, node_params, enc, index)[1].value
        for r, e in enumerate(view.exercises):
            sums[index[e]] += h[r]
            counts[index[e]] += 1
        hg = readout(encode_nodes(view, graph_params, enc, index)[1]).value
        concept_ids.append(g.concept)
        concept_rows.append(hg[0])
    for k in np.flatnonzero(counts == 0):
        lone = identity_view(InfluenceGraph("", (exercises[k],), []), enc.d_in)
        sums[k] = encode_nodes(lone, node_params, enc, index)[1].value[0]
        counts[k] = 1
    e2e = EmbeddingTable(exercises, sums / counts[:, None])
    return e2e, EmbeddingTable(tuple(concept_ids), np.array(concept_rows))
