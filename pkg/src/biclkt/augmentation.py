"""Centrality-adaptive corruption of influence graphs into two contrastive views."""
from __future__ import annotations

import warnings
import zlib
from dataclasses import dataclass

import numpy as np

from .graph import InfluenceGraph, centrality, normalize_adjacency_matrix

SCORE_FLOOR = 1e-12


@dataclass(frozen=True)
class AugmentationConfig:
    centrality: str = "degree"
    p_f: float = 0.2
    p_tau: float = 0.7
    p_f1: float = 0.2
    p_f2: float = 0.3
    p_mask: float = 0.1
    seed: int = 0
    drop_edges: bool = True
    drop_nodes: bool = True

    def __post_init__(self):
        if not 0 <= self.p_mask < 1:
            raise ValueError("p_mask must lie in [0, 1)")
        if not 0 <= self.p_tau <= 1:
            raise ValueError("p_tau must lie in [0, 1]")
        for name in ("p_f", "p_f1", "p_f2"):
            if not 0 <= getattr(self, name) < 1:
                raise ValueError(f"{name} must lie in [0, 1)")
        if self.p_f > self.p_tau:
            warnings.warn(f"p_f={self.p_f} exceeds the cap p_tau={self.p_tau}", stacklevel=2)

    def view_strength(self, view: int) -> float:
        return (self.p_f1, self.p_f2)[view]


@dataclass
class GraphView:
    """A corrupted copy of ``source``.

    ``kept_nodes`` are positions in ``source.nodes``; ``kept_edges`` are
    positions in ``source.edges``. ``adjacency`` is the normalised
    adjacency over the kept nodes, in ``kept_nodes`` order.
    """

    source: InfluenceGraph
    kept_nodes: np.ndarray
    kept_edges: np.ndarray
    feature_mask: np.ndarray
    adjacency: np.ndarray

    @property
    def exercises(self) -> tuple:
        return tuple(self.source.nodes[k] for k in self.kept_nodes)

    def neighbours(self) -> dict:
        """Undirected 1-hop neighbourhoods, keyed and valued by source node position."""
        out = {int(k): set() for k in self.kept_nodes}
        for e in self.kept_edges:
            i, j, _ = self.source.edges[e]
            if i != j:
                out[i].add(j)
                out[j].add(i)
        return out


def drop_probabilities(scores, p_f, p_tau) -> np.ndarray:
    """``min((s_max - s) / (s_max - mean(s)) * p_f, p_tau)`` on log-scores.

    ``scores`` are raw (non-negative) importances; zeros are floored before
    the log. When every score is equal the ratio is taken as 1.
    """
    scores = np.asarray(scores, dtype=float)
    if scores.size == 0:
        return scores.copy()
    s = np.log(np.maximum(scores, SCORE_FLOOR))
    s_max, mu = s.max(), s.mean()
    spread = s_max - mu
    if spread <= 0 or np.isclose(spread, 0, rtol=0, atol=1e-15):
        ratio = np.ones_like(s)
    else:
        ratio = (s_max - s) / spread
    return np.clip(np.minimum(ratio * p_f, p_tau), 0.0, p_tau)


def edge_scores(g: InfluenceGraph, node_scores) -> np.ndarray:
    node_scores = np.asarray(node_scores, dtype=float)
    return np.array([(node_scores[i] + node_scores[j]) / 2 for i, j, _ in g.edges])


def elimination_probabilities(g: InfluenceGraph, scores, cfg: AugmentationConfig, p_f=None):
    """Per-edge and per-node drop probabilities.

    Returns ``(edge_p, node_p)`` aligned with ``g.edges`` and ``g.nodes``.
    ``p_f`` overrides ``cfg.p_f`` (used for the per-view strengths).
    """
    p_f = cfg.p_f if p_f is None else p_f
    w = getattr(scores, "scores", scores)
    return (drop_probabilities(edge_scores(g, w), p_f, cfg.p_tau),
            drop_probabilities(w, p_f, cfg.p_tau))


def stream_key(seed: int, graph_id: str, *extra: int) -> list:
    return [int(seed), zlib.crc32(str(graph_id).encode()), *map(int, extra)]


def _draw_view(g, edge_p, node_p, order, feature_dim, p_mask, cfg, rng) -> GraphView:
    for _ in range(10):
        node_keep = rng.random(g.n) >= node_p if cfg.drop_nodes else np.ones(g.n, bool)
        if node_keep.any():
            break
    else:
        node_keep = np.zeros(g.n, bool)
        node_keep[order[0]] = True
    edge_keep = rng.random(len(g.edges)) >= edge_p if cfg.drop_edges else np.ones(len(g.edges), bool)
    mask = (rng.random(feature_dim) >= p_mask).astype(float)
    return make_view(g, np.flatnonzero(node_keep), np.flatnonzero(edge_keep), mask)


def make_view(g: InfluenceGraph, kept_nodes, kept_edges, feature_mask) -> GraphView:
    """Assemble a view; edges touching a dropped node are discarded."""
    kept_nodes = np.asarray(kept_nodes, dtype=int)
    alive = set(kept_nodes.tolist())
    kept_edges = np.array([e for e in np.asarray(kept_edges, dtype=int)
                           if g.edges[e][0] in alive and g.edges[e][1] in alive], dtype=int)
    pos = {int(k): p for p, k in enumerate(kept_nodes)}
    a = np.zeros((len(kept_nodes), len(kept_nodes)))
    for e in kept_edges:
        i, j, w = g.edges[e]
        a[pos[i], pos[j]] = w
    return GraphView(g, kept_nodes, kept_edges, np.asarray(feature_mask, dtype=float),
                     normalize_adjacency_matrix(a))


def identity_view(g: InfluenceGraph, feature_dim: int) -> GraphView:
    return make_view(g, np.arange(g.n), np.arange(len(g.edges)), np.ones(feature_dim))


def make_views(g: InfluenceGraph, cfg: AugmentationConfig, feature_dim: int, rng_key=None,
               scores=None):
    """Two independently corrupted views of ``g``.

    ``rng_key`` seeds the generator (default: ``cfg.seed`` and the concept
    id), so a replay with the same key is bit-identical.
    """
    if scores is None:
        scores = centrality(g, cfg.centrality)
    w = getattr(scores, "scores", scores)
    order = np.lexsort((np.arange(g.n), -np.asarray(w)))
    rng = np.random.default_rng(rng_key if rng_key is not None else stream_key(cfg.seed, g.concept))
    views = []
    for v in (0, 1):
        edge_p, node_p = elimination_probabilities(g, w, cfg, p_f=cfg.view_strength(v))
        views.append(_draw_view(g, edge_p, node_p, order, feature_dim, cfg.p_mask, cfg, rng))
    return tuple(views)
