"""Per-concept exercise influence graphs built from co-answer statistics."""
from __future__ import annotations

import csv
import math
from collections import defaultdict
from dataclasses import dataclass
from pathlib import Path

import numpy as np


class ConvergenceError(RuntimeError):
    def __init__(self, iterations, delta):
        super().__init__(f"pagerank did not converge after {iterations} iterations (delta={delta:.3g})")
        self.iterations = iterations


@dataclass
class CoCounts:
    """Pairwise counts over ``exercises``; both matrices are symmetric with zero diagonal.

    ``co_occur[i, j]``: students who answered both i and j.
    ``co_correct[i, j]``: students who answered both correctly.
    """

    exercises: tuple
    co_occur: np.ndarray
    co_correct: np.ndarray

    def index(self, exercise) -> int:
        return self.exercises.index(exercise)


def _first_attempts(interactions, exercises):
    """student -> {exercise: first-attempt correctness} restricted to ``exercises``."""
    wanted = set(exercises)
    first = defaultdict(dict)
    for it in sorted(interactions, key=lambda it: (it.student_id, it.order)):
        if it.exercise_id in wanted and it.exercise_id not in first[it.student_id]:
            first[it.student_id][it.exercise_id] = it.correct
    return first


def count_cooccurrences(interactions, concept, catalog=None, mode="students") -> CoCounts:
    """Count co-occurrence and co-correctness among the exercises of ``concept``.

    ``mode="students"`` counts each student once per pair, judging
    correctness by their first attempt. ``mode="events"`` counts attempt
    pairs instead (``n_i * n_j`` and ``c_i * c_j`` per student).
    """
    interactions = list(interactions)
    if not interactions:
        raise ValueError("no interactions")
    if catalog is not None:
        exercises = catalog.exercises_of(concept)
    else:
        exercises = tuple(sorted({it.exercise_id for it in interactions if concept in it.concept_ids}))
        if not exercises:
            raise KeyError(f"unknown concept {concept!r}")
    idx = {e: i for i, e in enumerate(exercises)}
    students = sorted({it.student_id for it in interactions})
    sidx = {s: i for i, s in enumerate(students)}
    answered = np.zeros((len(students), len(exercises)))
    right = np.zeros_like(answered)

    if mode == "students":
        for s, attempts in _first_attempts(interactions, exercises).items():
            for e, c in attempts.items():
                answered[sidx[s], idx[e]] = 1
                right[sidx[s], idx[e]] = c
    elif mode == "events":
        for it in interactions:
            if it.exercise_id in idx:
                answered[sidx[it.student_id], idx[it.exercise_id]] += 1
                right[sidx[it.student_id], idx[it.exercise_id]] += it.correct
    else:
        raise ValueError(f"unknown counting mode {mode!r}")

    co_occur = answered.T @ answered
    co_correct = right.T @ right
    np.fill_diagonal(co_occur, 0)
    np.fill_diagonal(co_correct, 0)
    return CoCounts(exercises, co_occur, co_correct)


def edge_weight(counts: CoCounts, i: int, j: int) -> float:
    """Directed influence of i on j: co-correct(i, j) over all of i's co-occurrences."""
    denom = counts.co_occur[i].sum()
    if denom <= 0:
        return 0.0
    return float(counts.co_correct[i, j] / denom)


def edge_weights(counts: CoCounts) -> np.ndarray:
    denom = counts.co_occur.sum(axis=1, keepdims=True)
    with np.errstate(invalid="ignore", divide="ignore"):
        q = np.where(denom > 0, counts.co_correct / np.where(denom > 0, denom, 1), 0.0)
    np.fill_diagonal(q, 0)
    return q


@dataclass
class InfluenceGraph:
    """Weighted directed graph over one concept's exercises.

    ``edges`` holds ``(i, j, weight)`` with node positions into ``nodes``.
    """

    concept: str
    nodes: tuple
    edges: list

    @property
    def n(self) -> int:
        return len(self.nodes)

    @property
    def adjacency(self) -> np.ndarray:
        a = np.zeros((self.n, self.n))
        for i, j, w in self.edges:
            a[i, j] = w
        return a

    def weighted_degree(self) -> np.ndarray:
        a = self.adjacency
        return a.sum(axis=0) + a.sum(axis=1)


def build_influence_graph(interactions, concept, catalog=None, edge_threshold=0.0,
                          cap=20, mode="students") -> InfluenceGraph:
    """Keep edges whose weight exceeds ``edge_threshold``; cap the node count.

    When the concept has more than ``cap`` exercises, the ``cap`` nodes with
    the largest weighted degree survive (ties go to the smaller exercise id).
    Isolated nodes are kept.
    """
    counts = count_cooccurrences(interactions, concept, catalog, mode)
    q = edge_weights(counts)
    q = np.where(q > edge_threshold, q, 0.0)
    keep = np.arange(len(counts.exercises))
    if cap is not None and len(keep) > cap:
        degree = q.sum(axis=0) + q.sum(axis=1)
        # exercises are id-sorted, so a stable sort on -degree breaks ties by id
        keep = np.sort(np.argsort(-degree, kind="stable")[:cap])
    sub = q[np.ix_(keep, keep)]
    edges = [(int(i), int(j), float(sub[i, j])) for i, j in zip(*np.nonzero(sub))]
    return InfluenceGraph(concept, tuple(counts.exercises[k] for k in keep), edges)


def build_all(interactions, catalog, edge_threshold=0.0, cap=20, mode="students") -> list:
    return [build_influence_graph(interactions, c, catalog, edge_threshold, cap, mode)
            for c in catalog.concepts]


def normalize_adjacency_matrix(a: np.ndarray) -> np.ndarray:
    """``D^-1/2 (S + I) D^-1/2`` where ``S = max(A, A^T)``."""
    a = np.asarray(a, dtype=float)
    a_hat = np.maximum(a, a.T) + np.eye(len(a))
    # correctly rounded degrees do not depend on node order
    d = 1.0 / np.sqrt(np.array([math.fsum(row) for row in a_hat]))
    return a_hat * np.outer(d, d)


def normalize_adjacency(g: InfluenceGraph) -> np.ndarray:
    if g.n < 1:
        raise ValueError("graph has no nodes")
    return normalize_adjacency_matrix(g.adjacency)


# --------------------------------------------------------------- centrality

@dataclass
class CentralityScores:
    kind: str
    scores: np.ndarray
    damping: float | None = None


def pagerank(a: np.ndarray, damping=0.85, tol=1e-10, max_iter=1000) -> np.ndarray:
    """Weighted PageRank on ``a[i, j]`` = weight of edge i -> j.

    Dangling nodes spread their mass uniformly. Stops when the L-inf change
    falls below ``tol``.
    """
    n = len(a)
    out = a.sum(axis=1)
    dangling = out == 0
    trans = np.divide(a, out[:, None], out=np.zeros_like(a, dtype=float), where=~dangling[:, None])
    r = np.full(n, 1.0 / n)
    delta = np.inf
    for it in range(1, max_iter + 1):
        nxt = damping * (r @ trans + r[dangling].sum() / n) + (1 - damping) / n
        nxt /= nxt.sum()
        delta = np.abs(nxt - r).max()
        r = nxt
        if delta < tol:
            return r
    raise ConvergenceError(max_iter, delta)


def centrality(g: InfluenceGraph, kind="degree", damping=0.85) -> CentralityScores:
    if g.n < 1:
        raise ValueError("graph has no nodes")
    if kind == "uniform":
        return CentralityScores(kind, np.full(g.n, 1.0 / g.n))
    if kind == "degree":
        return CentralityScores(kind, g.weighted_degree())
    if kind == "pagerank":
        return CentralityScores(kind, pagerank(g.adjacency, damping), damping)
    raise ValueError(f"unknown centrality kind {kind!r}")


# ---------------------------------------------------------------- dump/load

def write_edge_list(path, graphs) -> None:
    """Edge list ``concept_id,src_exercise,dst_exercise,weight`` plus a sibling node file.

    Node order and isolated nodes do not survive an edge list, so
    ``<stem>.nodes.csv`` records ``concept_id,exercise_id,position``.
    """
    path = Path(path)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("concept_id", "src_exercise", "dst_exercise", "weight"))
        for g in graphs:
            for i, j, wt in g.edges:
                w.writerow((g.concept, g.nodes[i], g.nodes[j], repr(wt)))
    with open(_nodes_path(path), "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("concept_id", "exercise_id", "position"))
        for g in graphs:
            for k, e in enumerate(g.nodes):
                w.writerow((g.concept, e, k))


def _nodes_path(path: Path) -> Path:
    return path.with_name(path.stem + ".nodes.csv")


def read_edge_list(path) -> list:
    path = Path(path)
    nodes = defaultdict(list)
    with open(_nodes_path(path), newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            nodes[row["concept_id"]].append((int(row["position"]), row["exercise_id"]))
    graphs = {c: InfluenceGraph(c, tuple(e for _, e in sorted(v)), []) for c, v in nodes.items()}
    pos = {c: {e: k for k, e in enumerate(g.nodes)} for c, g in graphs.items()}
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            c = row["concept_id"]
            graphs[c].edges.append((pos[c][row["src_exercise"]], pos[c][row["dst_exercise"]],
                                    float(row["weight"])))
    return [graphs[c] for c in sorted(graphs)]
