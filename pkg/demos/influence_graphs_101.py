"""
Influence graphs from a synthetic log
=====================================

"""

import numpy as np

from biclkt import dataio, graph
from biclkt.augmentation import AugmentationConfig, drop_probabilities, make_views

# 120 simulated students over 6 concepts; each exercise has one primary concept
data = dataio.generate_synthetic(n_students=120, n_concepts=6, n_exercises=30, seq_len=40, seed=0)
print(len(data.interactions), "interactions")
print(data.catalog.concepts)

# one weighted graph per concept: edge i->j is the share of i's co-attempts that were both correct
graphs = graph.build_all(data.interactions, data.catalog)
g = graphs[0]
print(g.concept, g.n, "exercises", len(g.edges), "edges")
for i, j, w in g.edges[:5]:
    print(f"  {g.nodes[i]} -> {g.nodes[j]}  {w:.3f}")

# the normalised adjacency used by the GC layers
a = graph.normalize_adjacency(g)
print(np.round(a, 3))
print("largest eigenvalue", np.linalg.eigvalsh(a).max())

# two notions of node importance
deg = graph.centrality(g, "degree").scores
pr = graph.centrality(g, "pagerank").scores
print("degree  ", np.round(deg, 2))
print("pagerank", np.round(pr, 3), "sum", pr.sum())

# important nodes get small drop probabilities, the hub gets none
p = drop_probabilities(deg, p_f=0.3, p_tau=0.7)
print("drop p  ", np.round(p, 3))

# two corrupted views of the same graph
cfg = AugmentationConfig(centrality="degree", p_f1=0.2, p_f2=0.3, p_mask=0.1)
v1, v2 = make_views(g, cfg, feature_dim=8, rng_key=[0])
print("view 1 keeps", len(v1.kept_nodes), "nodes,", len(v1.kept_edges), "edges")
print("view 2 keeps", len(v2.kept_nodes), "nodes,", len(v2.kept_edges), "edges")
print("masked features", v1.feature_mask)
