"""
Contrastive pretraining of exercise and concept embeddings
==========================================================

"""

import numpy as np

from biclkt import contrastive, dataio, graph
from biclkt.contrastive import ContrastiveConfig
from biclkt.encoders import EncoderConfig

data = dataio.generate_synthetic(n_students=150, n_concepts=8, n_exercises=40, seq_len=40, seed=1)
train, test = dataio.split(data.interactions, dataio.SplitSpec(0.8, seed=1))
graphs = graph.build_all(train, data.catalog)

# a small encoder keeps this quick; the defaults are 64 wide
enc = EncoderConfig(d_in=32, hidden=(32, 32), d=32, d_z=16)
con = ContrastiveConfig(epochs=40, batch_size=4, tau=0.5, lam=0.5)

result = contrastive.pretrain(graphs, data.catalog.exercises, enc=enc, con=con, seed=1)
for row in result.trace[::10] + result.trace[-1:]:
    print(f"epoch {row.epoch:3d}  node {row.node_loss:+.4f}  graph {row.graph_loss:+.4f}  joint {row.joint_loss:+.4f}")

# the node loss leaves the positive out of its denominator, so it can go negative

# E2E: one row per exercise, C2C: one row per concept
print(result.e2e.vectors.shape, result.c2c.vectors.shape)

# do exercises of the same concept end up closer together?
v = result.e2e.vectors / np.linalg.norm(result.e2e.vectors, axis=1, keepdims=True)
sims = v @ v.T
concept = np.array([data.concept_of[e] for e in result.e2e.ids])
same = concept[:, None] == concept[None, :]
off = ~np.eye(len(concept), dtype=bool)
print("intra-concept cosine", sims[same & off].mean())
print("inter-concept cosine", sims[~same].mean())

# tables are plain text, one id and vector per line
result.e2e.save("e2e_demo.txt")
back = contrastive.EmbeddingTable.load("e2e_demo.txt")
print(np.array_equal(back.vectors, result.e2e.vectors))
