"""
Knowledge tracing on top of pretrained embeddings
=================================================

"""

import numpy as np

from biclkt import contrastive, dataio, evaluation, graph, prediction
from biclkt.contrastive import ContrastiveConfig
from biclkt.encoders import EncoderConfig
from biclkt.pipeline import probe_features
from biclkt.prediction import HeadConfig

data = dataio.generate_synthetic(n_students=200, n_concepts=12, n_exercises=60, seq_len=50, seed=0)
train, test = dataio.split(data.interactions, dataio.SplitSpec(0.8, seed=0))
graphs = graph.build_all(train, data.catalog)
result = contrastive.pretrain(graphs, data.catalog.exercises,
                              enc=EncoderConfig(d_in=32, hidden=(32, 32), d=32, d_z=16),
                              con=ContrastiveConfig(epochs=30), seed=0)

# each exercise row gets its own vector plus the mean of its concepts' vectors
fused = prediction.fuse(result.e2e, result.c2c, data.catalog, "Concate")
print("fused table", fused.vectors.shape)

train_seqs, test_seqs = dataio.to_sequences(train), dataio.to_sequences(test)
print(len(train_seqs), "training students,", len(test_seqs), "test students")

# recurrent head (R); "M" gives the key-value memory head
head = prediction.train_head(train_seqs, fused, "R", HeadConfig(hidden=32, epochs=40), seed=0)
for epoch, loss, valid_auc in head.trace[::5]:
    print(f"epoch {epoch:3d}  loss {loss:.4f}  valid auc {valid_auc:.4f}")

scores, labels = prediction.predict(head.state, fused, test_seqs)
print("test AUC", evaluation.auc(scores, labels))
print("test ACC", evaluation.acc(scores, labels))

# same head, but exercises are paired with someone else's embedding
control = prediction.shuffle_rows(fused, seed=1)
head = prediction.train_head(train_seqs, control, "R", HeadConfig(hidden=32, epochs=40), seed=0)
print("shuffled-table AUC", evaluation.auc(*prediction.predict(head.state, control, test_seqs)))

# the frozen-embedding baseline: logistic regression on the target exercise's vector
x_tr, y_tr = probe_features(fused, train_seqs)
x_te, y_te = probe_features(fused, test_seqs)
x, y = np.vstack([x_tr, x_te]), np.concatenate([y_tr, y_te])
probe = evaluation.linear_probe(x, y, np.arange(len(y_tr)), np.arange(len(y_tr), len(y)))
print("linear probe AUC", probe.auc)
