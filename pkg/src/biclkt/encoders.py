"""GCN encoder, skip-concatenated node representations, readout and projection head."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np

from . import numerics as nx

CHECKPOINT_VERSION = 1

ACTIVATIONS = {"relu": nx.relu, "tanh": nx.tanh}


@dataclass(frozen=True)
class EncoderConfig:
    d_in: int = 64
    hidden: tuple = (64, 64)
    d: int = 64
    d_z: int = 32
    activation: str = "relu"
    skip_concat: bool = True

    def __post_init__(self):
        if not self.hidden:
            raise ValueError("need at least one GC layer")
        if min(self.d_in, self.d, self.d_z, *self.hidden) < 1:
            raise ValueError("all dimensions must be >= 1")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")


LARGE = EncoderConfig(d_in=1024, hidden=(1024, 1024), d=1024, d_z=256)


def init_encoder(n_exercises: int, cfg: EncoderConfig, rng: np.random.Generator) -> dict:
    """Fresh Xavier-initialised parameters; ``X0`` holds one feature row per exercise."""
    p = {"X0": nx.parameter(nx.xavier_uniform(rng, n_exercises, cfg.d_in))}
    dims = (cfg.d_in, *cfg.hidden)
    for k in range(len(cfg.hidden)):
        p[f"gc{k}"] = nx.parameter(nx.xavier_uniform(rng, dims[k], dims[k + 1]))
    cat_in = sum(cfg.hidden) if cfg.skip_concat else cfg.hidden[-1]
    p["W_cat"] = nx.parameter(nx.xavier_uniform(rng, cat_in, cfg.d))
    p["head_W1"] = nx.parameter(nx.xavier_uniform(rng, cfg.d, cfg.d))
    p["head_b1"] = nx.parameter(np.zeros((1, cfg.d)))
    p["head_W2"] = nx.parameter(nx.xavier_uniform(rng, cfg.d, cfg.d_z))
    p["head_b2"] = nx.parameter(np.zeros((1, cfg.d_z)))
    return p


def gc_layer(x, a_norm, w, activation="relu"):
    """``act(A_norm @ X @ W)``."""
    a_norm, x, w = nx.tensor(a_norm), nx.tensor(x), nx.tensor(w)
    if a_norm.shape[-1] != x.shape[0]:
        raise nx.DimensionError(f"gc_layer: adjacency {a_norm.shape} vs features {x.shape}")
    return ACTIVATIONS[activation](nx.matmul(a_norm, nx.matmul(x, w)))


def encode_nodes(view, params: dict, cfg: EncoderConfig, exercise_index: dict):
    """Run the GC stack over ``view``.

    Returns ``(layers, H)``: per-layer node features and the node
    representations (rows follow ``view.kept_nodes``).
    """
    rows = np.array([exercise_index[e] for e in view.exercises], dtype=int)
    # work in exercise-index order so the result is exactly equivariant to node order
    canon = np.argsort(rows, kind="stable")
    x = nx.mul(nx.take_rows(params["X0"], rows[canon]), view.feature_mask.reshape(1, -1))
    a = nx.tensor(view.adjacency[np.ix_(canon, canon)])
    layers = []
    for k in range(len(cfg.hidden)):
        x = gc_layer(x, a, params[f"gc{k}"], cfg.activation)
        layers.append(x)
    stacked = nx.concat(layers, axis=1) if cfg.skip_concat else layers[-1]
    h = nx.matmul(stacked, params["W_cat"])
    if np.array_equal(canon, np.arange(len(rows))):
        return layers, h
    back = np.argsort(canon)
    return [nx.take_rows(t, back) for t in layers], nx.take_rows(h, back)


def readout(h):
    """Sigmoid of the column sum over node rows -> ``1 x d``."""
    h = nx.tensor(h)
    if h.shape[0] < 1:
        raise ValueError("readout needs at least one node")
    # correctly rounded column sums keep the readout exactly permutation invariant
    return nx.sigmoid(nx.fsum_rows(h))


def project(h, params: dict):
    """Two-layer MLP head: ``relu(h W1 + b1) W2 + b2`` (rows are samples)."""
    hidden = nx.relu(nx.add(nx.matmul(h, params["head_W1"]), params["head_b1"]))
    return nx.add(nx.matmul(hidden, params["head_W2"]), params["head_b2"])


# --------------------------------------------------------------- checkpoint

def save_checkpoint(path, params: dict, meta: dict | None = None) -> None:
    """Named float64 arrays plus JSON metadata in one ``.npz``; round-trips bit-exactly."""
    arrays = {k: np.ascontiguousarray(v.value if isinstance(v, nx.Tensor) else v, dtype=np.float64)
              for k, v in params.items()}
    header = {"version": CHECKPOINT_VERSION, "meta": meta or {}}
    with open(path, "wb") as fh:
        np.savez(fh, __header__=np.array(json.dumps(header, sort_keys=True, default=_jsonable)), **arrays)


def load_checkpoint(path):
    """Return ``(params, meta)`` with params as trainable tensors."""
    with np.load(path, allow_pickle=False) as z:
        header = json.loads(str(z["__header__"]))
        if header.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {header.get('version')}")
        params = {k: nx.parameter(z[k]) for k in z.files if k != "__header__"}
    return params, header["meta"]


def _jsonable(obj):
    if isinstance(obj, tuple):
        return list(obj)
    if hasattr(obj, "__dataclass_fields__"):
        return asdict(obj)
    raise TypeError(f"not JSON serialisable: {type(obj).__name__}")
