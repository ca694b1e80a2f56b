"""Knowledge-tracing heads over frozen exercise embeddings.

Two heads are provided: a recurrent one (``"R"``, DKT-style) and a
key-value memory one (``"M"``, DKVMN-style). Both score the answer at
step ``t + 1`` from the history up to ``t``.

Row-vector convention throughout: ``h_t = tanh(x_t W_hx + h_{t-1} W_hh + b_h)``
is the transpose of the usual column form.
"""
from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nx
from .contrastive import DivergenceError, EmbeddingTable

log = logging.getLogger(__name__)

MODES = ("E2E", "C2C", "Concate")
HEADS = ("R", "M")


class CoverageError(KeyError):
    pass


def fuse(e2e: EmbeddingTable, c2c: EmbeddingTable, catalog, mode="Concate") -> EmbeddingTable:
    """One row per catalog exercise: its E2E row, the mean of its concepts' C2C rows, or both."""
    if mode not in MODES:
        raise ValueError(f"unknown fusion mode {mode!r}")
    e_rows = e2e.as_dict()
    c_rows = c2c.as_dict()
    rows = []
    for ex in catalog.exercises:
        parts = []
        if mode in ("E2E", "Concate"):
            if ex not in e_rows:
                raise CoverageError(f"exercise {ex!r} has no E2E embedding")
            parts.append(e_rows[ex])
        if mode in ("C2C", "Concate"):
            missing = [c for c in catalog.membership[ex] if c not in c_rows]
            if missing:
                raise CoverageError(f"concept(s) {missing} have no C2C embedding")
            parts.append(np.mean([c_rows[c] for c in catalog.membership[ex]], axis=0))
        rows.append(np.concatenate(parts))
    return EmbeddingTable(tuple(catalog.exercises), np.array(rows))


def shuffle_rows(table: EmbeddingTable, seed=0) -> EmbeddingTable:
    """Same vectors, randomly reassigned to ids (a null control)."""
    perm = np.random.default_rng(seed).permutation(len(table.ids))
    return EmbeddingTable(table.ids, table.vectors[perm].copy())


def checksum(table: EmbeddingTable) -> str:
    return hashlib.sha256(np.ascontiguousarray(table.vectors).tobytes()).hexdigest()


# ---------------------------------------------------------------- parameters

@dataclass(frozen=True)
class HeadConfig:
    hidden: int = 64
    response_dim: int = 16
    mem_slots: int = 20
    d_k: int = 64
    d_v: int = 64
    lr: float = 1e-3
    epochs: int = 200
    batch_size: int = 8
    patience: int = 10
    valid_fraction: float = 0.1
    finetune: bool = False
    zero_response_init: bool = False


def init_dkt(d_fused: int, n_exercises: int, cfg: HeadConfig, rng) -> dict:
    d_x, h = d_fused + cfg.response_dim, cfg.hidden
    return {
        "R": nx.parameter(np.zeros((2, cfg.response_dim)) if cfg.zero_response_init
                          else nx.xavier_uniform(rng, 2, cfg.response_dim)),
        "W_hx": nx.parameter(nx.xavier_uniform(rng, d_x, h)),
        "W_hh": nx.parameter(nx.xavier_uniform(rng, h, h)),
        "b_h": nx.parameter(np.zeros((1, h))),
        "W_yh": nx.parameter(nx.xavier_uniform(rng, h, n_exercises)),
        "b_y": nx.parameter(np.zeros((1, n_exercises))),
    }


def init_dkvmn(d_fused: int, cfg: HeadConfig, rng) -> dict:
    d_x = d_fused + cfg.response_dim
    n, dk, dv, h = cfg.mem_slots, cfg.d_k, cfg.d_v, cfg.hidden
    return {
        "R": nx.parameter(np.zeros((2, cfg.response_dim)) if cfg.zero_response_init
                          else nx.xavier_uniform(rng, 2, cfg.response_dim)),
        # the key memory is fixed after initialisation
        "M_k": nx.Tensor(nx.xavier_uniform(rng, n, dk)),
        "M_v0": nx.parameter(nx.xavier_uniform(rng, n, dv)),
        "A_k": nx.parameter(nx.xavier_uniform(rng, d_fused, dk)),
        "A_v": nx.parameter(nx.xavier_uniform(rng, d_x, dv)),
        "W_e": nx.parameter(nx.xavier_uniform(rng, dv, dv)),
        "b_e": nx.parameter(np.zeros((1, dv))),
        "W_a": nx.parameter(nx.xavier_uniform(rng, dv, dv)),
        "b_a": nx.parameter(np.zeros((1, dv))),
        "W_f": nx.parameter(nx.xavier_uniform(rng, dv + dk, h)),
        "b_f": nx.parameter(np.zeros((1, h))),
        "W_o": nx.parameter(nx.xavier_uniform(rng, h, 1)),
        "b_o": nx.parameter(np.zeros((1, 1))),
    }


# --------------------------------------------------------------------- steps

def build_input(fused_rows, answers, response):
    """``[fused(e_t) ; r(a_t)]`` for a batch; ``answers`` index rows of ``response``."""
    return nx.concat([nx.tensor(fused_rows), nx.take_rows(response, np.asarray(answers))], axis=1)


def dkt_step(x, h_prev, params: dict):
    """One recurrent step. Returns ``(h_t, y_t)`` with ``y_t`` over all exercises."""
    x, h_prev = nx.tensor(x), nx.tensor(h_prev)
    if x.shape[-1] != params["W_hx"].shape[0] or h_prev.shape[-1] != params["W_hh"].shape[0]:
        raise nx.DimensionError(f"dkt_step: x {x.shape}, h {h_prev.shape}, "
                                f"W_hx {params['W_hx'].shape}, W_hh {params['W_hh'].shape}")
    h = nx.tanh(nx.add(nx.add(nx.matmul(x, params["W_hx"]), nx.matmul(h_prev, params["W_hh"])),
                       params["b_h"]))
    y = nx.sigmoid(nx.add(nx.matmul(h, params["W_yh"]), params["b_y"]))
    return h, y


def attention(k, params):
    """Softmax over memory slots of ``k M_k^T`` (one row per batch item)."""
    return nx.softmax(nx.matmul(k, nx.transpose(params["M_k"])), axis=-1)


def dkvmn_step(k, v, mv_prev, params: dict):
    """Read then write the value memory.

    ``k``: key embeddings ``B x d_k``; ``v``: interaction embeddings
    ``B x d_v``; ``mv_prev``: ``B x N x d_v``. Returns
    ``(p_logit, p, mv_next, w)`` where the prediction uses the memory
    before this step's write.
    """
    k, v, mv_prev = nx.tensor(k), nx.tensor(v), nx.tensor(mv_prev)
    if k.shape[-1] != params["M_k"].shape[1] or v.shape[-1] != params["W_e"].shape[0]:
        raise nx.DimensionError(f"dkvmn_step: key {k.shape}, value {v.shape}, "
                                f"M_k {params['M_k'].shape}, W_e {params['W_e'].shape}")
    b, n = k.shape[0], params["M_k"].shape[0]
    w = attention(k, params)
    w3 = nx.reshape(w, (b, n, 1))
    read = nx.sum(nx.mul(w3, mv_prev), axis=1)
    summary = nx.tanh(nx.add(nx.matmul(nx.concat([read, k], axis=1), params["W_f"]), params["b_f"]))
    logit = nx.add(nx.matmul(summary, params["W_o"]), params["b_o"])
    erase = nx.sigmoid(nx.add(nx.matmul(v, params["W_e"]), params["b_e"]))
    add = nx.tanh(nx.add(nx.matmul(v, params["W_a"]), params["b_a"]))
    dv = erase.shape[-1]
    keep = nx.sub(1.0, nx.mul(w3, nx.reshape(erase, (b, 1, dv))))
    mv_next = nx.add(nx.mul(mv_prev, keep), nx.mul(w3, nx.reshape(add, (b, 1, dv))))
    return logit, nx.sigmoid(logit), mv_next, w


# ------------------------------------------------------------------- batches

@dataclass
class Batch:
    exercises: np.ndarray  # B x T exercise rows
    answers: np.ndarray    # B x T in {0, 1}
    mask: np.ndarray       # B x T, 1 where a real interaction exists

    @property
    def targets(self) -> int:
        return int(self.mask[:, 1:].sum())


def make_batch(sequences, index: dict) -> Batch:
    t = max(len(s) for s in sequences)
    ex = np.zeros((len(sequences), t), dtype=int)
    ans = np.zeros((len(sequences), t), dtype=int)
    mask = np.zeros((len(sequences), t))
    for b, s in enumerate(sequences):
        try:
            ex[b, :len(s)] = [index[e] for e in s.exercises]
        except KeyError as exc:
            raise CoverageError(f"exercise {exc.args[0]!r} has no fused embedding") from None
        ans[b, :len(s)] = s.correct
        mask[b, :len(s)] = 1
    return Batch(ex, ans, mask)


def _bce_sum(logits, answers, mask):
    """Masked ``softplus(z) - a z`` summed over every entry."""
    a = answers.astype(float)
    return nx.sum(nx.mul(nx.sub(nx.softplus(logits), nx.mul(logits, a)), mask))


def _input_projection(fused, params, weight):
    """Split ``[f ; r] @ weight`` into per-exercise and per-answer lookup tables."""
    d_f = fused.shape[1]
    w_f = nx.select(params[weight], np.s_[:d_f])
    w_r = nx.select(params[weight], np.s_[d_f:])
    return nx.matmul(fused, w_f), nx.matmul(params["R"], w_r)


def forward_dkt(params, fused, batch: Batch):
    """Unrolled recurrent head over a padded batch.

    Same arithmetic as repeated :func:`dkt_step` calls on
    :func:`build_input` vectors, but the input and readout matmuls are
    hoisted out of the time loop. Returns ``(loss_sum, logits)`` with
    logits ``B x (T-1)`` for targets ``t = 1 .. T-1``.
    """
    b, t = batch.exercises.shape
    by_exercise, by_answer = _input_projection(fused, params, "W_hx")
    x_all = nx.add(nx.add(nx.take_rows(by_exercise, batch.exercises[:, :-1]),
                          nx.take_rows(by_answer, batch.answers[:, :-1])), params["b_h"])
    h = nx.Tensor(np.zeros((b, params["W_hh"].shape[0])))
    states = []
    for step in range(t - 1):
        h = nx.tanh(nx.add(nx.select(x_all, np.s_[:, step]), nx.matmul(h, params["W_hh"])))
        states.append(h)
    hs = nx.stack(states, axis=1)
    nxt = batch.exercises[:, 1:]
    w_rows = nx.take_rows(nx.transpose(params["W_yh"]), nxt)
    bias = nx.reshape(nx.take_rows(nx.transpose(params["b_y"]), nxt), nxt.shape)
    logits = nx.add(nx.sum(nx.mul(hs, w_rows), axis=-1), bias)
    return _bce_sum(logits, batch.answers[:, 1:], batch.mask[:, 1:]), logits.value


def forward_dkvmn(params, fused, batch: Batch):
    """Unrolled memory head. Gates and attention depend only on the inputs,
    so they are computed for all steps at once; only the memory recurrence
    runs step by step."""
    b, t = batch.exercises.shape
    n, dv = params["M_v0"].shape
    keys = nx.take_rows(nx.matmul(fused, params["A_k"]), batch.exercises)              # B T dk
    by_exercise, by_answer = _input_projection(fused, params, "A_v")
    values = nx.add(nx.take_rows(by_exercise, batch.exercises), nx.take_rows(by_answer, batch.answers))
    w = attention(keys, params)                                                        # B T N
    erase = nx.sigmoid(nx.add(nx.matmul(values, params["W_e"]), params["b_e"]))       # B T dv
    add = nx.tanh(nx.add(nx.matmul(values, params["W_a"]), params["b_a"]))
    w4 = nx.reshape(w, (b, t, n, 1))
    erase4 = nx.reshape(erase, (b, t, 1, dv))
    add4 = nx.reshape(add, (b, t, 1, dv))

    mv = nx.add(nx.Tensor(np.zeros((b, n, dv))), nx.reshape(params["M_v0"], (1, n, dv)))
    reads = []
    for step in range(t):
        w_t = nx.select(w4, np.s_[:, step])
        if step > 0:
            reads.append(nx.sum(nx.mul(w_t, mv), axis=1))
        if step < t - 1:
            keep = nx.sub(1.0, nx.mul(w_t, nx.select(erase4, np.s_[:, step])))
            mv = nx.add(nx.mul(mv, keep), nx.mul(w_t, nx.select(add4, np.s_[:, step])))
    read = nx.stack(reads, axis=1)                                                     # B T-1 dv
    summary = nx.tanh(nx.add(nx.matmul(nx.concat([read, nx.select(keys, np.s_[:, 1:])], axis=-1),
                                       params["W_f"]), params["b_f"]))
    logits = nx.reshape(nx.add(nx.matmul(summary, params["W_o"]), params["b_o"]), (b, t - 1))
    return _bce_sum(logits, batch.answers[:, 1:], batch.mask[:, 1:]), logits.value


FORWARD = {"R": forward_dkt, "M": forward_dkvmn}


# ------------------------------------------------------------------ training

@dataclass
class PredictorState:
    kind: str
    params: dict
    exercises: tuple
    config: HeadConfig
    fused_checksum: str = ""
    fused: np.ndarray | None = None  # only kept when fine-tuned


@dataclass
class HeadResult:
    state: PredictorState
    trace: list = field(default_factory=list)  # (epoch, train_loss, valid_auc)


def _snapshot(params):
    return {k: p.value.copy() for k, p in params.items()}


def _split_validation(sequences, fraction, seed):
    students = sorted({s.student_id for s in sequences})
    n_valid = int(round(fraction * len(students)))
    if fraction <= 0 or n_valid == 0 or n_valid >= len(students):
        return list(sequences), []
    perm = np.random.default_rng([seed, 7919]).permutation(len(students))
    valid_ids = {students[i] for i in perm[:n_valid]}
    return ([s for s in sequences if s.student_id not in valid_ids],
            [s for s in sequences if s.student_id in valid_ids])


def train_head(sequences, fused: EmbeddingTable, kind="R", cfg: HeadConfig | None = None,
               valid=None, seed=0) -> HeadResult:
    """Fit a head by minimising next-step binary cross-entropy with Adam.

    ``valid=None`` holds out ``cfg.valid_fraction`` of the students for
    early stopping; pass an empty list to train for all epochs.
    The best-validation parameters are returned.
    """
    from .evaluation import auc, UndefinedMetricError

    cfg = cfg or HeadConfig()
    if kind not in HEADS:
        raise ValueError(f"unknown head {kind!r}")
    sequences = [s for s in sequences if len(s) >= 2]
    if not sequences:
        raise ValueError("no training sequence has a next-step target")
    if valid is None:
        sequences, valid = _split_validation(sequences, cfg.valid_fraction, seed)
    valid = [s for s in valid if len(s) >= 2]

    before = checksum(fused)
    index = {e: i for i, e in enumerate(fused.ids)}
    rng = np.random.default_rng(seed)
    params = (init_dkt(fused.dim, len(fused.ids), cfg, rng) if kind == "R"
              else init_dkvmn(fused.dim, cfg, rng))
    fused_t = nx.parameter(fused.vectors.copy()) if cfg.finetune else nx.Tensor(fused.vectors)
    trainable = {k: p for k, p in params.items() if p.requires_grad}
    if cfg.finetune:
        trainable["fused"] = fused_t
    opt = nx.Adam(trainable, lr=cfg.lr)
    forward = FORWARD[kind]
    valid_batch = make_batch(valid, index) if valid else None

    best, best_auc, stale, trace = _snapshot(params), -np.inf, 0, []
    best_fused = fused_t.value.copy()
    for epoch in range(1, cfg.epochs + 1):
        order = np.random.default_rng([seed, epoch]).permutation(len(sequences))
        total, count = 0.0, 0
        for start in range(0, len(order), cfg.batch_size):
            batch = make_batch([sequences[i] for i in order[start:start + cfg.batch_size]], index)
            if batch.targets == 0:
                continue
            loss, _ = forward(params, fused_t, batch)
            loss = nx.mul(loss, 1.0 / batch.targets)
            value = float(loss.value[0, 0])
            if not np.isfinite(value):
                raise DivergenceError(epoch, "head training loss")
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += value * batch.targets
            count += batch.targets
        valid_auc = float("nan")
        if valid_batch is not None:
            scores, labels = _scores(forward, params, fused_t, valid_batch)
            try:
                valid_auc = auc(scores, labels)
            except UndefinedMetricError:
                valid_auc = float("nan")
        trace.append((epoch, total / max(count, 1), valid_auc))
        if valid_batch is None or np.isnan(valid_auc):
            best, best_fused = _snapshot(params), fused_t.value.copy()
            continue
        if valid_auc > best_auc:
            best_auc, stale = valid_auc, 0
            best, best_fused = _snapshot(params), fused_t.value.copy()
        else:
            stale += 1
            if stale >= cfg.patience:
                log.info("early stop at epoch %d (best valid AUC %.4f)", epoch, best_auc)
                break

    if checksum(fused) != before:
        raise RuntimeError("fused embedding table was mutated during head training")
    final = {k: nx.parameter(v) if params[k].requires_grad else nx.Tensor(v) for k, v in best.items()}
    state = PredictorState(kind, final, tuple(fused.ids), cfg, before,
                           best_fused if cfg.finetune else None)
    return HeadResult(state, trace)


def _scores(forward, params, fused_t, batch: Batch):
    frozen = {k: nx.Tensor(p.value) for k, p in params.items()}
    _, logits = forward(frozen, nx.Tensor(fused_t.value), batch)
    m = batch.mask[:, 1:].astype(bool)
    return nx.sigmoid_array(logits[m]), batch.answers[:, 1:][m]


def predict(state: PredictorState, fused: EmbeddingTable, sequences):
    """Next-step probabilities and true answers for every target in ``sequences``."""
    sequences = [s for s in sequences if len(s) >= 2]
    if not sequences:
        return np.zeros(0), np.zeros(0, dtype=int)
    vectors = state.fused if state.fused is not None else fused.vectors
    index = {e: i for i, e in enumerate(fused.ids)}
    return _scores(FORWARD[state.kind], state.params, nx.Tensor(vectors), make_batch(sequences, index))
