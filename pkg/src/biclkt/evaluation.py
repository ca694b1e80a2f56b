"""Metrics, the logistic-regression probe, and ablation tables."""
from __future__ import annotations

import csv
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import rankdata

from . import numerics as nx

log = logging.getLogger(__name__)

REPORT_COLUMNS = ("dataset", "aug", "embed_mode", "head", "seed", "auc", "acc", "n_predictions")


class UndefinedMetricError(ValueError):
    pass


def auc(scores, labels) -> float:
    """Probability that a random positive outranks a random negative (ties count half).

    Computed from the Mann-Whitney rank sum with average ranks for ties.
    """
    scores = np.asarray(scores, dtype=float).ravel()
    labels = np.asarray(labels).ravel()
    if scores.shape != labels.shape:
        raise ValueError(f"{scores.size} scores vs {labels.size} labels")
    pos = labels == 1
    n_pos, n_neg = int(pos.sum()), int((~pos).sum())
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUC needs at least one positive and one negative label")
    ranks = rankdata(scores)
    u = ranks[pos].sum() - n_pos * (n_pos + 1) / 2
    return float(u / (n_pos * n_neg))


def acc(scores, labels, threshold=0.5) -> float:
    """Fraction of correct hard predictions; a score equal to the threshold predicts 0."""
    scores = np.asarray(scores, dtype=float).ravel()
    labels = np.asarray(labels).ravel()
    if scores.size == 0:
        raise ValueError("no predictions")
    return float(np.mean((scores > threshold).astype(int) == labels))


@dataclass
class MetricReport:
    auc: float
    acc: float
    n_predictions: int
    per_seed: list = field(default_factory=list)
    fingerprint: str = ""


def _summary(rows):
    aucs = np.array([r["auc"] for r in rows], dtype=float)
    accs = np.array([r["acc"] for r in rows], dtype=float)
    return MetricReport(float(np.mean(aucs)), float(np.mean(accs)),
                        int(sum(r["n_predictions"] for r in rows)), list(rows))


# --------------------------------------------------------------------- probe

def normalize_rows(x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    return np.divide(x, norms, out=np.zeros_like(x), where=norms > 0)


def probe_loss(features, labels, w, b, l2=1e-4):
    """Mean logistic loss plus ``l2 * ||w||^2``."""
    z = nx.add(nx.matmul(features, w), b)
    y = np.asarray(labels, dtype=float).reshape(-1, 1)
    data = nx.mul(nx.sum(nx.sub(nx.softplus(z), nx.mul(z, y))), 1.0 / len(y))
    return nx.add(data, nx.mul(nx.sum(nx.mul(w, w)), l2))


def fit_logistic(features, labels, l2=1e-4, epochs=500, lr=0.05, seed=0):
    """Full-batch Adam on the regularised logistic loss; returns ``(w, b)`` arrays."""
    features = np.asarray(features, dtype=float)
    rng = np.random.default_rng(seed)
    w = nx.parameter(nx.xavier_uniform(rng, features.shape[1], 1))
    b = nx.parameter(np.zeros((1, 1)))
    opt = nx.Adam({"w": w, "b": b}, lr=lr)
    x = nx.Tensor(features)
    for _ in range(epochs):
        opt.zero_grad()
        probe_loss(x, labels, w, b, l2).backward()
        opt.step()
    return w.value, b.value


def linear_probe(features, labels, train_idx, test_idx, l2=1e-4, epochs=500, lr=0.05,
                 seed=0, threshold=0.5) -> MetricReport:
    """Row-normalise, fit logistic regression on ``train_idx``, score ``test_idx``."""
    x = normalize_rows(features)
    y = np.asarray(labels).astype(int)
    train_idx, test_idx = np.asarray(train_idx), np.asarray(test_idx)
    if len(np.unique(y[train_idx])) < 2:
        raise UndefinedMetricError("probe training labels are single-class")
    w, b = fit_logistic(x[train_idx], y[train_idx], l2, epochs, lr, seed)
    scores = nx.sigmoid_array(x[test_idx] @ w + b).ravel()
    row = {"seed": seed, "auc": auc(scores, y[test_idx]), "acc": acc(scores, y[test_idx], threshold),
           "n_predictions": len(test_idx)}
    return _summary([row])


# ------------------------------------------------------------------ ablation

@dataclass(frozen=True)
class Cell:
    aug: str
    embed_mode: str
    head: str
    seed: int


@dataclass
class AblationResult:
    dataset: str
    rows: list = field(default_factory=list)       # dicts keyed by REPORT_COLUMNS
    failures: list = field(default_factory=list)   # (Cell, message)

    def summary(self) -> dict:
        """(aug, embed_mode, head) -> MetricReport across seeds."""
        groups = {}
        for r in self.rows:
            groups.setdefault((r["aug"], r["embed_mode"], r["head"]), []).append(r)
        return {k: _summary(v) for k, v in groups.items()}


def grid_cells(centralities=(), modes=(), heads=(), seeds=(0,), base=("degree", "Concate", "R")):
    """Cartesian grid; an empty axis falls back to the base value. All axes empty -> no cells."""
    if not (centralities or modes or heads):
        return []
    return [Cell(a, m, h, s)
            for a in (centralities or (base[0],))
            for m in (modes or (base[1],))
            for h in (heads or (base[2],))
            for s in seeds]


def run_ablation(cells, runner, dataset="synthetic", threads=1) -> AblationResult:
    """Run ``runner(cell) -> dict(auc=, acc=, n_predictions=)`` for every cell.

    A failing cell is recorded and the rest continue. Rows come back in
    grid order whatever the thread count.
    """
    def guarded(cell):
        try:
            return cell, runner(cell), None
        except Exception as exc:  # noqa: BLE001 - a failed cell must not stop the sweep
            log.warning("ablation cell %s failed: %s", cell, exc)
            return cell, None, f"{type(exc).__name__}: {exc}"

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            outcomes = list(pool.map(guarded, cells))
    else:
        outcomes = [guarded(c) for c in cells]

    result = AblationResult(dataset)
    for cell, metrics, error in outcomes:
        if error is not None:
            result.failures.append((cell, error))
            continue
        result.rows.append({"dataset": dataset, "aug": cell.aug, "embed_mode": cell.embed_mode,
                            "head": cell.head, "seed": cell.seed, "auc": metrics["auc"],
                            "acc": metrics["acc"], "n_predictions": metrics["n_predictions"]})
    return result


def write_report(path, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(REPORT_COLUMNS)
        for r in rows:
            w.writerow([repr(r[c]) if isinstance(r[c], float) else r[c] for c in REPORT_COLUMNS])


def format_table(result: AblationResult) -> str:
    """Aligned text: one line per (aug, mode, head) with mean +- std over seeds."""
    header = ("aug", "embed_mode", "head", "seeds", "AUC", "ACC")
    lines = []
    for (a, m, h), rep in result.summary().items():
        aucs = [r["auc"] for r in rep.per_seed]
        accs = [r["acc"] for r in rep.per_seed]
        lines.append((a, m, h, str(len(aucs)),
                      f"{np.mean(aucs):.4f} ± {np.std(aucs):.4f}",
                      f"{np.mean(accs):.4f} ± {np.std(accs):.4f}"))
    widths = [max(len(x) for x in col) for col in zip(header, *lines)]
    out = ["  ".join(x.ljust(wd) for x, wd in zip(row, widths)).rstrip() for row in (header, *lines)]
    for cell, msg in result.failures:
        out.append(f"FAILED {cell.aug}/{cell.embed_mode}/{cell.head} seed={cell.seed}: {msg}")
    return "\n".join(out)


def write_gnuplot(path, result: AblationResult) -> None:
    """Whitespace columns: index, label, auc_mean, auc_std, acc_mean, acc_std."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("# idx label auc_mean auc_std acc_mean acc_std\n")
        for k, ((a, m, h), rep) in enumerate(result.summary().items()):
            aucs = [r["auc"] for r in rep.per_seed]
            accs = [r["acc"] for r in rep.per_seed]
            fh.write(f"{k} {a}/{m}/{h} {np.mean(aucs):.6f} {np.std(aucs):.6f} "
                     f"{np.mean(accs):.6f} {np.std(accs):.6f}\n")
