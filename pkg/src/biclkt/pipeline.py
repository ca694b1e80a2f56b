"""End-to-end stages. Each stage reads its predecessors' artifacts from the
output directory and writes its own, plus a JSON manifest recording the
config fingerprint, input/output hashes and wall time."""
from __future__ import annotations

import hashlib
import json
import logging
import threading
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import dataio, evaluation, graph, prediction
from .config import ConfigError, RunConfig
from .contrastive import EmbeddingTable, pretrain, write_trace
from .encoders import load_checkpoint, save_checkpoint

log = logging.getLogger(__name__)

STAGES = ("synth", "ingest", "build-graphs", "pretrain", "train-head", "evaluate", "ablate")
PIPELINE = STAGES[1:]
PREDECESSOR = {"ingest": None, "build-graphs": "ingest", "pretrain": "build-graphs",
               "train-head": "pretrain", "evaluate": "train-head", "ablate": "ingest"}


class MissingArtifactError(FileNotFoundError):
    pass


class StaleArtifactError(ConfigError):
    pass


def sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


@dataclass
class Workspace:
    out: Path
    cfg: RunConfig
    force: bool = False
    threads: int = 1

    def __post_init__(self):
        self.out = Path(self.out)
        self.out.mkdir(parents=True, exist_ok=True)

    def path(self, *parts) -> Path:
        p = self.out.joinpath(*parts)
        p.parent.mkdir(parents=True, exist_ok=True)
        return p

    def manifest_path(self, stage) -> Path:
        return self.out / f"{stage}.manifest.json"

    def require(self, stage):
        """Check ``stage`` ran, with a matching fingerprint unless forced."""
        mp = self.manifest_path(stage)
        if not mp.exists():
            raise MissingArtifactError(f"missing {stage} artifacts in {self.out}: run {stage} first")
        manifest = json.loads(mp.read_text())
        expected = self.cfg.fingerprint(stage)
        if manifest["fingerprint"] != expected and not self.force:
            raise StaleArtifactError(
                f"{stage} artifacts were made with config {manifest['fingerprint']}, current config is "
                f"{expected}; rerun {stage} or pass --force")
        for rel, digest in manifest["outputs"].items():
            if not (self.out / rel).exists():
                raise MissingArtifactError(f"{rel} is missing: run {stage} first")
        return manifest

    def record(self, stage, inputs, outputs, started):
        manifest = {
            "stage": stage,
            "fingerprint": self.cfg.fingerprint(stage),
            "inputs": {str(Path(p).relative_to(self.out)) if Path(p).is_relative_to(self.out) else str(p): sha256(p)
                       for p in inputs},
            "outputs": {str(Path(p).relative_to(self.out)): sha256(p) for p in outputs},
            "wall_seconds": round(time.perf_counter() - started, 3),
        }
        self.manifest_path(stage).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
        return manifest


# -------------------------------------------------------------------- stages

def stage_synth(ws: Workspace):
    started = time.perf_counter()
    s = ws.cfg.synth
    data = dataio.generate_synthetic(s.n_students, s.n_concepts, s.n_exercises, s.seq_len,
                                     ws.cfg.mastery_params(), seed=ws.cfg.run.seed)
    out = ws.path("synth", "interactions.csv")
    dataio.write_log(out, data.interactions)
    return ws.record("synth", [], [out], started)


def _load_source(ws: Workspace):
    if ws.cfg.data.path:
        name = ws.cfg.data.format
        if name.lower() in ("assist2009", "assistment2009"):
            fmt = dataio.ASSIST2009
        else:
            fmt = dataio.FormatConfig.load(name) if name else None
        return Path(ws.cfg.data.path), fmt
    src = ws.path("synth", "interactions.csv")
    if not src.exists():
        raise MissingArtifactError("data.path is empty and no synthetic log exists: run synth first")
    return src, None


def stage_ingest(ws: Workspace):
    started = time.perf_counter()
    src, fmt = _load_source(ws)
    logdata = dataio.parse_log(src, fmt)
    out = ws.path("ingest", "interactions.csv")
    dataio.write_log(out, logdata.interactions)
    cat = ws.path("ingest", "catalog.json")
    cat.write_text(json.dumps({
        "n_students": len(logdata.students), "n_concepts": len(logdata.catalog.concepts),
        "n_exercises": len(logdata.catalog.exercises), "n_interactions": len(logdata.interactions),
        "skipped_rows": logdata.skipped,
    }, indent=2) + "\n")
    log.info("ingested %d interactions (%d rows skipped)", len(logdata.interactions), logdata.skipped)
    return ws.record("ingest", [src], [out, cat], started)


def load_ingested(ws: Workspace) -> dataio.LogData:
    ws.require("ingest")
    return dataio.parse_log(ws.path("ingest", "interactions.csv"))


def split_data(logdata, cfg: RunConfig, seed=None):
    seed = cfg.run.seed if seed is None else seed
    return dataio.split(logdata.interactions, dataio.SplitSpec(cfg.data.train_fraction, seed))


def make_graphs(train, catalog, cfg: RunConfig):
    g = cfg.graph
    return graph.build_all(train, catalog, g.edge_threshold, g.cap, g.count_mode)


def stage_build_graphs(ws: Workspace):
    started = time.perf_counter()
    logdata = load_ingested(ws)
    train, test = split_data(logdata, ws.cfg)
    graphs = make_graphs(train, logdata.catalog, ws.cfg)
    edges = ws.path("graphs", "graphs.csv")
    graph.write_edge_list(edges, graphs)
    split_file = ws.path("graphs", "split.json")
    split_file.write_text(json.dumps({
        "train": sorted({it.student_id for it in train}),
        "test": sorted({it.student_id for it in test}),
    }, indent=1) + "\n")
    return ws.record("build-graphs", [ws.path("ingest", "interactions.csv")],
                     [edges, edges.with_name("graphs.nodes.csv"), split_file], started)


def load_split(ws: Workspace, logdata):
    ws.require("build-graphs")
    ids = json.loads(ws.path("graphs", "split.json").read_text())
    train_ids = set(ids["train"])
    return ([it for it in logdata.interactions if it.student_id in train_ids],
            [it for it in logdata.interactions if it.student_id not in train_ids])


def run_pretraining(graphs, catalog, cfg: RunConfig, seed=None, centrality=None):
    aug = cfg.aug
    if centrality is not None and centrality != aug.centrality:
        aug = cfg.override("aug", centrality=centrality).aug
    return pretrain(graphs, catalog.exercises, aug, cfg.encoder_config(), cfg.contrastive_config(),
                    seed=cfg.run.seed if seed is None else seed)


def stage_pretrain(ws: Workspace):
    started = time.perf_counter()
    ws.require("build-graphs")
    logdata = load_ingested(ws)
    graphs = graph.read_edge_list(ws.path("graphs", "graphs.csv"))
    result = run_pretraining(graphs, logdata.catalog, ws.cfg)
    outs = [ws.path("pretrain", n) for n in ("node.npz", "graph.npz", "e2e.txt", "c2c.txt", "trace.csv")]
    meta = {"fingerprint": ws.cfg.fingerprint("pretrain")}
    save_checkpoint(outs[0], result.node_params, {**meta, "level": "node"})
    save_checkpoint(outs[1], result.graph_params, {**meta, "level": "graph"})
    result.e2e.save(outs[2])
    result.c2c.save(outs[3])
    write_trace(outs[4], result.trace)
    return ws.record("pretrain", [ws.path("graphs", "graphs.csv")], outs, started)


def load_fused(ws: Workspace, catalog, mode=None):
    ws.require("pretrain")
    e2e = EmbeddingTable.load(ws.path("pretrain", "e2e.txt"))
    c2c = EmbeddingTable.load(ws.path("pretrain", "c2c.txt"))
    return prediction.fuse(e2e, c2c, catalog, mode or ws.cfg.head.mode)


def stage_train_head(ws: Workspace):
    started = time.perf_counter()
    logdata = load_ingested(ws)
    train, _ = load_split(ws, logdata)
    fused = load_fused(ws, logdata.catalog)
    result = prediction.train_head(dataio.to_sequences(train, ws.cfg.data.max_len), fused,
                                   ws.cfg.head.kind, ws.cfg.head_config(), seed=ws.cfg.run.seed)
    ckpt = ws.path("head", "head.npz")
    params = dict(result.state.params)
    if result.state.fused is not None:
        params["fused"] = result.state.fused
    save_checkpoint(ckpt, params, {"kind": ws.cfg.head.kind, "mode": ws.cfg.head.mode,
                                   "fused_checksum": result.state.fused_checksum,
                                   "fingerprint": ws.cfg.fingerprint("train-head")})
    trace = ws.path("head", "trace.csv")
    with open(trace, "w", encoding="utf-8") as fh:
        fh.write("epoch,train_loss,valid_auc\n")
        for epoch, loss, vauc in result.trace:
            fh.write(f"{epoch},{loss!r},{vauc!r}\n")
    return ws.record("train-head", [ws.path("pretrain", "e2e.txt"), ws.path("pretrain", "c2c.txt")],
                     [ckpt, trace], started)


def probe_features(fused: EmbeddingTable, sequences):
    """One row per next-step target: the target exercise's normalised fused vector."""
    index = {e: i for i, e in enumerate(fused.ids)}
    rows, labels = [], []
    for s in sequences:
        for e, a in zip(s.exercises[1:], s.correct[1:]):
            rows.append(index[e])
            labels.append(a)
    return fused.vectors[np.array(rows, dtype=int)], np.array(labels, dtype=int)


def run_probe(fused, train_seqs, test_seqs, cfg: RunConfig, seed):
    x_tr, y_tr = probe_features(fused, train_seqs)
    x_te, y_te = probe_features(fused, test_seqs)
    x = np.vstack([x_tr, x_te])
    y = np.concatenate([y_tr, y_te])
    e = cfg.eval
    return evaluation.linear_probe(x, y, np.arange(len(y_tr)), np.arange(len(y_tr), len(y)),
                                   l2=e.probe_l2, epochs=e.probe_epochs, lr=e.probe_lr, seed=seed,
                                   threshold=e.threshold)


def stage_evaluate(ws: Workspace):
    started = time.perf_counter()
    logdata = load_ingested(ws)
    train, test = load_split(ws, logdata)
    fused = load_fused(ws, logdata.catalog)
    ws.require("train-head")
    params, meta = load_checkpoint(ws.path("head", "head.npz"))
    finetuned = params.pop("fused", None)
    if "M_k" in params:
        params["M_k"] = type(params["M_k"])(params["M_k"].value)
    state = prediction.PredictorState(meta["kind"], params, fused.ids, ws.cfg.head_config(),
                                      meta["fused_checksum"],
                                      finetuned.value if finetuned is not None else None)
    test_seqs = dataio.to_sequences(test, ws.cfg.data.max_len)
    scores, labels = prediction.predict(state, fused, test_seqs)
    c, seed = ws.cfg, ws.cfg.run.seed
    rows = [{"dataset": c.data.name, "aug": c.aug.centrality, "embed_mode": c.head.mode,
             "head": meta["kind"], "seed": seed, "auc": evaluation.auc(scores, labels),
             "acc": evaluation.acc(scores, labels, c.eval.threshold), "n_predictions": len(labels)}]
    probe = run_probe(fused, dataio.to_sequences(train, c.data.max_len), test_seqs, c, seed)
    rows.append({**rows[0], "head": "probe", "auc": probe.auc, "acc": probe.acc,
                 "n_predictions": probe.n_predictions})
    out = ws.path("evaluate", "metrics.csv")
    evaluation.write_report(out, rows)
    summary = ws.path("evaluate", "summary.txt")
    summary.write_text("".join(f"{r['head']:>6}  AUC {r['auc']:.4f}  ACC {r['acc']:.4f}  "
                               f"n={r['n_predictions']}\n" for r in rows))
    print(summary.read_text(), end="")
    return ws.record("evaluate", [ws.path("head", "head.npz")], [out, summary], started)


class CellRunner:
    """Runs one ablation cell end to end; pretraining is shared between
    cells that differ only in fusion mode or head."""

    def __init__(self, logdata, cfg: RunConfig):
        self.logdata, self.cfg = logdata, cfg
        self._cache, self._lock = {}, threading.Lock()

    def pretrained(self, centrality, seed):
        key = (centrality, seed)
        with self._lock:
            if key not in self._cache:
                train, test = split_data(self.logdata, self.cfg, seed)
                graphs = make_graphs(train, self.logdata.catalog, self.cfg)
                self._cache[key] = (train, test,
                                    run_pretraining(graphs, self.logdata.catalog, self.cfg, seed, centrality))
            return self._cache[key]

    def __call__(self, cell: evaluation.Cell):
        train, test, pre = self.pretrained(cell.aug, cell.seed)
        fused = prediction.fuse(pre.e2e, pre.c2c, self.logdata.catalog, cell.embed_mode)
        max_len = self.cfg.data.max_len
        result = prediction.train_head(dataio.to_sequences(train, max_len), fused, cell.head,
                                       self.cfg.head_config(), seed=cell.seed)
        scores, labels = prediction.predict(result.state, fused, dataio.to_sequences(test, max_len))
        return {"auc": evaluation.auc(scores, labels),
                "acc": evaluation.acc(scores, labels, self.cfg.eval.threshold),
                "n_predictions": len(labels)}


def stage_ablate(ws: Workspace):
    started = time.perf_counter()
    logdata = load_ingested(ws)
    c = ws.cfg
    seeds = tuple(c.run.seed + k for k in range(c.eval.n_seeds))
    cells = evaluation.grid_cells(c.eval.grid_aug, c.eval.grid_modes, c.eval.grid_heads, seeds,
                                  base=(c.aug.centrality, c.head.mode, c.head.kind))
    result = evaluation.run_ablation(cells, CellRunner(logdata, c), c.data.name, ws.threads)
    csv_out = ws.path("ablate", "ablation.csv")
    txt_out = ws.path("ablate", "ablation.txt")
    dat_out = ws.path("ablate", "ablation.dat")
    evaluation.write_report(csv_out, result.rows)
    table = evaluation.format_table(result)
    txt_out.write_text(table + "\n")
    evaluation.write_gnuplot(dat_out, result)
    print(table)
    return ws.record("ablate", [ws.path("ingest", "interactions.csv")], [csv_out, txt_out, dat_out], started)


RUNNERS = {
    "synth": stage_synth, "ingest": stage_ingest, "build-graphs": stage_build_graphs,
    "pretrain": stage_pretrain, "train-head": stage_train_head, "evaluate": stage_evaluate,
    "ablate": stage_ablate,
}


def run_stage(ws: Workspace, stage: str):
    return RUNNERS[stage](ws)


def run_pipeline(ws: Workspace, stages=PIPELINE):
    return [run_stage(ws, s) for s in stages]
