import json

import pytest
from hypothesis import given, strategies as st

from biclkt import cli, config
from biclkt.config import RunConfig

TINY = """\
synth.n_students = 24
synth.n_concepts = 3
synth.n_exercises = 9
synth.seq_len = 12
encoder.d_in = 6
encoder.hidden = 5,4
encoder.d = 5
encoder.d_z = 3
loss.epochs = 2
loss.batch_size = 2
head.hidden = 6
head.response_dim = 2
head.epochs = 2
eval.probe_epochs = 20
"""


@pytest.fixture
def tiny(tmp_path):
    p = tmp_path / "tiny.cfg"
    p.write_text(TINY)
    return p


def run(*args):
    return cli.main([str(a) for a in args])


def test_parse_and_build(tmp_path):
    cfg = config.build(config.parse("loss.tau = 0.2  # sharper\nencoder.hidden = 8, 8\nhead.finetune = yes\n"))
    assert cfg.loss.tau == 0.2 and cfg.encoder.hidden == (8, 8) and cfg.head.finetune is True
    with pytest.raises(config.ConfigError, match="loss.temperature"):
        config.build({"loss": {"temperature": "1"}})
    with pytest.raises(config.ConfigError, match="section"):
        config.build({"optimizer": {"lr": "1"}})
    with pytest.raises(config.ConfigError, match="run.seed"):
        config.build({"run": {"seed": "seven"}})
    with pytest.raises(config.ConfigError):
        config.parse("just words\n")


def test_env_overrides_beat_file(tmp_path):
    p = tmp_path / "c.cfg"
    p.write_text("loss.tau = 0.2\n")
    cfg = config.load(p, {"BICLKT_LOSS_TAU": "0.9", "BICLKT_RUN_SEED": "4"})
    assert cfg.loss.tau == 0.9 and cfg.run.seed == 4


def test_invalid_values_surface_as_config_errors():
    with pytest.raises(config.ConfigError):
        config.build({"aug": {"p_mask": "1.5"}})


def test_dump_round_trips():
    cfg = RunConfig().override("loss", tau=0.3).with_seed(11)
    assert config.build(config.parse(cfg.dump())) == cfg


def all_fields():
    return [(s, k, v) for s, k, v in RunConfig().items()]


@given(st.sampled_from(all_fields()))
def test_fingerprint_tracks_every_field(field):
    section, key, value = field
    if isinstance(value, bool):
        new = not value
    elif isinstance(value, int):
        new = value + 1
    elif isinstance(value, float):
        new = value / 2 if value else 0.5  # halving keeps probabilities valid
    elif isinstance(value, tuple):
        new = value + ((value[0] if value else "x"),)
    else:
        new = value + "x"
    base = RunConfig()
    changed = base.override(section, **{key: new})
    assert changed.fingerprint() != base.fingerprint()
    assert RunConfig().fingerprint() == base.fingerprint()


def test_help_lists_every_key(capsys):
    with pytest.raises(SystemExit) as done:
        run("--help")
    assert done.value.code == 0
    text = capsys.readouterr().out
    for section, key, value in RunConfig().items():
        assert f"{section}.{key} = {config.format_value(value)}" in text


def test_missing_predecessor(tmp_path, capsys):
    assert run("pretrain", "--out", tmp_path) == cli.EXIT_MISSING
    assert "run build-graphs first" in capsys.readouterr().err
    assert run("ingest", "--out", tmp_path) == cli.EXIT_MISSING
    assert "run synth first" in capsys.readouterr().err


def test_bad_config_exit_code(tmp_path):
    bad = tmp_path / "bad.cfg"
    bad.write_text("loss.nope = 1\n")
    assert run("synth", "--config", bad, "--out", tmp_path) == cli.EXIT_CONFIG


def test_data_error_exit_code(tmp_path):
    log = tmp_path / "empty.csv"
    log.write_text("student_id,exercise_id,concept_ids,correct,order\n")
    cfg = tmp_path / "c.cfg"
    cfg.write_text(f"data.path = {log}\n")
    assert run("ingest", "--config", cfg, "--out", tmp_path / "o") == cli.EXIT_DATA


def test_divergence_exit_code(tmp_path, tiny):
    cfg = tmp_path / "nan.cfg"
    cfg.write_text(TINY + "loss.lr = nan\n")
    out = tmp_path / "o"
    assert run("synth", "--config", cfg, "--out", out) == 0
    assert run("ingest", "--config", cfg, "--out", out) == 0
    assert run("build-graphs", "--config", cfg, "--out", out) == 0
    assert run("pretrain", "--config", cfg, "--out", out) == cli.EXIT_DIVERGENCE


def test_pipeline_artifacts_and_manifests(tmp_path, tiny):
    out = tmp_path / "o"
    assert run("synth", "--config", tiny, "--out", out) == 0
    assert run("pipeline", "--config", tiny, "--out", out) == 0
    for rel in ("graphs/graphs.csv", "pretrain/e2e.txt", "pretrain/c2c.txt", "pretrain/trace.csv",
                "head/head.npz", "evaluate/metrics.csv"):
        assert (out / rel).exists(), rel
    manifest = json.loads((out / "pretrain.manifest.json").read_text())
    cfg = config.load(tiny)
    assert manifest["fingerprint"] == cfg.fingerprint("pretrain")
    assert "graphs/graphs.csv" in manifest["inputs"] and manifest["wall_seconds"] >= 0
    rows = (out / "evaluate/metrics.csv").read_text().splitlines()
    assert rows[0] == "dataset,aug,embed_mode,head,seed,auc,acc,n_predictions"
    assert [r.split(",")[3] for r in rows[1:]] == ["R", "probe"]


def test_stale_fingerprint_needs_force(tmp_path, tiny, capsys):
    out = tmp_path / "o"
    for stage in ("synth", "ingest", "build-graphs"):
        assert run(stage, "--config", tiny, "--out", out) == 0
    changed = tmp_path / "changed.cfg"
    changed.write_text(TINY + "graph.cap = 5\n")
    assert run("pretrain", "--config", changed, "--out", out) == cli.EXIT_CONFIG
    assert "--force" in capsys.readouterr().err
    assert run("pretrain", "--config", changed, "--out", out, "--force") == 0


def test_pipeline_is_byte_deterministic(tmp_path, tiny):
    outputs = []
    for name in ("a", "b"):
        out = tmp_path / name
        assert run("synth", "--config", tiny, "--out", out) == 0
        assert run("pipeline", "--config", tiny, "--out", out, "--seed", 7) == 0
        outputs.append([(out / rel).read_bytes() for rel in
                        ("evaluate/metrics.csv", "pretrain/e2e.txt", "pretrain/c2c.txt")])
    assert outputs[0] == outputs[1]


def test_ablate_writes_grid(tmp_path, tiny):
    cfg = tmp_path / "grid.cfg"
    cfg.write_text(TINY + "eval.grid_aug = uniform,degree,pagerank\neval.n_seeds = 2\n")
    out = tmp_path / "o"
    assert run("synth", "--config", cfg, "--out", out) == 0
    assert run("ingest", "--config", cfg, "--out", out) == 0
    assert run("ablate", "--config", cfg, "--out", out, "--threads", 2) == 0
    rows = (out / "ablate/ablation.csv").read_text().splitlines()[1:]
    assert sorted((r.split(",")[1], r.split(",")[4]) for r in rows) == \
        sorted((a, s) for a in ("uniform", "degree", "pagerank") for s in ("0", "1"))
    assert len((out / "ablate/ablation.txt").read_text().splitlines()) == 4
