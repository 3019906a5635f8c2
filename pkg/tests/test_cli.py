import numpy as np
import pytest

from tracernet.cli import build_parser, dispatch, main
from tracernet.config import DEFAULT_ABLATIONS, SCHEMA, parse_config
from tracernet.errors import ConfigError
from tracernet.export import emit_csv, export_image, parse_number, read_csv, read_pgm
from tracernet.workspace import Workspace


def test_empty_config_gives_defaults():
    cfg = parse_config("")
    assert cfg.values == {k: v[1] for k, v in SCHEMA.items()}
    assert cfg.ablations == DEFAULT_ABLATIONS


def test_parse_values_and_comments():
    cfg = parse_config("# comment\ntraining.batch_size = 8  # trailing\n\ncohort.grade_mix = 0:0.5, 4:0.5\n")
    assert cfg["training.batch_size"] == 8
    assert cfg["cohort.grade_mix"] == {0: 0.5, 4: 0.5}


@pytest.mark.parametrize("text,fragment", [
    ("training.batch_sze = 8", "unknown key 'training.batch_sze'"),
    ("\ntraining.epochs = many", "line 2: key 'training.epochs'"),
    ("training.learning_rate = -1", "training.learning_rate"),
    ("cohort.grid_size = 100", "cohort.grid_size"),
    ("training.loss_kind = L3", "training.loss_kind"),
    ("ablation.bad = 3", "ablation.bad"),
    ("just words", "line 1"),
])
def test_config_errors_name_key_and_line(text, fragment):
    with pytest.raises(ConfigError, match=fragment.replace(".", r"\.").replace("(", r"\(")):
        parse_config(text)


def test_ablations_replace_defaults():
    cfg = parse_config("ablation.early = 1.5, 4\nablation.run = early")
    assert cfg.ablations == {"early": (1.5, 4.0)}
    assert cfg.selected_ablations() == {"early": (1.5, 4.0)}
    with pytest.raises(ConfigError):
        cfg.selected_ablations("missing")


def test_resolved_config_round_trips():
    cfg = parse_config("training.epochs = 7\ncohort.noise_sigma = 0.02\nablation.x = 0")
    again = parse_config(cfg.dumps())
    assert again.values == cfg.values and again.ablations == cfg.ablations


def test_csv_examples(tmp_path):
    text = emit_csv([["a", "b"], [1, 2]], tmp_path / "x.csv")
    assert text == "a,b\n1,2\n"
    assert emit_csv([["x,y", 1e-3]]) == '"x,y",0.001\n'
    assert parse_number(read_csv(tmp_path / "x.csv")[1][0]) == 1
    with pytest.raises(ValueError):
        emit_csv([[1, 2], [3]])


def test_csv_floats_round_trip_bit_exact(tmp_path, rng):
    vals = list(rng.standard_normal(50) * 10.0 ** rng.integers(-8, 8, 50)) + [1e-3, 0.1, 1 / 3]
    emit_csv([vals], tmp_path / "f.csv")
    back = [parse_number(s) for s in read_csv(tmp_path / "f.csv")[0]]
    assert all(a == b for a, b in zip(vals, back))


def test_pgm_examples(tmp_path):
    img = np.array([[0.0, 1.0], [0.5, 0.25]])
    export_image(img, tmp_path / "a.pgm")
    raw = (tmp_path / "a.pgm").read_bytes()
    assert raw.startswith(b"P5\n2 2\n65535\n")
    assert raw[-8:] == bytes([0, 0, 255, 255, 128, 0, 64, 0])
    np.testing.assert_array_equal(read_pgm(tmp_path / "a.pgm"), [[0, 65535], [32768, 16384]])


def test_pgm_round_trip_and_range(tmp_path, rng):
    img = rng.random((7, 5))
    export_image(img, tmp_path / "b.pgm")
    np.testing.assert_array_equal(read_pgm(tmp_path / "b.pgm"), np.floor(img * 65535 + 0.5))
    with pytest.raises(ValueError):
        export_image(np.array([[1.5]]), tmp_path / "c.pgm")
    with pytest.raises(ValueError):
        export_image(np.zeros((2, 2, 2)), tmp_path / "c.pgm")


def args_for(*argv):
    return build_parser().parse_args(list(argv))


def test_train_before_preprocess(tmp_path, capsys):
    assert dispatch("train", args_for("train", "--workspace", str(tmp_path / "ws"))) == 1
    assert "missing dataset manifest" in capsys.readouterr().err


def test_in_channels_must_match_ablation(pipeline, tmp_path, capsys):
    root, argv, _ = pipeline
    cfg = tmp_path / "bad.cfg"
    cfg.write_text(TINY + "model.in_channels = 8\ntraining.epochs = 1\n")
    code = main(["train", "--config", str(cfg), "--workspace", str(root / "ws"), "--label", "1-2 hours"])
    assert code == 1 and "model.in_channels" in capsys.readouterr().err


def test_preprocess_before_simulate(tmp_path, capsys):
    assert main(["preprocess", "--workspace", str(tmp_path / "ws")]) == 1
    assert "run 'simulate' first" in capsys.readouterr().err


def test_unknown_subcommand(tmp_path):
    assert dispatch("fly", args_for("report", "--workspace", str(tmp_path))) == 2


def test_lock_blocks_concurrent_runs(tmp_path, capsys):
    ws = Workspace(tmp_path / "ws")
    with ws.lock():
        assert main(["simulate", "--workspace", str(ws.root)]) == 1
    assert "locked" in capsys.readouterr().err
    assert not (ws.root / ".lock").exists()


def test_workspace_rejects_escape(tmp_path):
    ws = Workspace(tmp_path / "ws")
    assert ws.path("runs", "a") == ws.root / "runs" / "a"
    with pytest.raises(Exception):
        ws.path("..", "elsewhere")


def test_selftest_exit_zero(capsys):
    assert main(["selftest"]) == 0
    assert "FAIL" not in capsys.readouterr().out


TINY = """
cohort.n = 8
cohort.train_fraction = 0.75
model.base_features = 4
training.epochs = 2
training.batch_size = 3
ablation.pre-injection = 0
ablation.1-2 hours = 1.5
"""


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    root = tmp_path_factory.mktemp("pipe")
    (root / "tiny.cfg").write_text(TINY)
    argv = ["--config", str(root / "tiny.cfg"), "--workspace", str(root / "ws")]
    codes = [main([stage] + argv) for stage in
             ("simulate", "preprocess", "train", "predict", "evaluate", "grade", "report")]
    return root, argv, codes


def test_full_pipeline_outputs(pipeline):
    root, _, codes = pipeline
    assert codes == [0] * 7
    ws = root / "ws"
    rows = read_csv(ws / "reports" / "ablation_table.csv")
    assert rows[0] == ["metric", "pre-injection", "1-2 hours"]
    assert rows[1][0] == "Mean Squared Error" and all(float(v) > 0 for v in rows[1][1:])
    for run in ("pre-injection", "1-2_hours"):
        rd = ws / "runs" / run
        for name in ("checkpoint", "loss_curve.csv", "config.txt", "metrics.csv", "transition_matrix.csv"):
            assert (rd / name).exists(), (run, name)
        assert parse_config((rd / "config.txt").read_text()).ablations["1-2 hours"] == (1.5,)
        assert len(list((rd / "maps").glob("*.pgm"))) == 2 * 2 * 2
    assert (ws / "cohort" / "manifest.tsv").exists() and (ws / "datasets" / "manifest.tsv").exists()


def test_rerun_is_noop_and_resolved_config_reproduces(pipeline, tmp_path):
    root, argv, _ = pipeline
    ws = root / "ws"
    curve = (ws / "runs" / "1-2_hours" / "loss_curve.csv").read_bytes()
    mtime = (ws / "runs" / "1-2_hours" / "checkpoint").stat().st_mtime_ns
    assert main(["train"] + argv) == 0
    assert (ws / "runs" / "1-2_hours" / "checkpoint").stat().st_mtime_ns == mtime

    copy = ws / "runs" / "1-2_hours" / "config.txt"
    other = ["--config", str(copy), "--workspace", str(tmp_path / "ws2"), "--label", "1-2 hours"]
    for stage in ("simulate", "preprocess", "train"):
        assert main([stage] + other) == 0
    assert (tmp_path / "ws2" / "runs" / "1-2_hours" / "loss_curve.csv").read_bytes() == curve
    ck = (ws / "runs" / "1-2_hours" / "checkpoint").read_bytes()
    assert (tmp_path / "ws2" / "runs" / "1-2_hours" / "checkpoint").read_bytes() == ck
