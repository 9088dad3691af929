import json

import chess
import pytest

from chessformer import cli
from chessformer.checkpoint import load_model
from chessformer.training import load_state

TRAIN_CFG = """\
# tiny model for the command-line tests
layers = 1
embed_dim = 32
head_dim = 16
history = 1
gab_d1 = 4
gab_d2 = 16
gab_d3 = 16
rating_dim = 16
value_hidden = 16
batch_size = 16
warmup_steps = 5
steps = 12
log_every = 4
swa = true
swa_every = 4
"""

PUZZLES = """\
PuzzleId,FEN,Moves,Rating
p1,6k1/6pp/8/8/8/8/6PP/RR4K1 b - - 0 1,g8h8 a1a8,1200
bad,not a fen,e2e4 e7e5,900
"""


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    root = tmp_path_factory.mktemp("pipeline")
    (root / "train.cfg").write_text(TRAIN_CFG)
    assert cli.run(["synth", "--games", "10", "--seed", "4", "--out", str(root / "games.pgn")]) == 0
    assert cli.run(["ingest", "--pgn", str(root / "games.pgn"), "--out", str(root / "shards"),
                    "--history", "1", "--positions-per-game", "8"]) == 0
    assert cli.run(["ingest", "--pgn", str(root / "games.pgn"), "--out", str(root / "test"),
                    "--history", "1", "--test"]) == 0
    assert cli.run(["train", "--config", str(root / "train.cfg"), "--data", str(root / "shards"),
                    "--val", str(root / "test"), "--out", str(root / "run")]) == 0
    return root


def test_every_command_has_seed_and_config():
    _, cmds = cli.build_parser()
    assert set(cmds) >= {"ingest", "train", "eval-match", "eval-puzzles", "tournament", "analyze-attention",
                         "train-transcoder", "features", "uci"}
    for name, sub in cmds.items():
        flags = {s for a in sub._actions for s in a.option_strings}
        assert {"--seed", "--config"} <= flags, name


def test_missing_required_flag_is_usage_error(capsys):
    assert cli.run(["eval-match", "--model", "m.ckpt"]) == cli.EXIT_USAGE
    err = capsys.readouterr().err
    assert "usage:" in err and "--test" in err


@pytest.mark.parametrize("argv", [["train", "--bogus", "1"], ["nonsense"], [], ["synth", "--games", "many"]])
def test_bad_arguments_exit_one(argv, capsys):
    assert cli.run(argv) == cli.EXIT_USAGE
    assert "usage:" in capsys.readouterr().err


def test_missing_config_file_is_usage_error(tmp_path, capsys):
    assert cli.run(["synth", "--config", str(tmp_path / "none.cfg")]) == cli.EXIT_USAGE
    assert "not found" in capsys.readouterr().err


def test_runtime_failure_exits_two(tmp_path, capsys):
    (tmp_path / "junk.ckpt").write_bytes(b"not a checkpoint")
    assert cli.run(["eval-match", "--model", str(tmp_path / "junk.ckpt"), "--test", str(tmp_path)]) == 2
    assert "Error" in capsys.readouterr().err


def test_help_exits_zero():
    assert cli.run(["--help"]) == cli.EXIT_OK


def test_config_precedence(tmp_path):
    cfg = tmp_path / "s.cfg"
    cfg.write_text(f"games = 3\nout = {tmp_path / 'from_cfg.pgn'}\n")
    assert cli.run(["synth", "--config", str(cfg)]) == 0
    assert (tmp_path / "from_cfg.pgn").read_text().count("[Event ") == 3
    assert cli.run(["synth", "--config", str(cfg), "--games", "2", "--out", str(tmp_path / "flag.pgn")]) == 0
    assert (tmp_path / "flag.pgn").read_text().count("[Event ") == 2


def test_seed_controls_synthesis(tmp_path):
    paths = [tmp_path / f"{i}.pgn" for i in range(3)]
    for path, seed in zip(paths, (1, 1, 2)):
        cli.run(["synth", "--games", "2", "--seed", str(seed), "--out", str(path)])
    assert paths[0].read_text() == paths[1].read_text() != paths[2].read_text()


def test_train_writes_checkpoint_and_metrics(pipeline):
    state = load_state(pipeline / "run" / "last.ckpt")
    assert state.step == 12 and state.model.cfg.embed_dim == 32
    lines = (pipeline / "run" / "metrics.ndjson").read_text().splitlines()
    # "step" is the 0-based index of the update that produced the record
    assert [json.loads(line)["step"] for line in lines] == [3, 7, 11]
    load_model(pipeline / "run" / "last.ckpt", "swa/")


def test_train_resume(pipeline, capsys):
    assert cli.run(["train", "--config", str(pipeline / "train.cfg"), "--data", str(pipeline / "shards"),
                    "--resume", str(pipeline / "run" / "last.ckpt"), "--steps", "16",
                    "--out", str(pipeline / "resumed")]) == 0
    assert "step 16" in capsys.readouterr().out


def test_eval_match_table(pipeline, capsys):
    assert cli.run(["eval-match", "--model", str(pipeline / "run" / "last.ckpt"),
                    "--test", str(pipeline / "test"), "--limit", "50"]) == 0
    header, row = capsys.readouterr().out.splitlines()
    assert header.split() == ["positions", "accuracy", "ci95_low", "ci95_high", "perplexity"]
    assert row.split()[0] == "50"


def test_eval_puzzles(pipeline, capsys):
    (pipeline / "puzzles.csv").write_text(PUZZLES)
    assert cli.run(["eval-puzzles", "--model", str(pipeline / "run" / "last.ckpt"),
                    "--puzzles", str(pipeline / "puzzles.csv"), "--strategy", "value"]) == 0
    out = capsys.readouterr().out
    assert "puzzles 1 " in out and "skipped_corrupt 1" in out


def test_tournament(pipeline, capsys):
    (pipeline / "openings.epd").write_text(chess.Board().epd() + "\n")
    ckpt = str(pipeline / "run" / "last.ckpt")
    assert cli.run(["tournament", "--models", ckpt, "--strategies", "policy", "value",
                    "--openings", str(pipeline / "openings.epd"), "--max-plies", "20",
                    "--pgn", str(pipeline / "games_out.pgn")]) == 0
    out = capsys.readouterr().out
    assert "last:policy" in out and "last:value" in out
    assert (pipeline / "games_out.pgn").read_text().count("[Event ") == 2
    assert cli.run(["tournament", "--models", ckpt]) == cli.EXIT_USAGE


def test_analyze_attention(pipeline, capsys):
    out_dir = pipeline / "attn"
    assert cli.run(["analyze-attention", "--model", str(pipeline / "run" / "last.ckpt"),
                    "--data", str(pipeline / "test"), "--positions", "20", "--pairs", "5",
                    "--heatmap", "0,0,1,e4,gab", "--out", str(out_dir)]) == 0
    report = json.loads((out_dir / "consistency.json").read_text())
    assert report["positions"] == 20 and "gab_between" in report
    assert (out_dir / "heatmap_p0_l0_h1_e4_gab.csv").exists()
    assert cli.run(["analyze-attention", "--model", str(pipeline / "run" / "last.ckpt"),
                    "--data", str(pipeline / "test"), "--positions", "5", "--heatmap", "0,0"]) == cli.EXIT_USAGE


def test_transcoder_and_features(pipeline, capsys):
    model = str(pipeline / "run" / "last.ckpt")
    cfg = pipeline / "tc.cfg"
    cfg.write_text("layers = 0\nexpansion = 2\nsteps = 5\npositions = 20\n")
    assert cli.run(["train-transcoder", "--config", str(cfg), "--model", model, "--data", str(pipeline / "shards"),
                    "--out", str(pipeline / "tc.bin"), "--activations", str(pipeline / "acts.bin")]) == 0
    assert "recon_fraction" in capsys.readouterr().out
    assert cli.run(["features", "--model", model, "--transcoder", str(pipeline / "tc.bin"),
                    "--data", str(pipeline / "shards"), "--positions", "20", "--feature", "1", "--k", "3",
                    "--out", str(pipeline / "feat.jsonl")]) == 0
    records = [json.loads(line) for line in (pipeline / "feat.jsonl").read_text().splitlines()]
    assert len(records) <= 3
    assert all(chess.parse_square(r["square"]) >= 0 for r in records)
    assert cli.run(["train-transcoder", "--model", model, "--data", str(pipeline / "shards"),
                    "--layers", "0,5", "--out", str(pipeline / "x.bin")]) == cli.EXIT_USAGE
