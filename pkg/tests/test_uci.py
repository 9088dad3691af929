import io
import re
import subprocess
import sys

import chess
import numpy as np
import pytest

from chessformer import board as cb
from chessformer import data
from chessformer.agents import ModelEvaluator
from chessformer.checkpoint import load_model
from chessformer.model import Chessformer
from chessformer.uci import UCIEngine, legal_bestmove, replay

from conftest import FIXTURES, tiny_config

TIMING = re.compile(r"^info .*\b(time|nps)\b")


def strip_timing(text: str) -> str:
    return "".join(line for line in text.splitlines(keepends=True) if not TIMING.match(line))


@pytest.fixture(scope="module")
def engine_model():
    return load_model(FIXTURES / "tiny.ckpt")[0]


def fresh(model, **kw):
    return UCIEngine(ModelEvaluator(model), **kw)


def random_position_commands(count, seed, max_plies=60):
    """Mix of ``startpos moves ...`` and ``fen ...`` commands from random legal playouts."""
    rng = np.random.default_rng(seed)
    out = []
    while len(out) < count:
        b = chess.Board()
        moves = []
        for _ in range(int(rng.integers(0, max_plies))):
            legal = list(b.legal_moves)
            if not legal:
                break
            mv = legal[int(rng.integers(len(legal)))]
            moves.append(mv.uci())
            b.push(mv)
        if b.is_game_over():
            continue
        if rng.random() < 0.5:
            out.append((b.fen(), "position startpos" + (" moves " + " ".join(moves) if moves else "")))
        else:
            out.append((b.fen(), f"position fen {b.fen()}"))
    return out


def test_transcript_replays_byte_identically(engine_model):
    out = io.StringIO()
    with open(FIXTURES / "uci_session.in") as fh:
        fresh(engine_model).serve(fh, out)
    expected = (FIXTURES / "uci_session.out").read_text()
    assert strip_timing(out.getvalue()).encode() == strip_timing(expected).encode()


def test_transcript_through_command_line():
    with open(FIXTURES / "uci_session.in", "rb") as fh:
        proc = subprocess.run([sys.executable, "-m", "chessformer", "uci", "--model", str(FIXTURES / "tiny.ckpt")],
                              stdin=fh, capture_output=True, timeout=120)
    assert proc.returncode == 0, proc.stderr.decode()
    assert proc.stdout == (FIXTURES / "uci_session.out").read_bytes()


def test_handshake_and_options(engine_model):
    out = replay(fresh(engine_model), ["uci", "isready"])
    assert out[0].startswith("id name ") and out[1].startswith("id author ")
    assert out[-2:] == ["uciok", "readyok"]
    assert any("RatingSelf" in line for line in out)
    engine_mode = Chessformer(tiny_config(mode="engine"))
    out = replay(fresh(engine_mode), ["uci"])
    assert not any("Rating" in line for line in out)
    assert any(line.startswith("option name Strategy") for line in out)


def test_startpos_and_reply_for_black(engine_model):
    e = fresh(engine_model)
    (reply,) = replay(e, ["position startpos", "go"])
    assert legal_bestmove(chess.STARTING_FEN, reply)
    (reply,) = replay(e, ["position startpos moves e2e4", "go infinite"])
    b = chess.Board()
    b.push_uci("e2e4")
    assert legal_bestmove(b.fen(), reply)
    assert chess.square_rank(chess.Move.from_uci(reply.split()[1]).from_square) >= 4


def test_promotion_is_five_characters(engine_model):
    (reply,) = replay(fresh(engine_model), ["position fen 7k/1P6/8/8/8/8/5q2/7K w - - 0 1", "go"])
    move = reply.split()[1]
    assert len(move) == 5 and move.startswith("b7b8") and move[4] in "qrbn"


def test_setoption_updates_agent(engine_model):
    e = fresh(engine_model)
    assert replay(e, ["setoption name RatingSelf value 2100", "setoption name RatingOpponent value 800",
                      "setoption name Strategy value value"]) == []
    assert (e.agent.rating, e.agent.opponent_rating, e.agent.strategy) == (2100, 800, "value")
    ex = e.current_example()
    assert (ex.active_rating, ex.opponent_rating) == (2100, 800)
    assert replay(e, ["setoption name RatingSelf value 9000"])[0].startswith("info string")
    assert e.agent.rating == 2100


def test_malformed_input_is_reported_and_state_kept(engine_model):
    e = fresh(engine_model)
    replay(e, ["position startpos moves d2d4"])
    before = e.position.board.fen()
    for line in ("position startpos moves d2d4 e2e5", "position fen not/a/fen w", "position", "bogus", "setoption x"):
        out = replay(e, [line])
        assert len(out) == 1 and out[0].startswith("info string ")
        assert e.position.board.fen() == before
    assert replay(e, ["", "stop", "ponderhit"]) == []


def test_quit_stops_serving(engine_model):
    e = fresh(engine_model)
    out = io.StringIO()
    e.serve(io.StringIO("isready\nquit\nisready\n"), out)
    assert out.getvalue() == "readyok\n"


def test_terminal_position_answers_null_move(engine_model):
    (reply,) = replay(fresh(engine_model), ["position fen 7k/5Q2/6K1/8/8/8/8/8 b - - 0 1", "go"])
    assert reply == "bestmove 0000"


def test_history_stack_matches_training_examples(games):
    model = Chessformer(tiny_config(history=7))
    g = max(games, key=lambda g: len(g.moves))
    for k in (0, 3, 8, len(g.moves) - 1):
        e = fresh(model, rating=g.white_elo if k % 2 == 0 else g.black_elo,
                  opponent_rating=g.black_elo if k % 2 == 0 else g.white_elo)
        moves = " ".join(m.uci() for m in g.moves[:k])
        replay(e, ["position startpos" + (f" moves {moves}" if moves else "")])
        live = e.current_example()
        ref = data.build_example(g, k, 7)
        assert np.array_equal(live.boards, ref.boards)
        assert np.array_equal(live.repetitions, ref.repetitions)
        assert (live.castling, live.black_to_move, live.rule50) == (ref.castling, ref.black_to_move, ref.rule50)
        assert (live.active_rating, live.opponent_rating) == (ref.active_rating, ref.opponent_rating)
        assert np.array_equal(np.sort(live.legal), np.sort(ref.legal))


def test_random_positions_get_legal_moves(engine_model):
    e = fresh(engine_model)
    for fen, cmd in random_position_commands(60, seed=5):
        replay(e, ["ucinewgame", cmd])
        assert e.position.board.fen() == fen
        (reply,) = replay(e, ["go"])
        assert legal_bestmove(cb.parse_fen(fen), reply), (cmd, reply)
