import chess
import numpy as np
import pytest
import torch

from chessformer import agents as ag
from chessformer import board as cb
from chessformer import data
from chessformer.model import Chessformer, count_flops, masked_policy

from conftest import tiny_config
from test_board import random_position
from test_model import randomize

OPENINGS = [
    cb.START_FEN,
    "rnbqkbnr/pppp1ppp/8/4p3/4P3/8/PPPP1PPP/RNBQKBNR w KQkq - 0 2",
    "rnbqkb1r/pppppppp/5n2/8/3P4/8/PPP1PPPP/RNBQKBNR w KQkq - 1 2",
]


class TableEvaluator:
    """Lookup-table stand-in for a network.

    ``prefs`` maps a board FEN (placement + side) to the real move the policy
    should prefer; the value head reports a loss for a side that is mated and
    a draw otherwise.
    """

    def __init__(self, prefs=None, history=0, policy_fn=None):
        self.prefs = prefs or {}
        self.cfg = tiny_config(history=history)
        self.policy_fn = policy_fn
        self.calls = 0

    def __call__(self, examples):
        self.calls += len(examples)
        policy = np.zeros((len(examples), cb.POLICY_SIZE), np.float32)
        value = np.zeros((len(examples), 3), np.float32)
        for row, ex in enumerate(examples):
            board = chess.Board(ex.fen)
            key = " ".join(ex.fen.split()[:2])
            if self.policy_fn is not None:
                policy[row] = self.policy_fn(ex)
            elif key in self.prefs:
                move = chess.Move.from_uci(self.prefs[key])
                policy[row, cb.move_to_index(cb.canonical_move(move, board.turn))] = 10.0
            value[row] = [0, 0, 10] if board.is_checkmate() else [0, 10, 0]
        return policy, value


def key_of(fen):
    return " ".join(fen.split()[:2])


# -- move selection -------------------------------------------------------------------

def test_single_legal_move():
    p = cb.parse_fen("k7/8/8/8/8/8/8/1R5K b - - 0 1")
    assert [m.uci() for m in cb.legal_moves(p)] == ["a8a7"]
    for strategy in ("policy", "value"):
        assert ag.select_move(ag.Agent(TableEvaluator(), strategy), p).uci() == "a8a7"


def test_terminal_position_rejected():
    mate = cb.parse_fen("R5k1/5ppp/8/8/8/8/8/6K1 b - - 0 1")
    with pytest.raises(ValueError):
        ag.select_move(ag.Agent(TableEvaluator()), mate)


MATE_IN_ONE = [
    "6k1/8/6K1/8/8/8/8/R7 w - - 0 1",
    "8/8/8/8/8/1k6/7r/K7 b - - 0 1",
    "7k/8/6K1/8/8/8/8/1Q6 w - - 0 1",
    "8/8/8/8/8/6k1/q7/6K1 b - - 0 1",
]


@pytest.mark.parametrize("fen", MATE_IN_ONE)
def test_value_agent_finds_mate(fen):
    board = chess.Board(fen)
    mates = [m for m in board.legal_moves if _mates(board, m)]
    assert mates, fen
    agent = ag.Agent(TableEvaluator(), "value")
    move = ag.select_move(agent, cb.parse_fen(fen))
    assert move in mates
    assert agent.evaluator.calls == board.legal_moves.count()
    turn = board.turn
    assert cb.move_to_index(cb.canonical_move(move, turn)) == min(cb.move_to_index(cb.canonical_move(m, turn)) for m in mates)


def _mates(board, move):
    board.push(move)
    try:
        return board.is_checkmate()
    finally:
        board.pop()


def test_ties_go_to_lowest_canonical_index():
    p = random_position(11)
    move = ag.select_move(ag.Agent(TableEvaluator()), p)
    turn = p.side_to_move
    assert cb.move_to_index(cb.canonical_move(move, turn)) == min(cb.legal_indices(p))


def test_policy_argmax_shift_invariant():
    rng = np.random.default_rng(0)
    base = rng.normal(size=cb.POLICY_SIZE).astype(np.float32)
    p = random_position(5)
    a = ag.select_move(ag.Agent(TableEvaluator(policy_fn=lambda ex: base)), p)
    b = ag.select_move(ag.Agent(TableEvaluator(policy_fn=lambda ex: base + 123.0)), p)
    assert a == b


def test_policy_agent_matches_masked_policy_argmax():
    model = randomize(Chessformer(tiny_config(history=1)), seed=1, scale=0.2)
    agent = ag.Agent(ag.ModelEvaluator(model), rating=1700, opponent_rating=1600)
    for seed in range(5):
        p = random_position(seed)
        move = ag.select_move(agent, p)
        with torch.no_grad():
            out = model.run(data.collate([data.position_example(p, 1, (1700, 1600))]))
        legal = cb.legal_moves(p)
        probs = masked_policy(out.policy[0], [cb.canonical_move(m, p.side_to_move) for m in legal])
        assert move == legal[int(torch.argmax(probs))]
    assert ag.select_move(agent, p) == move


# -- move matching ------------------------------------------------------------------------

def start_examples(count, seed):
    rng = np.random.default_rng(seed)
    ex = data.position_example(cb.start_position(), 0)
    return [data.TrainingExample(ex.boards, 1500, 1500, int(rng.choice(ex.legal)), data.DRAW, 0, ex.legal, ex.fen)
            for _ in range(count)]


def test_replaying_agent_is_perfect(examples):
    def replay(ex):
        out = np.zeros(cb.POLICY_SIZE, np.float32)
        out[ex.target] = 100.0
        return out

    report = ag.move_matching(ag.Agent(TableEvaluator(policy_fn=replay, history=1)), examples)
    assert report.accuracy == 1.0
    assert report.perplexity == pytest.approx(1.0, abs=1e-9)
    assert report.ci_high == 1.0 and report.ci_low < 1.0


def test_uniform_agent_on_twenty_moves():
    exs = start_examples(4000, 0)
    report = ag.move_matching(ag.Agent(TableEvaluator(policy_fn=lambda ex: np.zeros(cb.POLICY_SIZE))), exs)
    assert report.perplexity == pytest.approx(20.0)
    assert report.accuracy == pytest.approx(0.05, abs=0.015)
    assert report.ci_low < 0.05 < report.ci_high or abs(report.accuracy - 0.05) < 0.015


def test_ci_width_shrinks_like_inverse_sqrt():
    uniform = ag.Agent(TableEvaluator(policy_fn=lambda ex: np.zeros(cb.POLICY_SIZE)))
    small = ag.move_matching(uniform, start_examples(400, 1))
    large = ag.move_matching(uniform, start_examples(1600, 1))
    ratio = (small.ci_high - small.ci_low) / (large.ci_high - large.ci_low)
    assert 1.6 < ratio < 2.5


def test_move_matching_cross_check(examples):
    torch.manual_seed(2)
    model = Chessformer(tiny_config(history=1))
    report = ag.move_matching(ag.Agent(ag.ModelEvaluator(model)), examples, batch_size=7)
    with torch.no_grad():
        out = model.run(data.collate(examples))
    hits, nll = 0, 0.0
    for row, ex in enumerate(examples):
        probs = masked_policy(out.policy[row], [int(i) for i in ex.legal])
        hits += int(ex.legal[int(torch.argmax(probs))] == ex.target)
        nll -= float(torch.log(probs[list(ex.legal).index(ex.target)]))
    assert report.accuracy == hits / len(examples)
    assert report.perplexity == pytest.approx(np.exp(nll / len(examples)), rel=1e-4)


def test_move_matching_errors(examples):
    with pytest.raises(ValueError):
        ag.move_matching(ag.Agent(TableEvaluator()), [])
    with pytest.raises(ValueError):
        ag.move_matching(ag.Agent(TableEvaluator(), "value"), examples)


# -- puzzles ------------------------------------------------------------------------------

# black's setup move g8h8 walks into a back-rank mate; both rooks can deliver it
PUZZLE_FEN = "6k1/6pp/8/8/8/8/6PP/RR4K1 b - - 0 1"
PUZZLE_CSV = f"""PuzzleId,FEN,Moves,Rating
m1,{PUZZLE_FEN},g8h8 a1a8,1200
bad,{PUZZLE_FEN},g8h8 a1a9,1300
short,{PUZZLE_FEN},g8h8,900
"""


def after_setup(fen, setup):
    return key_of(cb.to_fen(cb.apply_move(cb.parse_fen(fen), setup)))


def test_load_puzzles_counts_corrupt(tmp_path):
    path = tmp_path / "p.csv"
    path.write_text(PUZZLE_CSV)
    puzzles, corrupt = ag.load_puzzles(path)
    assert [p.id for p in puzzles] == ["m1"] and corrupt == 2
    assert puzzles[0].rating == 1200


def test_mate_in_one_solved_and_alternate_mate():
    (pz,), _ = ag.load_puzzles(PUZZLE_CSV)
    key = after_setup(PUZZLE_FEN, "g8h8")
    assert ag.solve_puzzle(ag.Agent(TableEvaluator({key: "a1a8"})), pz)
    alt = ag.Agent(TableEvaluator({key: "b1b8"}))
    assert ag.solve_puzzle(alt, pz)
    assert not ag.solve_puzzle(alt, pz, mate_counts=False)
    assert not ag.solve_puzzle(ag.Agent(TableEvaluator({key: "h2h3"})), pz)


def test_multi_move_puzzle():
    # a two-step solver line: setup, mover, reply, mover
    start = "r5k1/5ppp/8/8/8/8/5PPP/1R2R1K1 b - - 0 1"
    moves = ["a8a1", "b1a1", "g8f8", "e1e8"]
    pz = ag.Puzzle("two", start, moves)
    ag.validate_puzzle(pz)
    p1 = after_setup(start, "a8a1")
    p2 = key_of(cb.to_fen(cb.apply_move(cb.apply_move(cb.apply_move(cb.parse_fen(start), "a8a1"), "b1a1"), "g8f8")))
    good = ag.Agent(TableEvaluator({p1: "b1a1", p2: "e1e8"}))
    assert ag.solve_puzzle(good, pz)
    deviates = ag.Agent(TableEvaluator({p1: "h2h3"}))
    assert not ag.solve_puzzle(deviates, pz)
    acc, solved = ag.puzzle_accuracy(good, [pz, pz])
    assert (acc, solved) == (1.0, 2)


# -- tournaments ----------------------------------------------------------------------------

def tiny_agents(count, history=0):
    out = []
    for i in range(count):
        torch.manual_seed(100 + i)
        out.append(ag.Agent(ag.ModelEvaluator(Chessformer(tiny_config(history=history))), name=f"m{i}"))
    return out


def test_round_robin_counts_and_reproducibility():
    agents = tiny_agents(3)
    a = ag.round_robin(agents, 4, OPENINGS, seed=5, max_plies=12)
    b = ag.round_robin(agents, 4, OPENINGS, seed=5, max_plies=12)
    assert a.games_played() == 3 * 4 == len(a.games)
    assert all(sum(v) == 4 for v in a.pairs.values())
    assert a.pairs == b.pairs
    assert [g.moves for g in a.games] == [g.moves for g in b.games]
    pgn = a.to_pgn()
    assert pgn.count("[Event ") == 12
    assert "m0 vs m1" in a.table()


def test_self_play_pairs_split_evenly():
    me = tiny_agents(1)[0]
    twin = ag.Agent(me.evaluator, name="twin")
    result = ag.round_robin([me, twin], 6, OPENINGS, seed=1, max_plies=30)
    w, d, l = result.pairs[(0, 1)]
    assert w == l
    games = result.games
    for first, second in zip(games[::2], games[1::2]):
        assert first.moves == second.moves
        assert first.result == second.result
        assert ag.RESULT_SCORE[first.result] + (1 - ag.RESULT_SCORE[second.result]) == 1.0


def test_round_robin_errors():
    agents = tiny_agents(2)
    with pytest.raises(ValueError):
        ag.round_robin(agents[:1], 2, OPENINGS)
    with pytest.raises(ValueError):
        ag.round_robin(agents, 3, OPENINGS)


def test_play_game_terminations():
    mate_agent = ag.Agent(TableEvaluator(), "value")
    res, why, moves = ag.play_game(mate_agent, mate_agent, "6k1/8/6K1/8/8/8/8/R7 w - - 0 1")
    assert (res, why, len(moves)) == ("1-0", "checkmate", 1)
    res, why, _ = ag.play_game(mate_agent, mate_agent, "8/8/8/8/8/8/8/K6k w - - 0 1")
    assert (res, why) == ("1/2-1/2", "insufficient material")


def test_read_openings(tmp_path):
    path = tmp_path / "open.epd"
    path.write_text("# book\nrnbqkbnr/pppppppp/8/8/4P3/8/PPPP1PPP/RNBQKBNR b KQkq - ; id x\n"
                    + cb.START_FEN + "\n")
    fens = ag.read_openings(path)
    assert fens[0].endswith(" 0 1") and fens[1] == cb.START_FEN


# -- costing -----------------------------------------------------------------------------------

def test_agent_flops():
    ev = TableEvaluator()
    policy, value = ag.Agent(ev, "policy"), ag.Agent(ev, "value")
    assert ag.agent_flops(value) == 20 * ag.agent_flops(policy)
    assert ag.agent_flops(value) / ag.agent_flops(policy) == 20
    assert ag.agent_flops(policy) == count_flops(ev.cfg)
    assert ag.agent_flops(policy, positions=8) == 8 * ag.agent_flops(policy)
    assert ag.agent_flops(value, legal_moves=35) == 35 * count_flops(ev.cfg)
