"""Line-oriented UCI front end for search-free agents.

``go`` answers at once with a single model decision (clock fields are
ignored); ``stop`` is accepted and does nothing.
"""
from __future__ import annotations

import sys

import chess

from . import board as cb
from .agents import POLICY, STRATEGIES, Agent, select_move
from .data import TrainingExample, position_example

ENGINE_NAME = "Chessformer"
ENGINE_AUTHOR = "chessformer contributors"


class UCIEngine:
    def __init__(self, evaluator, strategy: str = POLICY, rating: int = 1500, opponent_rating: int = 1500):
        self.agent = Agent(evaluator, strategy, rating, opponent_rating, name=ENGINE_NAME)
        self.human = evaluator.cfg.mode == "human"
        self.position = cb.start_position()
        self.running = True

    # -- protocol ---------------------------------------------------------------

    def options(self) -> list[str]:
        out = []
        if self.human:
            out.append(f"option name RatingSelf type spin default {self.agent.rating} min 0 max 5000")
            out.append(f"option name RatingOpponent type spin default {self.agent.opponent_rating} min 0 max 5000")
        out.append(f"option name Strategy type combo default {self.agent.strategy} "
                   + " ".join(f"var {s}" for s in STRATEGIES))
        return out

    def handle(self, line: str) -> list[str]:
        tokens = line.split()
        if not tokens:
            return []
        cmd, args = tokens[0], tokens[1:]
        if cmd == "uci":
            return [f"id name {ENGINE_NAME}", f"id author {ENGINE_AUTHOR}", *self.options(), "uciok"]
        if cmd == "isready":
            return ["readyok"]
        if cmd == "ucinewgame":
            self.position = cb.start_position()
            return []
        if cmd == "setoption":
            return self._setoption(args)
        if cmd == "position":
            return self._position(args)
        if cmd == "go":
            return [self._go()]
        if cmd in ("stop", "ponderhit", "debug", "register"):
            return []
        if cmd == "quit":
            self.running = False
            return []
        return [f"info string unknown command {cmd}"]

    def _setoption(self, args: list[str]) -> list[str]:
        if len(args) < 4 or args[0] != "name" or "value" not in args:
            return ["info string malformed setoption"]
        k = args.index("value")
        name, value = " ".join(args[1:k]), " ".join(args[k + 1:])
        if name == "Strategy":
            if value not in STRATEGIES:
                return [f"info string Strategy must be one of {' '.join(STRATEGIES)}"]
            self.agent.strategy = value
            return []
        if name in ("RatingSelf", "RatingOpponent") and self.human:
            try:
                rating = int(value)
            except ValueError:
                return [f"info string {name} needs an integer"]
            if not 0 <= rating <= 5000:
                return [f"info string {name} must lie in [0, 5000]"]
            if name == "RatingSelf":
                self.agent.rating = rating
            else:
                self.agent.opponent_rating = rating
            return []
        return [f"info string unknown option {name}"]

    def _position(self, args: list[str]) -> list[str]:
        if not args:
            return ["info string malformed position"]
        if "moves" in args:
            k = args.index("moves")
            head, moves = args[:k], args[k + 1:]
        else:
            head, moves = args, []
        try:
            if head == ["startpos"]:
                p = cb.start_position()
            elif head and head[0] == "fen" and len(head) > 1:
                p = cb.parse_fen(" ".join(head[1:]))
            else:
                return ["info string malformed position"]
            for mv in moves:
                p = cb.apply_move(p, mv)
        except ValueError as exc:
            return [f"info string position ignored: {exc}"]
        self.position = p
        return []

    def _go(self) -> str:
        if not cb.legal_moves(self.position):
            return "bestmove 0000"
        return f"bestmove {select_move(self.agent, self.position).uci()}"

    # -- helpers ----------------------------------------------------------------

    def current_example(self) -> TrainingExample:
        """The model input for the current position (history stack included)."""
        return position_example(self.position, self.agent.history, (self.agent.rating, self.agent.opponent_rating))

    def serve(self, inp=None, out=None) -> None:
        inp = inp if inp is not None else sys.stdin
        out = out if out is not None else sys.stdout
        for line in inp:
            for reply in self.handle(line.strip()):
                out.write(reply + "\n")
            out.flush()
            if not self.running:
                break


def replay(engine: UCIEngine, commands: list[str]) -> list[str]:
    out = []
    for line in commands:
        out.extend(engine.handle(line))
        if not engine.running:
            break
    return out


def legal_bestmove(fen_or_position, reply: str) -> bool:
    p = fen_or_position if isinstance(fen_or_position, cb.Position) else cb.parse_fen(fen_or_position)
    if not reply.startswith("bestmove "):
        return False
    return chess.Move.from_uci(reply.split()[1]) in p.board.legal_moves
