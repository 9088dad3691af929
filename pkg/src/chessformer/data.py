"""PGN ingestion, filtering/rebalancing, training examples and shard files."""
from __future__ import annotations

import io
import itertools
import struct
from collections.abc import Iterable, Iterator
from dataclasses import dataclass, field
from pathlib import Path

import chess
import chess.pgn
import numpy as np
import torch

from . import board as cb

WIN, DRAW, LOSS = 0, 1, 2
RESULTS = ("1-0", "1/2-1/2", "0-1")

# 20 bins of width 100 over [600, 2600) plus one bin on each side
BIN_LOW, BIN_HIGH, BIN_WIDTH = 600, 2600, 100
NUM_BINS = (BIN_HIGH - BIN_LOW) // BIN_WIDTH + 2


@dataclass
class GameRecord:
    moves: list[chess.Move]
    white_elo: int
    black_elo: int
    result: str
    time_control: str = "-"
    clocks: list[float] | None = None
    fen: str | None = None
    headers: dict[str, str] = field(default_factory=dict)

    @property
    def average_elo(self) -> float:
        return (self.white_elo + self.black_elo) / 2

    def start(self) -> chess.Board:
        return chess.Board(self.fen) if self.fen else chess.Board()


def _elo(headers, key) -> int | None:
    value = headers.get(key, "").strip()
    return int(value) if value.isdigit() else None


def parse_pgn(stream, rejects: list | None = None) -> Iterator[GameRecord]:
    """Lazily yield games with ratings, result and (optional) %clk clocks.

    Games that cannot be used are skipped; ``rejects`` (if given) receives
    ``(game_number, reason)`` tuples.
    """
    if isinstance(stream, str):
        stream = io.StringIO(stream)
    number = 0
    while True:
        game = chess.pgn.read_game(stream)
        if game is None:
            return
        number += 1
        reason = None
        headers = game.headers
        white_elo, black_elo = _elo(headers, "WhiteElo"), _elo(headers, "BlackElo")
        result = headers.get("Result", "*")
        if game.errors:
            reason = "replay failure"
        elif white_elo is None or black_elo is None:
            reason = "missing rating"
        elif result not in RESULTS:
            reason = "no result"
        moves, clocks = [], []
        if reason is None:
            for node in game.mainline():
                moves.append(node.move)
                clocks.append(node.clock())
            if not moves:
                reason = "empty game"
        if reason is not None:
            if rejects is not None:
                rejects.append((number, reason))
            continue
        yield GameRecord(
            moves=moves,
            white_elo=white_elo,
            black_elo=black_elo,
            result=result,
            time_control=headers.get("TimeControl", "-"),
            clocks=None if any(c is None for c in clocks) else clocks,
            fen=headers.get("FEN"),
            headers=dict(headers),
        )


def truncate_time_pressure(g: GameRecord, threshold: float = 30) -> GameRecord:
    """Drop the move at the first ply whose clock reads under ``threshold`` and all later moves."""
    if g.clocks is None:
        return g
    for ply, clock in enumerate(g.clocks):
        if clock < threshold:
            return GameRecord(g.moves[:ply], g.white_elo, g.black_elo, g.result, g.time_control,
                              g.clocks[:ply], g.fen, g.headers)
    return g


def rating_bin(elo: float) -> int:
    """Half-open bins: 0 is below 600, 1..20 cover [600, 2600), 21 is 2600 and above."""
    if elo < BIN_LOW:
        return 0
    if elo >= BIN_HIGH:
        return NUM_BINS - 1
    return 1 + int((elo - BIN_LOW) // BIN_WIDTH)


def rebalance(games: Iterable[GameRecord], chunk: int = 20000, per_bin: int = 10) -> Iterator[GameRecord]:
    """Per chunk of ``chunk`` games, pass through at most ``per_bin`` games per rating bin.

    A chunk stops early once every bin is full; its remaining games are dropped.
    """
    it = iter(games)
    while True:
        block = list(itertools.islice(it, chunk))
        if not block:
            return
        counts = [0] * NUM_BINS
        for g in block:
            b = rating_bin(g.average_elo)
            if counts[b] < per_bin:
                counts[b] += 1
                yield g
                if min(counts) >= per_bin:
                    break


def cap_by_interval(games: Iterable[GameRecord], intervals: Iterable[tuple[int, int]],
                    cap: int = 1000) -> Iterator[GameRecord]:
    """Top up sparse rating intervals: keep a game while its interval holds fewer than ``cap``."""
    buckets = {iv: 0 for iv in intervals}
    for g in games:
        for lo, hi in buckets:
            if lo <= g.average_elo < hi:
                if buckets[(lo, hi)] < cap:
                    buckets[(lo, hi)] += 1
                    yield g
                break


def sparse_intervals(position_ratings: Iterable[float], lo: int = 550, hi: int = 2950,
                     width: int = 100, minimum: int = 20000) -> list[tuple[int, int]]:
    """Rating intervals in which an existing test set has fewer than ``minimum`` positions."""
    edges = list(range(lo, hi, width))
    counts = dict.fromkeys(edges, 0)
    for r in position_ratings:
        if lo <= r < hi:
            counts[lo + int((r - lo) // width) * width] += 1
    return [(e, e + width) for e in edges if counts[e] < minimum]


def sample_positions(g: GameRecord, k: int = 32, rng: np.random.Generator | None = None) -> list[int]:
    if k < 1:
        raise ValueError("k must be at least 1")
    rng = rng if rng is not None else np.random.default_rng()
    plies = len(g.moves)
    if plies <= k:
        return list(range(plies))
    return sorted(int(i) for i in rng.choice(plies, size=k, replace=False))


@dataclass
class TrainingExample:
    """One position with its history stack, in the mover's frame.

    ``boards[i]`` is the board ``i`` plies before the current one, encoded as
    64 plane indices (-1 empty, 0..11 in canonical plane order).
    """

    boards: np.ndarray
    active_rating: int
    opponent_rating: int
    target: int
    outcome: int
    ply: int
    legal: np.ndarray
    fen: str = ""
    castling: tuple[bool, bool, bool, bool] = (False, False, False, False)
    black_to_move: bool = False
    rule50: int = 0
    repetitions: np.ndarray | None = None
    soft_target: tuple[np.ndarray, np.ndarray] | None = None

    @property
    def history(self) -> int:
        return len(self.boards) - 1

    @property
    def target_move(self) -> chess.Move:
        return cb.index_to_move(self.target)

    def planes(self) -> np.ndarray:
        """(n+1, 64, 12) one-hot stack."""
        return _ONE_HOT[self.boards + 1]


_ONE_HOT = np.vstack([np.zeros((1, 12), np.float32), np.eye(12, dtype=np.float32)])


def board_codes(board: chess.Board, perspective: bool) -> np.ndarray:
    planes = cb.canonical_planes(board, perspective)
    return np.where(planes.any(1), planes.argmax(1), -1).astype(np.int8)


def outcome_for(result: str, mover: bool) -> int:
    if result == "1/2-1/2":
        return DRAW
    white_won = result == "1-0"
    return WIN if white_won == (mover == chess.WHITE) else LOSS


def game_examples(g: GameRecord, plies: Iterable[int], n: int) -> list[TrainingExample]:
    """Replay ``g`` once and build an example for each requested ply."""
    wanted = sorted(set(plies))
    if wanted and wanted[-1] >= len(g.moves):
        raise ValueError(f"ply {wanted[-1]} out of range for a {len(g.moves)}-move game")
    board = g.start()
    boards = [board.copy(stack=False)]
    keys = [cb.position_key(board)]
    for move in g.moves[: (wanted[-1] if wanted else 0)]:
        board.push(move)
        boards.append(board.copy(stack=False))
        keys.append(cb.position_key(board))

    out = []
    for ply in wanted:
        cur = boards[ply]
        mover = cur.turn
        slots = [max(ply - i, 0) for i in range(n + 1)]
        stack = np.stack([board_codes(boards[s], mover) for s in slots])
        reps = np.array([keys[:s].count(keys[s]) > 0 for s in slots], dtype=bool)
        canon = cb.canonical_move(g.moves[ply], mover)
        us, them = mover, not mover
        position = cb.Position(cur, (keys[ply],))
        out.append(TrainingExample(
            boards=stack,
            active_rating=g.white_elo if mover == chess.WHITE else g.black_elo,
            opponent_rating=g.black_elo if mover == chess.WHITE else g.white_elo,
            target=cb.move_to_index(canon),
            outcome=outcome_for(g.result, mover),
            ply=ply,
            legal=np.array(cb.legal_indices(position), dtype=np.int32),
            fen=cur.fen(en_passant="fen"),
            castling=(cur.has_kingside_castling_rights(us), cur.has_queenside_castling_rights(us),
                      cur.has_kingside_castling_rights(them), cur.has_queenside_castling_rights(them)),
            black_to_move=mover == chess.BLACK,
            rule50=cur.halfmove_clock,
            repetitions=reps,
        ))
    return out


def build_example(g: GameRecord, ply: int, n: int) -> TrainingExample:
    return game_examples(g, [ply], n)[0]


def position_example(p: cb.Position, n: int, ratings: tuple[int, int] = (1500, 1500)) -> TrainingExample:
    """Model input for a live position (no target): same stack layout as ``build_example``,
    padding missing history with the root board."""
    cur = p.board
    mover = cur.turn
    boards = p.history(n)
    boards += [boards[-1]] * (n + 1 - len(boards))
    keys = p.repetition_keys
    ply = len(keys) - 1
    slots = [max(ply - i, 0) for i in range(n + 1)]
    reps = np.array([keys[:s].count(keys[s]) > 0 for s in slots], dtype=bool)
    us, them = mover, not mover
    return TrainingExample(
        boards=np.stack([board_codes(b, mover) for b in boards]),
        active_rating=int(ratings[0]), opponent_rating=int(ratings[1]),
        target=-1, outcome=DRAW, ply=ply,
        legal=np.array(cb.legal_indices(p), dtype=np.int32),
        fen=cur.fen(en_passant="fen"),
        castling=(cur.has_kingside_castling_rights(us), cur.has_queenside_castling_rights(us),
                  cur.has_kingside_castling_rights(them), cur.has_queenside_castling_rights(them)),
        black_to_move=mover == chess.BLACK,
        rule50=cur.halfmove_clock,
        repetitions=reps,
    )


def examples_from_games(games: Iterable[GameRecord], n: int = 7, k: int = 32,
                        rng: np.random.Generator | None = None, time_threshold: float = 30,
                        skip_opening_plies: int = 0) -> Iterator[TrainingExample]:
    """Training pipeline (``skip_opening_plies=0``) or held-out test construction (``=20``)."""
    rng = rng if rng is not None else np.random.default_rng(0)
    for g in games:
        g = truncate_time_pressure(g, time_threshold)
        candidates = list(range(skip_opening_plies, len(g.moves)))
        if not candidates:
            continue
        if k and len(candidates) > k:
            picked = sorted(int(i) for i in rng.choice(candidates, size=k, replace=False))
        else:
            picked = candidates
        yield from game_examples(g, picked, n)


# ---------------------------------------------------------------------------
# Shards: length-prefixed binary records behind a versioned header
# ---------------------------------------------------------------------------

SHARD_MAGIC = b"CFSHARD\x00"
SHARD_VERSION = 1
_HEADER = struct.Struct("<8sHH")
_FIXED = struct.Struct("<IHHBBHH")


def _encode(ex: TrainingExample) -> bytes:
    flags = int(ex.black_to_move) | sum(int(c) << (i + 1) for i, c in enumerate(ex.castling))
    parts = [_FIXED.pack(ex.ply, ex.active_rating, ex.opponent_rating, ex.outcome, flags,
                         min(ex.rule50, 65535), ex.target)]
    parts.append(struct.pack("<H", len(ex.legal)))
    parts.append(np.asarray(ex.legal, "<u2").tobytes())
    parts.append(np.asarray(ex.boards, np.int8).tobytes())
    reps = ex.repetitions if ex.repetitions is not None else np.zeros(len(ex.boards), bool)
    parts.append(np.asarray(reps, np.uint8).tobytes())
    fen = ex.fen.encode()
    parts.append(struct.pack("<H", len(fen)) + fen)
    if ex.soft_target is None:
        parts.append(struct.pack("<H", 0))
    else:
        idx, prob = ex.soft_target
        parts.append(struct.pack("<H", len(idx)))
        parts.append(np.asarray(idx, "<u2").tobytes() + np.asarray(prob, "<f4").tobytes())
    return b"".join(parts)


def _decode(buf: bytes, n: int) -> TrainingExample:
    ply, active, opp, outcome, flags, rule50, target = _FIXED.unpack_from(buf, 0)
    off = _FIXED.size
    (n_legal,) = struct.unpack_from("<H", buf, off)
    off += 2
    legal = np.frombuffer(buf, "<u2", n_legal, off).astype(np.int32)
    off += 2 * n_legal
    boards = np.frombuffer(buf, np.int8, (n + 1) * 64, off).reshape(n + 1, 64).copy()
    off += (n + 1) * 64
    reps = np.frombuffer(buf, np.uint8, n + 1, off).astype(bool)
    off += n + 1
    (fen_len,) = struct.unpack_from("<H", buf, off)
    off += 2
    fen = buf[off:off + fen_len].decode()
    off += fen_len
    (n_soft,) = struct.unpack_from("<H", buf, off)
    off += 2
    soft = None
    if n_soft:
        idx = np.frombuffer(buf, "<u2", n_soft, off).astype(np.int64)
        prob = np.frombuffer(buf, "<f4", n_soft, off + 2 * n_soft).astype(np.float32)
        soft = (idx, prob)
    return TrainingExample(
        boards=boards, active_rating=active, opponent_rating=opp, target=target, outcome=outcome,
        ply=ply, legal=legal, fen=fen,
        castling=tuple(bool(flags >> (i + 1) & 1) for i in range(4)),
        black_to_move=bool(flags & 1), rule50=rule50, repetitions=reps, soft_target=soft,
    )


def write_shard(path, examples: Iterable[TrainingExample], n: int) -> int:
    count = 0
    with open(path, "wb") as f:
        f.write(_HEADER.pack(SHARD_MAGIC, SHARD_VERSION, n))
        for ex in examples:
            if ex.history != n:
                raise ValueError(f"example has history {ex.history}, shard expects {n}")
            payload = _encode(ex)
            f.write(struct.pack("<I", len(payload)))
            f.write(payload)
            count += 1
    return count


def read_shard(path) -> Iterator[TrainingExample]:
    with open(path, "rb") as f:
        magic, version, n = _HEADER.unpack(f.read(_HEADER.size))
        if magic != SHARD_MAGIC:
            raise ValueError(f"{path}: not an example shard")
        if version != SHARD_VERSION:
            raise ValueError(f"{path}: unsupported shard version {version}")
        while True:
            head = f.read(4)
            if not head:
                return
            (length,) = struct.unpack("<I", head)
            yield _decode(f.read(length), n)


def write_manifest(path, entries: list[tuple[str, int]]) -> None:
    with open(path, "w") as f:
        for shard, count in entries:
            f.write(f"{shard}\t{count}\n")


def read_manifest(path) -> list[tuple[Path, int]]:
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.txt"
    out = []
    for line in path.read_text().splitlines():
        if line.strip():
            shard, count = line.rsplit("\t", 1)
            shard_path = Path(shard)
            out.append((shard_path if shard_path.is_absolute() else path.parent / shard_path, int(count)))
    return out


def iter_examples(path) -> Iterator[TrainingExample]:
    """Examples from a shard file, a manifest, or a directory holding ``manifest.txt``."""
    path = Path(path)
    if path.is_file():
        with open(path, "rb") as f:
            is_shard = f.read(len(SHARD_MAGIC)) == SHARD_MAGIC
        if is_shard:
            yield from read_shard(path)
            return
    for shard, _ in read_manifest(path):
        yield from read_shard(shard)


def write_shards(out_dir, examples: Iterable[TrainingExample], n: int, shard_size: int = 50000,
                 prefix: str = "shard") -> list[tuple[str, int]]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    entries, buf = [], []

    def flush():
        name = f"{prefix}-{len(entries):05d}.bin"
        entries.append((name, write_shard(out_dir / name, buf, n)))
        buf.clear()

    for ex in examples:
        buf.append(ex)
        if len(buf) == shard_size:
            flush()
    if buf or not entries:
        flush()
    write_manifest(out_dir / "manifest.txt", entries)
    return entries


# ---------------------------------------------------------------------------
# Columnar example sets and model batches
# ---------------------------------------------------------------------------

@dataclass
class Batch:
    boards: torch.Tensor        # (B, n+1, 64) long plane codes, -1 empty
    ratings: torch.Tensor       # (B, 2) active, opponent
    aux: torch.Tensor           # (B, 8 + n+1): repetitions, castling(4), black_to_move, rule50/100, 0, 1
    legal_mask: torch.Tensor    # (B, POLICY_SIZE) bool
    target: torch.Tensor        # (B,) long
    outcome: torch.Tensor       # (B,) long
    soft_target: torch.Tensor | None = None  # (B, POLICY_SIZE) float

    def __len__(self) -> int:
        return self.boards.shape[0]


class ExampleSet:
    """Training examples held as stacked arrays."""

    def __init__(self, examples: list[TrainingExample]):
        if not examples:
            raise ValueError("empty example set")
        self.n = examples[0].history
        self.boards = np.stack([e.boards for e in examples]).astype(np.int8)
        self.ratings = np.array([(e.active_rating, e.opponent_rating) for e in examples], np.float32)
        self.target = np.array([e.target for e in examples], np.int64)
        self.outcome = np.array([e.outcome for e in examples], np.int64)
        reps = np.stack([e.repetitions if e.repetitions is not None else np.zeros(self.n + 1, bool)
                         for e in examples])
        flags = np.array([(*e.castling, e.black_to_move, e.rule50 / 100) for e in examples], np.float32)
        self.aux = np.concatenate([reps.astype(np.float32), flags,
                                   np.tile(np.array([0.0, 1.0], np.float32), (len(examples), 1))], axis=1)
        lengths = np.array([len(e.legal) for e in examples])
        self.legal_offsets = np.concatenate([[0], np.cumsum(lengths)])
        self.legal_flat = np.concatenate([np.asarray(e.legal, np.int64) for e in examples])
        self.fens = [e.fen for e in examples]
        self.plies = np.array([e.ply for e in examples])
        self.soft = [e.soft_target for e in examples]
        self.has_soft = any(s is not None for s in self.soft)

    @classmethod
    def from_manifest(cls, path, limit: int | None = None) -> "ExampleSet":
        return cls(list(itertools.islice(iter_examples(path), limit)))

    def __len__(self) -> int:
        return len(self.target)

    def legal(self, i: int) -> np.ndarray:
        return self.legal_flat[self.legal_offsets[i]:self.legal_offsets[i + 1]]

    def __getitem__(self, i: int) -> TrainingExample:
        aux = self.aux[i]
        n1 = self.n + 1
        return TrainingExample(
            boards=self.boards[i].copy(), active_rating=int(self.ratings[i, 0]),
            opponent_rating=int(self.ratings[i, 1]), target=int(self.target[i]),
            outcome=int(self.outcome[i]), ply=int(self.plies[i]), legal=self.legal(i).copy(),
            fen=self.fens[i], castling=tuple(bool(x) for x in aux[n1:n1 + 4]),
            black_to_move=bool(aux[n1 + 4]), rule50=int(round(aux[n1 + 5] * 100)),
            repetitions=aux[:n1].astype(bool), soft_target=self.soft[i],
        )

    def batch(self, idx, boards: np.ndarray | None = None) -> Batch:
        idx = np.asarray(idx)
        mask = np.zeros((len(idx), cb.POLICY_SIZE), dtype=bool)
        for row, i in enumerate(idx):
            mask[row, self.legal(i)] = True
        soft = None
        if self.has_soft:
            soft = np.zeros((len(idx), cb.POLICY_SIZE), np.float32)
            for row, i in enumerate(idx):
                if self.soft[i] is not None:
                    soft[row, self.soft[i][0]] = self.soft[i][1]
                else:
                    soft[row, self.target[i]] = 1.0
            soft = torch.from_numpy(soft)
        return Batch(
            boards=torch.from_numpy((self.boards[idx] if boards is None else boards).astype(np.int64)),
            ratings=torch.from_numpy(self.ratings[idx]),
            aux=torch.from_numpy(self.aux[idx]),
            legal_mask=torch.from_numpy(mask),
            target=torch.from_numpy(self.target[idx]),
            outcome=torch.from_numpy(self.outcome[idx]),
            soft_target=soft,
        )


def collate(examples: list[TrainingExample]) -> Batch:
    return ExampleSet(examples).batch(np.arange(len(examples)))
