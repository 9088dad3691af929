"""Slow, self-contained legal move generator used only as a perft oracle.

10x12 mailbox, copy-make, legality by testing the mover's king after each
pseudo-legal move. Shares no code with the package.
"""

N, S, E, W = -10, 10, 1, -1
KNIGHT = (-21, -19, -12, -8, 8, 12, 19, 21)
KING = (-11, -10, -9, -1, 1, 9, 10, 11)
BISHOP = (-11, -9, 9, 11)
ROOK = (-10, -1, 1, 10)
OFF = "x"


def _sq(file, rank):
    # rank 0 = first rank, stored at the bottom of the mailbox
    return 21 + file + (7 - rank) * 10


def _file_rank(sq):
    return (sq - 21) % 10, 7 - (sq - 21) // 10


class State:
    __slots__ = ("b", "white", "castle", "ep")

    def __init__(self, b, white, castle, ep):
        self.b = b
        self.white = white
        self.castle = castle
        self.ep = ep


def from_fen(fen):
    parts = fen.split()
    b = [OFF] * 120
    for rank_i, row in enumerate(parts[0].split("/")):
        rank = 7 - rank_i
        file = 0
        for ch in row:
            if ch.isdigit():
                for _ in range(int(ch)):
                    b[_sq(file, rank)] = "."
                    file += 1
            else:
                b[_sq(file, rank)] = ch
                file += 1
    castle = "" if parts[2] == "-" else parts[2]
    ep = None
    if parts[3] != "-":
        ep = _sq("abcdefgh".index(parts[3][0]), int(parts[3][1]) - 1)
    return State(b, parts[1] == "w", castle, ep)


def _own(ch, white):
    return ch.isupper() if white else ch.islower()


def attacked(b, sq, by_white):
    pawn, knight, king = ("P", "N", "K") if by_white else ("p", "n", "k")
    bishops = ("B", "Q") if by_white else ("b", "q")
    rooks = ("R", "Q") if by_white else ("r", "q")
    # a white pawn attacks upward, so look one rank below the target
    for d in ((S + E, S + W) if by_white else (N + E, N + W)):
        if b[sq + d] == pawn:
            return True
    for d in KNIGHT:
        if b[sq + d] == knight:
            return True
    for d in KING:
        if b[sq + d] == king:
            return True
    for dirs, sliders in ((BISHOP, bishops), (ROOK, rooks)):
        for d in dirs:
            t = sq + d
            while b[t] == ".":
                t += d
            if b[t] in sliders:
                return True
    return False


def pseudo_moves(st):
    b, white = st.b, st.white
    out = []
    for sq in range(21, 99):
        p = b[sq]
        if p in (".", OFF) or not _own(p, white):
            continue
        kind = p.upper()
        if kind == "P":
            fwd = N if white else S
            start_rank = 1 if white else 6
            last_rank = 7 if white else 0
            _, rank = _file_rank(sq)
            t = sq + fwd
            if b[t] == ".":
                if _file_rank(t)[1] == last_rank:
                    out.extend((sq, t, promo) for promo in "nbrq")
                else:
                    out.append((sq, t, None))
                    if rank == start_rank and b[t + fwd] == ".":
                        out.append((sq, t + fwd, None))
            for d in (fwd + E, fwd + W):
                t = sq + d
                q = b[t]
                if q not in (".", OFF) and not _own(q, white):
                    if _file_rank(t)[1] == last_rank:
                        out.extend((sq, t, promo) for promo in "nbrq")
                    else:
                        out.append((sq, t, None))
                elif t == st.ep:
                    out.append((sq, t, None))
        elif kind in "NK":
            for d in (KNIGHT if kind == "N" else KING):
                t = sq + d
                q = b[t]
                if q == "." or (q != OFF and not _own(q, white)):
                    out.append((sq, t, None))
        else:
            dirs = {"B": BISHOP, "R": ROOK, "Q": BISHOP + ROOK}[kind]
            for d in dirs:
                t = sq + d
                while True:
                    q = b[t]
                    if q == OFF:
                        break
                    if q == ".":
                        out.append((sq, t, None))
                    else:
                        if not _own(q, white):
                            out.append((sq, t, None))
                        break
                    t += d
    # castling: king and rook on home squares, path empty, no attacked transit squares
    home = 0 if white else 7
    k_sq = _sq(4, home)
    king_ch = "K" if white else "k"
    rook_ch = "R" if white else "r"
    if b[k_sq] == king_ch:
        for right, rook_file, empties, transit in (
            ("K" if white else "k", 7, (5, 6), (4, 5, 6)),
            ("Q" if white else "q", 0, (1, 2, 3), (4, 3, 2)),
        ):
            if right not in st.castle or b[_sq(rook_file, home)] != rook_ch:
                continue
            if any(b[_sq(f, home)] != "." for f in empties):
                continue
            if any(attacked(b, _sq(f, home), not white) for f in transit):
                continue
            out.append((k_sq, _sq(6 if rook_file == 7 else 2, home), None))
    return out


def make(st, move):
    frm, to, promo = move
    b = list(st.b)
    p = b[frm]
    white = st.white
    b[frm] = "."
    if p.upper() == "P" and to == st.ep:
        b[to + (S if white else N)] = "."
    b[to] = (promo.upper() if white else promo) if promo else p
    if p.upper() == "K" and abs(to - frm) == 2:
        home = _file_rank(frm)[1]
        if to > frm:
            b[_sq(5, home)], b[_sq(7, home)] = b[_sq(7, home)], "."
        else:
            b[_sq(3, home)], b[_sq(0, home)] = b[_sq(0, home)], "."
    castle = st.castle
    for sq, rights in ((_sq(4, 0), "KQ"), (_sq(7, 0), "K"), (_sq(0, 0), "Q"),
                       (_sq(4, 7), "kq"), (_sq(7, 7), "k"), (_sq(0, 7), "q")):
        if frm == sq or to == sq:
            castle = "".join(c for c in castle if c not in rights)
    ep = None
    if p.upper() == "P" and abs(to - frm) == 20:
        ep = (frm + to) // 2
    return State(b, not white, castle, ep)


def legal(st):
    out = []
    king = "K" if st.white else "k"
    for mv in pseudo_moves(st):
        nxt = make(st, mv)
        k = nxt.b.index(king)
        if not attacked(nxt.b, k, not st.white):
            out.append(mv)
    return out


def perft(st, depth):
    if depth == 0:
        return 1
    moves = legal(st)
    if depth == 1:
        return len(moves)
    return sum(perft(make(st, mv), depth - 1) for mv in moves)


def uci(move):
    frm, to, promo = move
    name = lambda sq: "abcdefgh"[_file_rank(sq)[0]] + str(_file_rank(sq)[1] + 1)
    return name(frm) + name(to) + (promo or "")


def perft_fen(fen, depth):
    return perft(from_fen(fen), depth)
