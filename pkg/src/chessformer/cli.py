"""Command-line entry points.

Every command takes ``--seed`` and ``--config``. A config file holds
``key = value`` lines; a key that names a flag supplies that flag's value
unless the flag is given explicitly. For ``train`` the file also carries the
model and optimizer settings. Exit status: 0 success, 1 usage error, 2 failure.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np
import torch

EXIT_OK, EXIT_USAGE, EXIT_FAILURE = 0, 1, 2


class UsageError(Exception):
    pass


class Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


REQUIRED: dict[str, list[str]] = {}


def _command(subs, name: str, help: str, required=()):
    p = subs.add_parser(name, help=help, description=help)
    p.add_argument("--seed", type=int, default=0, help="seed for all randomness")
    p.add_argument("--config", type=Path, help="key=value file supplying flag defaults")
    REQUIRED[name] = list(required)
    return p


def build_parser() -> tuple[Parser, dict[str, Parser]]:
    parser = Parser(prog="chessformer", description="Square-token chess transformer toolkit.")
    subs = parser.add_subparsers(dest="command", metavar="command", parser_class=Parser)
    subs.required = True
    cmds = {}

    p = cmds["synth"] = _command(subs, "synth", "write synthetic rated blitz games as PGN", ["out"])
    p.add_argument("--games", type=int, default=100)
    p.add_argument("--out", type=Path)

    p = cmds["ingest"] = _command(subs, "ingest", "turn PGN games into example shards", ["pgn", "out"])
    p.add_argument("--pgn", type=Path)
    p.add_argument("--out", type=Path)
    p.add_argument("--history", type=int, default=7)
    p.add_argument("--positions-per-game", type=int, default=32)
    p.add_argument("--time-threshold", type=float, default=30.0)
    p.add_argument("--rebalance", action="store_true", help="equalize rating bins per chunk of games")
    p.add_argument("--chunk", type=int, default=20000)
    p.add_argument("--per-bin", type=int, default=10)
    p.add_argument("--test", action="store_true", help="held-out mode: all positions after the first 10 moves")
    p.add_argument("--shard-size", type=int, default=50000)

    p = cmds["train"] = _command(subs, "train", "train a model on example shards", ["data", "out"])
    p.add_argument("--data", type=Path)
    p.add_argument("--val", type=Path)
    p.add_argument("--out", type=Path)
    p.add_argument("--resume", type=Path, help="checkpoint to continue from")
    p.add_argument("--steps", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--posenc", choices=("absolute", "relative2d", "gab", "gab_pooled"))

    p = cmds["eval-match"] = _command(subs, "eval-match", "move-matching accuracy and perplexity", ["model", "test"])
    p.add_argument("--model", type=Path)
    p.add_argument("--test", type=Path)
    p.add_argument("--limit", type=int)
    p.add_argument("--swa", action="store_true", help="use the averaged weights")

    p = cmds["eval-puzzles"] = _command(subs, "eval-puzzles", "solve Lichess-format puzzles", ["model", "puzzles"])
    p.add_argument("--model", type=Path)
    p.add_argument("--puzzles", type=Path)
    p.add_argument("--strategy", choices=("policy", "value"), default="policy")
    p.add_argument("--rating", type=int, default=1500)
    p.add_argument("--limit", type=int)
    p.add_argument("--strict", action="store_true", help="an alternative mating move does not count")
    p.add_argument("--swa", action="store_true")

    p = cmds["tournament"] = _command(subs, "tournament", "round robin between agents with Elo estimates", ["models"])
    p.add_argument("--models", type=Path, nargs="+")
    p.add_argument("--strategies", nargs="+", choices=("policy", "value"), default=["policy"])
    p.add_argument("--openings", type=Path)
    p.add_argument("--games-per-pair", type=int, default=2)
    p.add_argument("--max-plies", type=int, help="adjudicate a draw after this many plies")
    p.add_argument("--rating", type=int, default=1500)
    p.add_argument("--anchor-elo", type=float, default=0.0)
    p.add_argument("--pgn", type=Path, help="write every game here")

    p = cmds["analyze-attention"] = _command(subs, "analyze-attention", "attention consistency statistics and heatmaps",
                                             ["model", "data"])
    p.add_argument("--model", type=Path)
    p.add_argument("--data", type=Path)
    p.add_argument("--positions", type=int, default=1000)
    p.add_argument("--pairs", type=int, default=50)
    p.add_argument("--post-softmax", action="store_true", help="use softmaxed dot-product rows")
    p.add_argument("--heatmap", action="append", default=[],
                   metavar="POS,LAYER,HEAD,SQUARE,COMPONENT", help="export one attention row, e.g. 0,1,3,c1,gab")
    p.add_argument("--out", type=Path)

    p = cmds["train-transcoder"] = _command(subs, "train-transcoder", "fit a cross-layer transcoder",
                                            ["model", "data", "out"])
    p.add_argument("--model", type=Path)
    p.add_argument("--data", type=Path)
    p.add_argument("--layers", default="0,1")
    p.add_argument("--positions", type=int, default=2000)
    p.add_argument("--expansion", type=int, default=8)
    p.add_argument("--lam", type=float, default=0.0)
    p.add_argument("--c", type=float, default=1.0)
    p.add_argument("--lr", type=float, default=5e-5)
    p.add_argument("--steps", type=int, default=1000)
    p.add_argument("--batch-positions", type=int, default=22)
    p.add_argument("--activations", type=Path, help="also save the captured activations here")
    p.add_argument("--out", type=Path)

    p = cmds["features"] = _command(subs, "features", "top-activating squares for a transcoder feature",
                                    ["model", "transcoder", "data"])
    p.add_argument("--model", type=Path)
    p.add_argument("--transcoder", type=Path)
    p.add_argument("--data", type=Path)
    p.add_argument("--positions", type=int, default=2000)
    p.add_argument("--feature", type=int, default=0)
    p.add_argument("--layer-slot", type=int, default=0, help="index into the transcoder's layer list")
    p.add_argument("--k", type=int, default=10)
    p.add_argument("--out", type=Path, help="JSON lines file (default: standard output)")

    p = cmds["uci"] = _command(subs, "uci", "serve a model over the UCI protocol", ["model"])
    p.add_argument("--model", type=Path)
    p.add_argument("--strategy", choices=("policy", "value"), default="policy")
    p.add_argument("--rating-self", type=int, default=1500)
    p.add_argument("--rating-opponent", type=int, default=1500)
    p.add_argument("--swa", action="store_true")
    return parser, cmds


def _apply_config(parser: Parser, sub: Parser, argv: list[str], args) -> argparse.Namespace:
    from .training import read_config_file

    values = read_config_file(args.config)
    defaults = {}
    for action in sub._actions:
        key = next((k for k in values if k.replace("-", "_") == action.dest), None)
        if key is None or action.dest in ("config", "help"):
            continue
        value = values[key]
        if isinstance(action, argparse._StoreTrueAction):
            value = value.lower() in ("1", "true", "yes")
        elif action.nargs in ("+", "*"):
            value = [action.type(v) if action.type else v for v in value.split()]
        defaults[action.dest] = value
    sub.set_defaults(**defaults)
    return parser.parse_args(argv)


def run(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser, cmds = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    sub = cmds[args.command]
    try:
        if args.config is not None:
            if not args.config.is_file():
                raise UsageError(f"config file {args.config} not found")
            args = _apply_config(parser, sub, argv, args)
        missing = [f"--{k.replace('_', '-')}" for k in REQUIRED[args.command] if getattr(args, k) is None]
        if missing:
            raise UsageError(f"missing required flag(s): {' '.join(missing)}")
    except (UsageError, ValueError) as exc:
        sub.print_usage(sys.stderr)
        print(f"{sub.prog}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit:
        return EXIT_USAGE
    torch.manual_seed(args.seed)
    try:
        return HANDLERS[args.command](args) or EXIT_OK
    except UsageError as exc:
        sub.print_usage(sys.stderr)
        print(f"{sub.prog}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # reported, not raised: the exit code carries the failure
        print(f"{sub.prog}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_FAILURE


# -- handlers ---------------------------------------------------------------------

def _load_model(path, swa: bool = False):
    from .checkpoint import load_model

    return load_model(path, "swa/" if swa else "model/")[0]


def _examples(path, limit=None):
    from .data import ExampleSet

    return ExampleSet.from_manifest(path, limit)


def cmd_synth(args):
    from .synth import generate_pgn

    args.out.parent.mkdir(parents=True, exist_ok=True)
    with open(args.out, "w") as fh:
        generate_pgn(args.games, seed=args.seed, out=fh)
    print(f"wrote {args.games} games to {args.out}")


def cmd_ingest(args):
    from . import data

    rejects: list = []
    with open(args.pgn) as fh:
        games = data.parse_pgn(fh, rejects)
        if args.rebalance:
            games = data.rebalance(games, args.chunk, args.per_bin)
        k = 0 if args.test else args.positions_per_game
        skip = 20 if args.test else 0
        examples = data.examples_from_games(games, n=args.history, k=k, rng=np.random.default_rng(args.seed),
                                            time_threshold=args.time_threshold, skip_opening_plies=skip)
        entries = data.write_shards(args.out, examples, args.history, args.shard_size)
    total = sum(c for _, c in entries)
    print(f"examples {total} in {len(entries)} shard(s); rejected games {len(rejects)}")
    for number, reason in rejects[:20]:
        print(f"  game {number}: {reason}", file=sys.stderr)


def cmd_train(args):
    from . import training as tr

    values = tr.read_config_file(args.config) if args.config else {}
    flag_keys = {a.replace("-", "_") for a in ("data", "val", "out", "resume")}
    model_cfg, cfg = tr.split_config({k: v for k, v in values.items() if k.replace("-", "_") not in flag_keys})
    overrides = {"steps": args.steps, "lr": args.lr, "batch_size": args.batch_size, "seed": args.seed}
    cfg = tr.TrainConfig.from_dict({**tr.ckpt.parse_meta(cfg.to_text()),
                                    **{k: str(v) for k, v in overrides.items() if v is not None}})
    if args.posenc:
        model_cfg = tr.ModelConfig.from_dict({**tr.ckpt.parse_meta(model_cfg.to_text()), "posenc": args.posenc})
    train_set = _examples(args.data)
    val_set = _examples(args.val) if args.val else None
    if args.resume:
        state = tr.load_state(args.resume)
        state.cfg.steps = cfg.steps
    else:
        state = tr.new_state(model_cfg, cfg)
    if train_set.n != state.model.cfg.history:
        raise UsageError(f"data has history {train_set.n}, model expects {state.model.cfg.history}")
    state = tr.run_training(state, train_set, val_set, out_dir=args.out)
    last = state.history[-1] if state.history else {}
    print(f"step {state.step} loss {last.get('loss', float('nan')):.4f} "
          f"policy_acc {last.get('policy_acc', float('nan')):.4f} aborted {state.aborted}")
    if val_set is not None:
        ev = tr.evaluate(state.model, val_set)
        print(f"validation policy_loss {ev['policy_loss']:.4f} policy_acc {ev['policy_acc']:.4f}")


def cmd_eval_match(args):
    from .agents import Agent, ModelEvaluator, move_matching

    model = _load_model(args.model, args.swa)
    test = _examples(args.test, args.limit)
    rep = move_matching(Agent(ModelEvaluator(model)), test)
    print(f"{'positions':>10} {'accuracy':>9} {'ci95_low':>9} {'ci95_high':>9} {'perplexity':>10}")
    print(f"{rep.positions:>10} {rep.accuracy:>9.4f} {rep.ci_low:>9.4f} {rep.ci_high:>9.4f} {rep.perplexity:>10.3f}")


def cmd_eval_puzzles(args):
    from .agents import Agent, ModelEvaluator, load_puzzles, puzzle_accuracy, wilson_interval

    model = _load_model(args.model, args.swa)
    puzzles, corrupt = load_puzzles(args.puzzles)
    if args.limit is not None:
        puzzles = puzzles[:args.limit]
    if not puzzles:
        raise UsageError("no valid puzzles")
    agent = Agent(ModelEvaluator(model), args.strategy, args.rating, args.rating)
    acc, solved = puzzle_accuracy(agent, puzzles, mate_counts=not args.strict)
    low, high = wilson_interval(solved, len(puzzles))
    print(f"puzzles {len(puzzles)} solved {solved} accuracy {acc:.4f} ci95 [{low:.4f}, {high:.4f}] "
          f"skipped_corrupt {corrupt}")


def cmd_tournament(args):
    from .agents import Agent, ModelEvaluator, read_openings, round_robin
    from .board import START_FEN
    from .elo import estimate_elo

    agents = []
    for path in args.models:
        ev = ModelEvaluator(_load_model(path))
        for strategy in args.strategies:
            agents.append(Agent(ev, strategy, args.rating, args.rating, name=f"{path.stem}:{strategy}"))
    if len(agents) < 2:
        raise UsageError("need at least two agents (models x strategies)")
    openings = read_openings(args.openings) if args.openings else [START_FEN]
    result = round_robin(agents, args.games_per_pair, openings, seed=args.seed, max_plies=args.max_plies)
    print(result.table())
    est = estimate_elo(result.pairs, len(agents), anchor=0, anchor_elo=args.anchor_elo)
    print(f"\n{'agent':<30} {'elo':>8} {'ci95_low':>9} {'ci95_high':>9}")
    for i, a in enumerate(agents):
        print(f"{a.name:<30} {est.ratings[i]:>8.1f} {est.lower[i]:>9.1f} {est.upper[i]:>9.1f}")
    if est.degenerate:
        print("warning: results admit no finite maximum-likelihood ratings; intervals unbounded", file=sys.stderr)
    if args.pgn:
        args.pgn.write_text(result.to_pgn())


def cmd_analyze_attention(args):
    import chess

    from . import interpret as it

    model = _load_model(args.model)
    ds = it.collect_attention(model, _examples(args.data, args.positions))
    report = {"positions": len(ds), "posenc": model.cfg.posenc}
    for comp in ("gab", "dpa"):
        for kind, fn in (("between", lambda c: it.consistency_between(ds, c, args.pairs, args.seed,
                                                                        post_softmax=args.post_softmax)),
                         ("within", lambda c: it.consistency_within(ds, c, post_softmax=args.post_softmax))):
            try:
                res = fn(comp)
                report[f"{comp}_{kind}"] = res.mean
                report[f"{comp}_{kind}_skipped"] = res.skipped
            except ValueError as exc:
                report[f"{comp}_{kind}"] = None
                report[f"{comp}_{kind}_note"] = str(exc)
    for key in ("gab_between", "dpa_between", "gab_within", "dpa_within"):
        value = report[key]
        print(f"{key:<12} {'n/a' if value is None else f'{value:.4f}'}")
    if args.out:
        args.out.mkdir(parents=True, exist_ok=True)
        (args.out / "consistency.json").write_text(json.dumps(report, indent=1, sort_keys=True) + "\n")
    for item in args.heatmap:
        try:
            pos, layer, head, square, comp = item.split(",")
            sq = chess.parse_square(square) if not square.isdigit() else int(square)
        except ValueError:
            raise UsageError(f"bad --heatmap {item!r}") from None
        target = (args.out or Path(".")) / f"heatmap_p{pos}_l{layer}_h{head}_{square}_{comp}.csv"
        it.export_heatmap(ds, int(pos), int(layer), int(head), sq, comp, target, args.post_softmax)
        print(f"wrote {target}")


def cmd_train_transcoder(args):
    from . import interpret as it

    model = _load_model(args.model)
    layers = [int(x) for x in args.layers.split(",")]
    if any(not 0 <= l < model.cfg.layers for l in layers):
        raise UsageError(f"layers must lie in [0, {model.cfg.layers})")
    xs, ys = it.capture_activations(model, _examples(args.data, args.positions), layers)
    if args.activations:
        it.save_activations(args.activations, xs, ys, layers)
    tc, met = it.train_transcoder(xs, ys, layers, args.expansion, args.lam, args.c, args.lr, args.steps,
                                  args.batch_positions, args.seed)
    tc.save(args.out)
    print(f"recon_fraction {met.recon_fraction:.4f} sparsity {met.sparsity:.4f} "
          f"mean_activation {met.mean_activation:.4f}")


def cmd_features(args):
    from . import interpret as it

    model = _load_model(args.model)
    tc = it.Transcoder.load(args.transcoder)
    if not 0 <= args.layer_slot < tc.k:
        raise UsageError(f"--layer-slot must lie in [0, {tc.k})")
    examples = _examples(args.data, args.positions)
    xs, _ = it.capture_activations(model, examples, tc.layer_ids)
    records = it.top_activations(tc, xs, examples.fens, args.feature, args.k, args.layer_slot)
    lines = [r.to_json() for r in records]
    if args.out:
        args.out.write_text("".join(line + "\n" for line in lines))
    else:
        for line in lines:
            print(line)
    if not records:
        print(f"feature {args.feature} is dead on this corpus", file=sys.stderr)


def cmd_uci(args):
    from .agents import ModelEvaluator
    from .uci import UCIEngine

    engine = UCIEngine(ModelEvaluator(_load_model(args.model, args.swa)), args.strategy,
                       args.rating_self, args.rating_opponent)
    engine.serve()


HANDLERS = {
    "synth": cmd_synth,
    "ingest": cmd_ingest,
    "train": cmd_train,
    "eval-match": cmd_eval_match,
    "eval-puzzles": cmd_eval_puzzles,
    "tournament": cmd_tournament,
    "analyze-attention": cmd_analyze_attention,
    "train-transcoder": cmd_train_transcoder,
    "features": cmd_features,
    "uci": cmd_uci,
}


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
