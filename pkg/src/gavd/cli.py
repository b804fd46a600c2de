"""Command-line entry point: ``gavd <subcommand> ...``.

Exit status is 0 on success, 1 when an input fails validation and 2 on a
usage error. Every output file is written atomically.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import warnings
from pathlib import Path

from .dump import AttentionDump, atomic_write_text, load_dump, load_keyframes, save_dump
from .errors import GavdError
from .grounding import rank_layers_heads, reports_to_csv
from .matching import match_heads, match_heads_discard, match_heads_random
from .redistribution import PROPORTIONAL, UNIFORM, RedistributionPlan, apply_plan
from .sinks import (DEFAULT_K, DEFAULT_SINK_THRESHOLD, HeadSelection, SinkConfig, detect_sink_tokens,
                    select_top_k_by_attention_sum, select_top_k_heads)

log = logging.getLogger("gavd")

EXIT_OK, EXIT_INVALID, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


def _emit(text: str, out: str | None) -> None:
    if out is None:
        sys.stdout.write(text if text.endswith("\n") else text + "\n")
    else:
        atomic_write_text(out, text if text.endswith("\n") else text + "\n")
        log.info("wrote %s", out)


def _int_list(text: str) -> list[int]:
    try:
        return [int(t) for t in text.split(",") if t.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from exc


def _sinks(dump: AttentionDump, layer: int, args) -> frozenset[int]:
    """Sink positions: explicit ``--sink-positions``, else detected from hidden states."""
    if args.sink_positions is not None:
        return frozenset(args.sink_positions)
    hidden = dump.hidden(layer)
    if hidden is None:
        warnings.warn("dump has no hidden states; treating the sink set as empty", stacklevel=2)
        return frozenset()
    dims = args.sink_dims
    if dims is None and dump.meta.get("sink_dims"):
        dims = _int_list(dump.meta["sink_dims"])
    if not dims:
        raise UsageError("sink detection needs --sink-dims (or a 'sink_dims' entry in the dump meta)")
    return detect_sink_tokens(hidden, dump.layout, SinkConfig(frozenset(dims), args.sink_threshold))


def _check_layer(dump: AttentionDump, layer: int) -> None:
    if not 0 <= layer < dump.layers:
        raise UsageError(f"--layer {layer} out of range; dump has {dump.layers} layers")


def _select(dump: AttentionDump, layer: int, k: int, args, rank: str = "vnsr") -> HeadSelection:
    _check_layer(dump, layer)
    rows = dump.layer_rows(layer)
    if rank == "attnsum":
        return select_top_k_by_attention_sum(rows, dump.layout, k)
    return select_top_k_heads(rows, dump.layout, _sinks(dump, layer, args), k)


# --------------------------------------------------------------------- commands
def cmd_analyze(args) -> int:
    dump = load_dump(args.dump)
    ann = load_keyframes(args.keyframes) if args.keyframes else None
    layers, heads = rank_layers_heads(dump, ann, args.score_mode)
    prefix = args.out or str(Path(args.dump).with_suffix("")) + ".quality"
    report = {"score_mode": args.score_mode, "layers": [r.to_dict() for r in layers],
              "heads": [r.to_dict() for r in heads]}
    atomic_write_text(prefix + ".json", json.dumps(report, indent=2, allow_nan=False) + "\n")
    atomic_write_text(prefix + ".csv", reports_to_csv(layers + heads))
    print(f"wrote {prefix}.json and {prefix}.csv")
    return EXIT_OK


def cmd_heads(args) -> int:
    dump = load_dump(args.dump)
    sel = _select(dump, args.layer, args.k, args, args.rank)
    _emit(sel.to_json(), args.out)
    return EXIT_OK


def cmd_match(args) -> int:
    gen, ver = load_dump(args.gen_dump), load_dump(args.ver_dump)
    if gen.layout != ver.layout:
        raise UsageError("generation and verification dumps have different token layouts")
    ver_layer = args.layer if args.ver_layer is None else args.ver_layer
    gen_sel = _select(gen, args.layer, args.k, args)
    ver_sel = _select(ver, ver_layer, args.k, args)
    if args.strategy == "hungarian":
        result = match_heads(gen_sel, ver_sel, gen.layer_rows(args.layer), ver.layer_rows(ver_layer), gen.layout,
                             exact_stage=ver_layer == args.layer)
    elif args.strategy == "random":
        result = match_heads_random(gen_sel, ver_sel, seed=args.seed)
    else:
        result = match_heads_discard(gen_sel, ver_sel)
        if result.partial:
            warnings.warn(f"discard matching kept {len(result.pairs)} of {len(gen_sel.heads)} heads", stacklevel=1)
    out = {"generation": gen_sel.to_dict(), "verification": ver_sel.to_dict(), **result.to_dict()}
    _emit(json.dumps(out, indent=2, allow_nan=False), args.out)
    return EXIT_OK


def _parse_target(text: str, dump: AttentionDump, args) -> RedistributionPlan | tuple:
    if text == "topk":
        layer = 0 if args.layer is None else args.layer
        return _select(dump, layer, args.k, args)
    try:
        layer, head = (int(t) for t in text.split(","))
    except ValueError as exc:
        raise UsageError(f"--target must be 'layer,head' or 'topk', got {text!r}") from exc
    return ((layer, head),)


def cmd_redistribute(args) -> int:
    dump = load_dump(args.dump)
    ann = load_keyframes(args.keyframes)
    strategy = {"proportional": PROPORTIONAL, "uniform": UNIFORM}[args.strategy]
    if args.target is None:
        target = tuple((l, h) for l in range(dump.layers) for h in range(dump.heads))
    else:
        target = _parse_target(args.target, dump, args)
    new = apply_plan(dump, RedistributionPlan(strategy, target), ann)
    out = args.out or str(Path(args.dump).with_suffix("")) + ".redistributed.json"
    save_dump(new, out)
    print(f"wrote {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    from .toy.config import ToyConfig
    from .toy.train import train

    try:
        with open(args.config, encoding="utf-8") as fh:
            mapping = json.load(fh)
    except json.JSONDecodeError as exc:
        raise GavdError(f"{args.config}: not valid JSON: {exc}") from exc
    if not isinstance(mapping, dict):
        raise GavdError(f"{args.config}: expected a JSON object of config fields")
    if os.environ.get("GAVD_SEED"):
        try:
            mapping["seed"] = int(os.environ["GAVD_SEED"])
        except ValueError as exc:
            raise UsageError(f"GAVD_SEED must be an integer, got {os.environ['GAVD_SEED']!r}") from exc
    related = mapping.pop("related_task", "verification")
    try:
        cfg = ToyConfig.from_mapping(mapping)
    except TypeError as exc:
        raise GavdError(f"invalid config: {exc}") from exc
    report = train(cfg, related_task=related)
    _emit(report.to_json(), args.out)
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .toy.data import generate_dataset
    from .toy.model import ToyModel
    from .toy.train import gradcheck_config, gradient_check

    cfg = gradcheck_config(args.seed)
    sample = generate_dataset(cfg, 1)[0]
    report = gradient_check(ToyModel(cfg), sample, seed=args.seed)
    _emit(json.dumps({"seed": args.seed, **report.to_dict()}, indent=2, allow_nan=False), args.out)
    return EXIT_OK


def cmd_selftest(args) -> int:
    from .selftest import run_all

    results = run_all(seed=args.seed)
    for r in results:
        print(f"{'PASS' if r.passed else 'FAIL'}  {r.name}: {r.detail}")
    return EXIT_OK if all(r.passed for r in results) else EXIT_INVALID


# ----------------------------------------------------------------------- parser
def _add_sink_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--sink-threshold", type=float, default=DEFAULT_SINK_THRESHOLD,
                   help="classify a visual token as a sink when its sink-dimension value reaches this")
    p.add_argument("--sink-dims", type=_int_list, default=None,
                   help="comma-separated sink feature dimensions (default: dump meta 'sink_dims')")
    p.add_argument("--sink-positions", type=_int_list, default=None,
                   help="comma-separated sink positions; skips detection")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gavd", description="Attention grounding analysis toolkit.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("analyze", help="rank layers and heads by visual attention quality")
    p.add_argument("dump")
    p.add_argument("--keyframes")
    p.add_argument("--score-mode", choices=("sum", "product"), default="sum")
    p.add_argument("--out", help="output prefix; writes PREFIX.json and PREFIX.csv")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("heads", help="select the top-K heads of one layer")
    p.add_argument("dump")
    p.add_argument("--layer", type=int, required=True)
    p.add_argument("--k", type=int, default=DEFAULT_K)
    p.add_argument("--rank", choices=("vnsr", "attnsum"), default="vnsr")
    _add_sink_args(p)
    p.add_argument("--out")
    p.set_defaults(func=cmd_heads)

    p = sub.add_parser("match", help="match generation heads to verification heads")
    p.add_argument("gen_dump")
    p.add_argument("ver_dump")
    p.add_argument("--layer", type=int, required=True)
    p.add_argument("--ver-layer", type=int, default=None,
                   help="verification layer for flexible matching (default: --layer)")
    p.add_argument("--k", type=int, default=DEFAULT_K)
    p.add_argument("--strategy", choices=("hungarian", "random", "discard"), default="hungarian")
    p.add_argument("--seed", type=int, default=0)
    _add_sink_args(p)
    p.add_argument("--out")
    p.set_defaults(func=cmd_match)

    p = sub.add_parser("redistribute", help="redistribute attention onto keyframes")
    p.add_argument("dump")
    p.add_argument("--keyframes", required=True)
    p.add_argument("--strategy", choices=("proportional", "uniform"), default="proportional")
    p.add_argument("--target", help="'layer,head' or 'topk' (default: every row)")
    p.add_argument("--layer", type=int, default=None, help="layer for --target topk")
    p.add_argument("--k", type=int, default=DEFAULT_K)
    _add_sink_args(p)
    p.add_argument("--out")
    p.set_defaults(func=cmd_redistribute)

    p = sub.add_parser("train", help="train the toy dual-pathway model")
    p.add_argument("--config", required=True, help="JSON object of config fields")
    p.add_argument("--out")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("gradcheck", help="finite-difference check of the toy gradients")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("selftest", help="run the brute-force oracle suites")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_selftest)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"gavd {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (GavdError, ValueError, KeyError, OSError) as exc:
        print(f"gavd {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
