"""Command line pipeline: gen -> capture -> similarity -> profile -> plan -> apply -> eval.

Structured artifacts are JSON, tables are CSV. Exit status: 0 ok, 1 config
error, 2 data/shape error, 3 planner stall. Failures also print one JSON line
``{"code": ..., "message": ...}`` on stderr.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys

from . import __version__
from ._io import dumps, read_json, write_text_atomic
from .exceptions import ConfigError, DataError, GrapeError
from .fidelity import compare, evaluate
from .merge import MERGE_MODES, apply_plan
from .planner import (
    METHODS,
    ClusterPlan,
    budget_to_per_layer,
    count_guided_prune,
    grape_prune,
    oracle_allocate,
    random_prune,
    router_guided_prune,
    uniform_prune,
)
from .redundancy import build_profile
from .similarity import METRICS, SimilarityBlock, blocks_to_json, similarity_blocks
from .synth import CalibrationCapture, SynthMoeModel, calibration_tokens, capture_calibration, generate_model

log = logging.getLogger("grape_moe")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


def _int_list(text):
    try:
        return [int(t) for t in text.split(",") if t.strip()]
    except ValueError as exc:
        raise ConfigError(f"expected comma-separated integers, got {text!r}") from exc


def _float_list(text):
    try:
        return [float(t) for t in text.split(",") if t.strip()]
    except ValueError as exc:
        raise ConfigError(f"expected comma-separated numbers, got {text!r}") from exc


def _require_seed(value, global_seed, flag):
    seed = value if value is not None else global_seed
    if seed is None:
        raise ConfigError(f"{flag} (or the global --seed) is required; runs never fall back to the clock")
    return seed


def load_model(path):
    return SynthMoeModel.from_dict(read_json(path))


def load_blocks(path):
    data = read_json(path)
    if not isinstance(data, list):
        raise DataError(f"{path}: similarity file must hold a list of blocks")
    return sorted((SimilarityBlock.from_dict(d) for d in data), key=lambda b: b.layer)


def load_plan(path):
    return ClusterPlan.from_dict(read_json(path))


def cmd_gen(args):
    experts = _int_list(args.experts)
    if len(experts) == 1:
        experts = experts * args.layers
    model = generate_model(args.layers, experts, args.d_model, args.d_ff, args.top_k,
                           _float_list(args.redundancy), _require_seed(None, args.seed, "--seed"))
    write_text_atomic(args.out, model.to_json())
    log.info("wrote model with %d layers to %s", model.n_layers, args.out)


def cmd_capture(args):
    model = load_model(args.model)
    seed = _require_seed(args.tokens_seed, args.seed, "--tokens-seed")
    cap = capture_calibration(model, calibration_tokens(args.tokens, model.d_model, seed))
    write_text_atomic(args.out, dumps(cap.to_dict()))


def cmd_similarity(args):
    if args.metric == "weight_cka":
        if not args.model:
            raise ConfigError("--metric weight_cka needs --model")
        source = load_model(args.model)
    else:
        if not args.capture:
            raise ConfigError(f"--metric {args.metric} needs --capture")
        source = CalibrationCapture.from_dict(read_json(args.capture))
    write_text_atomic(args.out, blocks_to_json(similarity_blocks(source, args.metric)))


def cmd_profile(args):
    write_text_atomic(args.out, build_profile(load_blocks(args.similarity)).to_csv())


def _budget(args, sizes):
    if (args.keep is None) == (args.per_layer_equivalent is None):
        raise ConfigError("give exactly one of --keep and --per-layer-equivalent")
    if args.keep is not None:
        return args.keep
    return sum(n - args.per_layer_equivalent for n in sizes)


def cmd_plan(args):
    blocks = load_blocks(args.similarity)
    sizes = [b.n for b in blocks]
    k = _budget(args, sizes)
    min_keep = args.min_keep
    if args.method == "grape":
        plan = grape_prune(blocks, k, gamma=args.gamma, min_keep=min_keep)
    else:
        e = args.per_layer_equivalent if args.per_layer_equivalent is not None else budget_to_per_layer(sizes, k)
        if args.method == "uniform":
            plan = uniform_prune(blocks, e, min_keep=min_keep)
        elif args.method == "random":
            plan = random_prune(blocks, e, min_keep=min_keep, seed=_require_seed(None, args.seed, "--seed"))
        elif args.method == "count_guided":
            if not args.capture:
                raise ConfigError("--method count_guided needs --capture")
            cap = CalibrationCapture.from_dict(read_json(args.capture))
            plan = count_guided_prune(cap, e, min_keep=min_keep, blocks=blocks)
        else:
            if not args.model:
                raise ConfigError("--method router_guided needs --model")
            plan = router_guided_prune(load_model(args.model), e, min_keep=min_keep, blocks=blocks)
    write_text_atomic(args.out, plan.to_json())
    log.info("%s plan keeps %s experts per layer", plan.method, plan.counts)


def cmd_apply(args):
    model = load_model(args.model)
    plan = load_plan(args.plan)
    blocks = load_blocks(args.similarity) if args.similarity else None
    write_text_atomic(args.out, apply_plan(model, plan, mode=args.mode, blocks=blocks).to_json())


def cmd_eval(args):
    original = load_model(args.original)
    pruned = load_model(args.pruned)
    plan = load_plan(args.plan)
    seed = _require_seed(args.tokens_seed, args.seed, "--tokens-seed")
    tokens = calibration_tokens(args.tokens, original.d_model, seed)
    report = evaluate(original, pruned, plan, tokens, teacher_forced=args.teacher_forced)
    write_text_atomic(args.out, compare({args.name or plan.method: report}).to_csv())


def cmd_oracle(args):
    blocks = load_blocks(args.similarity)
    k = _budget(args, [b.n for b in blocks])
    allocation, objective = oracle_allocate(blocks, k, min_keep=args.min_keep)
    write_text_atomic(args.out, dumps({"budget_total": k, "allocation": allocation,
                                       "objective": objective}))


def build_parser():
    p = _Parser(prog="grape-moe", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("--seed", type=int, default=None, help="default seed for randomized steps")
    p.add_argument("--log-level", default="WARNING")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("gen", help="generate a synthetic MoE model")
    s.add_argument("--layers", type=int, required=True)
    s.add_argument("--experts", required=True, help="experts per layer: one int or a comma list")
    s.add_argument("--d-model", type=int, default=16)
    s.add_argument("--d-ff", type=int, default=32)
    s.add_argument("--top-k", type=int, default=2)
    s.add_argument("--redundancy", required=True, help="comma list, one level in [0,1] per layer")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_gen)

    s = sub.add_parser("capture", help="record calibration activations")
    s.add_argument("--model", required=True)
    s.add_argument("--tokens", type=int, default=256)
    s.add_argument("--tokens-seed", type=int)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_capture)

    s = sub.add_parser("similarity", help="per-layer expert similarity blocks")
    s.add_argument("--capture")
    s.add_argument("--model")
    s.add_argument("--metric", choices=METRICS, default="cka")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_similarity)

    s = sub.add_parser("profile", help="cross-layer redundancy profile (CSV)")
    s.add_argument("--similarity", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_profile)

    s = sub.add_parser("plan", help="compute a pruning plan")
    s.add_argument("--similarity", required=True)
    s.add_argument("--method", choices=METHODS, default="grape")
    s.add_argument("--keep", type=int, help="experts kept model-wide (K)")
    s.add_argument("--per-layer-equivalent", type=int, help="K = sum(N_l - e)")
    s.add_argument("--gamma", type=float, default=0.5)
    s.add_argument("--min-keep", type=int, help="per-layer floor (default: the layer's top_k)")
    s.add_argument("--capture", help="needed by count_guided")
    s.add_argument("--model", help="needed by router_guided")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_plan)

    s = sub.add_parser("apply", help="materialize a plan by merging experts")
    s.add_argument("--model", required=True)
    s.add_argument("--plan", required=True)
    s.add_argument("--mode", choices=MERGE_MODES, default="average")
    s.add_argument("--similarity", help="used to choose representatives")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_apply)

    s = sub.add_parser("eval", help="fidelity of a pruned model (CSV)")
    s.add_argument("--original", required=True)
    s.add_argument("--pruned", required=True)
    s.add_argument("--plan", required=True)
    s.add_argument("--tokens", type=int, default=256)
    s.add_argument("--tokens-seed", type=int)
    s.add_argument("--teacher-forced", action="store_true")
    s.add_argument("--name", help="row label (default: plan method)")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("oracle", help="exhaustive allocation oracle for small instances")
    s.add_argument("--similarity", required=True)
    s.add_argument("--keep", type=int)
    s.add_argument("--per-layer-equivalent", type=int)
    s.add_argument("--min-keep", type=int)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_oracle)
    return p


def _fail(exc):
    sys.stderr.write(json.dumps({"code": exc.code, "message": str(exc)}) + "\n")
    return exc.exit_code


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except GrapeError as exc:
        return _fail(exc)
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except GrapeError as exc:
        log.debug("command failed", exc_info=True)
        return _fail(exc)
    return 0


if __name__ == "__main__":
    sys.exit(main())
