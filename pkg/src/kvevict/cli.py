"""Command-line driver.

Exit codes: 0 success, 1 ordering assertion failed, 2 usage or validation error.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from .attn_model import ToyDecoder, generate_synthetic_trace, structured_tokens
from .errors import ConfigError, KVEvictError
from .eviction import BudgetConfig, resolve_budget, run_live
from .metrics import SimilarityReport, evaluate_live, evaluate_replay
from .oracle import ideal_mask, policy_mask, replay_with_mask
from .scoring import Policy
from .trace_io import (
    gen_config_from_kv,
    load_experiment_config,
    parse_kv,
    read_trace,
    render_report_csv,
    write_mask_dump,
    write_trace,
)

log = logging.getLogger("kvevict")

DEFAULT_COMPARE = "local,h2o,a2sf:0.1,a2sf:0.5"
DEFAULT_ALPHAS = "0.0:0.9:0.1"
DEFAULT_RATIOS = "0.3"


class UsageError(Exception):
    pass


def parse_grid(text: str) -> list[float]:
    """``"0.0:0.9:0.1"`` (inclusive) or ``"0.1,0.5"``."""
    text = text.strip()
    if not text:
        return []
    if ":" in text:
        try:
            start, stop, step = (float(x) for x in text.split(":"))
        except ValueError as exc:
            raise UsageError(f"bad grid {text!r}; expected start:stop:step") from exc
        if step <= 0:
            raise UsageError("grid step must be positive")
        n = int(np.floor((stop - start) / step + 1e-9)) + 1
        return [round(start + i * step, 10) for i in range(max(n, 0))]
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError as exc:
        raise UsageError(f"bad list {text!r}") from exc


def _emit(text: str, out: str | None) -> None:
    if out:
        Path(out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)


def _budget(args, seq_len: int, ratio: float | None = None) -> int:
    if ratio is not None:
        return resolve_budget(BudgetConfig.ratio(ratio, seq_len))
    if getattr(args, "budget", None) is not None:
        return resolve_budget(BudgetConfig.absolute(args.budget))
    return resolve_budget(BudgetConfig.ratio(args.cache_ratio, seq_len))


def _live_setup(args):
    dec = ToyDecoder(args.layers, args.heads, args.d_head, args.vocab, seed=args.seed)
    tokens = structured_tokens(args.len, args.vocab, args.seed)
    return dec, tokens


def _load_traces(args):
    if not args.trace:
        raise UsageError("a trace source is required: --trace FILE or --live")
    return [read_trace(p) for p in args.trace]


def _average(reports: list[SimilarityReport]) -> SimilarityReport:
    if len(reports) == 1:
        return reports[0]
    first = reports[0]
    drifts = [r.output_drift for r in reports if r.output_drift is not None]
    return SimilarityReport(
        policy=first.policy,
        alpha=first.alpha,
        budget=first.budget,
        cosine=np.mean([r.cosine for r in reports], axis=0),
        mask_overlap=np.mean([r.mask_overlap for r in reports], axis=0),
        output_drift=float(np.mean(drifts)) if drifts else None,
        seed=None,
        mode=first.mode,
    )


def _evaluate(args, policy: Policy, traces, ratio=None) -> SimilarityReport:
    if args.live:
        dec, tokens = _live_setup(args)
        return evaluate_live(dec, tokens, policy, _budget(args, len(tokens), ratio), args.renormalize)
    reports = []
    for tr in traces:
        seed = tr.meta.get("seed") if len(traces) == 1 else None
        reports.append(
            evaluate_replay(tr, policy, _budget(args, tr.seq_len, ratio), args.renormalize, seed)
        )
    return _average(reports)


# --------------------------------------------------------------------------
# subcommands
# --------------------------------------------------------------------------


def cmd_gen(args) -> int:
    kv = parse_kv(Path(args.config).read_text()) if args.config else {}
    flags = {
        "len": args.len, "layers": args.layers, "heads": args.heads, "sink": args.sink,
        "locality": args.locality, "locality_window": args.locality_window,
        "hitters": args.hitters, "temp": args.temp, "seed": args.seed,
    }
    kv.update({k: str(v) for k, v in flags.items() if v is not None})
    cfg = gen_config_from_kv(kv)
    trace = generate_synthetic_trace(cfg)
    checksum = write_trace(trace, args.out)
    print(
        f"wrote {args.out}: layers={trace.n_layers} heads={trace.n_heads} "
        f"seq_len={trace.seq_len} checksum={checksum:016x}"
    )
    return 0


def cmd_run(args) -> int:
    if args.config:
        cfg = load_experiment_config(args.config)
        args.trace = args.trace or ([cfg.trace] if cfg.trace else None)
        args.live = args.live or cfg.mode == "live"
        args.policy = args.policy or ",".join(str(p) for p in cfg.policies)
        args.out = args.out or cfg.out
        if args.budget is None and args.cache_ratio is None:
            args.budget, args.cache_ratio = cfg.budget, cfg.cache_ratio
        args.renormalize = cfg.renormalize if args.renormalize is None else args.renormalize
        for k, v in cfg.decoder.items():
            setattr(args, k, v)
        if cfg.gen is not None and not args.trace and not args.live:
            trace = generate_synthetic_trace(cfg.gen)
            return _run_on(args, [trace])
    if args.policy is None:
        raise UsageError("--policy is required")
    return _run_on(args, None)


def _resolve_policies(args) -> list[Policy]:
    specs = [s for s in args.policy.split(",") if s.strip()]
    policies = []
    for spec in specs:
        name = spec.split(":")[0].strip().lower()
        if name == "a2sf" and ":" not in spec:
            if args.alpha is None:
                raise UsageError("--alpha is required for the a2sf policy")
            spec = f"a2sf:{args.alpha}"
        elif name == "local" and ":" not in spec and args.window is not None:
            spec = f"local:{args.window}"
        elif args.alpha is not None and name != "a2sf":
            log.warning("--alpha is ignored by policy %s", name)
        policies.append(Policy.parse(spec))
    return policies


def _run_on(args, traces) -> int:
    if args.cache_ratio is None and args.budget is None:
        args.cache_ratio = 0.2
    if args.renormalize is None:
        args.renormalize = True
    policies = _resolve_policies(args)
    if traces is None and not args.live:
        traces = _load_traces(args)
    reports = [_evaluate(args, p, traces) for p in policies]
    _emit(render_report_csv(reports), args.out)
    if args.dump_masks:
        _dump_masks(args, policies, traces)
    return 0


def _dump_masks(args, policies, traces) -> None:
    if args.live:
        dec, tokens = _live_setup(args)
        budget = _budget(args, len(tokens))
        for p in policies:
            run = run_live(dec, tokens, p, budget)
            T = len(tokens)
            mask = np.zeros((dec.n_layers, dec.n_heads, T, T), dtype=bool)
            for q, keep in enumerate(run.keepsets):
                mask[:, :, q, : q + 1] = keep.mask
            write_mask_dump(mask, args.dump_masks, prefix=f"live_{str(p).replace(':', '_')}")
        return
    trace = traces[0]
    budget = _budget(args, trace.seq_len)
    write_mask_dump(ideal_mask(trace, budget), args.dump_masks, prefix="ideal")
    for p in policies:
        write_mask_dump(policy_mask(trace, p, budget), args.dump_masks, prefix=str(p).replace(":", "_"))


def cmd_sweep(args) -> int:
    alphas = parse_grid(args.alphas)
    ratios = parse_grid(args.ratios)
    if not alphas or not ratios:
        raise UsageError("empty sweep grid")
    traces = None if args.live else _load_traces(args)
    args.budget = None
    reports = []
    for ratio in ratios:
        best = None
        for alpha in alphas:
            r = _evaluate(args, Policy.a2sf(alpha), traces, ratio=ratio)
            reports.append(r)
            if best is None or r.mean_cosine > best.mean_cosine:
                best = r
        log.info("ratio %g: best alpha %g (cosine %.6f)", ratio, best.alpha, best.mean_cosine)
        print(f"ratio={ratio:g} best_alpha={best.alpha:g} cosine={best.mean_cosine:.6f}", file=sys.stderr)
    _emit(render_report_csv(reports), args.out)
    return 0


def _find(term: str, policies: list[Policy], reports) -> SimilarityReport:
    term = term.strip().lower()
    for p, r in zip(policies, reports):
        if str(p) == term:
            return r
    for p, r in zip(policies, reports):
        if p.label == term or p.kind == term:
            return r
    raise UsageError(f"--assert-order names {term!r}, which is not in the compared policies")


def cmd_compare(args) -> int:
    try:
        policies = [Policy.parse(s) for s in args.policies.split(",") if s.strip()]
    except ConfigError as exc:
        raise UsageError(str(exc)) from exc
    if not policies:
        raise UsageError("no policies to compare")
    traces = None if args.live else _load_traces(args)
    if args.cache_ratio is None and args.budget is None:
        args.cache_ratio = 0.2
    reports = [_evaluate(args, p, traces) for p in policies]

    lines = ["policy,alpha,budget,cosine,mask_overlap,output_drift"]
    for p, r in zip(policies, reports):
        drift = "" if r.output_drift is None else f"{r.output_drift:.6g}"
        alpha = "" if p.alpha is None else f"{p.alpha:.6g}"
        lines.append(f"{p.label},{alpha},{r.budget},{r.mean_cosine:.6g},{r.mean_overlap:.6g},{drift}")
    _emit("\n".join(lines) + "\n", args.out)

    if args.assert_order:
        chain = [_find(t, policies, reports) for t in args.assert_order.split(">")]
        values = [r.mean_cosine for r in chain]
        if not all(a > b for a, b in zip(values, values[1:])):
            print(f"ordering violated: {args.assert_order} with cosines {values}", file=sys.stderr)
            return 1
    return 0


def cmd_ideal(args) -> int:
    trace = _load_traces(args)[0]
    if args.cache_ratio is None and args.budget is None:
        args.cache_ratio = 0.2
    budget = _budget(args, trace.seq_len)
    mask = ideal_mask(trace, budget)
    out = Path(args.out)
    write_mask_dump(mask, out, prefix="ideal_mask")
    for renorm, tag in ((True, "renorm"), (False, "raw")):
        pruned = replay_with_mask(trace, mask, renorm)
        for l in range(trace.n_layers):
            for h in range(trace.n_heads):
                np.savetxt(out / f"ideal_scores_{tag}_l{l}_h{h}.txt", pruned[l, h], fmt="%.17g")
    print(f"wrote ideal masks and scores (budget={budget}) to {out}")
    return 0


# --------------------------------------------------------------------------
# parser
# --------------------------------------------------------------------------


def _add_source(p, multi: bool):
    p.add_argument("--trace", nargs="+" if multi else None, action=None if multi else "append",
                   help="trace file(s)")
    p.add_argument("--live", action="store_true", help="decode with the toy decoder instead of replay")
    g = p.add_argument_group("toy decoder (live mode)")
    g.add_argument("--layers", type=int, default=2)
    g.add_argument("--heads", type=int, default=4)
    g.add_argument("--d-head", type=int, default=16)
    g.add_argument("--vocab", type=int, default=64)
    g.add_argument("--len", type=int, default=128)
    g.add_argument("--seed", type=int, default=0)


def _add_budget(p):
    g = p.add_mutually_exclusive_group()
    g.add_argument("--cache-ratio", type=float, default=None)
    g.add_argument("--budget", type=int, default=None)


def _add_renorm(p, default=True):
    p.add_argument("--renormalize", dest="renormalize", action="store_true", default=default)
    p.add_argument("--no-renormalize", dest="renormalize", action="store_false")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="kvevict", description=__doc__)
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a synthetic trace file")
    p.add_argument("--config", help="key=value generator config")
    p.add_argument("--len", type=int)
    p.add_argument("--layers", type=int)
    p.add_argument("--heads", type=int)
    p.add_argument("--sink", type=float)
    p.add_argument("--locality", type=float)
    p.add_argument("--locality-window", type=int)
    p.add_argument("--hitters", help="idx:strength,... e.g. 5:3,17:2.5")
    p.add_argument("--temp", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("run", help="evaluate one policy")
    p.add_argument("--config", help="key=value experiment config")
    _add_source(p, multi=False)
    p.add_argument("--policy", help="full | local | h2o | a2sf (comma list allowed)")
    p.add_argument("--alpha", type=float)
    p.add_argument("--window", type=int)
    _add_budget(p)
    _add_renorm(p, default=None)
    p.add_argument("--out")
    p.add_argument("--dump-masks", metavar="DIR")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("sweep", help="A2SF over an alpha x cache-ratio grid")
    _add_source(p, multi=True)
    p.add_argument("--alphas", default=DEFAULT_ALPHAS)
    p.add_argument("--ratios", default=DEFAULT_RATIOS)
    _add_renorm(p)
    p.add_argument("--out")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("compare", help="several policies side by side against the ideal mask")
    _add_source(p, multi=True)
    p.add_argument("--policies", default=DEFAULT_COMPARE)
    _add_budget(p)
    _add_renorm(p)
    p.add_argument("--assert-order", metavar="A>B>C")
    p.add_argument("--out")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("ideal", help="dump ideal masks and pruned scores")
    _add_source(p, multi=False)
    _add_budget(p)
    p.add_argument("--out", required=True, metavar="DIR")
    p.set_defaults(func=cmd_ideal)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.WARNING - 10 * min(args.verbose, 2),
        format="%(levelname)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"{parser.prog}: error: {exc}", file=sys.stderr)
        return 2
    except KVEvictError as exc:
        print(f"{parser.prog}: error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"{parser.prog}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
