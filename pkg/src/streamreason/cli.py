"""Command line: run sessions, context and latency sweeps, training, verification."""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path
from typing import Optional, Sequence

from . import bench, env
from .cache import CacheConfig
from .core import load_stream_script
from .decoder import DecoderDims, SteerBias, init_decoder, weight_checksum
from .engine import EngineConfig, StreamSession
from .errors import EXIT_CODES, StreamReasonError
from .grpo import GrpoConfig, rollout_engine_config, train
from .rewards import RewardConfig, total_reward

OUTPUT_ENV = "STREAMREASON_OUTPUT_DIR"
VERIFY_FAILED = 1


def _exit_table() -> str:
    lines = ["exit codes:", "  0   success", "  1   verify found a logit mismatch", "  2   usage error",
             "  3   file system error"]
    lines += [f"  {code:<3} {name}" for name, code in sorted(EXIT_CODES.items(), key=lambda kv: kv[1])]
    return "\n".join(lines)


def _int_list(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma separated integers, got {text!r}") from None


def _add_model_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("decoder and cache")
    g.add_argument("--decoder-seed", type=int, default=7)
    g.add_argument("--window-chunks", type=int, default=20)
    g.add_argument("--capacity-slots", type=int, default=8192,
                   help="minimum slot count; raised automatically to the script's worst case")
    g.add_argument("--chunk-seconds", type=float, default=1.0)
    g.add_argument("--chunk-tokens", type=int, default=32)


def _add_engine_flags(p: argparse.ArgumentParser, **defaults) -> None:
    g = p.add_argument_group("engine")
    g.add_argument("--max-new-tokens", type=int, default=defaults.get("max_new_tokens", 64))
    g.add_argument("--think-budget", type=int, default=defaults.get("think_budget", 20))
    g.add_argument("--top-k", type=int, default=defaults.get("top_k", 32))
    g.add_argument("--top-p", type=float, default=defaults.get("top_p", 0.95))
    g.add_argument("--temperature", type=float, default=1.0)
    g.add_argument("--rng-seed", type=int, default=0)


def _add_reward_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("reward")
    g.add_argument("--tolerance-w", type=float, default=3.0)
    g.add_argument("--format-weight", type=float, default=1.0)
    g.add_argument("--time-weight", type=float, default=1.0)
    g.add_argument("--acc-weight", type=float, default=1.0)


def _add_output_flag(p: argparse.ArgumentParser) -> None:
    p.add_argument("--output-dir", type=Path, default=None,
                   help=f"output directory (default: ${OUTPUT_ENV}, else ./streamreason_out)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="streamreason", description="Streaming watch-think-speak engine on a toy decoder.",
        epilog=_exit_table(), formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = sub.add_parser("run", help="stream one script and write its trace and reward report")
    p.add_argument("--script", type=Path, required=True, help="line-delimited JSON stream script")
    p.add_argument("--baseline", action="store_true", help="disable eviction")
    p.add_argument("--steer", type=Path, default=None, help="steering table written by train")
    p.set_defaults(subparser=p)
    _add_model_flags(p)
    _add_engine_flags(p)
    _add_reward_flags(p)
    _add_output_flag(p)

    for name, text in (("bench-context", "context length and attention ops per chunk, both modes"),
                       ("bench-latency", "wall time per chunk, both modes")):
        p = sub.add_parser(name, help=text)
        p.add_argument("--lengths", type=_int_list, default=list(bench.DEFAULT_LENGTHS),
                       help="comma separated stream lengths in chunks")
        p.add_argument("--script-seed", type=int, default=0)
        if name == "bench-latency":
            p.add_argument("--threshold-ms", type=float, default=500.0)
        _add_model_flags(p)
        _add_engine_flags(p)
        _add_output_flag(p)

    p = sub.add_parser("train", help="policy optimization on the synthetic evidence-onset pool")
    p.add_argument("--pool-size", type=int, default=64)
    p.add_argument("--pool-seed", type=int, default=1)
    p.add_argument("--min-chunks", type=int, default=6)
    p.add_argument("--max-chunks", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    d = GrpoConfig()
    g = p.add_argument_group("optimization")
    g.add_argument("--group-size", type=int, default=d.group_size)
    g.add_argument("--batch-scripts", type=int, default=d.batch_scripts)
    g.add_argument("--iterations", type=int, default=d.iterations)
    g.add_argument("--learning-rate", type=float, default=d.learning_rate)
    g.add_argument("--clip-eps", type=float, default=d.clip_eps)
    g.add_argument("--kl-beta", type=float, default=d.kl_beta)
    g.add_argument("--adv-epsilon", type=float, default=d.adv_epsilon)
    g.add_argument("--inner-steps", type=int, default=d.inner_steps)
    _add_model_flags(p)
    p.set_defaults(window_chunks=5)
    r = rollout_engine_config()
    g = p.add_argument_group("rollout engine")
    g.add_argument("--max-new-tokens", type=int, default=r.max_new_tokens)
    g.add_argument("--think-budget", type=int, default=r.think_budget)
    _add_reward_flags(p)
    _add_output_flag(p)

    p = sub.add_parser("verify", help="compare incremental logits with full recomputation")
    p.add_argument("--sessions", type=int, default=200)
    p.add_argument("--chunks", type=int, default=50)
    p.add_argument("--windows", type=_int_list, default=[3, 5, 20])
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tolerance", type=float, default=1e-5)
    p.add_argument("--decoder-seed", type=int, default=7)
    p.add_argument("--inject-fault", type=_int_list, default=None, help=argparse.SUPPRESS)
    _add_engine_flags(p)

    p = sub.add_parser("checksum", help="print the decoder weight digest")
    p.add_argument("--decoder-seed", type=int, default=7)
    return parser


# ---------------------------------------------------------------------------

def _output_dir(args) -> Path:
    out = args.output_dir or Path(os.environ.get(OUTPUT_ENV) or "streamreason_out")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _cache_config(args) -> CacheConfig:
    return CacheConfig(window_chunks=args.window_chunks, capacity_slots=args.capacity_slots,
                       chunk_seconds=args.chunk_seconds, chunk_tokens=args.chunk_tokens)


def _engine_config(args) -> EngineConfig:
    return EngineConfig(max_new_tokens=args.max_new_tokens, think_budget=args.think_budget,
                        top_k=args.top_k, top_p=args.top_p, temperature=args.temperature,
                        rng_seed=args.rng_seed)


def _reward_config(args) -> RewardConfig:
    return RewardConfig(tolerance_w=args.tolerance_w, format_weight=args.format_weight,
                        time_weight=args.time_weight, acc_weight=args.acc_weight)


def _params(args):
    return init_decoder(args.decoder_seed, DecoderDims())


def load_steer(path: Path) -> SteerBias:
    obj = json.loads(Path(path).read_text(encoding="utf-8"))
    return SteerBias.from_flat(obj["values"])


def save_steer(path: Path, steer: SteerBias) -> None:
    obj = {"names": SteerBias.names(), "values": [float(v) for v in steer.flatten()]}
    Path(path).write_text(json.dumps(obj, indent=1) + "\n", encoding="utf-8")


def cmd_run(args) -> int:
    cc, ec = _cache_config(args), _engine_config(args)
    script = load_stream_script(args.script, max_chunk_tokens=cc.chunk_tokens)
    params = _params(args)
    if args.steer is not None:
        params = params.with_steer(load_steer(args.steer))
    cc = bench.sized_cache_config(script, cc, ec, baseline=args.baseline)
    traj = StreamSession(script, params, cc, ec, baseline=args.baseline).run()
    reward = total_reward(traj, script.ground_truth, _reward_config(args))
    out = _output_dir(args)
    bench.write_trace(out / "trace.jsonl", traj, reward)
    (out / "reward.json").write_text(json.dumps(reward.to_record(), sort_keys=True) + "\n", encoding="utf-8")
    responded = sum(1 for s in traj.steps if not s.output.is_silent)
    print(f"{len(traj.steps)} steps, {responded} responses, reward {reward.total:.4f} "
          f"(format {reward.r_format:g}, time {reward.r_time:.4f}, acc {reward.r_acc:g})")
    print(f"trace: {out / 'trace.jsonl'}")
    return 0


def cmd_bench_context(args) -> int:
    rows = bench.bench_context(_params(args), _cache_config(args), _engine_config(args),
                               args.lengths, args.script_seed)
    path = _output_dir(args) / "context.csv"
    bench.write_rows(path, rows, bench.CONTEXT_COLUMNS)
    for length in args.lengths:
        last = [r for r in rows if r["length"] == length and r["chunk"] == length]
        by_mode = {r["mode"]: r["context_len"] for r in last}
        print(f"length {length}: final context rcsm {by_mode.get('rcsm')} baseline {by_mode.get('baseline')}")
    print(f"curve: {path}")
    return 0


def cmd_bench_latency(args) -> int:
    latency: list = []
    bench.bench_context(_params(args), _cache_config(args), _engine_config(args),
                        args.lengths, args.script_seed, latency=latency)
    path = _output_dir(args) / "latency.csv"
    bench.write_rows(path, latency, bench.LATENCY_COLUMNS)
    for mode, frac in bench.fraction_under(latency, args.threshold_ms).items():
        print(f"{mode}: {100 * frac:.1f}% of chunks under {args.threshold_ms:g} ms")
    print(f"curve: {path}")
    return 0


def cmd_train(args) -> int:
    pool = env.script_pool(args.pool_size, args.pool_seed, args.min_chunks, args.max_chunks)
    params = _params(args)
    config = GrpoConfig(group_size=args.group_size, clip_eps=args.clip_eps, kl_beta=args.kl_beta,
                        learning_rate=args.learning_rate, iterations=args.iterations,
                        adv_epsilon=args.adv_epsilon, batch_scripts=args.batch_scripts,
                        inner_steps=args.inner_steps)
    ec = rollout_engine_config(args.max_new_tokens, args.think_budget, params.dims.vocab_size)
    out = _output_dir(args)
    with open(out / "train_log.jsonl", "w", encoding="utf-8") as log:
        def record(rec: dict) -> None:
            log.write(json.dumps(rec, sort_keys=True) + "\n")
            log.flush()
            print(f"iter {rec['iteration']:4d}  reward {rec['mean_reward']:.4f}  kl {rec['mean_kl']:.4f}  "
                  f"clip {rec['clip_fraction']:.3f}")

        result = train(pool, params, config, _cache_config(args), ec, _reward_config(args), seed=args.seed,
                       callback=record)
    result.write_curve(out / "reward_curve.txt")
    save_steer(out / "steer.json", result.steer)
    print(f"final mean reward {result.curve[-1]:.4f}; outputs in {out}")
    return 0


def cmd_verify(args) -> int:
    params = _params(args)
    res = bench.verify_sessions(params, args.sessions, args.chunks, args.windows, _engine_config(args),
                                args.seed, args.tolerance, fault=args.inject_fault)
    print(f"{res.sessions} sessions, {res.comparisons} comparisons, worst abs diff {res.worst_diff:.3e}"
          + (f" at (seed, chunk, token) = {res.worst_at}" if res.worst_at else ""))
    if not res.ok:
        seed, chunk, token = res.failure
        print(f"MISMATCH at seed {seed}, chunk {chunk}, token {token}", file=sys.stderr)
        return VERIFY_FAILED
    return 0


def cmd_checksum(args) -> int:
    print(weight_checksum(_params(args)))
    return 0


COMMANDS = {
    "run": cmd_run,
    "bench-context": cmd_bench_context,
    "bench-latency": cmd_bench_latency,
    "train": cmd_train,
    "verify": cmd_verify,
    "checksum": cmd_checksum,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "run" and not args.script.is_file():
        args.subparser.error(f"script not found: {args.script}")
    try:
        return COMMANDS[args.command](args)
    except StreamReasonError as err:
        print(f"error: {type(err).__name__}: {err}", file=sys.stderr)
        return err.exit_code
    except OSError as err:
        print(f"error: {err}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
