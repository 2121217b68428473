"""Benchmarks and the oracle verification sweep behind the command line."""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, replace
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from . import env
from .cache import CacheConfig
from .core import StreamScript
from .decoder import DecoderParams, full_recompute_logits
from .engine import EngineConfig, StreamSession, Trajectory, context_bound, replay_tokens, required_capacity
from .rewards import RewardBreakdown

DEFAULT_LENGTHS = (50, 100, 200, 400, 1000)
CONTEXT_COLUMNS = ("length", "chunk", "mode", "context_len", "attention_ops",
                   "visual_tokens", "generated_tokens", "bound")
LATENCY_COLUMNS = ("length", "chunk", "mode", "wall_time_ms")


def sized_cache_config(script: StreamScript, cache_config: CacheConfig, engine_config: EngineConfig,
                       baseline: bool = False) -> CacheConfig:
    """Copy of ``cache_config`` whose capacity covers the worst case of ``script``."""
    need = required_capacity(script, cache_config, engine_config, baseline)
    return CacheConfig(window_chunks=cache_config.window_chunks,
                       capacity_slots=max(need, cache_config.capacity_slots),
                       chunk_seconds=cache_config.chunk_seconds,
                       chunk_tokens=max(cache_config.chunk_tokens, script.max_chunk_tokens))


# ---------------------------------------------------------------------------
# run traces
# ---------------------------------------------------------------------------

def step_records(trajectory: Trajectory) -> list[dict]:
    out = []
    for step in trajectory.steps:
        o, m = step.output, asdict(step.metrics)
        rec = {
            "chunk_index": o.chunk_index,
            "raw_text": step.raw_text,
            "parsed_action": o.action.value,
            "reasoning": o.reasoning,
            "response": o.response,
            "violations": list(step.violations),
            "token_ids": list(step.token_ids),
            "context_len": m.pop("context_len_before_decode"),
        }
        m.pop("chunk_index")
        rec.update(m)
        out.append(rec)
    return out


def write_trace(path, trajectory: Trajectory, reward: Optional[RewardBreakdown] = None) -> None:
    """One JSON object per step; the reward report, when given, is the last line."""
    with open(path, "w", encoding="utf-8") as fh:
        for rec in step_records(trajectory):
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
        if reward is not None:
            fh.write(json.dumps({"reward": reward.to_record()}, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# context and latency sweeps
# ---------------------------------------------------------------------------

def bench_script(length: int, seed: int = 0, **kwargs) -> StreamScript:
    return env.random_script(np.random.default_rng([seed, length]), length, **kwargs)


def paired_runs(script: StreamScript, params: DecoderParams, cache_config: CacheConfig,
                engine_config: EngineConfig) -> tuple[Trajectory, Trajectory]:
    """The windowed run, then the no-eviction run replaying its tokens.

    Replaying keeps generated content identical, so the two context curves
    differ only by the visual tokens eviction removed.
    """
    cc = sized_cache_config(script, cache_config, engine_config)
    rcsm = StreamSession(script, params, cc, engine_config).run()
    cb = sized_cache_config(script, cache_config, engine_config, baseline=True)
    base = StreamSession(script, params, cb, engine_config, baseline=True,
                         forced=replay_tokens(rcsm)).run()
    return rcsm, base


def bench_context(params: DecoderParams, cache_config: CacheConfig, engine_config: EngineConfig,
                  lengths: Iterable[int] = DEFAULT_LENGTHS, seed: int = 0,
                  latency: Optional[list] = None) -> list[dict]:
    """Per-chunk context accounting for both modes over a sweep of stream lengths.

    When ``latency`` is a list it also receives (length, chunk, mode, wall_time_ms) rows.
    """
    rows = []
    for length in lengths:
        script = bench_script(length, seed)
        k_v = script.max_chunk_tokens
        instr = len(script.instruction)
        for mode, traj in zip(("rcsm", "baseline"), paired_runs(script, params, cache_config, engine_config)):
            for t, m in enumerate(traj.metrics, start=1):
                rows.append({
                    "length": length, "chunk": m.chunk_index, "mode": mode,
                    "context_len": m.context_len_before_decode, "attention_ops": m.attention_ops,
                    "visual_tokens": m.retained_visual_tokens,
                    "generated_tokens": m.retained_generated_tokens,
                    "bound": context_bound(t, instr, cache_config.window_chunks, k_v, engine_config),
                })
                if latency is not None:
                    latency.append({"length": length, "chunk": m.chunk_index, "mode": mode,
                                    "wall_time_ms": m.wall_time_ms})
    return rows


def write_rows(path, rows: Sequence[dict], columns: Sequence[str]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([f"{r[c]:.6f}" if isinstance(r[c], float) else r[c] for c in columns])


def fraction_under(rows: Sequence[dict], threshold_ms: float) -> dict:
    out = {}
    for mode in ("rcsm", "baseline"):
        times = [r["wall_time_ms"] for r in rows if r["mode"] == mode]
        if times:
            out[mode] = float(np.mean(np.asarray(times) < threshold_ms))
    return out


def slope(xs, ys) -> float:
    """Least-squares slope of ys against xs."""
    return float(np.polyfit(np.asarray(xs, dtype=np.float64), np.asarray(ys, dtype=np.float64), 1)[0])


# ---------------------------------------------------------------------------
# oracle verification
# ---------------------------------------------------------------------------

@dataclass
class VerifyResult:
    sessions: int = 0
    comparisons: int = 0
    worst_diff: float = 0.0
    worst_at: Optional[tuple] = None
    failure: Optional[tuple] = None   # (seed, chunk, token) of the first excess

    @property
    def ok(self) -> bool:
        return self.failure is None


def verify_sessions(params: DecoderParams, sessions: int = 200, n_chunks: int = 50,
                    windows: Sequence[int] = (3, 5, 20), engine_config: EngineConfig = EngineConfig(),
                    seed: int = 0, tolerance: float = 1e-5,
                    fault: Optional[tuple] = None,
                    progress: Optional[Callable[[int, VerifyResult], None]] = None) -> VerifyResult:
    """Compare every generated token's incremental logits with from-scratch recomputation.

    Session ``k`` uses window ``windows[k % len(windows)]`` and sampler seed
    ``seed + k``. ``fault = (session, chunk, token)`` corrupts one cached key
    right after that token, a hook for checking that the sweep catches it.
    """
    result = VerifyResult()
    for k in range(sessions):
        session_seed = seed + k
        script = env.random_script(np.random.default_rng([seed, k]), n_chunks)
        cc = sized_cache_config(script, CacheConfig(window_chunks=windows[k % len(windows)]), engine_config)
        ec = replace(engine_config, rng_seed=session_seed)
        counter = {"chunk": 0, "token": 0}

        def observe(session: StreamSession, logits: np.ndarray) -> None:
            chunk = session.script.chunks[session.current_chunk - 1].index
            if chunk != counter["chunk"]:
                counter["chunk"], counter["token"] = chunk, 0
            where = (session_seed, chunk, counter["token"])
            counter["token"] += 1
            expect = full_recompute_logits(params, session.cache.retained_sequence())
            diff = float(np.max(np.abs(expect - logits)))
            result.comparisons += 1
            if diff > result.worst_diff:
                result.worst_diff, result.worst_at = diff, where
            if diff > tolerance and result.failure is None:
                result.failure = where
            if fault is not None and (k, chunk, where[2]) == tuple(fault):
                session.cache.keys[0, 0] += 1.0

        StreamSession(script, params, cc, ec, observer=observe).run()
        result.sessions += 1
        if progress is not None:
            progress(k, result)
        if result.failure is not None:
            break
    return result
