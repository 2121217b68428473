"""Per-chunk streaming loop: evict, prefill, decode under budget, parse."""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from . import vocab
from .cache import CacheConfig, CacheState, new_cache
from .core import Role, StepOutput, StreamScript, Token, parse_step_output, synthesize_visual_ids
from .decoder import (
    DecoderParams,
    SteerBias,
    copy_mask_from,
    incremental_step,
    prefill_block,
    role_for,
    steer_logits,
)
from .errors import CapacityError, ConfigError, FormatError, ParamError, ScriptError
from .sampling import check_sampling_params, sample_token

BUDGET_EXCEEDED = "BudgetExceeded"
NO_ACTION = "NoAction"


@dataclass(frozen=True)
class EngineConfig:
    max_new_tokens: int = 64
    think_budget: int = 20
    top_k: int = 32
    top_p: float = 0.95
    temperature: float = 1.0
    rng_seed: int = 0
    stop_tokens: frozenset = frozenset({vocab.END_OF_TURN})

    def __post_init__(self):
        if self.max_new_tokens < 1 or self.think_budget < 1:
            raise ConfigError("max_new_tokens and think_budget must be positive")
        if self.think_budget > self.max_new_tokens:
            raise ConfigError(f"think_budget {self.think_budget} exceeds max_new_tokens {self.max_new_tokens}")
        check_sampling_params(self.top_k, self.top_p, self.temperature)
        object.__setattr__(self, "stop_tokens", frozenset(int(t) for t in self.stop_tokens))

    @property
    def max_action_tokens(self) -> int:
        """Non-reasoning share of the per-step cap, so budget + overhead = max_new_tokens."""
        return self.max_new_tokens - self.think_budget


@dataclass(frozen=True)
class StepMetrics:
    chunk_index: int
    context_len_before_decode: int
    attention_ops: int
    wall_time_ms: float
    generated_tokens: int
    evicted_tokens: int
    prefill_attention_ops: int = 0
    active_visual_chunks: int = 0
    retained_visual_tokens: int = 0
    retained_generated_tokens: int = 0
    retained_instruction_tokens: int = 0


@dataclass(frozen=True)
class StepRecord:
    output: StepOutput
    raw_text: str
    token_ids: tuple[int, ...]
    violations: tuple[str, ...]
    metrics: StepMetrics
    reasoning_tokens: int = 0

    @property
    def chunk_index(self) -> int:
        return self.output.chunk_index


@dataclass
class TokenLog:
    """Per generated token: decoder logits and steering context, for re-scoring under any policy."""

    base_logits: list = field(default_factory=list)
    phases: list = field(default_factory=list)
    evidence: list = field(default_factory=list)
    copy_masks: list = field(default_factory=list)
    token_ids: list = field(default_factory=list)
    sampled: list = field(default_factory=list)

    def append(self, base, phase, evidence, copy_mask, token_id, sampled):
        self.base_logits.append(base)
        self.phases.append(phase)
        self.evidence.append(evidence)
        self.copy_masks.append(copy_mask)
        self.token_ids.append(token_id)
        self.sampled.append(sampled)

    def arrays(self):
        """(base_logits (n,V), phases, evidence, copy_masks (n,V), token_ids, sampled) as arrays."""
        if not self.token_ids:
            return (np.zeros((0, vocab.MIN_VOCAB)), np.zeros(0, int), np.zeros(0, int),
                    np.zeros((0, vocab.MIN_VOCAB), bool), np.zeros(0, int), np.zeros(0, bool))
        return (np.stack(self.base_logits), np.array(self.phases), np.array(self.evidence, dtype=np.int64),
                np.stack(self.copy_masks), np.array(self.token_ids), np.array(self.sampled, dtype=bool))


@dataclass(frozen=True)
class Trajectory:
    steps: tuple[StepRecord, ...]
    token_log: Optional[TokenLog] = None

    def __len__(self):
        return len(self.steps)

    @property
    def outputs(self) -> list[StepOutput]:
        return [s.output for s in self.steps]

    @property
    def metrics(self) -> list[StepMetrics]:
        return [s.metrics for s in self.steps]


# observer(session, logits) runs after every decoded token has been cached
Observer = Callable[["StreamSession", np.ndarray], None]


def required_capacity(script: StreamScript, cache_config: CacheConfig, engine_config: EngineConfig,
                      baseline: bool = False) -> int:
    """Slots needed in the worst case: instruction, visual window (or all chunks), N tokens per step."""
    n_chunks = len(script.chunks)
    visual = sum(c.token_count for c in script.chunks) if baseline else \
        cache_config.window_chunks * max(script.max_chunk_tokens, cache_config.chunk_tokens)
    return len(script.instruction) + visual + n_chunks * engine_config.max_new_tokens


def context_bound(step: int, instruction_len: int, window: int, chunk_tokens: int,
                  engine_config: EngineConfig) -> int:
    """Closed-form ceiling on the context before decoding at 1-based chunk ``step``."""
    per_step = engine_config.think_budget + engine_config.max_action_tokens
    return instruction_len + min(step, window) * chunk_tokens + (step - 1) * per_step


class StreamSession:
    """One single-threaded streaming session owning its cache and rng."""

    def __init__(self, script: StreamScript, params: DecoderParams, cache_config: CacheConfig,
                 engine_config: EngineConfig, *, baseline: bool = False, record: bool = False,
                 rng: Optional[np.random.Generator] = None, steer: Optional[SteerBias] = None,
                 forced: Optional[Sequence[Sequence[int]]] = None, observer: Optional[Observer] = None):
        if not script.chunks:
            raise ScriptError("stream script has no chunks")
        if script.max_chunk_tokens > cache_config.chunk_tokens:
            raise ScriptError(
                f"chunk of {script.max_chunk_tokens} tokens exceeds the window's chunk size {cache_config.chunk_tokens}")
        self.script = script
        self.params = params
        self.cache_config = cache_config
        self.config = engine_config
        self.baseline = baseline
        self.steer = steer if steer is not None else params.steer
        self.cache: CacheState = new_cache(cache_config, params.dims.kv_shape, len(script.instruction))
        self.rng = rng if rng is not None else np.random.default_rng(engine_config.rng_seed)
        self.forced = forced
        self.observer = observer
        self.token_log = TokenLog() if record else None
        self.current_chunk = 0
        self.next_position = 0
        self.steps: list[StepRecord] = []
        self._last_logits: Optional[np.ndarray] = None

    # -- phases of one chunk ---------------------------------------------------

    def prefill(self, token_ids: np.ndarray, roles: np.ndarray, chunk_tags: np.ndarray) -> int:
        """Append a variable-length block; returns the attention ops it cost."""
        k = len(token_ids)
        if k == 0:
            return 0
        if self.cache.live_count + k > self.cache.config.capacity_slots:
            raise CapacityError(
                f"prefill of {k} tokens over {self.cache.live_count} live entries exceeds capacity")
        positions = np.arange(self.next_position, self.next_position + k)
        logits, keys, values, ops = prefill_block(self.params, self.cache, token_ids, positions)
        self.cache.append_block(token_ids, roles, positions, chunk_tags, keys, values)
        self.next_position += k
        self._last_logits = logits
        return ops

    def decode(self, chunk_index: int):
        """Sample up to N tokens; returns (tokens, attention_ops, reasoning count, budget forced)."""
        cfg = self.config
        logits = self._last_logits
        visual_ids = self.cache.live_visual_ids()
        copy_mask = copy_mask_from(visual_ids, self.params.dims.vocab_size)
        evidence = bool(copy_mask.any())
        replay = None if self.forced is None else list(self.forced[chunk_index - 1])

        phase = vocab.PHASE_START
        tokens: list[int] = []
        reasoning = 0
        ops = 0
        budget_forced = False
        for i in range(cfg.max_new_tokens):
            if replay is not None and i >= len(replay):
                break
            sampled = True
            if phase == vocab.PHASE_THINK and reasoning >= cfg.think_budget:
                tok, sampled, budget_forced = vocab.THINK_CLOSE, False, True
            elif replay is not None:
                tok = int(replay[i])
            else:
                policy = steer_logits(self.params, logits, phase, evidence, copy_mask, self.steer)
                tok = sample_token(policy, cfg.top_k, cfg.top_p, cfg.temperature, self.rng)
            if self.token_log is not None:
                self.token_log.append(logits, phase, evidence, copy_mask, tok, sampled)

            token = Token(tok, role_for(tok), self.next_position)
            ops += self.cache.live_count + 1
            logits, entry = incremental_step(self.params, self.cache, token)
            self.cache.append_block([tok], [int(token.role)], [token.position], [0],
                                    entry.keys[None], entry.values[None])
            self.next_position += 1
            if self.observer is not None:
                self.observer(self, logits)

            tokens.append(tok)
            if phase == vocab.PHASE_THINK and tok != vocab.THINK_CLOSE:
                reasoning += 1
            phase = vocab.next_phase(phase, tok)
            if tok in cfg.stop_tokens:
                break
        self._last_logits = logits
        return tokens, ops, reasoning, budget_forced

    def step(self) -> StepRecord:
        """Process the next chunk of the script."""
        if self.current_chunk >= len(self.script.chunks):
            raise ScriptError("stream exhausted")
        t0 = time.perf_counter()
        chunk = self.script.chunks[self.current_chunk]
        self.current_chunk += 1
        cache = self.cache

        evicted = 0
        if not self.baseline and len(cache.active_visual_chunks) >= cache.window:
            evicted = cache.evict_oldest_visual().evicted_token_count

        visual = synthesize_visual_ids(chunk)
        parts_ids = [visual]
        parts_roles = [np.full(len(visual), int(Role.VISUAL), dtype=np.int8)]
        parts_tags = [np.full(len(visual), chunk.index, dtype=np.int64)]
        if chunk.index == self.script.chunks[0].index and len(self.script.instruction):
            instr = np.array(self.script.instruction.token_ids, dtype=np.int64)
            parts_ids.insert(0, instr)
            parts_roles.insert(0, np.full(len(instr), int(Role.INSTRUCTION), dtype=np.int8))
            parts_tags.insert(0, np.zeros(len(instr), dtype=np.int64))
        prefill_ops = self.prefill(np.concatenate(parts_ids), np.concatenate(parts_roles),
                                   np.concatenate(parts_tags))
        if self._last_logits is None:
            raise ScriptError("first chunk has neither instruction nor visual tokens to condition on")

        context_len = cache.live_count
        tokens, ops, reasoning, budget_forced = self.decode(chunk.index)
        raw = vocab.detokenize(tokens)

        violations = []
        try:
            output = parse_step_output(raw, chunk.index)
        except FormatError as err:
            output = StepOutput("", None, chunk.index)
            violations.append(err.kind.value)
            if not any(t in (vocab.SILENT, vocab.RESPONSE) for t in tokens):
                violations.append(NO_ACTION)
        if budget_forced:
            violations.append(BUDGET_EXCEEDED)

        metrics = StepMetrics(
            chunk_index=chunk.index,
            context_len_before_decode=context_len,
            attention_ops=ops,
            wall_time_ms=(time.perf_counter() - t0) * 1e3,
            generated_tokens=len(tokens),
            evicted_tokens=evicted,
            prefill_attention_ops=prefill_ops,
            active_visual_chunks=len(cache.active_visual_chunks),
            retained_visual_tokens=cache.retained_visual_tokens,
            retained_generated_tokens=cache.retained_generated_tokens,
            retained_instruction_tokens=cache.retained_instruction_tokens,
        )
        record = StepRecord(output, raw, tuple(tokens), tuple(violations), metrics, reasoning)
        self.steps.append(record)
        return record

    def run(self) -> Trajectory:
        while self.current_chunk < len(self.script.chunks):
            self.step()
        return self.trajectory()

    def trajectory(self) -> Trajectory:
        return Trajectory(tuple(self.steps), self.token_log)


def run_session(script: StreamScript, params: DecoderParams, cache_config: CacheConfig,
                engine_config: EngineConfig, **kwargs) -> tuple[Trajectory, list[StepMetrics]]:
    """Run the whole stream; keyword arguments are forwarded to StreamSession."""
    traj = StreamSession(script, params, cache_config, engine_config, **kwargs).run()
    return traj, traj.metrics


def replay_tokens(trajectory: Trajectory) -> list[tuple[int, ...]]:
    return [s.token_ids for s in trajectory.steps]


def rescore(script: StreamScript, params: DecoderParams, cache_config: CacheConfig,
            engine_config: EngineConfig, trajectory: Trajectory, steer: Optional[SteerBias] = None,
            baseline: bool = False) -> Trajectory:
    """Teacher-force the trajectory's tokens through a fresh session, recording token logs."""
    traj, _ = run_session(script, params, cache_config, engine_config, record=True, steer=steer,
                          forced=replay_tokens(trajectory), baseline=baseline)
    return traj
