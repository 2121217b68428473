"""Group relative policy optimization over streaming rollouts.

Only the steering surface trains; decoder weights stay frozen. Because the
decoder logits of a sampled token sequence do not depend on the steering
offsets, one recorded rollout is enough to evaluate log-probabilities and
their exact gradients under any steering table.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import vocab
from .cache import CacheConfig
from .core import StreamScript
from .decoder import DecoderParams, SteerBias
from .engine import EngineConfig, StreamSession, Trajectory, required_capacity
from .errors import ConfigError, NonFiniteError, ParamError
from .rewards import RewardBreakdown, RewardConfig, total_reward


@dataclass(frozen=True)
class GrpoConfig:
    group_size: int = 8
    clip_eps: float = 0.2
    kl_beta: float = 0.01
    learning_rate: float = 1.0
    iterations: int = 100
    adv_epsilon: float = 1e-6
    batch_scripts: int = 8        # groups (scripts) per iteration
    inner_steps: int = 2          # updates per sampled batch; >1 lets the clip bind
    adam_betas: tuple = (0.9, 0.999)

    def __post_init__(self):
        if self.group_size < 2:
            raise ConfigError("group_size must be >= 2")
        if not 0.0 < self.clip_eps < 1.0:
            raise ConfigError("clip_eps must lie in (0, 1)")
        if self.kl_beta < 0 or self.learning_rate < 0:
            raise ConfigError("kl_beta and learning_rate must be non-negative")
        if self.iterations < 1 or self.batch_scripts < 1 or self.inner_steps < 1:
            raise ConfigError("iterations, batch_scripts and inner_steps must be positive")
        if not self.adv_epsilon > 0:
            raise ConfigError("adv_epsilon must be positive")


def rollout_engine_config(max_new_tokens: int = 24, think_budget: int = 16, vocab_size: int = vocab.MIN_VOCAB,
                          rng_seed: int = 0) -> EngineConfig:
    """Untruncated sampling, so the sampler draws from exactly the policy being optimized."""
    return EngineConfig(max_new_tokens=max_new_tokens, think_budget=think_budget, top_k=vocab_size,
                        top_p=1.0, temperature=1.0, rng_seed=rng_seed)


def _check_untruncated(engine_config: EngineConfig, vocab_size: int) -> None:
    if engine_config.top_k < vocab_size or engine_config.top_p != 1.0 or engine_config.temperature != 1.0:
        raise ConfigError("policy optimization needs top_k >= vocab size, top_p = 1 and temperature = 1")


# ---------------------------------------------------------------------------
# scalar pieces of the objective
# ---------------------------------------------------------------------------

def advantages(rewards, adv_epsilon: float = 1e-6) -> np.ndarray:
    r = np.asarray(rewards, dtype=np.float64)
    if r.size < 2:
        raise ParamError("a group needs at least two rewards")
    # equal rewards carry no signal; testing equality avoids a rounding-noise std
    if np.all(r == r[0]):
        return np.zeros_like(r)
    return (r - r.mean()) / (r.std() + adv_epsilon)


def clipped_objective(ratio, advantage, clip_eps: float):
    """min(rho * A, clip(rho, 1 - eps, 1 + eps) * A); elementwise on arrays."""
    rho = np.asarray(ratio, dtype=np.float64)
    if np.any(rho <= 0):
        raise ParamError("ratio must be positive")
    a = np.asarray(advantage, dtype=np.float64)
    out = np.minimum(rho * a, np.clip(rho, 1.0 - clip_eps, 1.0 + clip_eps) * a)
    return float(out) if out.ndim == 0 else out


def kl_terms(logprob_current, logprob_ref) -> np.ndarray:
    """Per-token r - 1 - log r with r = pi_ref / pi_theta at the sampled token."""
    log_r = np.asarray(logprob_ref, dtype=np.float64) - np.asarray(logprob_current, dtype=np.float64)
    return np.expm1(log_r) - log_r


def kl_penalty(logprob_current, logprob_ref) -> float:
    terms = kl_terms(logprob_current, logprob_ref)
    return float(terms.mean()) if terms.size else 0.0


# ---------------------------------------------------------------------------
# policy evaluation on recorded tokens
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TokenBatch:
    """Sampled tokens of one trajectory with everything needed to re-score them."""

    base_logits: np.ndarray   # (n, V)
    cells: np.ndarray         # phase * 2 + evidence, (n,)
    phases: np.ndarray
    copy_masks: np.ndarray    # (n, V) float
    tokens: np.ndarray

    @classmethod
    def from_trajectory(cls, trajectory: Trajectory) -> "TokenBatch":
        if trajectory.token_log is None:
            raise ParamError("trajectory was not recorded")
        base, phases, evidence, masks, tokens, sampled = trajectory.token_log.arrays()
        keep = sampled
        return cls(base[keep], phases[keep] * 2 + evidence[keep], phases[keep],
                   masks[keep].astype(np.float64), tokens[keep])

    def __len__(self):
        return len(self.tokens)


def _class_onehot(params: DecoderParams) -> np.ndarray:
    cls = params.token_classes
    onehot = np.zeros((cls.size, vocab.N_CLASSES))
    onehot[np.arange(cls.size), cls] = 1.0
    return onehot


def token_logprobs(params: DecoderParams, steer: SteerBias, batch: TokenBatch,
                   want_grad: bool = False):
    """Log-probabilities of the batch's tokens under ``steer``.

    With ``want_grad`` also returns per-token gradients with respect to the
    steering cells (n, N_CLASSES) and copy weights (n,).
    """
    n = len(batch)
    if n == 0:
        z = np.zeros(0)
        return (z, np.zeros((0, vocab.N_CLASSES)), z) if want_grad else z
    classes = params.token_classes
    table = steer.table.reshape(-1, vocab.N_CLASSES)
    logits = batch.base_logits + table[batch.cells][:, classes] + steer.copy[batch.phases][:, None] * batch.copy_masks
    m = logits.max(axis=1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(logits - m).sum(axis=1))
    rows = np.arange(n)
    logp = logits[rows, batch.tokens] - lse
    if not want_grad:
        return logp
    p = np.exp(logits - lse[:, None])
    g_table = -(p @ _class_onehot(params))
    g_table[rows, classes[batch.tokens]] += 1.0
    g_copy = batch.copy_masks[rows, batch.tokens] - (p * batch.copy_masks).sum(axis=1)
    return logp, g_table, g_copy


def _scatter_grad(batch: TokenBatch, weights: np.ndarray, g_table: np.ndarray, g_copy: np.ndarray) -> np.ndarray:
    """Sum weighted per-token gradients into a flat steering-gradient vector."""
    table = np.zeros((vocab.N_PHASES * 2, vocab.N_CLASSES))
    np.add.at(table, batch.cells, weights[:, None] * g_table)
    copy = np.bincount(batch.phases, weights=weights * g_copy, minlength=vocab.N_PHASES)
    return np.concatenate([table.ravel(), copy])


# ---------------------------------------------------------------------------
# rollouts
# ---------------------------------------------------------------------------

@dataclass
class GroupRollout:
    script: StreamScript
    trajectories: list
    rewards: list
    breakdowns: list
    logprob_old: list
    logprob_current: list
    logprob_ref: list
    batches: list = field(default_factory=list, repr=False)

    def __len__(self):
        return len(self.trajectories)


ScriptSource = Union[StreamScript, Sequence[StreamScript], Callable[[np.random.Generator], StreamScript]]


def _draw_script(source: ScriptSource, rng: np.random.Generator) -> StreamScript:
    if isinstance(source, StreamScript):
        return source
    if callable(source):
        return source(rng)
    return source[int(rng.integers(len(source)))]


def sample_group(scripts: ScriptSource, params: DecoderParams, steer: SteerBias, group_size: int,
                 cache_config: CacheConfig, engine_config: EngineConfig, seed,
                 ref_steer: Optional[SteerBias] = None,
                 reward_config: RewardConfig = RewardConfig()) -> GroupRollout:
    """Run ``group_size`` sessions of one script under the frozen ``steer`` policy.

    ``seed`` may be an int or a SeedSequence; each session gets its own spawned substream.
    """
    if group_size < 2:
        raise ConfigError("group_size must be >= 2")
    _check_untruncated(engine_config, params.dims.vocab_size)
    ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    pick, *children = ss.spawn(group_size + 1)
    script = _draw_script(scripts, np.random.default_rng(pick))
    cc = CacheConfig(window_chunks=cache_config.window_chunks,
                     capacity_slots=max(cache_config.capacity_slots,
                                        required_capacity(script, cache_config, engine_config)),
                     chunk_seconds=cache_config.chunk_seconds, chunk_tokens=cache_config.chunk_tokens)
    ref_steer = ref_steer if ref_steer is not None else steer
    group = GroupRollout(script, [], [], [], [], [], [])
    for child in children:
        session = StreamSession(script, params, cc, engine_config, record=True,
                                rng=np.random.default_rng(child), steer=steer)
        traj = session.run()
        breakdown = total_reward(traj, script.ground_truth, reward_config)
        batch = TokenBatch.from_trajectory(traj)
        old = float(token_logprobs(params, steer, batch).sum())
        group.trajectories.append(traj)
        group.breakdowns.append(breakdown)
        group.rewards.append(breakdown.total)
        group.batches.append(batch)
        group.logprob_old.append(old)
        group.logprob_current.append(old)
        group.logprob_ref.append(float(token_logprobs(params, ref_steer, batch).sum()))
    return group


# ---------------------------------------------------------------------------
# objective and update
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ObjectiveReport:
    objective: float
    surrogate: float
    mean_kl: float
    clip_fraction: float
    grad_norm: float

    def to_record(self) -> dict:
        return {"objective": self.objective, "surrogate": self.surrogate, "mean_kl": self.mean_kl,
                "clip_fraction": self.clip_fraction, "grad_norm": self.grad_norm}


def objective(params: DecoderParams, steer: SteerBias, groups: Sequence[GroupRollout], config: GrpoConfig,
              ref_steer: SteerBias) -> tuple[float, np.ndarray, ObjectiveReport]:
    """J = mean_i min(rho_i A_i, clip(rho_i) A_i) - beta * mean-token KL, and its gradient."""
    groups = [groups] if isinstance(groups, GroupRollout) else list(groups)
    n_traj = sum(len(g) for g in groups)
    n_tok = sum(len(b) for g in groups for b in g.batches)
    surrogate = 0.0
    kl_sum = 0.0
    clipped = 0
    grad = np.zeros(steer.size)
    for g in groups:
        adv = advantages(g.rewards, config.adv_epsilon)
        for batch, old, a in zip(g.batches, g.logprob_old, adv):
            logp, g_table, g_copy = token_logprobs(params, steer, batch, want_grad=True)
            ref = token_logprobs(params, ref_steer, batch)
            rho = float(np.exp(logp.sum() - old))
            term = clipped_objective(rho, a, config.clip_eps)
            surrogate += term
            # the unclipped branch carries the gradient; a binding clip zeroes it
            binding = rho * a > term
            clipped += int(abs(rho - 1.0) > config.clip_eps)
            w = np.zeros(len(batch)) if binding else np.full(len(batch), a * rho / n_traj)
            terms = kl_terms(logp, ref)
            kl_sum += terms.sum()
            # d/dlogp of (r - 1 - log r) with log r = ref - logp is 1 - r
            if n_tok:
                w = w - config.kl_beta * (1.0 - np.exp(ref - logp)) / n_tok
            grad += _scatter_grad(batch, w, g_table, g_copy)
    surrogate /= max(n_traj, 1)
    mean_kl = kl_sum / n_tok if n_tok else 0.0
    value = surrogate - config.kl_beta * mean_kl
    if not np.isfinite(value) or not np.all(np.isfinite(grad)):
        raise NonFiniteError("objective or gradient is not finite")
    report = ObjectiveReport(float(value), float(surrogate), float(mean_kl), clipped / max(n_traj, 1),
                             float(np.linalg.norm(grad)))
    return float(value), grad, report


class AdamState:
    """First and second moment accumulators for the steering vector."""

    def __init__(self, size: int, betas=(0.9, 0.999), eps: float = 1e-8):
        self.m = np.zeros(size)
        self.v = np.zeros(size)
        self.t = 0
        self.betas = betas
        self.eps = eps

    def direction(self, grad: np.ndarray) -> np.ndarray:
        b1, b2 = self.betas
        self.t += 1
        self.m = b1 * self.m + (1 - b1) * grad
        self.v = b2 * self.v + (1 - b2) * grad * grad
        m_hat = self.m / (1 - b1 ** self.t)
        v_hat = self.v / (1 - b2 ** self.t)
        return m_hat / (np.sqrt(v_hat) + self.eps)


def grpo_step(params: DecoderParams, steer: SteerBias, groups, config: GrpoConfig,
              ref_steer: SteerBias, optimizer: Optional[AdamState] = None) -> tuple[SteerBias, ObjectiveReport]:
    """Ascend J for ``config.inner_steps`` updates on a batch sampled under the old policy.

    Without an optimizer state the update is plain gradient ascent.
    """
    groups = [groups] if isinstance(groups, GroupRollout) else list(groups)
    theta = steer.flatten()
    report = None
    for _ in range(config.inner_steps):
        current = SteerBias.from_flat(theta)
        _, grad, report = objective(params, current, groups, config, ref_steer)
        step = grad if optimizer is None else optimizer.direction(grad)
        if config.learning_rate and np.any(grad):
            theta = theta + config.learning_rate * step
    if not np.all(np.isfinite(theta)):
        raise NonFiniteError("steering parameters became non-finite")
    new = SteerBias.from_flat(theta)
    for g in groups:
        g.logprob_current = [float(token_logprobs(params, new, b).sum()) for b in g.batches]
    return new, report


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

@dataclass
class TrainResult:
    steer: SteerBias
    curve: list            # mean total reward per iteration
    log: list              # one record per iteration

    def write_curve(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("iteration mean_reward\n")
            for i, r in enumerate(self.curve):
                fh.write(f"{i} {r:.6f}\n")


def moving_average(values, window: int = 20) -> np.ndarray:
    # correctly rounded window sums, so windows holding equal rewards compare equal
    v = np.asarray(values, dtype=np.float64)
    if v.size < window:
        return np.zeros(0)
    return np.array([math.fsum(w) for w in sliding_window_view(v, window)]) / window


def train(scripts: ScriptSource, params: DecoderParams, config: GrpoConfig = GrpoConfig(),
          cache_config: CacheConfig = CacheConfig(window_chunks=5),
          engine_config: Optional[EngineConfig] = None, reward_config: RewardConfig = RewardConfig(),
          seed: int = 0, init_steer: Optional[SteerBias] = None,
          callback: Optional[Callable[[dict], None]] = None) -> TrainResult:
    """Iterate sampling and updates; the reference policy stays frozen at the initial steering."""
    engine_config = engine_config or rollout_engine_config(vocab_size=params.dims.vocab_size)
    ref = init_steer if init_steer is not None else params.steer
    steer = ref
    opt = AdamState(ref.size, config.adam_betas)
    root = np.random.SeedSequence(seed)
    curve, log = [], []
    for it, it_seed in enumerate(root.spawn(config.iterations)):
        groups = [sample_group(scripts, params, steer, config.group_size, cache_config, engine_config,
                               s, ref_steer=ref, reward_config=reward_config)
                  for s in it_seed.spawn(config.batch_scripts)]
        parts = np.array([(b.r_format, b.r_time, b.r_acc) for g in groups for b in g.breakdowns])
        mean_reward = float(np.mean([r for g in groups for r in g.rewards]))
        steer, report = grpo_step(params, steer, groups, config, ref, opt)
        rec = {"iteration": it, "mean_reward": mean_reward, "mean_format": float(parts[:, 0].mean()),
               "mean_time": float(parts[:, 1].mean()), "mean_acc": float(parts[:, 2].mean()),
               **report.to_record()}
        curve.append(mean_reward)
        log.append(rec)
        if callback is not None:
            callback(rec)
    return TrainResult(steer, curve, log)
