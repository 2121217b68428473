"""Scikit-learn style facade: fit trains the steering policy, predict streams scripts."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .cache import CacheConfig
from .decoder import DecoderDims, init_decoder
from .engine import StreamSession, Trajectory, required_capacity
from .grpo import GrpoConfig, rollout_engine_config, train
from .rewards import RewardConfig, total_reward
from .validation import check_positive_int, check_scripts, check_seed


class StreamReasoner(BaseEstimator):
    """Streaming reasoner over a fixed toy decoder.

    ``fit(X)`` runs policy optimization on the scripts in ``X`` (ground truth
    lives inside each script, so ``y`` is ignored). ``predict(X)`` returns one
    Trajectory per script, sampled under the trained policy. ``score(X)`` is
    the mean total reward.
    """

    def __init__(self, window_chunks=5, max_new_tokens=24, think_budget=16, decoder_seed=7,
                 random_state=0, tolerance_w=3.0, group_size=8, batch_scripts=8, iterations=100,
                 learning_rate=1.0, clip_eps=0.2, kl_beta=0.01, inner_steps=2):
        self.window_chunks = window_chunks
        self.max_new_tokens = max_new_tokens
        self.think_budget = think_budget
        self.decoder_seed = decoder_seed
        self.random_state = random_state
        self.tolerance_w = tolerance_w
        self.group_size = group_size
        self.batch_scripts = batch_scripts
        self.iterations = iterations
        self.learning_rate = learning_rate
        self.clip_eps = clip_eps
        self.kl_beta = kl_beta
        self.inner_steps = inner_steps

    def _configs(self):
        check_positive_int(self.window_chunks, "window_chunks")
        check_seed(self.random_state)
        dims = DecoderDims()
        engine = rollout_engine_config(self.max_new_tokens, self.think_budget, dims.vocab_size)
        grpo = GrpoConfig(group_size=self.group_size, clip_eps=self.clip_eps, kl_beta=self.kl_beta,
                          learning_rate=self.learning_rate, iterations=self.iterations,
                          batch_scripts=self.batch_scripts, inner_steps=self.inner_steps)
        return (init_decoder(check_seed(self.decoder_seed), dims), CacheConfig(window_chunks=self.window_chunks),
                engine, grpo, RewardConfig(tolerance_w=self.tolerance_w))

    def fit(self, X, y=None):
        scripts = check_scripts(X)
        params, cc, ec, gc, rc = self._configs()
        result = train(scripts, params, gc, cc, ec, rc, seed=self.random_state)
        self.params_ = params.with_steer(result.steer)
        self.reward_curve_ = np.asarray(result.curve)
        self.training_log_ = result.log
        return self

    def predict(self, X) -> list[Trajectory]:
        check_is_fitted(self, "params_")
        scripts = check_scripts(X)
        _, cc, ec, _, _ = self._configs()
        out = []
        for i, script in enumerate(scripts):
            cap = required_capacity(script, cc, ec)
            cfg = CacheConfig(window_chunks=cc.window_chunks, capacity_slots=max(cap, cc.capacity_slots))
            rng = np.random.default_rng([self.random_state, i])
            out.append(StreamSession(script, self.params_, cfg, ec, rng=rng).run())
        return out

    def score(self, X, y=None) -> float:
        scripts = check_scripts(X)
        rc = RewardConfig(tolerance_w=self.tolerance_w)
        trajs = self.predict(scripts)
        return float(np.mean([total_reward(t, s.ground_truth, rc).total for t, s in zip(trajs, scripts)]))
