"""Rule-based verifiable rewards: format, response timing and answer accuracy."""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import Optional

from .core import AnswerType, GroundTruth
from .engine import Trajectory
from .errors import ConfigError

NUMBER_WORDS = {
    w: i for i, w in enumerate(
        "zero one two three four five six seven eight nine ten eleven twelve thirteen "
        "fourteen fifteen sixteen seventeen eighteen nineteen twenty".split())
}

_LETTER_RE = re.compile(r"(?<![A-Za-z])([A-Ea-e])(?![A-Za-z])")
_WORD_RE = re.compile(r"[a-z0-9]+")


@dataclass(frozen=True)
class RewardConfig:
    tolerance_w: float = 3.0
    format_weight: float = 1.0
    time_weight: float = 1.0
    acc_weight: float = 1.0

    def __post_init__(self):
        if not self.tolerance_w > 0:
            raise ConfigError("tolerance_w must be positive")
        if min(self.format_weight, self.time_weight, self.acc_weight) < 0:
            raise ConfigError("reward weights must be non-negative")


@dataclass(frozen=True)
class RewardBreakdown:
    r_format: float
    r_time: float
    r_acc: float
    total: float
    t_resp: Optional[int]
    t_gt: int
    violations: list = field(default_factory=list)

    def to_record(self) -> dict:
        return {"r_format": self.r_format, "r_time": self.r_time, "r_acc": self.r_acc,
                "total": self.total, "t_resp": self.t_resp, "t_gt": self.t_gt,
                "violations": list(self.violations)}


# -- verifiers ------------------------------------------------------------------

def extract_choice(text: str) -> Optional[str]:
    m = _LETTER_RE.search(text.strip())
    return m.group(1).upper() if m else None


def extract_binary(text: str) -> Optional[str]:
    words = _WORD_RE.findall(text.lower())
    if words and words[0] in ("yes", "no"):
        return words[0]
    return None


def extract_count(text: str) -> Optional[int]:
    for w in _WORD_RE.findall(text.lower()):
        if w.isdigit():
            return int(w)
        if w in NUMBER_WORDS:
            return NUMBER_WORDS[w]
    return None


_EXTRACTORS = {
    AnswerType.MULTIPLE_CHOICE: extract_choice,
    AnswerType.BINARY: extract_binary,
    AnswerType.COUNTING: extract_count,
}


def verify_answer(response: str, ground_truth: GroundTruth) -> bool:
    extract = _EXTRACTORS[ground_truth.answer_type]
    got = extract(response)
    return got is not None and got == extract(ground_truth.answer)


# -- reward components ------------------------------------------------------------

def first_response(trajectory: Trajectory):
    for step in trajectory.steps:
        if step.output.response is not None:
            return step
    return None


def format_reward(trajectory: Trajectory) -> float:
    if not trajectory.steps:
        return 0.0
    return 0.0 if any(step.violations for step in trajectory.steps) else 1.0


def time_reward(t_resp: Optional[int], t_gt: int, w: float) -> float:
    if t_resp is None:
        return 0.0
    return max(0.0, 1.0 - abs(t_resp - t_gt) / w)


def accuracy_reward(trajectory: Trajectory, ground_truth: GroundTruth) -> float:
    step = first_response(trajectory)
    if step is None:
        return 0.0
    return 1.0 if verify_answer(step.output.response, ground_truth) else 0.0


def total_reward(trajectory: Trajectory, ground_truth: GroundTruth,
                 config: RewardConfig = RewardConfig()) -> RewardBreakdown:
    step = first_response(trajectory)
    t_resp = step.output.chunk_index if step is not None else None
    r_format = format_reward(trajectory)
    r_time = time_reward(t_resp, ground_truth.t_gt, config.tolerance_w)
    r_acc = accuracy_reward(trajectory, ground_truth)
    total = config.format_weight * r_format + config.time_weight * r_time + config.acc_weight * r_acc
    violations = [f"chunk {s.chunk_index}: {v}" for s in trajectory.steps for v in s.violations]
    return RewardBreakdown(r_format, r_time, r_acc, total, t_resp, ground_truth.t_gt, violations)
