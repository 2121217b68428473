"""Synthetic streaming environment with a hidden evidence-onset chunk.

Every chunk from the onset ``e`` on carries the evidence feature of the
answer token, so the right behaviour is to stay silent before ``e`` and
answer at ``e``; ``t_gt = e``.
"""

from __future__ import annotations

from typing import Optional

import numpy as np

from . import vocab
from .core import (
    DEFAULT_FPS,
    DEFAULT_TOKENS_PER_FRAME,
    AnswerType,
    GroundTruth,
    Instruction,
    StreamScript,
    VisualChunk,
    evidence_seed,
)

INSTRUCTIONS = {
    AnswerType.MULTIPLE_CHOICE: "Tell me which option the sign shows as soon as it is visible.",
    AnswerType.BINARY: "Alert me whether the door is open once you can tell.",
    AnswerType.COUNTING: "Count the boxes on the shelf when they come into view.",
}


def random_answer(answer_type: AnswerType, rng: np.random.Generator) -> str:
    if answer_type is AnswerType.MULTIPLE_CHOICE:
        return vocab.LETTERS[rng.integers(len(vocab.LETTERS))]
    if answer_type is AnswerType.BINARY:
        return ("yes", "no")[rng.integers(2)]
    return str(int(rng.integers(vocab.MAX_NUMERAL + 1)))


def make_script(n_chunks: int, onset: int, answer: str, answer_type: AnswerType,
                rng: np.random.Generator, fps: float = DEFAULT_FPS,
                tokens_per_frame: int = DEFAULT_TOKENS_PER_FRAME, chunk_seconds: float = 1.0) -> StreamScript:
    if not 1 <= onset <= n_chunks:
        raise ValueError(f"onset {onset} outside [1, {n_chunks}]")
    ans_id = vocab.answer_token(answer)
    chunks = []
    for i in range(1, n_chunks + 1):
        base = int(rng.integers(0, 1 << 31))
        seed = evidence_seed(base, ans_id) if i >= onset else base
        chunks.append(VisualChunk.from_times(i, (i - 1) * chunk_seconds, i * chunk_seconds, seed,
                                             fps=fps, tokens_per_frame=tokens_per_frame))
    gt = GroundTruth(answer, answer_type, onset)
    return StreamScript(Instruction.from_text(INSTRUCTIONS[answer_type]), tuple(chunks), gt, fps, tokens_per_frame)


def random_script(rng: np.random.Generator, n_chunks: int, answer_type: Optional[AnswerType] = None,
                  min_onset: int = 2, **kwargs) -> StreamScript:
    answer_type = answer_type or list(AnswerType)[rng.integers(len(AnswerType))]
    onset = int(rng.integers(min(min_onset, n_chunks), n_chunks + 1))
    return make_script(n_chunks, onset, random_answer(answer_type, rng), answer_type, rng, **kwargs)


def script_pool(size: int, seed: int = 0, min_chunks: int = 6, max_chunks: int = 10, **kwargs) -> list[StreamScript]:
    """A reproducible pool of evidence-onset scripts of varying length and answer type."""
    rng = np.random.default_rng(seed)
    return [random_script(rng, int(rng.integers(min_chunks, max_chunks + 1)), **kwargs) for _ in range(size)]


def demo_script_path():
    """Path of the bundled 10-chunk demo script."""
    from importlib.resources import files
    return files("streamreason") / "data" / "demo_script.jsonl"
