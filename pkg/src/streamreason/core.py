"""Domain types, the step output grammar and stream-script ingestion."""

from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import vocab
from .errors import (
    FormatError,
    FormatErrorKind,
    IngestError,
    IngestErrorKind,
)

DEFAULT_FPS = 2.0
DEFAULT_TOKENS_PER_FRAME = 16

# A feature seed at or above this offset marks an evidence chunk; the
# multiple (minus one) selects the answer slot the evidence points at.
EVIDENCE_SEED_OFFSET = 1 << 40


class Role(enum.IntEnum):
    VISUAL = 0
    INSTRUCTION = 1
    REASONING = 2
    ACTION_MARKER = 3
    RESPONSE_CONTENT = 4
    CONTROL = 5


GENERATED_ROLES = frozenset({Role.REASONING, Role.ACTION_MARKER, Role.RESPONSE_CONTENT, Role.CONTROL})


@dataclass(frozen=True, slots=True)
class Token:
    id: int
    role: Role
    position: int

    def __post_init__(self):
        if self.id < 0 or self.position < 0:
            raise ValueError(f"negative token id or position: {self.id}, {self.position}")


class AnswerType(str, enum.Enum):
    MULTIPLE_CHOICE = "MultipleChoice"
    BINARY = "Binary"
    COUNTING = "Counting"

    @classmethod
    def parse(cls, value: str) -> "AnswerType":
        key = str(value).replace("_", "").replace("-", "").lower()
        for member in cls:
            if member.value.lower() == key:
                return member
        raise ValueError(f"unknown answer type {value!r}")


@dataclass(frozen=True)
class VisualChunk:
    index: int
    start_time: float
    end_time: float
    frame_count: int
    tokens_per_frame: int
    feature_seed: int

    @property
    def token_count(self) -> int:
        return self.frame_count * self.tokens_per_frame

    @classmethod
    def from_times(cls, index, start_time, end_time, feature_seed,
                   fps=DEFAULT_FPS, tokens_per_frame=DEFAULT_TOKENS_PER_FRAME):
        frames = int(round((end_time - start_time) * fps))
        return cls(index, float(start_time), float(end_time), frames, tokens_per_frame, int(feature_seed))


@dataclass(frozen=True)
class Instruction:
    text: str
    token_ids: tuple[int, ...]

    @classmethod
    def from_text(cls, text: str) -> "Instruction":
        return cls(text, tuple(vocab.tokenize_instruction(text)))

    def tokens(self, start_position: int = 0) -> list[Token]:
        return [Token(t, Role.INSTRUCTION, start_position + i) for i, t in enumerate(self.token_ids)]

    def __len__(self):
        return len(self.token_ids)


@dataclass(frozen=True)
class GroundTruth:
    answer: str
    answer_type: AnswerType
    t_gt: int


@dataclass(frozen=True)
class StreamScript:
    instruction: Instruction
    chunks: tuple[VisualChunk, ...]
    ground_truth: GroundTruth
    fps: float = DEFAULT_FPS
    tokens_per_frame: int = DEFAULT_TOKENS_PER_FRAME

    def __len__(self):
        return len(self.chunks)

    @property
    def max_chunk_tokens(self) -> int:
        return max((c.token_count for c in self.chunks), default=0)


class Action(str, enum.Enum):
    SILENT = "Silent"
    RESPOND = "Respond"


@dataclass(frozen=True)
class StepOutput:
    """One parsed step. ``response`` is None for a silent step."""

    reasoning: str
    response: Optional[str] = None
    chunk_index: int = 0

    @property
    def is_silent(self) -> bool:
        return self.response is None

    @property
    def action(self) -> Action:
        return Action.SILENT if self.response is None else Action.RESPOND


# ---------------------------------------------------------------------------
# grammar
# ---------------------------------------------------------------------------

_OPEN, _CLOSE, _SILENT, _RESPONSE = (vocab.TAG_TEXT[t] for t in (
    vocab.THINK_OPEN, vocab.THINK_CLOSE, vocab.SILENT, vocab.RESPONSE))


def _has_tag(text: str) -> bool:
    return any(tag in text for tag in vocab.RESERVED_TAGS)


def parse_step_output(text: str, chunk_index: int = 0) -> StepOutput:
    """Decompose ``<think>r</think>`` + ``<silent>`` | ``<response>content``.

    Raises FormatError naming the first grammar rule that failed. A reserved
    tag inside the think block counts as an unclosed block; one inside the
    response content counts as trailing content.
    """
    if not text.startswith(_OPEN):
        raise FormatError(FormatErrorKind.MISSING_THINK)
    rest = text[len(_OPEN):]
    close = rest.find(_CLOSE)
    if close < 0:
        raise FormatError(FormatErrorKind.UNCLOSED_THINK)
    reasoning = rest[:close]
    if _has_tag(reasoning):
        raise FormatError(FormatErrorKind.UNCLOSED_THINK, "marker inside think block")
    tail = rest[close + len(_CLOSE):]
    if tail.startswith(_SILENT):
        if tail[len(_SILENT):]:
            raise FormatError(FormatErrorKind.TRAILING_CONTENT)
        return StepOutput(reasoning, None, chunk_index)
    if tail.startswith(_RESPONSE):
        content = tail[len(_RESPONSE):]
        if _has_tag(content):
            raise FormatError(FormatErrorKind.TRAILING_CONTENT, "marker after response content")
        if not content.strip():
            raise FormatError(FormatErrorKind.EMPTY_RESPONSE)
        return StepOutput(reasoning, content, chunk_index)
    raise FormatError(FormatErrorKind.MISSING_ACTION)


def render_step_output(step: StepOutput) -> str:
    action = _SILENT if step.response is None else _RESPONSE + step.response
    return f"{_OPEN}{step.reasoning}{_CLOSE}{action}"


# ---------------------------------------------------------------------------
# visual token synthesis
# ---------------------------------------------------------------------------

def evidence_seed(base_seed: int, answer_id: int) -> int:
    """Feature seed for an evidence chunk pointing at ``answer_id``."""
    if not 0 <= base_seed < EVIDENCE_SEED_OFFSET:
        raise ValueError("base seed out of range")
    return EVIDENCE_SEED_OFFSET * (1 + answer_id - vocab.ANSWER_BASE) + base_seed


def evidence_answer(feature_seed: int) -> Optional[int]:
    """Answer token id encoded in a feature seed, or None for a plain chunk."""
    slot = feature_seed // EVIDENCE_SEED_OFFSET - 1
    if feature_seed < EVIDENCE_SEED_OFFSET or slot >= vocab.N_ANSWERS:
        return None
    return vocab.ANSWER_BASE + slot


def synthesize_visual_ids(chunk: VisualChunk) -> np.ndarray:
    n = chunk.token_count
    if n <= 0:
        return np.zeros(0, dtype=np.int64)
    seed = chunk.feature_seed
    rng = np.random.default_rng([abs(seed), int(seed < 0), chunk.index])
    ids = vocab.VISUAL_BASE + rng.integers(0, vocab.N_VISUAL, size=n, dtype=np.int64)
    answer = evidence_answer(seed)
    if answer is not None:
        ids[:: chunk.tokens_per_frame] = vocab.evidence_id(answer)
    return ids


def synthesize_visual_tokens(chunk: VisualChunk, start_position: int = 0) -> list[Token]:
    """Deterministic stand-in for frame encoding: ids depend only on (feature_seed, index)."""
    ids = synthesize_visual_ids(chunk)
    return [Token(int(t), Role.VISUAL, start_position + i) for i, t in enumerate(ids)]


# ---------------------------------------------------------------------------
# stream-script files
# ---------------------------------------------------------------------------

_CONTIGUITY_TOL = 1e-9


def validate_ground_truth(gt: GroundTruth, n_chunks: int) -> Optional[str]:
    if not 1 <= gt.t_gt <= n_chunks:
        return f"t_gt={gt.t_gt} outside [1, {n_chunks}]"
    ans = gt.answer.strip()
    if gt.answer_type is AnswerType.MULTIPLE_CHOICE and not (len(ans) == 1 and ans.upper() in vocab.LETTERS):
        return f"multiple-choice answer must be one of {vocab.LETTERS}"
    if gt.answer_type is AnswerType.BINARY and ans.lower() not in ("yes", "no"):
        return "binary answer must be yes or no"
    if gt.answer_type is AnswerType.COUNTING and not (ans.isdigit() and int(ans) <= vocab.MAX_NUMERAL):
        return f"counting answer must be an integer in [0, {vocab.MAX_NUMERAL}]"
    return None


def validate_chunks(chunks, max_chunk_tokens: Optional[int] = None):
    """Yield (offending chunk position, kind, detail) for every invariant violation."""
    for i, c in enumerate(chunks):
        if c.index != i + 1:
            yield i, IngestErrorKind.NON_CONTIGUOUS_CHUNKS, f"chunk index {c.index}, expected {i + 1}"
        if not (math.isfinite(c.start_time) and math.isfinite(c.end_time)) or c.end_time <= c.start_time:
            yield i, IngestErrorKind.PARSE, "end_time must exceed start_time"
        if i and abs(c.start_time - chunks[i - 1].end_time) > _CONTIGUITY_TOL:
            yield i, IngestErrorKind.NON_CONTIGUOUS_CHUNKS, (
                f"chunk {c.index} starts at {c.start_time}, previous ends at {chunks[i - 1].end_time}")
        if max_chunk_tokens is not None and c.token_count > max_chunk_tokens:
            yield i, IngestErrorKind.OVERSIZED_CHUNK, f"{c.token_count} tokens > {max_chunk_tokens}"


def load_stream_script(path, max_chunk_tokens: Optional[int] = None) -> StreamScript:
    """Read a line-delimited stream script (header line, then one line per chunk).

    ``max_chunk_tokens`` rejects chunks that would need more than one eviction
    to fit the window.
    """
    path = Path(path)
    try:
        lines = path.read_text(encoding="utf-8").splitlines()
    except UnicodeDecodeError as exc:
        raise IngestError(IngestErrorKind.PARSE, 0, str(exc)) from None
    records = []
    for lineno, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise IngestError(IngestErrorKind.PARSE, lineno, exc.msg) from None
        if not isinstance(obj, dict):
            raise IngestError(IngestErrorKind.PARSE, lineno, "record is not an object")
        records.append((lineno, obj))
    if not records:
        raise IngestError(IngestErrorKind.PARSE, 1, "empty script")

    header_line, header = records[0]
    try:
        fps = float(header.get("fps", DEFAULT_FPS))
        tpf = int(header.get("tokens_per_frame", DEFAULT_TOKENS_PER_FRAME))
        instruction = Instruction.from_text(str(header["instruction"]))
        gt_obj = header["ground_truth"]
    except (KeyError, TypeError, ValueError) as exc:
        raise IngestError(IngestErrorKind.PARSE, header_line, f"bad header: {exc}") from None
    if fps <= 0 or tpf <= 0:
        raise IngestError(IngestErrorKind.PARSE, header_line, "fps and tokens_per_frame must be positive")
    try:
        gt = GroundTruth(str(gt_obj["answer"]), AnswerType.parse(gt_obj["answer_type"]), int(gt_obj["t_gt"]))
    except (KeyError, TypeError, ValueError) as exc:
        raise IngestError(IngestErrorKind.BAD_GROUND_TRUTH, header_line, str(exc)) from None

    chunks = []
    chunk_lines = []
    for lineno, obj in records[1:]:
        try:
            chunk = VisualChunk.from_times(
                int(obj["index"]), float(obj["start_time"]), float(obj["end_time"]),
                int(obj["feature_seed"]), fps=fps, tokens_per_frame=tpf)
        except (KeyError, TypeError, ValueError) as exc:
            raise IngestError(IngestErrorKind.PARSE, lineno, f"bad chunk record: {exc}") from None
        chunks.append(chunk)
        chunk_lines.append(lineno)

    for i, kind, detail in validate_chunks(chunks, max_chunk_tokens):
        raise IngestError(kind, chunk_lines[i], detail)
    problem = validate_ground_truth(gt, len(chunks))
    if problem:
        raise IngestError(IngestErrorKind.BAD_GROUND_TRUTH, header_line, problem)
    return StreamScript(instruction, tuple(chunks), gt, fps, tpf)


def script_records(script: StreamScript) -> list[dict]:
    gt = script.ground_truth
    header = {
        "instruction": script.instruction.text,
        "fps": script.fps,
        "tokens_per_frame": script.tokens_per_frame,
        "ground_truth": {"answer": gt.answer, "answer_type": gt.answer_type.value, "t_gt": gt.t_gt},
    }
    rows = [{"index": c.index, "start_time": c.start_time, "end_time": c.end_time,
             "feature_seed": c.feature_seed} for c in script.chunks]
    return [header, *rows]


def save_stream_script(script: StreamScript, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in script_records(script):
            fh.write(json.dumps(rec) + "\n")
