"""Fixed toy vocabulary layout and detokenization.

Layout (256 ids)::

    0-4      control and action markers
    5-25     numerals "0".."20"
    26-30    letters "A".."E"
    31, 32   "yes", "no"
    33-96    reasoning words
    97-127   instruction words
    128-227  plain visual features
    228-255  evidence features, one per answer token
"""

from __future__ import annotations

import re
import zlib

import numpy as np

THINK_OPEN = 0
THINK_CLOSE = 1
SILENT = 2
RESPONSE = 3
END_OF_TURN = 4

NUMERAL_BASE = 5
MAX_NUMERAL = 20
LETTER_BASE = 26
LETTERS = "ABCDE"
YES = 31
NO = 32
ANSWER_BASE = NUMERAL_BASE
N_ANSWERS = 28

WORD_BASE = 33
WORDS = (
    "scene person moves door opens closes light shifts car arrives leaves "
    "object appears vanishes hand holds table screen text shows sign left right "
    "near far still waiting nothing new changed same again counting window more "
    "item box shelf street crowd dog runs sits stands walks turns clock time "
    "red blue green bright dark start end before after now event maybe likely wall floor sky"
).split()
INSTRUCTION_BASE = 97
N_INSTRUCTION = 31
VISUAL_BASE = 128
N_VISUAL = 100
EVIDENCE_BASE = 228
MIN_VOCAB = 256

TAG_TEXT = {
    THINK_OPEN: "<think>",
    THINK_CLOSE: "</think>",
    SILENT: "<silent>",
    RESPONSE: "<response>",
    END_OF_TURN: "<|im_end|>",
}
RESERVED_TAGS = tuple(TAG_TEXT.values())

assert len(WORDS) == 64

# token classes used by the steering table
CLS_THINK_OPEN = 0
CLS_THINK_CLOSE = 1
CLS_SILENT = 2
CLS_RESPONSE = 3
CLS_EOT = 4
CLS_ANSWER = 5
CLS_WORD = 6
CLS_OTHER = 7
N_CLASSES = 8
CLASS_NAMES = ("think_open", "think_close", "silent", "response", "eot", "answer", "word", "other")


def answer_text(token_id: int) -> str:
    slot = token_id - ANSWER_BASE
    if 0 <= slot <= MAX_NUMERAL:
        return str(slot)
    if token_id == YES:
        return "yes"
    if token_id == NO:
        return "no"
    return LETTERS[token_id - LETTER_BASE]


def answer_token(text: str) -> int:
    """Inverse of answer_text; raises KeyError for text outside the answer set."""
    t = text.strip()
    if t.isdigit() and int(t) <= MAX_NUMERAL:
        return NUMERAL_BASE + int(t)
    if t.lower() == "yes":
        return YES
    if t.lower() == "no":
        return NO
    if len(t) == 1 and t.upper() in LETTERS:
        return LETTER_BASE + LETTERS.index(t.upper())
    raise KeyError(text)


def is_answer(token_id: int) -> bool:
    return ANSWER_BASE <= token_id < ANSWER_BASE + N_ANSWERS


def evidence_id(answer_id: int) -> int:
    return EVIDENCE_BASE + (answer_id - ANSWER_BASE)


def token_text(token_id: int) -> str:
    if token_id in TAG_TEXT:
        return TAG_TEXT[token_id]
    if is_answer(token_id):
        return answer_text(token_id)
    if WORD_BASE <= token_id < WORD_BASE + len(WORDS):
        return WORDS[token_id - WORD_BASE]
    if INSTRUCTION_BASE <= token_id < INSTRUCTION_BASE + N_INSTRUCTION:
        return f"i{token_id - INSTRUCTION_BASE}"
    if VISUAL_BASE <= token_id < VISUAL_BASE + N_VISUAL:
        return f"v{token_id - VISUAL_BASE}"
    if EVIDENCE_BASE <= token_id < EVIDENCE_BASE + N_ANSWERS:
        return f"e{token_id - EVIDENCE_BASE}"
    return f"x{token_id}"


def detokenize(token_ids) -> str:
    """Render generated ids as step text; content tokens are space separated.

    Rendering stops at the first end-of-turn token, which terminates a step.
    """
    parts = []
    prev_content = False
    for tid in token_ids:
        tid = int(tid)
        if tid == END_OF_TURN:
            break
        if tid in TAG_TEXT:
            parts.append(TAG_TEXT[tid])
            prev_content = False
        else:
            if prev_content:
                parts.append(" ")
            parts.append(token_text(tid))
            prev_content = True
    return "".join(parts)


_WORD_RE = re.compile(r"\S+")


def tokenize_instruction(text: str) -> list[int]:
    """Map instruction words to instruction ids with a platform-stable hash."""
    return [
        INSTRUCTION_BASE + zlib.crc32(w.lower().encode("utf-8")) % N_INSTRUCTION
        for w in _WORD_RE.findall(text)
    ]


def class_table(vocab_size: int) -> np.ndarray:
    """Steering class of every vocabulary id."""
    cls = np.full(vocab_size, CLS_OTHER, dtype=np.int64)
    cls[THINK_OPEN] = CLS_THINK_OPEN
    cls[THINK_CLOSE] = CLS_THINK_CLOSE
    cls[SILENT] = CLS_SILENT
    cls[RESPONSE] = CLS_RESPONSE
    cls[END_OF_TURN] = CLS_EOT
    cls[ANSWER_BASE:ANSWER_BASE + N_ANSWERS] = CLS_ANSWER
    cls[WORD_BASE:WORD_BASE + len(WORDS)] = CLS_WORD
    return cls


# grammar phases of a partially generated step
PHASE_START = 0
PHASE_THINK = 1
PHASE_ACTION = 2
PHASE_SILENT = 3
PHASE_RESPONSE_OPEN = 4
PHASE_RESPONSE_BODY = 5
N_PHASES = 6
PHASE_NAMES = ("start", "think", "action", "after_silent", "response_open", "response_body")


def next_phase(phase: int, token_id: int) -> int:
    if phase == PHASE_START:
        return PHASE_THINK if token_id == THINK_OPEN else PHASE_START
    if phase == PHASE_THINK:
        return PHASE_ACTION if token_id == THINK_CLOSE else PHASE_THINK
    if phase == PHASE_ACTION:
        if token_id == SILENT:
            return PHASE_SILENT
        if token_id == RESPONSE:
            return PHASE_RESPONSE_OPEN
        return PHASE_ACTION
    if phase == PHASE_RESPONSE_OPEN:
        return PHASE_RESPONSE_BODY
    return phase
