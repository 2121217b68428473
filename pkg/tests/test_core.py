import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from streamreason import vocab
from streamreason.core import (
    Action,
    AnswerType,
    GroundTruth,
    Instruction,
    Role,
    StepOutput,
    StreamScript,
    Token,
    VisualChunk,
    evidence_answer,
    evidence_seed,
    load_stream_script,
    parse_step_output,
    render_step_output,
    save_stream_script,
    synthesize_visual_ids,
    synthesize_visual_tokens,
)
from streamreason.errors import FormatError, FormatErrorKind, IngestError, IngestErrorKind


# -- grammar ----------------------------------------------------------------

def test_parse_silent():
    out = parse_step_output("<think>door still closed</think><silent>", 3)
    assert out == StepOutput("door still closed", None, 3)
    assert out.action is Action.SILENT


def test_parse_response_with_empty_reasoning():
    out = parse_step_output("<think></think><response>B")
    assert out.reasoning == "" and out.response == "B"
    assert out.action is Action.RESPOND


@pytest.mark.parametrize("text, kind", [
    ("no tags at all", FormatErrorKind.MISSING_THINK),
    ("", FormatErrorKind.MISSING_THINK),
    (" <think>x</think><silent>", FormatErrorKind.MISSING_THINK),
    ("<think>x", FormatErrorKind.UNCLOSED_THINK),
    ("<think>a<silent></think><silent>", FormatErrorKind.UNCLOSED_THINK),
    ("<think><think></think><silent>", FormatErrorKind.UNCLOSED_THINK),
    ("<think>x</think>", FormatErrorKind.MISSING_ACTION),
    ("<think>x</think>B", FormatErrorKind.MISSING_ACTION),
    ("<think>x</think><silent>more", FormatErrorKind.TRAILING_CONTENT),
    ("<think>x</think><silent><silent>", FormatErrorKind.TRAILING_CONTENT),
    ("<think>x</think><response>B<silent>", FormatErrorKind.TRAILING_CONTENT),
    ("<think>x</think><response>", FormatErrorKind.EMPTY_RESPONSE),
    ("<think>x</think><response>   ", FormatErrorKind.EMPTY_RESPONSE),
])
def test_parse_errors(text, kind):
    with pytest.raises(FormatError) as info:
        parse_step_output(text)
    assert info.value.kind is kind


def test_render_examples():
    assert render_step_output(StepOutput("x")) == "<think>x</think><silent>"
    assert render_step_output(StepOutput("", "yes")) == "<think></think><response>yes"


_free_text = st.text(alphabet=st.characters(blacklist_categories=("Cs",)), max_size=40).filter(
    lambda s: not any(tag in s for tag in vocab.RESERVED_TAGS))


@settings(max_examples=300, deadline=None)
@given(reasoning=_free_text, response=st.one_of(st.none(), _free_text.filter(lambda s: s.strip())),
       idx=st.integers(0, 10_000))
def test_round_trip_property(reasoning, response, idx):
    step = StepOutput(reasoning, response, idx)
    assert parse_step_output(render_step_output(step), idx) == step


@settings(max_examples=300, deadline=None)
@given(st.lists(st.sampled_from(list("ab <>/") + list(vocab.RESERVED_TAGS)), max_size=12).map("".join))
def test_parse_is_total(text):
    try:
        out = parse_step_output(text)
    except FormatError as err:
        assert isinstance(err.kind, FormatErrorKind)
    else:
        assert render_step_output(out) == text


# -- tokens and chunks ---------------------------------------------------------

def test_token_rejects_negative():
    with pytest.raises(ValueError):
        Token(-1, Role.VISUAL, 0)


def test_chunk_token_count_at_two_fps():
    chunk = VisualChunk.from_times(1, 0.0, 1.0, 99)
    assert chunk.frame_count == 2 and chunk.token_count == 32
    toks = synthesize_visual_tokens(chunk, start_position=10)
    assert len(toks) == 32
    assert all(t.role is Role.VISUAL for t in toks)
    assert [t.position for t in toks] == list(range(10, 42))


def test_synthesis_deterministic_and_empty():
    chunk = VisualChunk.from_times(3, 2.0, 3.0, 12345)
    assert np.array_equal(synthesize_visual_ids(chunk), synthesize_visual_ids(chunk))
    empty = VisualChunk(1, 0.0, 1.0, 0, 16, 5)
    assert synthesize_visual_tokens(empty) == []


def test_synthesis_golden_prefix():
    ids = synthesize_visual_ids(VisualChunk.from_times(1, 0.0, 1.0, 42))
    assert ids[:8].tolist() == [194, 214, 209, 216, 138, 173, 163, 219]


def test_evidence_seed_round_trip():
    for ans in range(vocab.ANSWER_BASE, vocab.ANSWER_BASE + vocab.N_ANSWERS):
        seed = evidence_seed(777, ans)
        assert evidence_answer(seed) == ans
        ids = synthesize_visual_ids(VisualChunk.from_times(2, 1.0, 2.0, seed))
        assert vocab.evidence_id(ans) in ids
    assert evidence_answer(777) is None
    plain = synthesize_visual_ids(VisualChunk.from_times(2, 1.0, 2.0, 777))
    assert plain.max() < vocab.EVIDENCE_BASE


def test_instruction_tokens():
    ins = Instruction.from_text("Tell me when the door opens")
    toks = ins.tokens(0)
    assert len(toks) == 6 and all(t.role is Role.INSTRUCTION for t in toks)
    assert all(vocab.INSTRUCTION_BASE <= t.id < vocab.VISUAL_BASE for t in toks)


def test_answer_type_parse():
    assert AnswerType.parse("multiple_choice") is AnswerType.MULTIPLE_CHOICE
    assert AnswerType.parse("Binary") is AnswerType.BINARY
    with pytest.raises(ValueError):
        AnswerType.parse("essay")


# -- script files ------------------------------------------------------------------

def _write(path, header, chunks):
    lines = [json.dumps(header)] + [json.dumps(c) for c in chunks]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def _header(t_gt=7, answer="yes", kind="Binary"):
    return {"instruction": "Is the door open?", "fps": 2.0, "tokens_per_frame": 16,
            "ground_truth": {"answer": answer, "answer_type": kind, "t_gt": t_gt}}


def _chunks(n):
    return [{"index": i, "start_time": i - 1.0, "end_time": float(i), "feature_seed": i} for i in range(1, n + 1)]


def test_load_ten_chunk_script(tmp_path):
    p = tmp_path / "s.jsonl"
    _write(p, _header(), _chunks(10))
    script = load_stream_script(p)
    assert len(script.chunks) == 10
    assert script.ground_truth == GroundTruth("yes", AnswerType.BINARY, 7)


def test_save_load_round_trip(tmp_path):
    p = tmp_path / "s.jsonl"
    _write(p, _header(t_gt=3), _chunks(4))
    script = load_stream_script(p)
    q = tmp_path / "t.jsonl"
    save_stream_script(script, q)
    assert load_stream_script(q) == script


def test_chunk_gap_rejected(tmp_path):
    chunks = _chunks(4)
    chunks[3]["start_time"] = 4.0
    chunks[3]["end_time"] = 5.0
    p = tmp_path / "s.jsonl"
    _write(p, _header(t_gt=2), chunks)
    with pytest.raises(IngestError) as info:
        load_stream_script(p)
    assert info.value.kind is IngestErrorKind.NON_CONTIGUOUS_CHUNKS
    assert info.value.line == 5


def test_empty_file_rejected(tmp_path):
    p = tmp_path / "s.jsonl"
    p.write_text("", encoding="utf-8")
    with pytest.raises(IngestError) as info:
        load_stream_script(p)
    assert info.value.kind is IngestErrorKind.PARSE


@pytest.mark.parametrize("gt", [
    {"answer": "yes", "answer_type": "Binary", "t_gt": 0},
    {"answer": "yes", "answer_type": "Binary", "t_gt": 9},
    {"answer": "maybe", "answer_type": "Binary", "t_gt": 1},
    {"answer": "F", "answer_type": "MultipleChoice", "t_gt": 1},
    {"answer": "21", "answer_type": "Counting", "t_gt": 1},
    {"answer": "2", "answer_type": "Essay", "t_gt": 1},
])
def test_bad_ground_truth(tmp_path, gt):
    header = _header()
    header["ground_truth"] = gt
    p = tmp_path / "s.jsonl"
    _write(p, header, _chunks(8))
    with pytest.raises(IngestError) as info:
        load_stream_script(p)
    assert info.value.kind is IngestErrorKind.BAD_GROUND_TRUTH


def test_bad_json_line_number(tmp_path):
    p = tmp_path / "s.jsonl"
    p.write_text(json.dumps(_header(t_gt=1)) + "\n{not json\n", encoding="utf-8")
    with pytest.raises(IngestError) as info:
        load_stream_script(p)
    assert info.value.kind is IngestErrorKind.PARSE and info.value.line == 2


def test_oversized_chunk(tmp_path):
    chunks = _chunks(3)
    chunks[1]["end_time"] = 3.0
    chunks[2]["start_time"] = 3.0
    chunks[2]["end_time"] = 4.0
    p = tmp_path / "s.jsonl"
    _write(p, _header(t_gt=1), chunks)
    with pytest.raises(IngestError) as info:
        load_stream_script(p, max_chunk_tokens=32)
    assert info.value.kind is IngestErrorKind.OVERSIZED_CHUNK


def test_script_dataclass_len():
    s = StreamScript(Instruction.from_text("x"), (VisualChunk.from_times(1, 0, 1, 1),),
                     GroundTruth("A", AnswerType.MULTIPLE_CHOICE, 1))
    assert len(s) == 1 and s.max_chunk_tokens == 32
