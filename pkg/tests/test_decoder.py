import numpy as np
import pytest

from streamreason import vocab
from streamreason.cache import CacheConfig, new_cache
from streamreason.core import Role, Token
from streamreason.decoder import (
    DecoderDims,
    SteerBias,
    copy_mask_from,
    forward_all,
    full_recompute_logits,
    incremental_step,
    init_decoder,
    prefill_block,
    steer_logits,
    weight_checksum,
)
from streamreason.errors import DimError, PositionError


def test_weights_pure_function_of_seed(params):
    again = init_decoder(7)
    assert weight_checksum(again) == weight_checksum(params)
    assert weight_checksum(init_decoder(8)) != weight_checksum(params)
    assert not params.embed.flags.writeable


@pytest.mark.parametrize("dims", [DecoderDims(embed_dim=60), DecoderDims(head_dim=15, embed_dim=60, num_heads=4),
                                  DecoderDims(vocab_size=100), DecoderDims(num_layers=0)])
def test_bad_dims(dims):
    with pytest.raises(DimError):
        init_decoder(1, dims)


def _fill(params, ids, start=0):
    cache = new_cache(CacheConfig(window_chunks=1, capacity_slots=64), params.dims.kv_shape)
    pos = np.arange(start, start + len(ids))
    last, k, v, ops = prefill_block(params, cache, ids, pos)
    cache.append_block(ids, [int(Role.VISUAL)] * len(ids), pos, [1] * len(ids), k, v)
    return cache, last, ops


def test_prefill_matches_oracle_and_ops(params):
    ids = np.array([130, 140, 150, 160, 5])
    cache, last, ops = _fill(params, ids)
    assert ops == 5 * 6 // 2
    expect = full_recompute_logits(params, (ids, np.arange(5)))
    assert np.max(np.abs(last - expect)) <= 1e-10
    assert np.max(np.abs(forward_all(params, (ids, np.arange(5)))[-1] - expect)) <= 1e-10


def test_incremental_over_gapped_positions(params):
    # a retained set with holes, as left behind by eviction
    ids = np.array([100, 130, 131, 132])
    pos = np.array([0, 7, 8, 20])
    cache = new_cache(CacheConfig(window_chunks=1, capacity_slots=64), params.dims.kv_shape)
    _, k, v, _ = prefill_block(params, cache, ids, pos)
    cache.append_block(ids, [int(Role.VISUAL)] * 4, pos, [1] * 4, k, v)
    logits, e = incremental_step(params, cache, Token(40, Role.REASONING, 25))
    expect = full_recompute_logits(params, (np.append(ids, 40), np.append(pos, 25)))
    assert np.max(np.abs(logits - expect)) <= 1e-10
    assert e.keys.shape == (2, 64)


def test_relative_position_invariance(params):
    # rotary scores depend on position differences only
    ids = np.array([100, 130, 131, 40])
    a = full_recompute_logits(params, (ids, np.array([0, 3, 4, 9])))
    b = full_recompute_logits(params, (ids, np.array([100, 103, 104, 109])))
    assert np.max(np.abs(a - b)) <= 1e-9


def test_incremental_rejects_stale_position(params):
    cache, _, _ = _fill(params, np.array([130, 131]))
    with pytest.raises(PositionError):
        incremental_step(params, cache, Token(40, Role.REASONING, 1))
    with pytest.raises(DimError):
        incremental_step(params, cache, Token(999, Role.REASONING, 5))


def test_steer_flat_round_trip():
    ref = SteerBias.reference()
    flat = ref.flatten()
    assert flat.size == ref.size == 6 * 2 * 8 + 6 == len(SteerBias.names())
    back = SteerBias.from_flat(flat)
    assert np.array_equal(back.table, ref.table) and np.array_equal(back.copy, ref.copy)
    with pytest.raises(DimError):
        SteerBias.from_flat(flat[:-1])


def test_steer_logits_adds_class_offsets_and_copy(params):
    base = np.zeros(params.dims.vocab_size)
    mask = copy_mask_from(np.array([vocab.evidence_id(vocab.answer_token("B")), 130]), params.dims.vocab_size)
    assert np.flatnonzero(mask).tolist() == [vocab.answer_token("B")]
    out = steer_logits(params, base, vocab.PHASE_RESPONSE_OPEN, True, mask)
    steer = params.steer
    row = steer.table[vocab.PHASE_RESPONSE_OPEN, 1]
    assert out[vocab.answer_token("A")] == row[vocab.CLS_ANSWER]
    assert out[vocab.answer_token("B")] == row[vocab.CLS_ANSWER] + steer.copy[vocab.PHASE_RESPONSE_OPEN]
    assert out[vocab.END_OF_TURN] == row[vocab.CLS_EOT]


def test_grammar_phases():
    p = vocab.PHASE_START
    for tok, expect in [(vocab.THINK_OPEN, vocab.PHASE_THINK), (40, vocab.PHASE_THINK),
                        (vocab.THINK_CLOSE, vocab.PHASE_ACTION), (vocab.RESPONSE, vocab.PHASE_RESPONSE_OPEN),
                        (vocab.answer_token("C"), vocab.PHASE_RESPONSE_BODY)]:
        p = vocab.next_phase(p, tok)
        assert p == expect


def test_detokenize_round_trip():
    toks = [vocab.THINK_OPEN, vocab.WORD_BASE, vocab.WORD_BASE + 1, vocab.THINK_CLOSE, vocab.RESPONSE,
            vocab.answer_token("yes"), vocab.END_OF_TURN]
    text = vocab.detokenize(toks)
    assert text.startswith("<think>") and "</think><response>yes" in text
    assert not text.endswith(vocab.TAG_TEXT[vocab.END_OF_TURN])
