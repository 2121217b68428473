"""Fixed-weight causal attention decoder used as the policy backbone.

Keys and values of every layer are projected from the (normalized) token
embedding and rotated by the token's stored absolute position; queries come
from the residual stream. A cached entry therefore depends only on its own
token id and position, so decoding over an evicted cache is exactly the same
computation as decoding from scratch over the retained tokens.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from . import vocab
from .cache import CacheEntry, CacheState, KVShape
from .core import Role, Token
from .errors import DimError, PositionError

ROPE_BASE = 10000.0
_EPS = 1e-6


@dataclass(frozen=True)
class DecoderDims:
    vocab_size: int = 256
    embed_dim: int = 64
    num_heads: int = 4
    head_dim: int = 16
    num_layers: int = 2

    def validate(self) -> None:
        if min(self.vocab_size, self.embed_dim, self.num_heads, self.head_dim, self.num_layers) < 1:
            raise DimError("all decoder dimensions must be positive")
        if self.embed_dim != self.num_heads * self.head_dim:
            raise DimError(f"embed_dim {self.embed_dim} != num_heads {self.num_heads} x head_dim {self.head_dim}")
        if self.head_dim % 2:
            raise DimError("head_dim must be even for rotary position mixing")
        if self.vocab_size < vocab.MIN_VOCAB:
            raise DimError(f"vocab_size must be at least {vocab.MIN_VOCAB}")

    @property
    def kv_shape(self) -> KVShape:
        return KVShape(self.num_layers, self.embed_dim)


@dataclass(frozen=True)
class SteerBias:
    """Trainable logit offsets indexed by (grammar phase, evidence visible, token class).

    ``copy`` adds a per-phase bonus to answer tokens whose evidence feature is
    visible in the cache.
    """

    table: np.ndarray  # (N_PHASES, 2, N_CLASSES)
    copy: np.ndarray   # (N_PHASES,)

    @property
    def size(self) -> int:
        return self.table.size + self.copy.size

    def flatten(self) -> np.ndarray:
        return np.concatenate([self.table.ravel(), self.copy])

    @classmethod
    def from_flat(cls, flat) -> "SteerBias":
        flat = np.asarray(flat, dtype=np.float64)
        n = vocab.N_PHASES * 2 * vocab.N_CLASSES
        if flat.shape != (n + vocab.N_PHASES,):
            raise DimError(f"expected {n + vocab.N_PHASES} steering parameters, got {flat.shape}")
        return cls(flat[:n].reshape(vocab.N_PHASES, 2, vocab.N_CLASSES).copy(), flat[n:].copy())

    @staticmethod
    def names() -> list[str]:
        out = [f"bias[{p}|evidence={f}|{c}]" for p in vocab.PHASE_NAMES for f in (0, 1) for c in vocab.CLASS_NAMES]
        return out + [f"copy[{p}]" for p in vocab.PHASE_NAMES]

    @classmethod
    def zeros(cls) -> "SteerBias":
        return cls(np.zeros((vocab.N_PHASES, 2, vocab.N_CLASSES)), np.zeros(vocab.N_PHASES))

    @classmethod
    def reference(cls) -> "SteerBias":
        """Starting policy: mostly grammatical, responds at random times, weak answer copying."""
        t = np.zeros((vocab.N_PHASES, 2, vocab.N_CLASSES))
        t[vocab.PHASE_START, :, vocab.CLS_THINK_OPEN] = 11.0
        t[vocab.PHASE_THINK, :, vocab.CLS_WORD] = 2.5
        t[vocab.PHASE_THINK, :, vocab.CLS_THINK_CLOSE] = 6.0
        t[vocab.PHASE_THINK, :, [vocab.CLS_THINK_OPEN, vocab.CLS_SILENT, vocab.CLS_RESPONSE,
                                vocab.CLS_EOT, vocab.CLS_ANSWER, vocab.CLS_OTHER]] = -3.0
        t[vocab.PHASE_ACTION, :, vocab.CLS_SILENT] = 10.0
        t[vocab.PHASE_ACTION, :, vocab.CLS_RESPONSE] = 10.0
        t[vocab.PHASE_SILENT, :, vocab.CLS_EOT] = 11.0
        t[vocab.PHASE_RESPONSE_OPEN, :, vocab.CLS_ANSWER] = 6.0
        t[vocab.PHASE_RESPONSE_OPEN, :, vocab.CLS_EOT] = -4.0
        t[vocab.PHASE_RESPONSE_BODY, :, vocab.CLS_EOT] = 10.0
        copy = np.zeros(vocab.N_PHASES)
        copy[vocab.PHASE_RESPONSE_OPEN] = 2.0
        return cls(t, copy)


def _frozen(a: np.ndarray) -> np.ndarray:
    a.flags.writeable = False
    return a


@dataclass(frozen=True)
class DecoderParams:
    seed: int
    dims: DecoderDims
    embed: np.ndarray    # (V, D)
    wq: np.ndarray       # (L, D, D)
    wk: np.ndarray
    wv: np.ndarray
    wo: np.ndarray
    w_up: np.ndarray     # (L, D, 2D)
    w_down: np.ndarray   # (L, 2D, D)
    unembed: np.ndarray  # (D, V)
    steer: SteerBias = field(default_factory=SteerBias.reference)
    # derived per-vocabulary tables, built lazily; weights never change
    _memo: dict = field(default_factory=dict, init=False, repr=False, compare=False)

    def with_steer(self, steer: SteerBias) -> "DecoderParams":
        out = replace(self, steer=steer)
        object.__setattr__(out, "_memo", self._memo)
        return out

    @property
    def token_classes(self) -> np.ndarray:
        return _class_table(self.dims.vocab_size)


_CLASS_TABLES: dict[int, np.ndarray] = {}


def _class_table(vocab_size: int) -> np.ndarray:
    if vocab_size not in _CLASS_TABLES:
        _CLASS_TABLES[vocab_size] = _frozen(vocab.class_table(vocab_size))
    return _CLASS_TABLES[vocab_size]


def init_decoder(seed: int = 7, dims: DecoderDims | None = None, steer: SteerBias | None = None) -> DecoderParams:
    """Weights are a pure function of (seed, dims)."""
    dims = dims or DecoderDims()
    dims.validate()
    V, D, L = dims.vocab_size, dims.embed_dim, dims.num_layers
    rng = np.random.default_rng([seed, V, D, dims.num_heads, dims.head_dim, L])
    scale = 1.0 / np.sqrt(D)

    def mat(*shape, s=scale):
        return _frozen(rng.normal(0.0, s, size=shape))

    return DecoderParams(
        seed=seed,
        dims=dims,
        embed=mat(V, D, s=1.0),
        wq=mat(L, D, D),
        wk=mat(L, D, D),
        wv=mat(L, D, D),
        wo=mat(L, D, D),
        w_up=mat(L, D, 2 * D),
        w_down=mat(L, 2 * D, D, s=1.0 / np.sqrt(2 * D)),
        unembed=mat(D, V),
        steer=steer if steer is not None else SteerBias.reference(),
    )


def weight_checksum(params: DecoderParams) -> str:
    h = hashlib.sha256()
    for name in ("embed", "wq", "wk", "wv", "wo", "w_up", "w_down", "unembed"):
        h.update(np.ascontiguousarray(getattr(params, name), dtype="<f8").tobytes())
    return h.hexdigest()


# ---------------------------------------------------------------------------
# cached path
# ---------------------------------------------------------------------------

def _rms(x):
    return x / np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + _EPS)


def _inv_freq(head_dim: int) -> np.ndarray:
    return ROPE_BASE ** (-np.arange(head_dim // 2) / (head_dim // 2))


def _rotate(x: np.ndarray, positions: np.ndarray, head_dim: int) -> np.ndarray:
    """Rotary mixing; x is (..., n, H, d) with one position per row n."""
    half = head_dim // 2
    angle = np.asarray(positions, dtype=np.float64)[..., None] * _inv_freq(head_dim)  # (n, half)
    cos = np.cos(angle)[..., None, :]
    sin = np.sin(angle)[..., None, :]
    x1, x2 = x[..., :half], x[..., half:]
    return np.concatenate([x1 * cos - x2 * sin, x1 * sin + x2 * cos], axis=-1)


def _kv_table(params: DecoderParams) -> tuple[np.ndarray, np.ndarray]:
    """Unrotated keys and values of every vocabulary id, shape (V, L, D)."""
    tab = params._memo.get("kv")
    if tab is None:
        h = _rms(params.embed)
        tab = (_frozen(np.einsum("nd,lde->nle", h, params.wk)),
               _frozen(np.einsum("nd,lde->nle", h, params.wv)))
        params._memo["kv"] = tab
    return tab


def token_kv(params: DecoderParams, token_ids, positions) -> tuple[np.ndarray, np.ndarray]:
    """Keys and values of tokens, shape (n, L, D); keys are position-rotated."""
    d = params.dims
    ids = np.asarray(token_ids)
    k_tab, v_tab = _kv_table(params)
    k, v = k_tab[ids], v_tab[ids]                                   # (n, L, D)
    n = k.shape[0]
    k = _rotate(k.reshape(n, d.num_layers, d.num_heads, d.head_dim).transpose(1, 0, 2, 3),
                np.asarray(positions), d.head_dim)
    k = k.transpose(1, 0, 2, 3).reshape(n, d.num_layers, d.embed_dim)
    return k, v


def _head_scatter(H: int, hd: int) -> tuple[np.ndarray, np.ndarray]:
    dims = np.arange(H * hd)
    return dims, dims // hd


def _decode_row(params: DecoderParams, token_id: int, position: int, cache: CacheState,
                k_new: np.ndarray, v_new: np.ndarray) -> np.ndarray:
    """Fixed-shape single-token step over the live cache plus the token itself."""
    d = params.dims
    H, hd, D = d.num_heads, d.head_dim, d.embed_dim
    half = hd // 2
    n = cache.live_count
    angle = position * _inv_freq(hd)
    cos, sin = np.cos(angle), np.sin(angle)
    rows, cols = _head_scatter(H, hd)
    diag = np.arange(H)
    scale = 1.0 / np.sqrt(hd)
    x = params.embed[token_id].copy()
    for layer in range(d.num_layers):
        h = x / np.sqrt(x @ x / D + _EPS)
        q = (h @ params.wq[layer]).reshape(H, hd)
        q = np.concatenate([q[:, :half] * cos - q[:, half:] * sin,
                            q[:, :half] * sin + q[:, half:] * cos], axis=1) * scale
        # block-diagonal query so every head scores the cache in one gemv
        qb = np.zeros((D, H))
        qb[rows, cols] = q.ravel()
        s_cache = cache.keys[layer, :n] @ qb                 # (n, H)
        s_self = k_new[layer] @ qb                           # (H,)
        m = np.maximum(s_cache.max(axis=0), s_self) if n else s_self
        p_cache = np.exp(s_cache - m)
        p_self = np.exp(s_self - m)
        z = p_cache.sum(axis=0) + p_self
        mixed = (p_cache.T @ cache.values[layer, :n]).reshape(H, H, hd)[diag, diag]
        att = (mixed + p_self[:, None] * v_new[layer].reshape(H, hd)) / z[:, None]
        x = x + att.reshape(D) @ params.wo[layer]
        h = x / np.sqrt(x @ x / D + _EPS)
        x = x + np.tanh(h @ params.w_up[layer]) @ params.w_down[layer]
    return (x / np.sqrt(x @ x / D + _EPS)) @ params.unembed


def _prefill_rows(params: DecoderParams, token_ids, positions, cache: CacheState,
                  new_k: np.ndarray, new_v: np.ndarray) -> np.ndarray:
    """Residual stream of a block of new rows attending to the cache and causally to each other."""
    d = params.dims
    H, hd = d.num_heads, d.head_dim
    n = cache.live_count
    k_rows = len(token_ids)
    x = params.embed[token_ids].copy()
    future = np.triu(np.ones((k_rows, k_rows), dtype=bool), 1)
    for layer in range(d.num_layers):
        q = (_rms(x) @ params.wq[layer]).reshape(k_rows, H, hd)
        q = _rotate(q, positions, hd) / np.sqrt(hd)
        kc, vc = cache.keys[layer, :n], cache.values[layer, :n]
        kn, vn = new_k[:, layer], new_v[:, layer]
        out = np.empty((k_rows, H, hd))
        for h in range(H):
            sl = slice(h * hd, (h + 1) * hd)
            s_old = q[:, h] @ kc[:, sl].T                    # (k, n)
            s_new = q[:, h] @ kn[:, sl].T                    # (k, k)
            s_new[future] = -np.inf
            m = s_new.max(axis=1, keepdims=True)
            if n:
                m = np.maximum(m, s_old.max(axis=1, keepdims=True))
            p_old = np.exp(s_old - m)
            p_new = np.exp(s_new - m)
            z = p_old.sum(axis=1, keepdims=True) + p_new.sum(axis=1, keepdims=True)
            out[:, h] = (p_old @ vc[:, sl] + p_new @ vn[:, sl]) / z
        x = x + out.reshape(k_rows, d.embed_dim) @ params.wo[layer]
        x = x + np.tanh(_rms(x) @ params.w_up[layer]) @ params.w_down[layer]
    return _rms(x) @ params.unembed


def _check_cache(params: DecoderParams, cache: CacheState) -> None:
    if cache.kv_shape != params.dims.kv_shape:
        raise DimError(f"cache payload {cache.kv_shape} does not match decoder {params.dims.kv_shape}")


def role_for(token_id: int) -> Role:
    """Cache role of a generated token."""
    if token_id in (vocab.SILENT, vocab.RESPONSE):
        return Role.ACTION_MARKER
    if token_id in (vocab.THINK_OPEN, vocab.THINK_CLOSE, vocab.END_OF_TURN):
        return Role.CONTROL
    return Role.REASONING


def incremental_step(params: DecoderParams, cache: CacheState, token: Token,
                     chunk_tag: int = 0) -> tuple[np.ndarray, CacheEntry]:
    """One fixed-shape decode step: next-token logits plus the entry to append.

    The cache is not modified; the caller appends the returned entry.
    """
    _check_cache(params, cache)
    if token.position <= cache.last_position():
        raise PositionError(f"position {token.position} does not follow cached position {cache.last_position()}")
    if not 0 <= token.id < params.dims.vocab_size:
        raise DimError(f"token id {token.id} outside vocabulary")
    k, v = token_kv(params, [token.id], [token.position])
    logits = _decode_row(params, token.id, token.position, cache, k[0], v[0])
    return logits, CacheEntry(token, k[0], v[0], chunk_tag if token.role == Role.VISUAL else 0)


def prefill_block(params: DecoderParams, cache: CacheState, token_ids, positions):
    """Variable-length path: K/V and causal queries for a block of new tokens.

    Returns (logits of the last row, keys, values, attention_ops). The cache is
    not modified.
    """
    _check_cache(params, cache)
    token_ids = np.asarray(token_ids, dtype=np.int64)
    positions = np.asarray(positions, dtype=np.int64)
    k_rows = len(token_ids)
    if k_rows == 0:
        raise DimError("empty prefill block")
    if token_ids.min() < 0 or token_ids.max() >= params.dims.vocab_size:
        raise DimError("token id outside vocabulary")
    k, v = token_kv(params, token_ids, positions)
    logits = _prefill_rows(params, token_ids, positions, cache, k, v)
    n = cache.live_count
    ops = k_rows * n + k_rows * (k_rows + 1) // 2
    return logits[-1], k, v, ops


# ---------------------------------------------------------------------------
# recomputation oracle: no cache, relative rotary scores, separate code path
# ---------------------------------------------------------------------------

def _phasors(positions: np.ndarray, head_dim: int) -> np.ndarray:
    half = head_dim // 2
    theta = 1.0 / ROPE_BASE ** (np.arange(half) / half)
    ang = positions[:, None] * theta
    return (np.cos(ang) + 1j * np.sin(ang))[:, None, :]      # (n, 1, half)


def _complex_rotate(x: np.ndarray, phasor: np.ndarray) -> np.ndarray:
    half = x.shape[-1] // 2
    z = (x[..., :half] + 1j * x[..., half:]) * phasor
    return np.concatenate([z.real, z.imag], axis=-1)


def _check_sequence(params: DecoderParams, retained) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(retained, tuple) and len(retained) == 2 and isinstance(retained[0], np.ndarray):
        ids, pos = (np.asarray(a, dtype=np.int64) for a in retained)
    else:
        pairs = [(t.id, t.position) if isinstance(t, Token) else (int(t[0]), int(t[1])) for t in retained]
        ids = np.array([p[0] for p in pairs], dtype=np.int64).reshape(-1)
        pos = np.array([p[1] for p in pairs], dtype=np.int64).reshape(-1)
    if ids.size == 0 or ids.shape != pos.shape:
        raise DimError("empty or ragged sequence")
    if np.any(np.diff(pos) <= 0):
        raise PositionError("retained sequence must be sorted by strictly increasing position")
    if ids.min() < 0 or ids.max() >= params.dims.vocab_size:
        raise DimError("token id outside vocabulary")
    return ids, pos


def _oracle_tables(params: DecoderParams):
    """Per-layer key and value projections of the whole vocabulary as complex halves."""
    tab = params._memo.get("oracle")
    if tab is None:
        d = params.dims
        H, hd, half = d.num_heads, d.head_dim, d.head_dim // 2
        e = params.embed
        normed = e / np.sqrt((e ** 2).mean(axis=1, keepdims=True) + _EPS)
        keys, vals = [], []
        for layer in range(d.num_layers):
            k = (normed @ params.wk[layer]).reshape(-1, H, hd)
            keys.append(k[..., :half] + 1j * k[..., half:])              # (V, H, half)
            vals.append((normed @ params.wv[layer]).reshape(-1, H * hd))
        tab = params._memo["oracle"] = (keys, vals)
    return tab


def full_recompute_logits(params: DecoderParams, retained: Sequence) -> np.ndarray:
    """Logits at the final position, decoded from scratch over exactly ``retained``.

    ``retained`` holds Tokens, (id, position) pairs, or an (ids, positions)
    tuple of arrays, with original positions.

    Keys depend only on (id, position), so each score is the query's product
    with the unrotated vocabulary key, turned by the relative angle.
    """
    ids, pos = _check_sequence(params, retained)
    d = params.dims
    H, hd, V = d.num_heads, d.head_dim, d.vocab_size
    half = hd // 2
    keys, vals = _oracle_tables(params)
    theta = 1.0 / ROPE_BASE ** (np.arange(half) / half)
    rel = np.exp(-1j * np.outer(pos[-1] - pos, theta))                 # (n, half)
    slot = ids[None, :] + V * np.arange(H)[:, None]                   # (H, n)
    x = params.embed[ids[-1]].copy()
    for layer in range(d.num_layers):
        hx = x / np.sqrt((x ** 2).mean() + _EPS)
        qr = (hx @ params.wq[layer]).reshape(H, hd)
        qc = qr[:, :half] + 1j * qr[:, half:]                         # (H, half)
        # conj(q) k over the vocabulary, then one relative turn per retained token
        qk = np.conj(qc)[None] * keys[layer]                          # (V, H, half)
        s = np.einsum("nhf,nf->hn", qk[ids], rel).real / np.sqrt(hd)
        w = np.exp(s - s.max(axis=1, keepdims=True))
        w /= w.sum(axis=1, keepdims=True)
        # attention mass per vocabulary id, then one small matmul per head
        mass = np.bincount(slot.ravel(), weights=w.ravel(), minlength=H * V).reshape(H, V)
        vt = vals[layer].reshape(V, H, hd)
        out = np.einsum("hv,vhd->hd", mass, vt)
        x = x + out.reshape(-1) @ params.wo[layer]
        hx = x / np.sqrt((x ** 2).mean() + _EPS)
        x = x + np.tanh(hx @ params.w_up[layer]) @ params.w_down[layer]
    return (x / np.sqrt((x ** 2).mean() + _EPS)) @ params.unembed


def forward_all(params: DecoderParams, retained: Sequence) -> np.ndarray:
    """Full causal forward over every row of a short sequence, shape (n, V).

    Quadratic in memory; meant for tests on short sequences.
    """
    ids, pos = _check_sequence(params, retained)
    d = params.dims
    H, hd = d.num_heads, d.head_dim
    n = len(ids)
    emb = params.embed[ids]
    normed = emb / np.sqrt((emb ** 2).mean(axis=1, keepdims=True) + _EPS)
    mask = np.tril(np.ones((n, n), dtype=bool))
    phasor = _phasors(pos.astype(np.float64), hd)
    x = emb.copy()
    for layer in range(d.num_layers):
        keys = _complex_rotate((normed @ params.wk[layer]).reshape(n, H, hd), phasor)
        vals = (normed @ params.wv[layer]).reshape(n, H, hd)
        hx = x / np.sqrt((x ** 2).mean(axis=1, keepdims=True) + _EPS)
        q = _complex_rotate((hx @ params.wq[layer]).reshape(n, H, hd), phasor)
        s = np.einsum("qhd,khd->hqk", q, keys) / np.sqrt(hd)
        s = np.where(mask[None], s, -np.inf)
        w = np.exp(s - s.max(axis=-1, keepdims=True))
        w /= w.sum(axis=-1, keepdims=True)
        x = x + np.einsum("hqk,khd->qhd", w, vals).reshape(n, -1) @ params.wo[layer]
        hx = x / np.sqrt((x ** 2).mean(axis=1, keepdims=True) + _EPS)
        x = x + np.tanh(hx @ params.w_up[layer]) @ params.w_down[layer]
    return (x / np.sqrt((x ** 2).mean(axis=1, keepdims=True) + _EPS)) @ params.unembed


# ---------------------------------------------------------------------------
# steering
# ---------------------------------------------------------------------------

def copy_mask_from(visual_ids: np.ndarray, vocab_size: int) -> np.ndarray:
    """Answer ids whose evidence feature occurs among ``visual_ids``."""
    mask = np.zeros(vocab_size, dtype=bool)
    ev = visual_ids[(visual_ids >= vocab.EVIDENCE_BASE) & (visual_ids < vocab.EVIDENCE_BASE + vocab.N_ANSWERS)]
    if ev.size:
        mask[np.unique(ev) - vocab.EVIDENCE_BASE + vocab.ANSWER_BASE] = True
    return mask


def steer_logits(params: DecoderParams, base: np.ndarray, phase: int, evidence: bool,
                 copy_mask: np.ndarray, steer: SteerBias | None = None) -> np.ndarray:
    """Policy logits = decoder logits + steering offsets for the current grammar state."""
    steer = steer if steer is not None else params.steer
    out = base + steer.table[phase, int(evidence)][params.token_classes]
    if steer.copy[phase]:
        out = out + steer.copy[phase] * copy_mask
    return out
