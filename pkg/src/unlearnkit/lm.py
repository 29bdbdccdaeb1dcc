"""Tiny decoder-only transformer LM over raw bytes.

The model is deliberately small: byte-level vocabulary (256 bytes plus BOS
and EOT specials), learned positions, pre-LayerNorm blocks, GELU MLPs and
an untied output head. Parameters live in a flat name -> ndarray map with
a fixed sorted schema, which is what makes whole-model weight arithmetic
(deltas between training states) well defined.

Scoring entry points (`logits_batch`, `greedy_decode`, `token_logprobs`)
accept any object exposing ``logits_batch(ids) -> [B, T, V]`` together
with ``vocab_size``/``eot_id``/``max_seq_len`` attributes, so tests can
substitute hand-built fixture models.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as T
from .tensor import Tensor

BYTE_VOCAB = 256
BOS_ID = 256
EOT_ID = 257
VOCAB_SIZE = 258

_NEG_INF = -1e9


class ConfigError(ValueError):
    pass


class LengthError(ValueError):
    pass


class TokenizerError(ValueError):
    pass


# ---------------------------------------------------------------------------
# byte tokenizer


def encode(text: str | bytes) -> list[int]:
    """Byte-level encode: BOS followed by the UTF-8 (or raw) bytes.

    Never emits the specials for content; an empty string encodes to [BOS].
    """
    raw = text.encode("utf-8") if isinstance(text, str) else bytes(text)
    return [BOS_ID] + list(raw)


def decode(ids: Sequence[int]) -> str:
    """Inverse of encode: drops specials, errors on out-of-vocab ids."""
    out = bytearray()
    for i in ids:
        i = int(i)
        if i >= VOCAB_SIZE or i < 0:
            raise TokenizerError(f"id {i} outside vocabulary of size {VOCAB_SIZE}")
        if i < BYTE_VOCAB:
            out.append(i)
    return out.decode("utf-8", errors="replace")


# ---------------------------------------------------------------------------
# model definition


@dataclass(frozen=True)
class LmConfig:
    vocab_size: int = VOCAB_SIZE
    d_model: int = 128
    n_layers: int = 2
    n_heads: int = 4
    d_ff: int = 512
    max_seq_len: int = 256
    seed: int = 0

    def __post_init__(self):
        if min(self.vocab_size, self.d_model, self.n_layers, self.n_heads, self.d_ff) < 1:
            raise ConfigError("all model dimensions must be positive")
        if self.d_model % self.n_heads != 0:
            raise ConfigError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        if self.max_seq_len < 2:
            raise ConfigError("max_seq_len must be at least 2")
        if self.n_layers > 99:
            raise ConfigError("layer names are zero-padded to two digits")


def param_schema(config: LmConfig) -> list[tuple[str, tuple[int, ...]]]:
    """The fixed (sorted) name -> shape schema for a configuration.

    Two models built from equal configs share this schema exactly, key set
    and order, which is the prerequisite for state-delta algebra.
    """
    d, v, s, ff = config.d_model, config.vocab_size, config.max_seq_len, config.d_ff
    names: dict[str, tuple[int, ...]] = {
        "embed.pos": (s, d),
        "embed.tok": (v, d),
        "final_ln.bias": (d,),
        "final_ln.gain": (d,),
        "head.w": (d, v),
    }
    for i in range(config.n_layers):
        p = f"layer{i:02d}"
        names[f"{p}.attn.wk"] = (d, d)
        names[f"{p}.attn.wo"] = (d, d)
        names[f"{p}.attn.wq"] = (d, d)
        names[f"{p}.attn.wv"] = (d, d)
        names[f"{p}.ln1.bias"] = (d,)
        names[f"{p}.ln1.gain"] = (d,)
        names[f"{p}.ln2.bias"] = (d,)
        names[f"{p}.ln2.gain"] = (d,)
        names[f"{p}.mlp.b1"] = (ff,)
        names[f"{p}.mlp.b2"] = (d,)
        names[f"{p}.mlp.w1"] = (d, ff)
        names[f"{p}.mlp.w2"] = (ff, d)
    return sorted(names.items())


def param_count(config: LmConfig) -> int:
    return sum(int(np.prod(shape)) for _, shape in param_schema(config))


@dataclass
class LmModel:
    """Parameters (name -> ndarray, sorted schema order) plus the config."""

    params: dict[str, np.ndarray]
    config: LmConfig

    @property
    def vocab_size(self) -> int:
        return self.config.vocab_size

    @property
    def eot_id(self) -> int:
        return EOT_ID

    @property
    def max_seq_len(self) -> int:
        return self.config.max_seq_len

    def logits_batch(self, ids: np.ndarray) -> np.ndarray:
        tensors = {k: Tensor(v) for k, v in self.params.items()}
        return graph_logits(tensors, self.config, ids).data


def build_model(config: LmConfig, dtype=np.float32) -> LmModel:
    """Initialize parameters: seeded normal(0, 0.02) draws in sorted schema
    order, except layer-norm gains (ones) and layer-norm biases (zeros).
    Identical config and seed give bit-identical parameters.
    """
    rng = np.random.default_rng(config.seed)
    params: dict[str, np.ndarray] = {}
    for name, shape in param_schema(config):
        if name.endswith(".gain"):
            arr = np.ones(shape, dtype=np.float64)
        elif name.endswith(".bias"):
            arr = np.zeros(shape, dtype=np.float64)
        else:
            arr = rng.normal(0.0, 0.02, size=shape)
        params[name] = arr.astype(dtype)
    return LmModel(params=params, config=config)


# ---------------------------------------------------------------------------
# forward pass

_mask_cache: dict[tuple[int, str], np.ndarray] = {}


def _causal_mask(t: int, dtype) -> np.ndarray:
    key = (t, np.dtype(dtype).name)
    m = _mask_cache.get(key)
    if m is None:
        m = np.triu(np.full((t, t), _NEG_INF, dtype=dtype), k=1)
        _mask_cache[key] = m
    return m


def graph_logits(params: dict[str, Tensor], config: LmConfig, ids: np.ndarray) -> Tensor:
    """Run the transformer on a [B, T] id batch, returning [B, T, V] logits.

    Builds an autodiff graph when the parameter tensors require gradients.
    Logits at position t depend only on ids[:, : t + 1] (causal masking).
    """
    ids = np.asarray(ids, dtype=np.int64)
    if ids.ndim != 2:
        raise T.ShapeError(f"expected [batch, time] ids, got shape {ids.shape}")
    b, t = ids.shape
    if t > config.max_seq_len:
        raise LengthError(f"sequence length {t} exceeds max_seq_len {config.max_seq_len}")
    if t == 0:
        raise LengthError("empty sequence")
    d, h = config.d_model, config.n_heads
    hd = d // h
    dtype = params["embed.tok"].dtype

    x = T.add(
        T.embedding_lookup(params["embed.tok"], ids),
        T.embedding_lookup(params["embed.pos"], np.arange(t)),
    )
    mask = _causal_mask(t, dtype)[None, :, :]
    inv_sqrt_hd = 1.0 / np.sqrt(hd)

    def proj(y, w):  # [B,T,d] @ [d,out]
        flat = T.matmul(T.reshape(y, (b * t, y.shape[-1])), w)
        return T.reshape(flat, (b, t, w.shape[-1]))

    def heads(y):  # [B,T,d] -> [B*h, T, hd]
        return T.reshape(T.transpose(T.reshape(y, (b, t, h, hd)), (0, 2, 1, 3)), (b * h, t, hd))

    for i in range(config.n_layers):
        p = f"layer{i:02d}"
        ln1 = T.layer_norm(x, params[f"{p}.ln1.gain"], params[f"{p}.ln1.bias"])
        q = heads(proj(ln1, params[f"{p}.attn.wq"]))
        k = heads(proj(ln1, params[f"{p}.attn.wk"]))
        v = heads(proj(ln1, params[f"{p}.attn.wv"]))
        scores = T.add_const(T.scale(T.matmul(q, T.transpose(k, (0, 2, 1))), inv_sqrt_hd), mask)
        attn = T.matmul(T.softmax(scores), v)  # [B*h, T, hd]
        merged = T.reshape(T.transpose(T.reshape(attn, (b, h, t, hd)), (0, 2, 1, 3)), (b, t, d))
        x = T.add(x, proj(merged, params[f"{p}.attn.wo"]))

        ln2 = T.layer_norm(x, params[f"{p}.ln2.gain"], params[f"{p}.ln2.bias"])
        hmid = T.gelu(T.add(proj(ln2, params[f"{p}.mlp.w1"]), params[f"{p}.mlp.b1"]))
        x = T.add(x, T.add(proj(hmid, params[f"{p}.mlp.w2"]), params[f"{p}.mlp.b2"]))

    x = T.layer_norm(x, params["final_ln.gain"], params["final_ln.bias"])
    return proj(x, params["head.w"])


def logits_batch(model, ids: np.ndarray) -> np.ndarray:
    """[B, T] ids -> [B, T, V] logits for any scorable model."""
    return model.logits_batch(np.asarray(ids, dtype=np.int64))


def forward(model, tokens: Sequence[int]) -> np.ndarray:
    """Single-sequence logits, [T, V]."""
    ids = np.asarray(tokens, dtype=np.int64)
    if ids.ndim != 1:
        raise T.ShapeError("forward expects a flat token sequence")
    return logits_batch(model, ids[None, :])[0]


# ---------------------------------------------------------------------------
# decoding and scoring


def greedy_decode(model, prefix: Sequence[int], n_new: int) -> list[int]:
    """Argmax decoding from ``prefix``; ties go to the lowest token id.

    Stops after ``n_new`` tokens or at the end-of-text special, which is
    not included in the returned continuation.
    """
    if len(prefix) == 0:
        raise ValueError("prefix must be non-empty")
    return greedy_decode_batch(model, [list(prefix)], n_new)[0]


def greedy_decode_batch(model, prefixes: Sequence[Sequence[int]], n_new: int) -> list[list[int]]:
    """Lockstep greedy decoding of several prefixes.

    Bit-identical to decoding each prefix alone: rows are right-padded with
    EOT, and causal masking keeps pad positions from influencing the live
    position of any row.
    """
    if n_new < 0:
        raise ValueError("n_new must be >= 0")
    rows = [list(p) for p in prefixes]
    if any(len(r) == 0 for r in rows):
        raise ValueError("prefix must be non-empty")
    if n_new == 0:
        return [[] for _ in rows]
    eot = model.eot_id
    outs: list[list[int]] = [[] for _ in rows]
    done = [False] * len(rows)
    for _ in range(n_new):
        max_len = max(len(r) for r in rows)
        if max_len > model.max_seq_len:
            break
        ids = np.full((len(rows), max_len), eot, dtype=np.int64)
        for j, r in enumerate(rows):
            ids[j, : len(r)] = r
        logits = logits_batch(model, ids)
        for j, r in enumerate(rows):
            if done[j]:
                continue
            nxt = int(np.argmax(logits[j, len(r) - 1]))
            if nxt == eot:
                done[j] = True
                continue
            r.append(nxt)
            outs[j].append(nxt)
            if len(r) >= model.max_seq_len:
                done[j] = True
        if all(done):
            break
    return outs


def token_logprobs(model, tokens: Sequence[int]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per-token log-probabilities and per-step vocabulary moments.

    For a sequence x of length n >= 2 returns three arrays of length n - 1:
    logprobs[t] = log p(x_{t+1} | x_{<=t}), and the mean/standard deviation
    of the full next-token log-probability distribution at each step,

        mu_t = sum_v p_t(v) log p_t(v)
        sigma_t = sqrt(sum_v p_t(v) (log p_t(v) - mu_t)^2).
    """
    ids = np.asarray(tokens, dtype=np.int64)
    if ids.ndim != 1 or ids.shape[0] < 2:
        raise ValueError("token_logprobs needs a flat sequence of length >= 2")
    logits = forward(model, ids)[:-1].astype(np.float64)
    m = logits.max(axis=-1, keepdims=True)
    z = logits - m
    ls = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    lp = ls[np.arange(ids.shape[0] - 1), ids[1:]]
    p = np.exp(ls)
    mu = (p * ls).sum(axis=-1)
    var = (p * (ls - mu[:, None]) ** 2).sum(axis=-1)
    sigma = np.sqrt(np.maximum(var, 0.0))
    return lp, mu, sigma
