"""Tiny causal language model over a byte-level vocabulary.

Parameters are stored float32 (the checkpoint dtype); all evaluation runs in
float64 through the autodiff tape, so forward probabilities and gradients are
reproducible bit for bit. Evaluation and generation are pure functions of
(params, inputs, seed) and safe to run concurrently on distinct batches.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad

BOS_ID = 256
EOS_ID = 257
PAD_ID = 258

MASK_NEG = -1e30  # additive attention mask; finite to keep overflow checks sharp


class InvalidTokenError(ValueError):
    """Token id outside the vocabulary."""


class SequenceTooLongError(ValueError):
    """Prompt plus response does not fit the model context."""


@dataclass(frozen=True)
class Vocab:
    """Byte vocabulary: 256 raw bytes plus BOS/EOS/PAD."""

    size: int = 259

    def __post_init__(self):
        if self.size < 259:
            raise ValueError("byte vocab needs 256 bytes plus BOS/EOS/PAD")


def tokenize(text: bytes | str) -> list[int]:
    if isinstance(text, str):
        text = text.encode("utf-8")
    return list(text)


def detokenize(ids: Sequence[int], vocab: Vocab = Vocab()) -> bytes:
    out = bytearray()
    for i in ids:
        if i >= vocab.size or i < 0:
            raise InvalidTokenError(f"token id {i} outside vocab of size {vocab.size}")
        if i < 256:
            out.append(i)
        # BOS/EOS/PAD and any other control ids are stripped
    return bytes(out)


def prompt_ids(text: bytes | str) -> list[int]:
    """Model input convention for prompts: BOS followed by the raw bytes."""
    return [BOS_ID] + tokenize(text)


@dataclass(frozen=True)
class ModelConfig:
    context_length: int = 128
    embed_dim: int = 64
    n_layers: int = 2
    n_heads: int = 2
    vocab_size: int = 259
    seed: int = 0

    def __post_init__(self):
        if self.context_length < 2:
            raise ValueError("context_length must be >= 2")
        if self.embed_dim % self.n_heads != 0:
            raise ValueError("embed_dim must be divisible by n_heads")
        if self.vocab_size < 2:
            raise ValueError("vocab_size must be >= 2")


@dataclass
class ModelParams:
    """Named float32 parameter tensors plus the architecture they belong to."""

    config: ModelConfig
    tensors: dict[str, np.ndarray] = field(default_factory=dict)

    def copy(self) -> "ModelParams":
        return ModelParams(self.config, {k: v.copy() for k, v in self.tensors.items()})


def _tensor_shapes(cfg: ModelConfig) -> list[tuple[str, tuple]]:
    d, v = cfg.embed_dim, cfg.vocab_size
    shapes = [("tok_emb", (v, d)), ("pos_emb", (cfg.context_length, d))]
    for i in range(cfg.n_layers):
        p = f"layers.{i}."
        # attention projections carry no bias: a key bias is invisible to
        # softmax (per-query constant shift), which would leave an exactly
        # flat direction that finite differences cannot certify
        shapes += [
            (p + "ln1.gain", (d,)),
            (p + "ln1.bias", (d,)),
            (p + "attn.wqkv", (d, 3 * d)),
            (p + "attn.wo", (d, d)),
            (p + "ln2.gain", (d,)),
            (p + "ln2.bias", (d,)),
            (p + "mlp.w1", (d, 4 * d)),
            (p + "mlp.b1", (4 * d,)),
            (p + "mlp.w2", (4 * d, d)),
            (p + "mlp.b2", (d,)),
        ]
    shapes += [("ln_f.gain", (d,)), ("ln_f.bias", (d,)), ("lm_head", (d, v))]
    return shapes


def init_params(cfg: ModelConfig) -> ModelParams:
    """Seeded init: N(0, 0.02) weights, zero biases, unit layer-norm gains."""
    rng = np.random.default_rng(cfg.seed)
    tensors: dict[str, np.ndarray] = {}
    for name, shape in _tensor_shapes(cfg):
        if name.endswith(".gain"):
            t = np.ones(shape, dtype=np.float32)
        elif name.endswith((".bias", ".b1", ".b2")):
            t = np.zeros(shape, dtype=np.float32)
        else:
            t = rng.normal(0.0, 0.02, size=shape).astype(np.float32)
        tensors[name] = t
    return ModelParams(cfg, tensors)


def _causal_mask(t: int) -> np.ndarray:
    return np.triu(np.full((t, t), MASK_NEG), k=1)


def build_logits(tape: ad.Tape, pvars: dict[str, ad.Var], ids: np.ndarray, cfg: ModelConfig) -> ad.Var:
    """Graph for next-token logits, shape [B, T, vocab]."""
    ids = np.asarray(ids, dtype=np.int64)
    b, t = ids.shape
    if t > cfg.context_length:
        raise SequenceTooLongError(f"sequence length {t} exceeds context {cfg.context_length}")
    d, h = cfg.embed_dim, cfg.n_heads
    hd = d // h

    pos = np.broadcast_to(np.arange(t), (b, t))
    x = ad.add(ad.gather(pvars["tok_emb"], ids), ad.gather(pvars["pos_emb"], pos))
    mask = _causal_mask(t)

    for i in range(cfg.n_layers):
        p = f"layers.{i}."
        hln = ad.layer_norm(x, pvars[p + "ln1.gain"], pvars[p + "ln1.bias"])
        qkv = ad.matmul(hln, pvars[p + "attn.wqkv"])

        def head_split(part):
            sl = ad.slice_(qkv, (Ellipsis, slice(part * d, (part + 1) * d)))
            return ad.transpose(ad.reshape(sl, (b, t, h, hd)), (0, 2, 1, 3))

        q, k, v = head_split(0), head_split(1), head_split(2)
        scores = ad.scale(ad.matmul(q, k, transpose_b=True), 1.0 / np.sqrt(hd))
        attn = ad.softmax(ad.add_const(scores, mask))
        ctx = ad.reshape(ad.transpose(ad.matmul(attn, v), (0, 2, 1, 3)), (b, t, d))
        x = ad.add(x, ad.matmul(ctx, pvars[p + "attn.wo"]))

        h2 = ad.layer_norm(x, pvars[p + "ln2.gain"], pvars[p + "ln2.bias"])
        inner = ad.gelu(ad.add(ad.matmul(h2, pvars[p + "mlp.w1"]), pvars[p + "mlp.b1"]))
        mlp = ad.add(ad.matmul(inner, pvars[p + "mlp.w2"]), pvars[p + "mlp.b2"])
        x = ad.add(x, mlp)

    xf = ad.layer_norm(x, pvars["ln_f.gain"], pvars["ln_f.bias"])
    return ad.matmul(xf, pvars["lm_head"])


def param_vars(tape: ad.Tape, params: ModelParams, prefix: str = "") -> dict[str, ad.Var]:
    return {prefix + k: tape.leaf(v) for k, v in params.tensors.items()}


def full_logprobs(params: ModelParams, ids: np.ndarray) -> np.ndarray:
    """log softmax over the vocabulary at every position, [B, T, V], float64."""
    tape = ad.Tape()
    pv = param_vars(tape, params)
    logits = build_logits(tape, pv, ids, params.config)
    return ad.log_softmax(logits).value


def per_token_nll(params: ModelParams, z: Sequence[int], y: Sequence[int]) -> np.ndarray:
    """-log pi(y_i | z, y_<i) for each response token, nats, float64."""
    if len(y) == 0:
        raise ValueError("response must be non-empty")
    if len(z) == 0:
        raise ValueError("prompt token sequence must be non-empty")
    ids = list(z) + list(y)
    if any(i >= params.config.vocab_size or i < 0 for i in ids):
        raise InvalidTokenError("token id outside model vocabulary")
    if len(ids) > params.config.context_length:
        raise SequenceTooLongError(
            f"prompt+response length {len(ids)} exceeds context {params.config.context_length}"
        )
    logp = full_logprobs(params, np.array([ids]))[0]
    positions = np.arange(len(z) - 1, len(ids) - 1)
    return -logp[positions, np.asarray(y)]


def sequence_logprob(nll: np.ndarray) -> float:
    """log pi(y | z) as the negated sum of per-token NLLs (fixed order)."""
    return float(-np.sum(np.asarray(nll, dtype=np.float64)))


def generate(
    params: ModelParams,
    prompt: Sequence[int],
    temperature: float,
    seed: int,
    max_new: int,
) -> list[int]:
    """Sample continuation tokens; stops at EOS or max_new.

    temperature 0 is greedy argmax with ties broken toward the lowest token
    id; temperature > 0 samples softmax(logits / temperature) with a
    generator seeded from `seed`. Returns only the newly generated ids.
    """
    if temperature < 0:
        raise ValueError("temperature must be >= 0")
    if len(prompt) == 0:
        raise ValueError("prompt must contain at least one token")
    cfg = params.config
    if len(prompt) > cfg.context_length:
        raise SequenceTooLongError("prompt does not fit the model context")
    rng = np.random.default_rng(seed)
    ids = list(prompt)
    out: list[int] = []
    for _ in range(max_new):
        window = ids[-cfg.context_length:]
        tape = ad.Tape()
        logits_var = build_logits(tape, param_vars(tape, params), np.array([window]), cfg)
        logits = logits_var.value[0, -1]
        if temperature == 0.0:
            nxt = int(np.argmax(logits))
        else:
            lt = logits / temperature
            lt -= lt.max()
            probs = np.exp(lt)
            probs /= probs.sum()
            u = rng.random()
            nxt = int(np.searchsorted(np.cumsum(probs), u, side="right"))
            nxt = min(nxt, cfg.vocab_size - 1)
        out.append(nxt)
        ids.append(nxt)
        if nxt == EOS_ID:
            break
    return out
