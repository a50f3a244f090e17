"""Brute-force verification of the model/loss stack on tiny configurations.

Everything here is an independent reimplementation in plain Python (lists,
math.fsum, math.erf): token probabilities by direct softmax enumeration,
segment log-probs, margins and the dpo/hipo losses. It shares no code with
the tape engine, so agreement within 1e-10 on seeded random cases is strong
evidence both sides compute the published formulas.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .data import SegmentKind, Span, SegmentSpans
from .loss import SEGMENT_ORDER, LossConfig, PackedBatch, _build_objective, segment_logprob, segment_margins
from .model import ModelConfig, ModelParams, init_params, param_vars, per_token_nll


def _ln(vec, gain, bias, eps=1e-5):
    n = len(vec)
    mu = math.fsum(vec) / n
    var = math.fsum((x - mu) ** 2 for x in vec) / n
    inv = 1.0 / math.sqrt(var + eps)
    return [(x - mu) * inv * g + b for x, g, b in zip(vec, gain, bias)]


def _matvec(vec, mat):
    # mat is [in][out]
    cols = len(mat[0])
    return [math.fsum(vec[i] * mat[i][j] for i in range(len(vec))) for j in range(cols)]


def _softmax(xs):
    m = max(xs)
    es = [math.exp(x - m) for x in xs]
    s = math.fsum(es)
    return [e / s for e in es]


def _gelu(x):
    return 0.5 * x * (1.0 + math.erf(x / math.sqrt(2.0)))


def next_token_probs(params: ModelParams, ids: list[int]) -> list[list[float]]:
    """Softmax next-token distribution at every position, by enumeration."""
    cfg = params.config
    t = {k: v.astype(np.float64).tolist() for k, v in params.tensors.items()}
    d, nh = cfg.embed_dim, cfg.n_heads
    hd = d // nh
    n = len(ids)

    x = [[te + pe for te, pe in zip(t["tok_emb"][tok], t["pos_emb"][pos])] for pos, tok in enumerate(ids)]
    for li in range(cfg.n_layers):
        p = f"layers.{li}."
        h = [_ln(row, t[p + "ln1.gain"], t[p + "ln1.bias"]) for row in x]
        qkv = [_matvec(row, t[p + "attn.wqkv"]) for row in h]
        ctx = [[0.0] * d for _ in range(n)]
        for head in range(nh):
            lo = head * hd
            q = [row[lo : lo + hd] for row in qkv]
            k = [row[d + lo : d + lo + hd] for row in qkv]
            v = [row[2 * d + lo : 2 * d + lo + hd] for row in qkv]
            for ti in range(n):
                scores = [
                    math.fsum(q[ti][c] * k[si][c] for c in range(hd)) / math.sqrt(hd)
                    for si in range(ti + 1)
                ]
                attn = _softmax(scores)
                for c in range(hd):
                    ctx[ti][lo + c] = math.fsum(attn[si] * v[si][c] for si in range(ti + 1))
        proj = [_matvec(row, t[p + "attn.wo"]) for row in ctx]
        x = [[a + b for a, b in zip(xr, pr)] for xr, pr in zip(x, proj)]
        h2 = [_ln(row, t[p + "ln2.gain"], t[p + "ln2.bias"]) for row in x]
        inner = [
            [_gelu(a + b) for a, b in zip(_matvec(row, t[p + "mlp.w1"]), t[p + "mlp.b1"])]
            for row in h2
        ]
        mlp = [[a + b for a, b in zip(_matvec(row, t[p + "mlp.w2"]), t[p + "mlp.b2"])] for row in inner]
        x = [[a + b for a, b in zip(xr, mr)] for xr, mr in zip(x, mlp)]

    xf = [_ln(row, t["ln_f.gain"], t["ln_f.bias"]) for row in x]
    return [_softmax(_matvec(row, t["lm_head"])) for row in xf]


def nll_by_enumeration(params: ModelParams, z: list[int], y: list[int]) -> list[float]:
    probs = next_token_probs(params, z + y)
    return [-math.log(probs[len(z) - 1 + j][tok]) for j, tok in enumerate(y)]


def softplus_scalar(x: float) -> float:
    return max(x, 0.0) + math.log1p(math.exp(-abs(x)))


@dataclass
class RawPair:
    """One preference pair over raw token ids (no byte-text wrapper)."""

    z: list[int]
    y_plus: list[int]
    spans_plus: SegmentSpans
    y_minus: list[int]
    spans_minus: SegmentSpans


def _random_spans(rng, length: int) -> SegmentSpans:
    a = int(rng.integers(1, length - 1))
    b = int(rng.integers(a + 1, length))
    return SegmentSpans(Span(0, a), Span(a, b), Span(b, length))


def random_raw_pairs(rng, n_pairs: int, vocab: int, max_len: int = 8) -> list[RawPair]:
    pairs = []
    for _ in range(n_pairs):
        z = [int(v) for v in rng.integers(0, vocab, size=int(rng.integers(1, 3)))]
        while True:
            lp = int(rng.integers(3, max_len + 1))
            lr = int(rng.integers(3, max_len + 1))
            y_plus = [int(v) for v in rng.integers(0, vocab, size=lp)]
            y_minus = [int(v) for v in rng.integers(0, vocab, size=lr)]
            if y_plus != y_minus:
                break
        pairs.append(
            RawPair(z, y_plus, _random_spans(rng, lp), y_minus, _random_spans(rng, lr))
        )
    return pairs


def pack_raw(pairs: list[RawPair]) -> PackedBatch:
    rows, metas = [], []
    for side in ("plus", "minus"):
        for p in pairs:
            y = p.y_plus if side == "plus" else p.y_minus
            spans = p.spans_plus if side == "plus" else p.spans_minus
            rows.append(p.z + y)
            metas.append((len(p.z), spans))
    t = max(len(r) for r in rows)
    ids = np.zeros((len(rows), t), dtype=np.int64)  # pad id 0: masked out of every loss
    for i, r in enumerate(rows):
        ids[i, : len(r)] = r
    masks = {k: np.zeros((len(rows), t - 1), dtype=np.float64) for k in SEGMENT_ORDER}
    for i, (zlen, spans) in enumerate(metas):
        for kind in SEGMENT_ORDER:
            s = spans.by_kind(kind)
            masks[kind][i, zlen - 1 + s.start : zlen - 1 + s.end] = 1.0
    return PackedBatch(len(pairs), ids, ids[:, 1:], masks)


def raw_losses(
    pairs: list[RawPair], policy: ModelParams, ref: ModelParams, cfg: LossConfig
) -> tuple[float, dict[SegmentKind, float]]:
    """Package-side hipo objective on raw-id pairs (tape path)."""
    packed = pack_raw(pairs)
    ref_margins = segment_margins(ref, packed)
    tape = ad.Tape()
    total, loss_vars, _ = _build_objective(
        tape, param_vars(tape, policy), packed, ref_margins, cfg, policy.config
    )
    return float(total.value), {k: float(v.value) for k, v in loss_vars.items()}


def brute_losses(
    pairs: list[RawPair], policy: ModelParams, ref: ModelParams, cfg: LossConfig
) -> tuple[float, dict[SegmentKind, float]]:
    """Same objective assembled from enumerated probabilities."""
    per_kind: dict[SegmentKind, list[float]] = {k: [] for k in SEGMENT_ORDER}
    for p in pairs:
        vals = {}
        for model, tag in ((policy, "pol"), (ref, "ref")):
            for y, spans, side in (
                (p.y_plus, p.spans_plus, "plus"),
                (p.y_minus, p.spans_minus, "minus"),
            ):
                nll = nll_by_enumeration(model, p.z, y)
                for kind in SEGMENT_ORDER:
                    s = spans.by_kind(kind)
                    vals[(tag, side, kind)] = -math.fsum(nll[s.start : s.end])
        for kind in SEGMENT_ORDER:
            d = (
                vals[("pol", "plus", kind)]
                - vals[("pol", "minus", kind)]
                - vals[("ref", "plus", kind)]
                + vals[("ref", "minus", kind)]
            )
            per_kind[kind].append(d)
    losses = {
        k: math.fsum(softplus_scalar(-cfg.beta * d) for d in ds) / len(ds)
        for k, ds in per_kind.items()
    }
    w = cfg.weights()
    total = math.fsum(w[k] * losses[k] for k in SEGMENT_ORDER)
    return total, losses


@dataclass
class OracleResult:
    cases: int
    max_nll_err: float = 0.0
    max_seglp_err: float = 0.0
    max_loss_err: float = 0.0
    failures: list[str] = field(default_factory=list)

    @property
    def max_err(self) -> float:
        return max(self.max_nll_err, self.max_seglp_err, self.max_loss_err)

    def ok(self, tol: float = 1e-10) -> bool:
        return not self.failures and self.max_err < tol


def run_oracle(cases: int = 50, seed: int = 0, tol: float = 1e-10) -> OracleResult:
    """Seeded random tiny models (vocab <= 5, sequences <= 8 tokens) checked
    against direct enumeration: per-token NLLs, segment log-probs, losses."""
    rng = np.random.default_rng(seed)
    result = OracleResult(cases)
    for case in range(cases):
        vocab = int(rng.integers(2, 6))
        heads = int(rng.integers(1, 3))
        dim = heads * int(rng.integers(2, 5))
        layers = int(rng.integers(0, 3))
        cfg = ModelConfig(
            context_length=16, embed_dim=dim, n_layers=layers, n_heads=heads,
            vocab_size=vocab, seed=int(rng.integers(0, 2**31)),
        )
        policy = init_params(cfg)
        ref_cfg = ModelConfig(**{**cfg.__dict__, "seed": cfg.seed + 1})
        ref = init_params(ref_cfg)

        pairs = random_raw_pairs(rng, n_pairs=2, vocab=vocab)
        for p in pairs:
            got = per_token_nll(policy, p.z, p.y_plus)
            want = nll_by_enumeration(policy, p.z, p.y_plus)
            err = float(np.max(np.abs(np.asarray(got) - np.asarray(want))))
            result.max_nll_err = max(result.max_nll_err, err)
            for kind in SEGMENT_ORDER:
                s = p.spans_plus.by_kind(kind)
                lp = segment_logprob(got, s)
                lp_brute = -math.fsum(want[s.start : s.end])
                result.max_seglp_err = max(result.max_seglp_err, abs(lp - lp_brute))

        w = rng.uniform(0, 1, size=4)
        cfg_loss = LossConfig(beta=float(rng.uniform(0.05, 0.5)), w_rq=w[0], w_mt=w[1], w_a=w[2], w_y=w[3])
        total, losses = raw_losses(pairs, policy, ref, cfg_loss)
        btotal, blosses = brute_losses(pairs, policy, ref, cfg_loss)
        errs = [abs(total - btotal)] + [abs(losses[k] - blosses[k]) for k in SEGMENT_ORDER]
        result.max_loss_err = max(result.max_loss_err, max(errs))

        dpo_total, dpo_losses = raw_losses(pairs, policy, ref, LossConfig(beta=cfg_loss.beta))
        if abs(dpo_total - dpo_losses[SegmentKind.Y]) != 0.0:
            result.failures.append(f"case {case}: dpo total != Y term")

        if result.max_err >= tol:
            result.failures.append(f"case {case}: error {result.max_err:.3e} >= {tol:.0e}")
            break
    return result
