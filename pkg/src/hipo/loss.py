"""Segment-level preference losses.

For a pair (z, y+, y-) and segment k, the margin is

    delta_k = (log pi(y+_k|z) - log pi(y-_k|z))
            - (log ref(y+_k|z) - log ref(y-_k|z))

and the per-segment loss is the batch mean of softplus(-beta * delta_k),
i.e. -log sigmoid(beta * delta_k) in its numerically stable form. The total
objective is the weighted sum over {Rq, Mt, A, Y} in that fixed order; the
plain DPO baseline is the Y term alone. Reference log-probabilities enter as
constants: no gradient ever flows into reference parameters.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .data import PreferencePair, SegmentKind, Span, SpanRangeError
from .model import PAD_ID, ModelParams, build_logits, param_vars

SEGMENT_ORDER = (SegmentKind.RQ, SegmentKind.MT, SegmentKind.A, SegmentKind.Y)


class EmptyBatchError(ValueError):
    pass


@dataclass(frozen=True)
class LossConfig:
    """beta and the four segment weights (not required to sum to 1)."""

    beta: float = 0.1
    w_rq: float = 0.0
    w_mt: float = 0.0
    w_a: float = 0.0
    w_y: float = 1.0

    def __post_init__(self):
        if not self.beta > 0:
            raise ValueError("beta must be > 0")
        ws = self.weights()
        if any(not np.isfinite(w) or w < 0 for w in ws.values()):
            raise ValueError("weights must be finite and non-negative")
        if all(w == 0 for w in ws.values()):
            raise ValueError("at least one weight must be positive")

    def weights(self) -> dict[SegmentKind, float]:
        return {
            SegmentKind.RQ: self.w_rq,
            SegmentKind.MT: self.w_mt,
            SegmentKind.A: self.w_a,
            SegmentKind.Y: self.w_y,
        }


@dataclass
class LossReport:
    """Per-segment losses and mean margins for one batch."""

    losses: dict[SegmentKind, float]
    mean_delta: dict[SegmentKind, float]
    total: float

    def to_json(self, step: int | None = None) -> str:
        obj: dict = {}
        if step is not None:
            obj["step"] = step
        obj.update(
            {
                "L_rq": self.losses[SegmentKind.RQ],
                "L_mt": self.losses[SegmentKind.MT],
                "L_a": self.losses[SegmentKind.A],
                "L_y": self.losses[SegmentKind.Y],
                "total": self.total,
                "mean_delta_per_segment": {k.value: v for k, v in self.mean_delta.items()},
            }
        )
        return json.dumps(obj)


def _softplus(x: np.ndarray | float) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


def segment_logprob(nll: Sequence[float] | np.ndarray, span: Span | tuple[int, int]) -> float:
    """log pi(y_k | z) = -(sum of per-token NLLs over the span), nats."""
    nll = np.asarray(nll, dtype=np.float64)
    start, end = span
    if start < 0 or end > len(nll) or end <= start:
        raise SpanRangeError(f"span [{start},{end}) outside [0,{len(nll)})")
    return float(-np.sum(nll[start:end]))


def delta(policy_plus: float, policy_minus: float, ref_plus: float, ref_minus: float) -> float:
    """Implicit reward margin for one segment."""
    return policy_plus - policy_minus - ref_plus + ref_minus


def segment_loss(deltas: Sequence[float] | np.ndarray, beta: float) -> float:
    """Batch mean of -log sigmoid(beta * delta), computed as softplus."""
    deltas = np.asarray(deltas, dtype=np.float64)
    if deltas.size == 0:
        raise EmptyBatchError("segment_loss needs a non-empty batch")
    if not beta > 0:
        raise ValueError("beta must be > 0")
    return float(np.mean(_softplus(-beta * deltas)))


@dataclass
class PackedBatch:
    """Chosen rows stacked over rejected rows, right-padded with PAD."""

    n_pairs: int
    ids: np.ndarray  # [2B, T] int64
    next_ids: np.ndarray  # [2B, T-1] int64
    masks: dict[SegmentKind, np.ndarray]  # [2B, T-1] float64, 1.0 on span tokens


def pack_batch(pairs: Sequence[PreferencePair]) -> PackedBatch:
    if len(pairs) == 0:
        raise EmptyBatchError("batch must be non-empty")
    rows = []
    metas = []  # (prompt_len, spans, response_len)
    for side in ("chosen", "rejected"):
        for pair in pairs:
            resp = getattr(pair, side)
            z = pair.prompt_tokens()
            rows.append(z + list(resp.tokens))
            metas.append((len(z), resp.spans, len(resp.tokens)))
    t = max(len(r) for r in rows)
    ids = np.full((len(rows), t), PAD_ID, dtype=np.int64)
    for i, r in enumerate(rows):
        ids[i, : len(r)] = r
    masks = {k: np.zeros((len(rows), t - 1), dtype=np.float64) for k in SEGMENT_ORDER}
    for i, (zlen, spans, _) in enumerate(metas):
        for kind in SEGMENT_ORDER:
            s = spans.by_kind(kind)
            # response token j sits at zlen+j and is predicted at zlen+j-1
            masks[kind][i, zlen - 1 + s.start : zlen - 1 + s.end] = 1.0
    return PackedBatch(len(pairs), ids, ids[:, 1:], masks)


def _segment_logprob_graph(
    tape: ad.Tape, pv: dict[str, ad.Var], packed: PackedBatch, model_cfg
) -> dict[SegmentKind, ad.Var]:
    logits = build_logits(tape, pv, packed.ids, model_cfg)
    logp = ad.log_softmax(logits)
    tok = ad.take_last(ad.slice_(logp, (slice(None), slice(0, packed.ids.shape[1] - 1))), packed.next_ids)
    return {k: ad.masked_sum(tok, packed.masks[k], axis=-1) for k in SEGMENT_ORDER}


def segment_margins(params: ModelParams, packed: PackedBatch) -> np.ndarray:
    """Chosen-minus-rejected segment log-prob margins, [B, 4] (forward only)."""
    tape = ad.Tape()
    seg = _segment_logprob_graph(tape, param_vars(tape, params), packed, params.config)
    b = packed.n_pairs
    cols = [seg[k].value[:b] - seg[k].value[b:] for k in SEGMENT_ORDER]
    return np.stack(cols, axis=1)


def ref_segment_margins(
    pairs: Sequence[PreferencePair], ref: ModelParams, chunk: int = 8
) -> np.ndarray:
    """Frozen-reference margins for a dataset, computed once in fixed chunks."""
    out = []
    for i in range(0, len(pairs), chunk):
        out.append(segment_margins(ref, pack_batch(pairs[i : i + chunk])))
    return np.concatenate(out, axis=0)


def _build_objective(
    tape: ad.Tape,
    pv: dict[str, ad.Var],
    packed: PackedBatch,
    ref_margins: np.ndarray,
    cfg: LossConfig,
    model_cfg,
):
    seg = _segment_logprob_graph(tape, pv, packed, model_cfg)
    b = packed.n_pairs
    weights = cfg.weights()
    loss_vars: dict[SegmentKind, ad.Var] = {}
    delta_vars: dict[SegmentKind, ad.Var] = {}
    for col, kind in enumerate(SEGMENT_ORDER):
        s = seg[kind]
        pol_margin = ad.sub(ad.slice_(s, (slice(0, b),)), ad.slice_(s, (slice(b, 2 * b),)))
        d = ad.add_const(pol_margin, -ref_margins[:, col])
        delta_vars[kind] = d
        loss_vars[kind] = ad.mean(ad.softplus(ad.scale(d, -cfg.beta)))
    total = None
    for kind in SEGMENT_ORDER:
        term = ad.scale(loss_vars[kind], weights[kind])
        total = term if total is None else ad.add(total, term)
    return total, loss_vars, delta_vars


def _report(loss_vars, delta_vars, total_value: float) -> LossReport:
    return LossReport(
        losses={k: float(v.value) for k, v in loss_vars.items()},
        mean_delta={k: float(np.mean(d.value)) for k, d in delta_vars.items()},
        total=total_value,
    )


def hipo_loss(
    pairs: Sequence[PreferencePair],
    policy: ModelParams,
    ref: ModelParams,
    cfg: LossConfig,
    ref_margins: np.ndarray | None = None,
) -> tuple[float, LossReport]:
    """Weighted sum of the four segment losses over one batch (forward only).

    When `ref_margins` is omitted the reference forward pass runs on the
    same packed batch, so policy == reference gives every delta exactly 0.
    """
    packed = pack_batch(pairs)
    if ref_margins is None:
        ref_margins = segment_margins(ref, packed)
    tape = ad.Tape()
    pv = param_vars(tape, policy)
    total, loss_vars, delta_vars = _build_objective(tape, pv, packed, ref_margins, cfg, policy.config)
    return float(total.value), _report(loss_vars, delta_vars, float(total.value))


def hipo_loss_grads(
    pairs: Sequence[PreferencePair],
    policy: ModelParams,
    ref: ModelParams,
    cfg: LossConfig,
    ref_margins: np.ndarray | None = None,
) -> tuple[float, LossReport, ad.GradientMap]:
    """Loss, report and d(loss)/d(policy); reference gets no gradient."""
    packed = pack_batch(pairs)
    if ref_margins is None:
        ref_margins = segment_margins(ref, packed)
    tape = ad.Tape()
    pv = param_vars(tape, policy)
    total, loss_vars, delta_vars = _build_objective(tape, pv, packed, ref_margins, cfg, policy.config)
    adjoints = tape.backward(total)
    grads: ad.GradientMap = {}
    for name, leaf in pv.items():
        g = adjoints.get(leaf.idx)
        grads[name] = g if g is not None else np.zeros_like(leaf.value)
        if not np.all(np.isfinite(grads[name])):
            raise ad.NumericOverflowError("backward")
    return float(total.value), _report(loss_vars, delta_vars, float(total.value)), grads


def dpo_loss(
    pairs: Sequence[PreferencePair],
    policy: ModelParams,
    ref: ModelParams,
    beta: float,
    ref_margins: np.ndarray | None = None,
) -> tuple[float, LossReport]:
    """Standard whole-response DPO: the Y term of the weighted objective."""
    value, report = hipo_loss(pairs, policy, ref, LossConfig(beta=beta), ref_margins=ref_margins)
    return report.losses[SegmentKind.Y], report
