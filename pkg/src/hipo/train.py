"""Training regimes: one optimizer run per configuration-matrix row.

A row fixes the four segment weights, the learning rate and the epoch
count. `train_regime` runs one row; `run_stepwise` threads the evolving
policy through the rows in order, resetting AdamW state at each boundary
(flagged in the log). The reference model is never written to. All shuffling
is seeded; identical (dataset, seeds, config) reproduce checkpoints bit for
bit on the same platform.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Sequence

import numpy as np

from .data import ContextOverflowError, PreferencePair
from .loss import LossConfig, LossReport, hipo_loss_grads, ref_segment_margins
from .model import ModelParams
from .optim import AdamWConfig, AdamWState, adamw_step, clip_grad_norm

logger = logging.getLogger(__name__)

PRESET_FILES = ("paper-stepwise.json", "paper-individual.json", "desk-stepwise.json")


@dataclass(frozen=True)
class RegimeRow:
    name: str
    w_rq: float
    w_mt: float
    w_a: float
    w_y: float
    lr: float
    epochs: int

    def __post_init__(self):
        if any(w < 0 for w in (self.w_rq, self.w_mt, self.w_a, self.w_y)):
            raise ValueError(f"row {self.name!r}: weights must be non-negative")
        # lr 0 is allowed as a degenerate no-op run (freeze smoke checks)
        if self.lr < 0:
            raise ValueError(f"row {self.name!r}: lr must be >= 0")
        if self.epochs < 1:
            raise ValueError(f"row {self.name!r}: epochs must be >= 1")

    def loss_config(self, beta: float) -> LossConfig:
        return LossConfig(beta=beta, w_rq=self.w_rq, w_mt=self.w_mt, w_a=self.w_a, w_y=self.w_y)

    def weights(self) -> tuple[float, float, float, float]:
        return (self.w_rq, self.w_mt, self.w_a, self.w_y)


@dataclass(frozen=True)
class ConfigMatrix:
    beta: float
    rows: tuple[RegimeRow, ...]

    def __post_init__(self):
        if not self.rows:
            raise ValueError("configuration matrix must have at least one row")
        names = [r.name for r in self.rows]
        if len(set(names)) != len(names):
            raise ValueError("row names must be unique")

    @classmethod
    def from_json(cls, text: str) -> "ConfigMatrix":
        obj = json.loads(text)
        rows = tuple(
            RegimeRow(
                name=r["name"], w_rq=r["w_rq"], w_mt=r["w_mt"], w_a=r["w_a"], w_y=r["w_y"],
                lr=r["lr"], epochs=r["epochs"],
            )
            for r in obj["rows"]
        )
        return cls(beta=obj.get("beta", 0.1), rows=rows)

    @classmethod
    def from_file(cls, path: str | Path) -> "ConfigMatrix":
        return cls.from_json(Path(path).read_text())


def load_preset(name: str) -> ConfigMatrix:
    fname = name if name.endswith(".json") else name + ".json"
    if fname not in PRESET_FILES:
        raise FileNotFoundError(f"no preset named {name!r} (have {', '.join(PRESET_FILES)})")
    text = resources.files("hipo").joinpath("presets", fname).read_text()
    return ConfigMatrix.from_json(text)


def resolve_matrix(spec: str) -> ConfigMatrix:
    """A path to a config JSON, or the bare name of a bundled preset."""
    if Path(spec).exists():
        return ConfigMatrix.from_file(spec)
    return load_preset(spec)


def find_regime(name: str) -> tuple[RegimeRow, float]:
    """Look up a single named row across the bundled presets.

    paper-individual wins on name collisions, then paper-stepwise, then
    desk-stepwise. Returns (row, beta of its preset).
    """
    for preset in ("paper-individual", "paper-stepwise", "desk-stepwise"):
        matrix = load_preset(preset)
        for row in matrix.rows:
            if row.name.lower() == name.lower():
                return row, matrix.beta
    raise KeyError(f"no regime named {name!r} in bundled presets")


@dataclass
class TrainerOptions:
    beta: float = 0.1
    batch_size: int = 8
    adamw: AdamWConfig = field(default_factory=AdamWConfig)
    grad_clip: float | None = None
    objective: str = "hipo"  # "dpo" ignores row weights and trains the Y term

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.objective not in ("hipo", "dpo"):
            raise ValueError("objective must be 'hipo' or 'dpo'")


@dataclass
class StepRecord:
    step: int
    report: LossReport


@dataclass
class RegimeLog:
    row: RegimeRow
    seed: int
    steps: list[StepRecord]
    epoch_mean_total: list[float]
    optimizer_state: str = "reset"
    wall_clock: float = 0.0  # informational only; excluded from report files


@dataclass
class TrainLog:
    regimes: list[RegimeLog] = field(default_factory=list)

    def metrics_lines(self):
        for regime in self.regimes:
            for rec in regime.steps:
                yield rec.report.to_json(step=rec.step)

    def summary(self) -> dict:
        return {
            "regimes": [
                {
                    "name": r.row.name,
                    "weights": list(r.row.weights()),
                    "lr": r.row.lr,
                    "epochs": r.row.epochs,
                    "seed": r.seed,
                    "steps": len(r.steps),
                    "epoch_mean_total": r.epoch_mean_total,
                    "optimizer_state": r.optimizer_state,
                }
                for r in self.regimes
            ]
        }


def preflight_context(dataset: Sequence[PreferencePair], context_length: int) -> None:
    bad = [i for i, p in enumerate(dataset) if max(p.total_lengths()) > context_length]
    if bad:
        raise ContextOverflowError(bad, context_length)


def train_regime(
    policy: ModelParams,
    reference: ModelParams,
    dataset: Sequence[PreferencePair],
    row: RegimeRow,
    seed: int,
    options: TrainerOptions | None = None,
    ref_margins: np.ndarray | None = None,
    step_offset: int = 0,
) -> tuple[ModelParams, RegimeLog]:
    """Run one regime row; mutates and returns `policy`.

    The reference only provides frozen log-prob margins (precomputed once,
    or passed in via `ref_margins`); its parameters are never touched.
    """
    options = options or TrainerOptions()
    if len(dataset) == 0:
        raise ValueError("dataset must be non-empty")
    if policy.config != reference.config:
        raise ValueError("policy and reference must share an architecture")
    preflight_context(dataset, policy.config.context_length)
    if ref_margins is None:
        ref_margins = ref_segment_margins(dataset, reference)

    if options.objective == "dpo":
        cfg = LossConfig(beta=options.beta)
    else:
        cfg = row.loss_config(options.beta)

    state = AdamWState.init(policy, options.adamw)
    rng = np.random.default_rng(seed)
    t0 = time.monotonic()
    steps: list[StepRecord] = []
    epoch_means: list[float] = []
    step = step_offset
    n = len(dataset)
    for _epoch in range(row.epochs):
        perm = rng.permutation(n)
        epoch_totals = []
        for lo in range(0, n, options.batch_size):
            idx = perm[lo : lo + options.batch_size]
            batch = [dataset[i] for i in idx]
            _, report, grads = hipo_loss_grads(
                batch, policy, reference, cfg, ref_margins=ref_margins[idx]
            )
            if options.grad_clip is not None:
                clip_grad_norm(grads, options.grad_clip)
            adamw_step(policy, grads, state, row.lr)
            step += 1
            steps.append(StepRecord(step, report))
            epoch_totals.append(report.total)
        epoch_means.append(float(np.mean(epoch_totals)))
    log = RegimeLog(row, seed, steps, epoch_means, wall_clock=time.monotonic() - t0)
    logger.info(
        "regime %s: %d steps, epoch-mean totals %s (%.1fs, AdamW state reset)",
        row.name, len(steps), [round(m, 5) for m in epoch_means], log.wall_clock,
    )
    return policy, log


def run_stepwise(
    policy: ModelParams,
    reference: ModelParams,
    dataset: Sequence[PreferencePair],
    matrix: ConfigMatrix,
    seed: int,
    options: TrainerOptions | None = None,
) -> tuple[ModelParams, TrainLog]:
    """Apply the matrix rows sequentially to the same evolving policy.

    Per-row shuffle seed is seed + row_index (a 1-row matrix is therefore
    identical to train_regime at the same seed). AdamW state resets at each
    row boundary.
    """
    options = options or TrainerOptions()
    log = TrainLog()
    ref_margins = ref_segment_margins(dataset, reference)
    step_offset = 0
    for i, row in enumerate(matrix.rows):
        policy, regime_log = train_regime(
            policy, reference, dataset, row,
            seed=seed + i, options=options, ref_margins=ref_margins,
            step_offset=step_offset,
        )
        step_offset += len(regime_log.steps)
        log.regimes.append(regime_log)
    return policy, log
