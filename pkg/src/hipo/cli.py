"""Command-line entry point.

Subcommands: gen-synthetic, augment, train, eval, judge, gradcheck, oracle.
Exit codes are stable: 0 success, 1 usage, 2 data/schema error, 3 numeric
failure (failed gradient or oracle check, non-finite values), 4 endpoint
failure. Every seeded subcommand writes byte-reproducible outputs.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3
EXIT_ENDPOINT = 4

logger = logging.getLogger("hipo")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _add_model_flags(p):
    p.add_argument("--context-length", type=int, default=128)
    p.add_argument("--embed-dim", type=int, default=64)
    p.add_argument("--n-layers", type=int, default=2)
    p.add_argument("--n-heads", type=int, default=2)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="hipo", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-synthetic",
                       help="generate segmented arithmetic preference pairs (JSONL)")
    p.add_argument("--n", type=int, required=True, help="number of pairs (> 0)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--max-operand", type=int, default=50)
    p.add_argument("--modes", default=None,
                   help="comma-separated flaw modes (wrong-step,wrong-final,off-topic)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_synthetic)

    p = sub.add_parser("augment",
                       help="rewrite plain preference pairs into segments via the LLM endpoint")
    p.add_argument("--data", required=True, help="JSONL of {prompt, chosen, rejected} strings")
    p.add_argument("--out", required=True, help="segmented JSONL output")
    p.add_argument("--seed", type=int, default=0, help="reserved; augmentation is endpoint-driven")
    p.add_argument("--max-tries", type=int, default=5)
    p.add_argument("--backoff-base", type=float, default=1.0)
    p.set_defaults(func=cmd_augment)

    p = sub.add_parser("train", help="train a policy against a frozen reference")
    p.add_argument("--data", required=True, help="segmented JSONL training pairs")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, default=0)
    group = p.add_mutually_exclusive_group(required=True)
    group.add_argument("--matrix", help="config JSON path or bundled preset name")
    group.add_argument("--regime", help="single named row from the bundled presets")
    p.add_argument("--stepwise", action="store_true",
                   help="thread the policy through matrix rows sequentially")
    p.add_argument("--beta", type=float, default=None, help="override the config beta")
    p.add_argument("--batch-size", type=int, default=8)
    p.add_argument("--grad-clip", type=float, default=None)
    p.add_argument("--init", default=None, help="start from a checkpoint instead of seeded init")
    _add_model_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval",
                       help="final-answer accuracy of a checkpoint on a JSONL dataset")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--temperature", type=float, default=0.1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--max-new", type=int, default=96)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("judge",
                       help="score responses on the nine rubric axes via the LLM endpoint")
    p.add_argument("--data", required=True, help="JSONL of {problem, response}")
    p.add_argument("--out-scores", required=True, help="JSONL of per-response scores")
    p.add_argument("--out-summary", required=True, help="radar summary JSON")
    p.add_argument("--seed", type=int, default=0, help="reserved; judging is endpoint-driven")
    p.add_argument("--max-tries", type=int, default=5)
    p.add_argument("--backoff-base", type=float, default=1.0)
    p.set_defaults(func=cmd_judge)

    p = sub.add_parser("gradcheck",
                       help="finite-difference check of the full objective on the default tiny model")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--epsilon", type=float, default=1e-5)
    p.add_argument("--sample", type=int, default=8, help="coordinates checked per tensor")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("oracle",
                       help="brute-force enumeration check on tiny models")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--cases", type=int, default=50)
    p.set_defaults(func=cmd_oracle)

    return parser


def cmd_gen_synthetic(args) -> int:
    from .synth import MODES, gen_dataset
    from .data import save_jsonl

    modes = tuple(args.modes.split(",")) if args.modes else MODES
    unknown = [m for m in modes if m not in MODES]
    if unknown:
        raise UsageError(f"unknown modes: {', '.join(unknown)}")
    if args.n <= 0:
        raise UsageError("--n must be > 0")
    if args.max_operand < 2:
        raise UsageError("--max-operand must be >= 2")
    pairs = gen_dataset(args.n, seed=args.seed, max_operand=args.max_operand, modes=modes)
    save_jsonl(pairs, args.out)
    print(f"wrote {len(pairs)} pairs to {args.out}")
    return EXIT_OK


def _read_jsonl_objects(path, required_keys):
    from .data import SchemaError, RecordParseError

    rows = []
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as e:
                raise RecordParseError(f"line {lineno}: {e.msg}", e.pos) from e
            for key in required_keys:
                if key not in obj or not isinstance(obj[key], str) or not obj[key]:
                    raise SchemaError(f"line {lineno}: {key}")
            rows.append(obj)
    if not rows:
        raise SchemaError("<file>", "no records found")
    return rows


def cmd_augment(args) -> int:
    from . import llmclient as llc
    from .data import parse_record

    cfg = llc.EndpointConfig.from_env(max_tries=args.max_tries, backoff_base=args.backoff_base)
    rows = _read_jsonl_objects(args.data, ("prompt", "chosen", "rejected"))
    triples = [(r["prompt"], r["chosen"], r["rejected"]) for r in rows]
    records = llc.augment_many(cfg, triples)
    lines = []
    for row, record in zip(rows, records):
        line = llc.to_training_record(record, prompt=row["prompt"])
        parse_record(line)  # guarantee the output round-trips as training data
        lines.append(line)
    Path(args.out).write_text("\n".join(lines) + "\n", encoding="utf-8")
    print(f"augmented {len(lines)} pairs -> {args.out}")
    return EXIT_OK


def _train_outputs(out_dir: Path, params, log) -> None:
    from .checkpoint import save_checkpoint

    out_dir.mkdir(parents=True, exist_ok=True)
    save_checkpoint(params, out_dir / "checkpoint")
    (out_dir / "metrics.jsonl").write_text(
        "".join(line + "\n" for line in log.metrics_lines()), encoding="utf-8"
    )
    (out_dir / "summary.json").write_text(
        json.dumps(log.summary(), indent=2) + "\n", encoding="utf-8"
    )


def cmd_train(args) -> int:
    from .checkpoint import load_checkpoint, save_checkpoint
    from .data import load_jsonl
    from .model import ModelConfig, init_params
    from .optim import AdamWConfig
    from .train import (
        ConfigMatrix,
        TrainerOptions,
        find_regime,
        resolve_matrix,
        run_stepwise,
        train_regime,
    )

    if args.regime is not None:
        try:
            row, beta = find_regime(args.regime)
        except KeyError as e:
            raise UsageError(str(e)) from e
        matrix = ConfigMatrix(beta=beta, rows=(row,))
        if args.stepwise:
            raise UsageError("--stepwise needs --matrix, not --regime")
    else:
        try:
            matrix = resolve_matrix(args.matrix)
        except FileNotFoundError as e:
            raise UsageError(str(e)) from e

    cfg = ModelConfig(
        context_length=args.context_length, embed_dim=args.embed_dim,
        n_layers=args.n_layers, n_heads=args.n_heads, seed=args.seed,
    )
    dataset = load_jsonl(args.data, context_length=cfg.context_length)

    if args.init:
        policy = load_checkpoint(args.init)
    else:
        policy = init_params(cfg)
    reference = policy.copy()

    beta = args.beta if args.beta is not None else matrix.beta
    options = TrainerOptions(
        beta=beta, batch_size=args.batch_size, adamw=AdamWConfig(), grad_clip=args.grad_clip
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(reference, out / "reference")

    if args.stepwise or len(matrix.rows) == 1:
        policy, log = run_stepwise(policy, reference, dataset, matrix, seed=args.seed, options=options)
        _train_outputs(out, policy, log)
        print(f"trained {len(matrix.rows)} regime(s) sequentially -> {out}")
    else:
        # without --stepwise every row trains independently from the same init
        from .train import TrainLog

        for row in matrix.rows:
            row_policy = reference.copy()
            row_policy, regime_log = train_regime(
                row_policy, reference, dataset, row, seed=args.seed, options=options
            )
            row_log = TrainLog(regimes=[regime_log])
            _train_outputs(out / row.name.replace("/", "-"), row_policy, row_log)
        index = {"rows": [r.name for r in matrix.rows], "mode": "independent"}
        (out / "summary.json").write_text(json.dumps(index, indent=2) + "\n", encoding="utf-8")
        print(f"trained {len(matrix.rows)} regime(s) independently -> {out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .checkpoint import load_checkpoint
    from .data import load_jsonl
    from .synth import evaluate_records

    params = load_checkpoint(args.ckpt)
    pairs = load_jsonl(args.data)
    report = evaluate_records(
        params, pairs, temperature=args.temperature, seed=args.seed, max_new=args.max_new
    )
    Path(args.out).write_text(report.to_json() + "\n", encoding="utf-8")
    print(f"accuracy {report.n_correct}/{report.n_items} = {report.accuracy:.4f} -> {args.out}")
    return EXIT_OK


def cmd_judge(args) -> int:
    from . import llmclient as llc

    cfg = llc.EndpointConfig.from_env(max_tries=args.max_tries, backoff_base=args.backoff_base)
    rows = _read_jsonl_objects(args.data, ("problem", "response"))
    scores = llc.judge_many(cfg, [(r["problem"], r["response"]) for r in rows])
    Path(args.out_scores).write_text(
        "".join(json.dumps(s.as_dict()) + "\n" for s in scores), encoding="utf-8"
    )
    summary = llc.aggregate_scores(scores)
    Path(args.out_summary).write_text(summary.to_json() + "\n", encoding="utf-8")
    print(f"judged {len(scores)} responses -> {args.out_scores}, {args.out_summary}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from . import autodiff as ad
    from .loss import pack_batch, segment_margins, _build_objective
    from .model import ModelConfig, init_params
    from .synth import gen_dataset
    from .train import load_preset

    cfg = ModelConfig(seed=args.seed)
    policy = init_params(cfg)
    ref = init_params(ModelConfig(seed=args.seed + 1))
    batch = gen_dataset(3, seed=args.seed, max_operand=30)
    packed = pack_batch(batch)
    margins = segment_margins(ref, packed)

    rows = {}
    for preset in ("paper-stepwise", "paper-individual"):
        for row in load_preset(preset).rows:
            rows.setdefault(row.weights(), row.name)

    arrays = {k: v.astype("float64") for k, v in policy.tensors.items()}
    worst = 0.0
    for weights, name in rows.items():
        from .loss import LossConfig

        loss_cfg = LossConfig(beta=0.1, w_rq=weights[0], w_mt=weights[1], w_a=weights[2], w_y=weights[3])

        def comp(tape, pv, loss_cfg=loss_cfg):
            total, _, _ = _build_objective(tape, pv, packed, margins, loss_cfg, cfg)
            return total

        err = ad.grad_check(comp, arrays, epsilon=args.epsilon,
                            max_coords_per_param=args.sample, seed=args.seed,
                            noise_floor=1e-9)
        print(f"row {name:<12} weights {weights}: max relative error {err:.3e}")
        worst = max(worst, err)
    print(f"max relative error {worst:.3e} (threshold 1e-4)")
    return EXIT_OK if worst < 1e-4 else EXIT_NUMERIC


def cmd_oracle(args) -> int:
    from .oracle import run_oracle

    result = run_oracle(cases=args.cases, seed=args.seed)
    print(
        f"{result.cases} cases: max nll err {result.max_nll_err:.3e}, "
        f"segment-logprob err {result.max_seglp_err:.3e}, loss err {result.max_loss_err:.3e}"
    )
    if not result.ok():
        for failure in result.failures:
            print(f"FAIL: {failure}", file=sys.stderr)
        return EXIT_NUMERIC
    print("oracle agreement within 1e-10")
    return EXIT_OK


def main(argv=None) -> int:
    from .data import DataError
    from .checkpoint import CheckpointError
    from .llmclient import (
        AugmentationParseError,
        ClientSchemaError,
        EndpointError,
        ScoreRangeError,
    )
    from .autodiff import NumericOverflowError
    from .optim import NonFiniteGradientError

    logging.basicConfig(level=logging.INFO, format="%(message)s", stream=sys.stderr)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except SystemExit as e:  # argparse --help
        return int(e.code or 0)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, CheckpointError, ClientSchemaError, ScoreRangeError, AugmentationParseError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except (NumericOverflowError, NonFiniteGradientError) as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except EndpointError as e:
        print(f"endpoint failure: {e}", file=sys.stderr)
        return EXIT_ENDPOINT
    except OSError as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except ValueError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return EXIT_USAGE


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
