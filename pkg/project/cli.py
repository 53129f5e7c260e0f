"""Command-line surface of the HEFT lab: data generation, training, evaluation, experiments, serving."""

import argparse
import json
import logging
import os
import sys
from datetime import datetime
from pathlib import Path
from typing import Optional, Sequence

import uvicorn
from pydantic import ValidationError

from project.checkServerStatus_service import checkServerStatus
from project.checkpoint import load_checkpoint, load_model, save_heft, save_lora, save_model
from project.errors import ExperimentError, HeftError
from project.evaluateModel_service import MAX_NEW_TOKENS, evaluateModel
from project.lora import LoraConfig, LoraModel, lora_trainable_parameters
from project.reft import ReftConfig, ReftModel
from project.runExperiment_service import (
    ExperimentConfig,
    RunRecord,
    comparison_table,
    method_label,
    runExperiment,
    to_records,
    write_results,
)
from project.server import CHECKPOINT_ENV
from project.tasks import ByteTokenizer, load_boolq_jsonl, synth_generate, write_boolq_jsonl
from project.training import (
    LORA_TRAIN_DEFAULTS,
    PRETRAIN_TRAIN_DEFAULTS,
    REFT_TRAIN_DEFAULTS,
    HeftPlan,
    TrainConfig,
    pretrain_base,
    run_heft,
)
from project.transformer import ModelConfig, ModelWeights, init_model

logger = logging.getLogger(__name__)

LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"


def _add_model_args(parser: argparse.ArgumentParser) -> None:
    defaults = ModelConfig()
    group = parser.add_argument_group("model shape (used when no --base checkpoint is given)")
    group.add_argument("--layers", type=int, default=defaults.n_layers)
    group.add_argument("--d-model", type=int, default=defaults.d_model)
    group.add_argument("--heads", type=int, default=defaults.n_heads)
    group.add_argument("--d-ff", type=int, default=defaults.d_ff)
    group.add_argument("--max-seq", type=int, default=defaults.max_seq)
    group.add_argument("--model-seed", type=int, default=defaults.seed)


def _model_config(args: argparse.Namespace) -> ModelConfig:
    return ModelConfig(
        n_layers=args.layers,
        d_model=args.d_model,
        n_heads=args.heads,
        d_ff=args.d_ff,
        max_seq=args.max_seq,
        seed=args.model_seed,
    )


def _load_base(path: Optional[str], args: argparse.Namespace) -> ModelWeights:
    if path is None:
        return init_model(_model_config(args))
    model, _ = load_model(path)
    if not isinstance(model, ModelWeights):
        raise HeftError(f"{path} holds a trained {type(model).__name__}; expected a base model checkpoint")
    return model


def cmd_gen_data(args: argparse.Namespace) -> int:
    examples = synth_generate(
        args.seed,
        args.n,
        args.entities,
        args.properties,
        args.chain,
        n_categories=args.categories,
        distractor_facts=args.distractor_facts,
        distractor_rules=args.distractor_rules,
        world_seed=args.world_seed,
    )
    write_boolq_jsonl(args.out, examples)
    print(f"wrote {len(examples)} examples to {args.out}")
    return 0


def cmd_pretrain(args: argparse.Namespace) -> int:
    tokenizer = ByteTokenizer()
    base = _load_base(args.base, args)
    records = to_records(load_boolq_jsonl(args.data), tokenizer, base.config.max_seq)
    config = TrainConfig(
        learning_rate=args.lr,
        epochs=args.epochs,
        batch_size=args.batch_size,
        grad_accum=args.grad_accum,
        seed=args.seed,
    )
    weights, report = pretrain_base(base, records, config)
    save_model(args.out, weights, run={"pretrain": report.model_dump(mode="json")})
    print(f"pre-trained {report.optimizer_steps} steps, final loss {report.final_mean_loss}, saved {args.out}")
    return 0


def _plan_epochs(args: argparse.Namespace) -> tuple[int, int]:
    lora_epochs = args.lora_epochs if args.method in ("lora", "heft") else 0
    reft_epochs = args.reft_epochs if args.method in ("reft", "heft") else 0
    expected = {"lora": "lora_only", "reft": "reft_only", "heft": "heft"}[args.method]
    if method_label(lora_epochs, reft_epochs) != expected:
        raise ExperimentError(
            f"--method {args.method} needs nonzero epochs for its stages "
            f"(got --lora-epochs {args.lora_epochs} --reft-epochs {args.reft_epochs})"
        )
    return lora_epochs, reft_epochs


def cmd_train(args: argparse.Namespace) -> int:
    if args.results and not args.eval_data:
        raise ExperimentError("--results needs --eval-data")
    lora_epochs, reft_epochs = _plan_epochs(args)
    tokenizer = ByteTokenizer()
    base = _load_base(args.base, args)
    records = to_records(load_boolq_jsonl(args.data), tokenizer, base.config.max_seq)
    plan = HeftPlan(
        lora_epochs=lora_epochs,
        reft_epochs=reft_epochs,
        lora_config=LoraConfig(r=args.r, alpha=args.alpha, dropout_p=args.dropout),
        reft_config=ReftConfig(layer=args.reft_layer, low_rank_dimension=args.reft_dim),
        lora_train=LORA_TRAIN_DEFAULTS.model_copy(update={"learning_rate": args.lr, "seed": args.seed}),
        reft_train=REFT_TRAIN_DEFAULTS.model_copy(update={"learning_rate": args.lr, "seed": args.seed}),
    )
    digest = base.digest()
    result = run_heft(base, plan, records)
    record = RunRecord(
        method=method_label(lora_epochs, reft_epochs),
        lora_epochs=lora_epochs,
        reft_epochs=reft_epochs,
        plan=plan,
        stages=result.reports,
        seed=args.seed,
        base_digest=digest,
        host=checkServerStatus(),
    )
    save_heft(args.out, result.intervention, run=record.model_dump(mode="json"))
    if args.save_adapter:
        stage_one = RunRecord(
            method=method_label(lora_epochs, 0),
            lora_epochs=lora_epochs,
            reft_epochs=0,
            plan=plan.model_copy(update={"reft_epochs": 0}),
            stages=result.reports[:1],
            seed=args.seed,
            base_digest=digest,
        )
        save_lora(args.save_adapter, result.lora_model, run=stage_one.model_dump(mode="json"))
    if args.eval_data:
        evaluation = evaluateModel(
            result.intervention,
            load_boolq_jsonl(args.eval_data),
            tokenizer,
            lora_epochs=lora_epochs,
            reft_epochs=reft_epochs,
            workers=args.workers,
        )
        record = record.model_copy(update={"evaluation": evaluation})
        if args.results:
            write_results(args.results, record)
    print(record.model_dump_json(indent=2))
    return 0


def cmd_eval(args: argparse.Namespace) -> int:
    model, config = load_model(args.checkpoint)
    run = dict(config.run)
    if "plan" in run:
        stored = RunRecord.model_validate(run)
    else:
        weights = model if isinstance(model, ModelWeights) else model.base
        stored = RunRecord(
            method="base",
            lora_epochs=0,
            reft_epochs=0,
            plan=HeftPlan(lora_epochs=0, reft_epochs=0),
            seed=0,
            base_digest=weights.digest(),
        )
    evaluation = evaluateModel(
        model,
        load_boolq_jsonl(args.data),
        ByteTokenizer(),
        lora_epochs=stored.lora_epochs,
        reft_epochs=stored.reft_epochs,
        max_new_tokens=args.max_new_tokens,
        workers=args.workers,
    )
    record = stored.model_copy(
        update={"evaluation": evaluation, "host": checkServerStatus(), "created": datetime.now()}
    )
    write_results(args.results, record)
    print(
        f"accuracy {evaluation.accuracy:.2f} "
        f"({evaluation.correct_predictions}/{evaluation.num_validation_samples}), wrote {args.results}"
    )
    return 0


def cmd_experiment(args: argparse.Namespace) -> int:
    config_path = Path(args.config)
    config = ExperimentConfig.model_validate_json(config_path.read_text(encoding="utf-8"))
    outcome = runExperiment(config, args.out_dir, base_dir=config_path.parent)
    print(comparison_table(outcome.records), end="")
    for stem, message in outcome.failures.items():
        print(f"heft: plan {stem} failed: {message}", file=sys.stderr)
    return 1 if outcome.failures else 0


def cmd_inspect(args: argparse.Namespace) -> int:
    raw, tensors = load_checkpoint(args.checkpoint)
    model, config = load_model(args.checkpoint)
    weights = model if isinstance(model, ModelWeights) else model.base
    print(f"kind: {config.kind}")
    print(f"model: {config.model.model_dump_json()}")
    if config.lora is not None:
        print(f"lora: {config.lora.model_dump_json()}")
    if config.reft is not None:
        print(f"reft: {config.reft.model_dump_json()}")
    for name, value in tensors.items():
        print(f"  {name} {list(value.shape)}")
    print(f"base parameters: {weights.parameter_count()}")
    if isinstance(model, LoraModel):
        print(f"adapter parameters: {lora_trainable_parameters(model)[1]}")
    if isinstance(model, ReftModel):
        print(f"intervention parameters: {model.trainable_count()}")
    print(f"base digest: {weights.digest()}")
    if raw.get("run"):
        print(f"run: {json.dumps(raw['run'], sort_keys=True)}")
    return 0


def cmd_serve(args: argparse.Namespace) -> int:
    if not Path(args.checkpoint).is_file():
        raise FileNotFoundError(f"checkpoint not found: {args.checkpoint}")
    os.environ[CHECKPOINT_ENV] = args.checkpoint
    uvicorn.run("project.server:app", host=args.host, port=args.port)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="heft", description="Two-stage LoRA then LoReFT fine-tuning of a mini transformer."
    )
    parser.add_argument("--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    commands = parser.add_subparsers(dest="command", metavar="command")

    gen = commands.add_parser("gen-data", help="write a synthetic BoolQ-format JSONL split")
    gen.add_argument("--seed", type=int, default=0)
    gen.add_argument("--n", type=int, default=1024)
    gen.add_argument("--entities", type=int, default=24)
    gen.add_argument("--properties", type=int, default=8)
    gen.add_argument("--categories", type=int, default=None)
    gen.add_argument("--chain", type=int, choices=[1, 2], default=2)
    gen.add_argument("--distractor-facts", type=int, default=2)
    gen.add_argument("--distractor-rules", type=int, default=1)
    gen.add_argument("--world-seed", type=int, default=None)
    gen.add_argument("--out", default="boolq_synthetic.jsonl")
    gen.set_defaults(handler=cmd_gen_data)

    pre = commands.add_parser("pretrain", help="full-parameter training of a base model")
    pre.add_argument("--data", required=True)
    pre.add_argument("--base", default=None)
    pre.add_argument("--epochs", type=int, default=PRETRAIN_TRAIN_DEFAULTS.epochs)
    pre.add_argument("--lr", type=float, default=PRETRAIN_TRAIN_DEFAULTS.learning_rate)
    pre.add_argument("--batch-size", type=int, default=PRETRAIN_TRAIN_DEFAULTS.batch_size)
    pre.add_argument("--grad-accum", type=int, default=PRETRAIN_TRAIN_DEFAULTS.grad_accum)
    pre.add_argument("--seed", type=int, default=0)
    pre.add_argument("--out", default="base.heft")
    _add_model_args(pre)
    pre.set_defaults(handler=cmd_pretrain)

    lora_defaults, reft_defaults = LoraConfig(), ReftConfig()
    train = commands.add_parser("train", help="run one LoRA-only, ReFT-only or HEFT plan")
    train.add_argument("--method", choices=["lora", "reft", "heft"], default="heft")
    train.add_argument("--lora-epochs", type=int, default=3)
    train.add_argument("--reft-epochs", type=int, default=3)
    train.add_argument("--data", required=True)
    train.add_argument("--base", default=None)
    train.add_argument("--r", type=int, default=lora_defaults.r)
    train.add_argument("--alpha", type=float, default=lora_defaults.alpha)
    train.add_argument("--dropout", type=float, default=lora_defaults.dropout_p)
    train.add_argument("--reft-dim", type=int, default=reft_defaults.low_rank_dimension)
    train.add_argument("--reft-layer", type=int, default=None)
    train.add_argument("--lr", type=float, default=LORA_TRAIN_DEFAULTS.learning_rate)
    train.add_argument("--seed", type=int, default=0)
    train.add_argument("--out", default="heft.heft")
    train.add_argument("--save-adapter", default=None, help="also save the unmerged Stage-1 adapters here")
    train.add_argument("--eval-data", default=None)
    train.add_argument("--results", default=None)
    train.add_argument("--workers", type=int, default=1)
    _add_model_args(train)
    train.set_defaults(handler=cmd_train)

    ev = commands.add_parser("eval", help="score a checkpoint on a validation split")
    ev.add_argument("--checkpoint", required=True)
    ev.add_argument("--data", required=True)
    ev.add_argument("--results", default="evaluation_results.json")
    ev.add_argument("--max-new-tokens", type=int, default=MAX_NEW_TOKENS)
    ev.add_argument("--workers", type=int, default=1)
    ev.set_defaults(handler=cmd_eval)

    exp = commands.add_parser("experiment", help="run a grid of plans from a JSON config")
    exp.add_argument("--config", required=True)
    exp.add_argument("--out-dir", default="results")
    exp.set_defaults(handler=cmd_experiment)

    ins = commands.add_parser("inspect", help="describe a checkpoint")
    ins.add_argument("--checkpoint", required=True)
    ins.set_defaults(handler=cmd_inspect)

    srv = commands.add_parser("serve", help="serve a checkpoint over HTTP")
    srv.add_argument("--checkpoint", required=True)
    srv.add_argument("--host", default="127.0.0.1")
    srv.add_argument("--port", type=int, default=8000)
    srv.set_defaults(handler=cmd_serve)
    return parser


def _one_line(error: BaseException) -> str:
    return " ".join(str(error).split()) or type(error).__name__


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    argv = list(sys.argv[1:] if argv is None else argv)
    if not argv:
        parser.print_usage(sys.stderr)
        return 2
    try:
        args = parser.parse_args(argv)
    except SystemExit as exit_:
        return int(exit_.code or 0)
    if args.command is None:
        parser.print_usage(sys.stderr)
        return 2
    logging.basicConfig(level=args.log_level, format=LOG_FORMAT)

    try:
        return args.handler(args)
    except OSError as error:
        parser.print_usage(sys.stderr)
        print(f"heft: error: {_one_line(error)}", file=sys.stderr)
    except (HeftError, ValidationError) as error:
        print(f"heft: error: {_one_line(error)}", file=sys.stderr)
    return 1
