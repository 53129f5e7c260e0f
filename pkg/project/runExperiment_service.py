"""
Experiment grids over the HEFT baselines: one run per plan from a shared base, one
results file per run, and a combined comparison table and plot-data file.
"""

import csv
import io
import json
import logging
from datetime import datetime
from pathlib import Path
from typing import Any, Literal, Optional, Sequence, Union

from pydantic import BaseModel, Field, model_validator

from project.checkServerStatus_service import ServerStatusResponse, checkServerStatus
from project.checkpoint import load_model, save_heft, save_model
from project.errors import ExperimentError, TrainingError
from project.evaluateModel_service import EvalReport, evaluateModel
from project.lora import LoraConfig
from project.reft import ReftConfig
from project.tasks import (
    BoolExample,
    ByteTokenizer,
    SupervisedRecord,
    build_supervised_record,
    load_boolq_jsonl,
    synth_generate,
)
from project.training import (
    LORA_TRAIN_DEFAULTS,
    PRETRAIN_TRAIN_DEFAULTS,
    REFT_TRAIN_DEFAULTS,
    HeftPlan,
    StageReport,
    TrainConfig,
    pretrain_base,
    run_heft,
)
from project.transformer import ModelConfig, ModelWeights, init_model

logger = logging.getLogger(__name__)

Method = Literal["base", "lora_only", "reft_only", "heft"]

TABLE_HEADER = ("method", "lora_epochs", "reft_epochs", "accuracy", "minutes")
VOLATILE = frozenset({"created", "wall_seconds", "host", "last_update_time"})


def method_label(lora_epochs: int, reft_epochs: int) -> Method:
    if lora_epochs and reft_epochs:
        return "heft"
    if lora_epochs:
        return "lora_only"
    if reft_epochs:
        return "reft_only"
    return "base"


class RunRecord(BaseModel):
    """
    Everything one plan produced: the plan, per-stage reports, the evaluation, and the
    digest of the base it started from.
    """

    method: Method
    lora_epochs: int = Field(ge=0)
    reft_epochs: int = Field(ge=0)
    plan: HeftPlan
    stages: list[StageReport] = Field(default_factory=list)
    evaluation: Optional[EvalReport] = None
    seed: int = Field(ge=0)
    base_digest: str
    created: datetime = Field(default_factory=datetime.now)
    host: Optional[ServerStatusResponse] = None

    @model_validator(mode="after")
    def check_method(self) -> "RunRecord":
        if (self.plan.lora_epochs, self.plan.reft_epochs) != (self.lora_epochs, self.reft_epochs):
            raise ValueError("run epochs disagree with the plan")
        if self.method != method_label(self.lora_epochs, self.reft_epochs):
            raise ValueError(
                f"method {self.method!r} does not match {self.lora_epochs}+{self.reft_epochs} epochs"
            )
        return self

    @property
    def training_seconds(self) -> float:
        return sum(stage.wall_seconds for stage in self.stages)

    @property
    def minutes(self) -> int:
        return round(self.training_seconds / 60)

    @property
    def stem(self) -> str:
        return f"{self.method}_{self.lora_epochs}_{self.reft_epochs}"


def results_payload(record: RunRecord) -> dict[str, Any]:
    """
    The results-file object: the five evaluation fields at the top level and the full run
    record under "heft".
    """
    if record.evaluation is None:
        raise ExperimentError(f"run {record.stem} has no evaluation to report")
    evaluation = record.evaluation
    return {
        "lora_epochs": record.lora_epochs,
        "reft_epochs": record.reft_epochs,
        "num_validation_samples": evaluation.num_validation_samples,
        "correct_predictions": evaluation.correct_predictions,
        "accuracy": evaluation.accuracy,
        "heft": record.model_dump(mode="json"),
    }


def write_results(path: Union[str, Path], record: RunRecord) -> None:
    Path(path).write_text(json.dumps(results_payload(record), indent=2) + "\n", encoding="utf-8")


def read_results(path: Union[str, Path]) -> RunRecord:
    payload = json.loads(Path(path).read_text(encoding="utf-8"))
    try:
        return RunRecord.model_validate(payload["heft"])
    except KeyError as error:
        raise ExperimentError(f"{path} has no 'heft' run record") from error


def strip_volatile(value: Any) -> Any:
    """A copy of a results object without timestamp, wall-time and host fields."""
    if isinstance(value, dict):
        return {k: strip_volatile(v) for k, v in value.items() if k not in VOLATILE}
    if isinstance(value, list):
        return [strip_volatile(v) for v in value]
    return value


def comparison_table(records: Sequence[RunRecord]) -> str:
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(TABLE_HEADER)
    for record in records:
        accuracy = f"{record.evaluation.accuracy:.2f}" if record.evaluation else ""
        writer.writerow([record.method, record.lora_epochs, record.reft_epochs, accuracy, record.minutes])
    return buffer.getvalue()


def _plot_label(record: RunRecord, efficient_heft: int) -> str:
    if record.method == "heft":
        return "a" if record.lora_epochs + record.reft_epochs == efficient_heft else "d"
    return {"reft_only": "b", "lora_only": "c"}[record.method]


def emit_plot_data(records: Sequence[RunRecord]) -> str:
    """
    Rows of "minutes accuracy label" for the accuracy-versus-compute scatter. The HEFT run
    with the fewest epochs is class a, ReFT-only b, LoRA-only c, other HEFT runs d.
    Unevaluated runs and the untrained base are left out.

    Example:
        emit_plot_data([heft_3_3])
        > "83 85.17 a\\n"
    """
    plotted = [r for r in records if r.method != "base" and r.evaluation is not None]
    heft_budgets = [r.lora_epochs + r.reft_epochs for r in plotted if r.method == "heft"]
    efficient = min(heft_budgets, default=-1)
    rows = [f"{r.minutes} {r.evaluation.accuracy:.2f} {_plot_label(r, efficient)}" for r in plotted]
    return "".join(row + "\n" for row in rows)


class SyntheticDatasetSpec(BaseModel):
    seed: int = Field(0, ge=0)
    n: int = Field(ge=2)
    n_entities: int = Field(24, ge=2)
    n_properties: int = Field(8, ge=2)
    chain: Literal[1, 2] = 2
    n_categories: Optional[int] = None
    distractor_facts: int = Field(2, ge=0)
    distractor_rules: int = Field(1, ge=0)
    world_seed: Optional[int] = None

    def generate(self) -> list[BoolExample]:
        return synth_generate(
            self.seed,
            self.n,
            self.n_entities,
            self.n_properties,
            self.chain,
            n_categories=self.n_categories,
            distractor_facts=self.distractor_facts,
            distractor_rules=self.distractor_rules,
            world_seed=self.world_seed,
        )


class DatasetSpec(BaseModel):
    """A BoolQ-format JSONL file or the parameters of a synthetic split, exactly one of them."""

    path: Optional[str] = None
    synthetic: Optional[SyntheticDatasetSpec] = None

    @model_validator(mode="after")
    def check_source(self) -> "DatasetSpec":
        if (self.path is None) == (self.synthetic is None):
            raise ValueError("a dataset needs exactly one of path or synthetic")
        return self

    def load(self, base_dir: Path) -> list[BoolExample]:
        if self.synthetic is not None:
            return self.synthetic.generate()
        return load_boolq_jsonl(base_dir / self.path)


class PretrainSpec(BaseModel):
    data: DatasetSpec
    train: TrainConfig = PRETRAIN_TRAIN_DEFAULTS


class PlanSpec(BaseModel):
    lora_epochs: int = Field(ge=0)
    reft_epochs: int = Field(ge=0)


class ExperimentConfig(BaseModel):
    """
    An experiment file. The seed is applied to both stages' train configs; dataset paths
    are resolved against the directory holding the file.
    """

    name: str = "experiment"
    model: ModelConfig = ModelConfig()
    seed: int = Field(0, ge=0)
    train_data: DatasetSpec
    eval_data: DatasetSpec
    pretrain: Optional[PretrainSpec] = None
    plans: list[PlanSpec] = Field(default_factory=list)
    lora: LoraConfig = LoraConfig()
    reft: ReftConfig = ReftConfig()
    lora_train: TrainConfig = LORA_TRAIN_DEFAULTS
    reft_train: TrainConfig = REFT_TRAIN_DEFAULTS
    evaluate_base: bool = False
    eval_workers: int = Field(1, ge=1)
    save_checkpoints: bool = False

    def heft_plan(self, spec: PlanSpec) -> HeftPlan:
        return HeftPlan(
            lora_epochs=spec.lora_epochs,
            reft_epochs=spec.reft_epochs,
            lora_config=self.lora,
            reft_config=self.reft,
            lora_train=self.lora_train.model_copy(update={"seed": self.seed}),
            reft_train=self.reft_train.model_copy(update={"seed": self.seed}),
        )


class ExperimentOutcome(BaseModel):
    records: list[RunRecord]
    failures: dict[str, str] = Field(default_factory=dict)
    table_path: Optional[str] = None
    plot_path: Optional[str] = None


def to_records(
    examples: Sequence[BoolExample], tokenizer: ByteTokenizer, max_seq: int
) -> list[SupervisedRecord]:
    return [build_supervised_record(ex, tokenizer, max_seq) for ex in examples]


def runPlan(
    base: ModelWeights,
    plan: HeftPlan,
    train_records: Sequence[SupervisedRecord],
    eval_examples: Sequence[BoolExample],
    tokenizer: ByteTokenizer,
    *,
    seed: int = 0,
    workers: int = 1,
    checkpoint_path: Optional[Path] = None,
) -> RunRecord:
    """
    Trains one plan on the shared base and evaluates the result.

    Args:
        base (ModelWeights): The shared starting point; it must come back bit-unchanged.
        plan (HeftPlan): Epochs and configs of both stages.
        train_records (Sequence[SupervisedRecord]): Tokenized training split.
        eval_examples (Sequence[BoolExample]): Validation split.
        tokenizer (ByteTokenizer): Tokenizer behind both splits.
        seed (int): Seed recorded on the run.
        workers (int): Evaluation threads.
        checkpoint_path (Optional[Path]): Where to save the merged model and intervention.

    Returns:
        RunRecord: Plan, stage reports, evaluation and host snapshot.
    """
    digest = base.digest()
    result = run_heft(base, plan, train_records)
    if base.digest() != digest:
        raise TrainingError("base weights changed during training")
    evaluation = evaluateModel(
        result.intervention,
        eval_examples,
        tokenizer,
        lora_epochs=plan.lora_epochs,
        reft_epochs=plan.reft_epochs,
        workers=workers,
    )
    record = RunRecord(
        method=method_label(plan.lora_epochs, plan.reft_epochs),
        lora_epochs=plan.lora_epochs,
        reft_epochs=plan.reft_epochs,
        plan=plan,
        stages=result.reports,
        evaluation=evaluation,
        seed=seed,
        base_digest=digest,
        host=checkServerStatus(),
    )
    if checkpoint_path is not None:
        save_heft(checkpoint_path, result.intervention, run=record.model_dump(mode="json", exclude={"evaluation"}))
    return record


def _prepare_base(
    config: ExperimentConfig, out_dir: Path, base_dir: Path, tokenizer: ByteTokenizer
) -> tuple[ModelWeights, Optional[StageReport]]:
    """
    The starting weights of every plan. With a pretrain block the pre-trained base is
    cached in out_dir together with the pretrain settings it came from, and reused only
    while model and pretrain settings are unchanged.
    """
    weights = init_model(config.model)
    if config.pretrain is None:
        return weights, None
    cached = out_dir / "pretrained_base.heft"
    settings = config.pretrain.model_dump(mode="json")
    if cached.exists():
        model, checkpoint = load_model(cached)
        if not isinstance(model, ModelWeights):
            raise ExperimentError(f"{cached} does not hold a base model")
        if model.config == config.model and checkpoint.run.get("pretrain_spec") == settings:
            logger.info("Reusing pre-trained base from %s", cached)
            return model, None
        logger.warning("Pre-trained base in %s came from other settings; pre-training again", cached)
    examples = config.pretrain.data.load(base_dir)
    records = to_records(examples, tokenizer, config.model.max_seq)
    weights, report = pretrain_base(weights, records, config.pretrain.train)
    save_model(cached, weights, run={"pretrain": report.model_dump(mode="json"), "pretrain_spec": settings})
    return weights, report


def _finished_run(path: Path, plan: HeftPlan, seed: int, base_digest: str) -> Optional[RunRecord]:
    """The run stored at path if it was produced by this plan, seed and base."""
    if not path.exists():
        return None
    record = read_results(path)
    if record.plan == plan and record.seed == seed and record.base_digest == base_digest:
        return record
    logger.warning("Results in %s came from another plan, seed or base; running again", path)
    return None


def runExperiment(
    config: ExperimentConfig,
    out_dir: Union[str, Path],
    base_dir: Union[str, Path] = ".",
) -> ExperimentOutcome:
    """
    Runs every plan of an experiment from the same base and writes the results.

    Each plan writes <method>_<lora>_<reft>.json under out_dir; a plan whose file already
    holds a run of the same plan, seed and base is loaded instead of rerun. A failing
    plan is logged and recorded in the outcome while the remaining plans continue.
    comparison.csv and plot_data.txt cover the runs that finished.

    Args:
        config (ExperimentConfig): Model, datasets, plan grid and seeds.
        out_dir (Union[str, Path]): Directory for results, table, plot data and checkpoints.
        base_dir (Union[str, Path]): Directory that relative dataset paths start from.

    Returns:
        ExperimentOutcome: Run records, failures and the paths written.

    Example:
        outcome = runExperiment(ExperimentConfig.model_validate_json(text), "results")
        [r.method for r in outcome.records]
        > ['reft_only', 'lora_only', 'heft']
    """
    if not config.plans and not config.evaluate_base:
        raise ExperimentError("no plans")
    out_dir = Path(out_dir)
    base_dir = Path(base_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    tokenizer = ByteTokenizer()

    base, _ = _prepare_base(config, out_dir, base_dir, tokenizer)
    base_digest = base.digest()
    train_records = to_records(config.train_data.load(base_dir), tokenizer, config.model.max_seq)
    eval_examples = config.eval_data.load(base_dir)

    specs = list(config.plans)
    if config.evaluate_base:
        specs.insert(0, PlanSpec(lora_epochs=0, reft_epochs=0))

    records: list[RunRecord] = []
    failures: dict[str, str] = {}
    for spec in specs:
        plan = config.heft_plan(spec)
        stem = f"{method_label(spec.lora_epochs, spec.reft_epochs)}_{spec.lora_epochs}_{spec.reft_epochs}"
        results_path = out_dir / f"{stem}.json"
        finished = _finished_run(results_path, plan, config.seed, base_digest)
        if finished is not None:
            logger.info("Loading finished run %s from %s", stem, results_path)
            records.append(finished)
            continue
        logger.info("Running plan %s", stem)
        try:
            record = runPlan(
                base,
                plan,
                train_records,
                eval_examples,
                tokenizer,
                seed=config.seed,
                workers=config.eval_workers,
                checkpoint_path=out_dir / f"{stem}.heft" if config.save_checkpoints else None,
            )
        except Exception as error:
            logger.exception("Plan %s failed", stem)
            failures[stem] = str(error)
            continue
        write_results(results_path, record)
        records.append(record)

    table_path = out_dir / "comparison.csv"
    table_path.write_text(comparison_table(records), encoding="utf-8")
    plot_path = out_dir / "plot_data.txt"
    plot_path.write_text(emit_plot_data(records), encoding="utf-8")
    logger.info("%s: %d runs finished, %d failed", config.name, len(records), len(failures))
    return ExperimentOutcome(
        records=records, failures=failures, table_path=str(table_path), plot_path=str(plot_path)
    )
