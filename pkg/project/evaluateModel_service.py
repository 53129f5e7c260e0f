import logging
import time
from concurrent.futures import ThreadPoolExecutor
from enum import Enum
from typing import Optional, Protocol, Sequence

from pydantic import BaseModel, Field, model_validator

from project.errors import SequenceLengthError
from project.tasks import BoolExample, ByteTokenizer, build_supervised_record
from project.transformer import ModelConfig

logger = logging.getLogger(__name__)

MAX_NEW_TOKENS = 5


class Answer(str, Enum):
    YES = "Yes"
    NO = "No"
    UNKNOWN = "Unknown"


class GenerativeModel(Protocol):
    @property
    def architecture(self) -> ModelConfig: ...

    def generate(self, prompt: Sequence[int], max_new: int, eos_id: Optional[int] = None) -> list[int]: ...


class Prediction(BaseModel):
    """
    The outcome of answering one example: the decoded continuation and the answer read
    from it.
    """

    generated_text: str
    answer: Answer
    correct: bool


def format_accuracy(correct: int, total: int) -> float:
    """
    Percentage of correct predictions rounded the way the results file prints it.

    Example:
        format_accuracy(2785, 3270)
        > 85.17
    """
    return float(f"{100.0 * correct / total:.2f}")


class EvalReport(BaseModel):
    """
    Accuracy of one model over one validation set, with the raw counts kept alongside the
    two-decimal percentage.
    """

    lora_epochs: int = Field(ge=0)
    reft_epochs: int = Field(ge=0)
    num_validation_samples: int = Field(ge=1)
    correct_predictions: int = Field(ge=0)
    unknown_predictions: int = Field(0, ge=0)
    accuracy: float
    wall_seconds: float = Field(0.0, ge=0)

    @model_validator(mode="after")
    def check_counts(self) -> "EvalReport":
        if self.correct_predictions + self.unknown_predictions > self.num_validation_samples:
            raise ValueError("correct and unknown predictions exceed the number of samples")
        expected = format_accuracy(self.correct_predictions, self.num_validation_samples)
        if self.accuracy != expected:
            raise ValueError(f"accuracy {self.accuracy} does not match counts (expected {expected})")
        return self


def extract_answer(generated_text: str) -> Answer:
    """
    Reads a yes/no answer out of generated text with a case-sensitive substring test;
    "Yes" wins when both words appear.

    Example:
        extract_answer("No.")
        > Answer.NO
        extract_answer("yes")
        > Answer.UNKNOWN
    """
    if "Yes" in generated_text:
        return Answer.YES
    if "No" in generated_text:
        return Answer.NO
    return Answer.UNKNOWN


def predict_example(
    model: GenerativeModel,
    example: BoolExample,
    tokenizer: ByteTokenizer,
    max_new_tokens: int = MAX_NEW_TOKENS,
) -> Prediction:
    """
    Formats the prompt, greedily generates up to max_new_tokens new tokens, and scores the
    extracted answer against the label. A prompt that does not fit the model is answered
    Unknown.
    """
    try:
        record = build_supervised_record(example, tokenizer, model.architecture.max_seq)
    except SequenceLengthError as error:
        logger.warning("Prompt of %d tokens does not fit the model; scored as Unknown", error.length)
        return Prediction(generated_text="", answer=Answer.UNKNOWN, correct=False)
    new_tokens = model.generate(record.prompt_tokens, max_new_tokens, eos_id=tokenizer.EOS)
    text = tokenizer.decode(new_tokens)
    answer = extract_answer(text)
    expected = Answer.YES if example.answer else Answer.NO
    return Prediction(generated_text=text, answer=answer, correct=answer == expected)


def evaluateModel(
    model: GenerativeModel,
    examples: Sequence[BoolExample],
    tokenizer: ByteTokenizer,
    *,
    lora_epochs: int = 0,
    reft_epochs: int = 0,
    max_new_tokens: int = MAX_NEW_TOKENS,
    workers: int = 1,
) -> EvalReport:
    """
    Scores a model, with its intervention if it carries one, on a validation set.

    Args:
        model (GenerativeModel): Plain weights or an intervened model; anything with
            generate(prompt, max_new, eos_id).
        examples (Sequence[BoolExample]): The validation set, non-empty.
        tokenizer (ByteTokenizer): Tokenizer the model was trained with.
        lora_epochs (int): Stage-1 epochs behind the model, copied into the report.
        reft_epochs (int): Stage-2 epochs behind the model, copied into the report.
        max_new_tokens (int): Generation budget per example.
        workers (int): Threads used to fan out over examples. The model is read-only and
            predictions are reduced in example order.

    Returns:
        EvalReport: Counts, the two-decimal accuracy and the evaluation wall time.

    Example:
        report = evaluateModel(weights, examples, ByteTokenizer())
        report.accuracy
        > 50.0
    """
    if not examples:
        raise ValueError("evaluation needs at least one example")
    start = time.perf_counter()
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            predictions = list(
                pool.map(lambda ex: predict_example(model, ex, tokenizer, max_new_tokens), examples)
            )
    else:
        predictions = [predict_example(model, ex, tokenizer, max_new_tokens) for ex in examples]

    correct = sum(p.correct for p in predictions)
    unknown = sum(p.answer is Answer.UNKNOWN for p in predictions)
    report = EvalReport(
        lora_epochs=lora_epochs,
        reft_epochs=reft_epochs,
        num_validation_samples=len(examples),
        correct_predictions=correct,
        unknown_predictions=unknown,
        accuracy=format_accuracy(correct, len(examples)),
        wall_seconds=time.perf_counter() - start,
    )
    logger.info(
        "Evaluated %d examples: %d correct, %d unknown, accuracy %.2f",
        report.num_validation_samples,
        correct,
        unknown,
        report.accuracy,
    )
    return report
