import logging
from pathlib import Path
from typing import Optional, Union

from pydantic import BaseModel

from project.checkpoint import load_model
from project.evaluateModel_service import MAX_NEW_TOKENS, Answer, GenerativeModel, predict_example
from project.tasks import BoolExample, ByteTokenizer

logger = logging.getLogger(__name__)


class AnswerResponse(BaseModel):
    """
    The model's reply to one passage/question pair: the raw continuation and the answer
    extracted from it.
    """

    question: str
    generated_text: str
    answer: Answer


class _LoadedModel:
    model: Optional[GenerativeModel] = None
    checkpoint: Optional[str] = None


tokenizer = ByteTokenizer()


def load_answerer(path: Union[str, Path]) -> None:
    """Loads the checkpoint that answerQuestion uses until the next call."""
    model, config = load_model(path)
    _LoadedModel.model = model
    _LoadedModel.checkpoint = str(path)
    logger.info("Serving %s checkpoint from %s", config.kind, path)


def unload_answerer() -> None:
    _LoadedModel.model = None
    _LoadedModel.checkpoint = None


def loaded_checkpoint() -> Optional[str]:
    return _LoadedModel.checkpoint


def answerQuestion(passage: str, question: str, max_new_tokens: int = MAX_NEW_TOKENS) -> AnswerResponse:
    """
    Answers a yes/no question about a passage with the loaded model.

    Args:
        passage (str): The text the question is about.
        question (str): A yes/no question.
        max_new_tokens (int): Generation budget.

    Returns:
        AnswerResponse: The generated text and the extracted Yes/No/Unknown answer.

    Example:
        load_answerer("runs/heft_3_3.heft")
        answerQuestion("Kobari is a tesi. Every tesi is lomu.", "Is Kobari lomu?")
        > AnswerResponse(question='Is Kobari lomu?', generated_text='Yes', answer=<Answer.YES: 'Yes'>)
    """
    if _LoadedModel.model is None:
        raise RuntimeError("no checkpoint loaded; set HEFT_CHECKPOINT")
    # The label is unknown here; the prediction's correctness flag is discarded.
    example = BoolExample(passage=passage, question=question, answer=True)
    prediction = predict_example(_LoadedModel.model, example, tokenizer, max_new_tokens)
    return AnswerResponse(question=question, generated_text=prediction.generated_text, answer=prediction.answer)
