import logging
import os
from contextlib import asynccontextmanager

import project.answerQuestion_service
import project.healthCheck_service
from fastapi import FastAPI
from fastapi.encoders import jsonable_encoder
from fastapi.responses import JSONResponse, Response

logger = logging.getLogger(__name__)

CHECKPOINT_ENV = "HEFT_CHECKPOINT"


@asynccontextmanager
async def lifespan(app: FastAPI):
    checkpoint = os.environ.get(CHECKPOINT_ENV)
    if checkpoint:
        project.answerQuestion_service.load_answerer(checkpoint)
    else:
        logger.warning("%s is not set; /boolq/answer will fail until a checkpoint is loaded", CHECKPOINT_ENV)
    yield
    project.answerQuestion_service.unload_answerer()


app = FastAPI(
    title="heft lab",
    lifespan=lifespan,
    description="Answers BoolQ-style yes/no questions with a LoRA-merged, LoReFT-intervened mini transformer.",
)


def _error_response(error: Exception) -> Response:
    res = dict()
    res["error"] = str(error)
    return JSONResponse(content=jsonable_encoder(res), status_code=500)


@app.post(
    "/boolq/answer",
    response_model=project.answerQuestion_service.AnswerResponse,
)
async def api_post_answerQuestion(
    passage: str, question: str
) -> project.answerQuestion_service.AnswerResponse | Response:
    """
    Answers a yes/no question about a passage with the loaded checkpoint: the prompt is
    formatted, up to five tokens are generated greedily with the intervention anchored at
    the last prompt position, and "Yes", "No" or "Unknown" is read from the text.
    """
    try:
        res = project.answerQuestion_service.answerQuestion(passage, question)
        return res
    except Exception as e:
        logger.exception("Error processing request")
        return _error_response(e)


@app.get("/health", response_model=project.healthCheck_service.HealthCheckResponse)
async def api_get_healthCheck() -> project.healthCheck_service.HealthCheckResponse | Response:
    """
    Liveness check with the loaded checkpoint path and a host snapshot.
    """
    try:
        res = project.healthCheck_service.healthCheck(project.answerQuestion_service.loaded_checkpoint())
        return res
    except Exception as e:
        logger.exception("Error processing request")
        return _error_response(e)
