"""
FastAPI inference service over a stage-2 checkpoint.
"""

from fastapi import FastAPI, HTTPException
from pydantic import BaseModel, Field

from schemas import Domain, ExpressionLabel
from agra import config
from agra.adversarial import predict
from agra.data import load_image_array, to_image_tensor
from agra.errors import StateError, ValidationError
from agra.features import FaceSample, LandmarkSet
from agra.training import load_checkpoint

# FastAPI app
app = FastAPI(
    title="AGRA Expression Recognition API",
    description="Seven-class facial expression prediction for target-domain faces",
    version="1.0.0"
)

# Loaded lazily from AGRA_CHECKPOINT
_state = {"model": None, "bank": None, "checkpoint": None}


# Request/Response models
class PredictRequest(BaseModel):
    image_path: str
    landmarks: list[tuple[float, float]] = Field(description="le, re, no, lm, rm as (x, y) pixels")


class PredictResponse(BaseModel):
    label: int
    label_name: str
    scores: list[float]


class HealthResponse(BaseModel):
    status: str
    message: str


def get_model():
    """Load (once) the model and bank named by AGRA_CHECKPOINT."""
    if _state["model"] is None:
        model, bank, _ = load_checkpoint(config.CHECKPOINT, expected_stage=2)
        _state.update(model=model, bank=bank, checkpoint=config.CHECKPOINT)
        print(f"[API] Loaded {config.CHECKPOINT}")
    return _state["model"], _state["bank"]


@app.get("/health", response_model=HealthResponse)
def health_check():
    """Health check endpoint."""
    loaded = _state["model"] is not None
    return HealthResponse(
        status="healthy",
        message=f"model loaded from {_state['checkpoint']}" if loaded else "model not loaded yet"
    )


@app.post("/predict", response_model=PredictResponse)
def predict_expression(request: PredictRequest):
    """
    Predict the expression of one aligned 112x112 face.

    Args:
        request: PredictRequest with the image path and five landmarks

    Returns:
        PredictResponse with the argmax label and the seven raw scores
    """
    try:
        model, bank = get_model()
    except StateError as e:
        raise HTTPException(status_code=503, detail=f"Model unavailable: {e}")

    try:
        sample = FaceSample(
            image=to_image_tensor(load_image_array(request.image_path)),
            landmarks=LandmarkSet.from_points(request.landmarks),
            domain=Domain.TARGET,
        )
        prediction = predict(sample, model, bank)
    except ValidationError as e:
        raise HTTPException(status_code=400, detail=str(e))
    except StateError as e:
        raise HTTPException(status_code=503, detail=str(e))
    except Exception as e:
        raise HTTPException(status_code=500, detail=f"Error during prediction: {str(e)}")

    return PredictResponse(
        label=int(prediction.label),
        label_name=ExpressionLabel(prediction.label).name.lower(),
        scores=prediction.scores.tolist(),
    )


# Run with: uvicorn main:app --reload
if __name__ == "__main__":
    import uvicorn
    uvicorn.run(app, host="0.0.0.0", port=8000)
