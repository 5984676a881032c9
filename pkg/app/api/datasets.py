import logging
from pathlib import Path

from fastapi import APIRouter, Depends, HTTPException, status
from starlette.concurrency import run_in_threadpool

from app.core.auth import verify_api_key
from app.core.config import get_settings
from app.core.errors import PoseStreamerError
from app.schemas.run import DatasetCreate, DatasetResponse
from app.services.dataset import write_dataset

logger = logging.getLogger(__name__)

router = APIRouter(prefix="/api/datasets", tags=["Datasets"])


def dataset_root(name: str) -> Path:
    return Path(get_settings().data_dir) / "datasets" / name


@router.post("", response_model=DatasetResponse, status_code=status.HTTP_201_CREATED)
async def create_dataset(
    data: DatasetCreate,
    _: bool = Depends(verify_api_key),
):
    root = dataset_root(data.name)
    root.parent.mkdir(parents=True, exist_ok=True)
    try:
        frames = await run_in_threadpool(write_dataset, data.scene, root)
    except PoseStreamerError as e:
        logger.error("Dataset generation failed: name=%s, error=%s", data.name, e)
        raise HTTPException(
            status_code=status.HTTP_400_BAD_REQUEST,
            detail=str(e),
        )
    return DatasetResponse(name=data.name, path=str(root), frames=frames)
