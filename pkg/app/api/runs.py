import logging
import uuid
from pathlib import Path
from typing import Optional

from fastapi import APIRouter, Depends, HTTPException, Query, status
from sqlalchemy.ext.asyncio import AsyncSession
from starlette.concurrency import run_in_threadpool

from app.api.datasets import dataset_root
from app.core.auth import verify_api_key
from app.core.config import get_settings
from app.core.database import get_db
from app.core.errors import ConfigError, EvaluationMismatch, PoseStreamerError
from app.models.run import RunStatus
from app.schemas.config import dump_flat_config, load_run_config
from app.schemas.run import RunCreate, RunListResponse, RunResponse
from app.services.pipeline import track_and_evaluate
from app.services.run_service import RunService

logger = logging.getLogger(__name__)

router = APIRouter(prefix="/api/runs", tags=["Runs"])


@router.get("", response_model=RunListResponse)
async def list_runs(
    status: Optional[RunStatus] = Query(None, description="Filter by status"),
    page: int = Query(1, ge=1, description="Page number"),
    limit: int = Query(20, ge=1, le=100, description="Items per page"),
    db: AsyncSession = Depends(get_db),
    _: bool = Depends(verify_api_key),
):
    service = RunService(db)
    items, total = await service.list_runs(status=status, page=page, limit=limit)
    return RunListResponse(
        items=[RunResponse.from_run(item) for item in items],
        total=total,
        page=page,
        limit=limit,
    )


@router.get("/{run_id}", response_model=RunResponse)
async def get_run(
    run_id: uuid.UUID,
    db: AsyncSession = Depends(get_db),
    _: bool = Depends(verify_api_key),
):
    service = RunService(db)
    run = await service.get_run(run_id)
    if not run:
        raise HTTPException(
            status_code=status.HTTP_404_NOT_FOUND,
            detail="Run not found",
        )
    return RunResponse.from_run(run)


@router.post("", response_model=RunResponse, status_code=status.HTTP_201_CREATED)
async def create_run(
    data: RunCreate,
    db: AsyncSession = Depends(get_db),
    _: bool = Depends(verify_api_key),
):
    settings = get_settings()
    root = dataset_root(data.dataset)
    if not root.is_dir():
        raise HTTPException(
            status_code=status.HTTP_404_NOT_FOUND,
            detail=f"Dataset not found: {data.dataset}",
        )

    overrides = {**data.overrides, "dataset": str(root), "modality": data.modality, "seed": data.seed}
    try:
        config = load_run_config(
            Path(settings.default_run_config) if settings.default_run_config else None,
            overrides,
        )
    except ConfigError as e:
        raise HTTPException(
            status_code=status.HTTP_400_BAD_REQUEST,
            detail=str(e),
        )

    service = RunService(db)
    run = await service.create_run(str(root), dump_flat_config(config))
    config.out = Path(settings.data_dir) / "runs" / str(run.id)
    run = await service.mark_running(run, str(config.out))

    try:
        result, report = await run_in_threadpool(track_and_evaluate, config, settings.workers)
    except EvaluationMismatch as e:
        await service.mark_failed(run, str(e))
        await db.commit()
        raise HTTPException(
            status_code=status.HTTP_422_UNPROCESSABLE_ENTITY,
            detail=str(e),
        )
    except PoseStreamerError as e:
        logger.error("Run failed: id=%s, error=%s", run.id, e)
        run = await service.mark_failed(run, str(e))
        return RunResponse.from_run(run)

    run = await service.mark_done(run, report, lost_frames=sum(result.lost))
    logger.info("Run done: id=%s, frames=%d, fps=%.1f", run.id, report.frames, result.fps)
    return RunResponse.from_run(run)


@router.delete("/{run_id}", status_code=status.HTTP_204_NO_CONTENT)
async def delete_run(
    run_id: uuid.UUID,
    db: AsyncSession = Depends(get_db),
    _: bool = Depends(verify_api_key),
):
    service = RunService(db)
    deleted = await service.delete_run(run_id)
    if not deleted:
        raise HTTPException(
            status_code=status.HTTP_404_NOT_FOUND,
            detail="Run not found",
        )
