import os
from pathlib import Path

from fastapi import APIRouter, Depends
from sqlalchemy import text
from sqlalchemy.ext.asyncio import AsyncSession

from app.core.config import get_settings
from app.core.database import get_db

router = APIRouter(prefix="/api", tags=["Health"])


async def database_status(db: AsyncSession) -> str:
    try:
        await db.execute(text("SELECT 1"))
        return "healthy"
    except Exception as e:
        return f"unhealthy: {str(e)}"


def data_dir_status() -> str:
    root = Path(get_settings().data_dir)
    if not root.exists():
        # created on the first dataset request
        return "missing"
    return "writable" if os.access(root, os.W_OK) else "read-only"


@router.get("/health")
async def health_check(db: AsyncSession = Depends(get_db)):
    settings = get_settings()
    db_status = await database_status(db)
    return {
        "status": "healthy" if db_status == "healthy" else "degraded",
        "database": db_status,
        "data_dir": data_dir_status(),
        "fps_target": settings.fps_target,
        "workers": settings.workers,
    }


@router.get("/readiness")
async def readiness_check(db: AsyncSession = Depends(get_db)):
    if await database_status(db) == "healthy":
        return {"status": "ready"}
    return {"status": "not ready"}
