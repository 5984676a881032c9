import uuid
from datetime import datetime, timezone
from typing import Optional

from sqlalchemy import func, select
from sqlalchemy.ext.asyncio import AsyncSession

from app.models.run import RunStatus, TrackingRun
from app.schemas.report import MetricsReport


class RunService:
    def __init__(self, db: AsyncSession):
        self.db = db

    async def list_runs(
        self,
        status: Optional[RunStatus] = None,
        page: int = 1,
        limit: int = 20,
    ) -> tuple[list[TrackingRun], int]:
        query = select(TrackingRun)

        if status:
            query = query.where(TrackingRun.status == status)

        count_query = select(func.count()).select_from(query.subquery())
        total_result = await self.db.execute(count_query)
        total = total_result.scalar() or 0

        query = query.order_by(TrackingRun.created_at.desc())
        query = query.offset((page - 1) * limit).limit(limit)

        result = await self.db.execute(query)
        return list(result.scalars().all()), total

    async def get_run(self, run_id: uuid.UUID) -> Optional[TrackingRun]:
        query = select(TrackingRun).where(TrackingRun.id == run_id)
        result = await self.db.execute(query)
        return result.scalar_one_or_none()

    async def create_run(self, dataset_path: str, config: str) -> TrackingRun:
        run = TrackingRun(dataset_path=dataset_path, config=config, status=RunStatus.QUEUED)
        self.db.add(run)
        await self.db.flush()
        await self.db.refresh(run)
        return run

    async def _save(self, run: TrackingRun) -> TrackingRun:
        run.updated_at = datetime.now(timezone.utc)
        await self.db.flush()
        await self.db.refresh(run)
        return run

    async def mark_running(self, run: TrackingRun, out_path: str) -> TrackingRun:
        run.status = RunStatus.RUNNING
        run.out_path = out_path
        return await self._save(run)

    async def mark_done(self, run: TrackingRun, report: MetricsReport, lost_frames: int) -> TrackingRun:
        run.status = RunStatus.DONE
        run.frames = report.frames
        run.lost_frames = lost_frames
        run.fps = report.fps
        run.add_recall = report.overall.add_recall_01d
        run.adds_recall = report.overall.adds_recall_01d
        run.report = report.model_dump_json()
        return await self._save(run)

    async def mark_failed(self, run: TrackingRun, error: str) -> TrackingRun:
        run.status = RunStatus.FAILED
        run.error = error[:1000]
        return await self._save(run)

    async def delete_run(self, run_id: uuid.UUID) -> bool:
        run = await self.get_run(run_id)
        if not run:
            return False

        await self.db.delete(run)
        await self.db.flush()
        return True
