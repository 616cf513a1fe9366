from sqlalchemy import create_engine, desc
from sqlalchemy.orm import sessionmaker, Session
from contextlib import contextmanager
from typing import List, Optional, Dict, Generator
from pathlib import Path
from datetime import datetime

from app.database.models import Base, Run, RunStage, RunArtifact, RunMetric
from app.config import settings
from app.utils.logger import logger

class DatabaseOperations:

    def __init__(self, database_path: Optional[str] = None):
        self.database_path = database_path or settings.DATABASE_PATH
        Path(self.database_path).parent.mkdir(parents=True, exist_ok=True)
        self.engine = create_engine(
            f'sqlite:///{self.database_path}',
            connect_args={"check_same_thread": False},
            echo=False
        )
        Base.metadata.create_all(self.engine)
        self.SessionLocal = sessionmaker(bind=self.engine, expire_on_commit=False)
        logger.debug(f"Run ledger initialized at {self.database_path}")

    @contextmanager
    def get_session(self) -> Generator[Session, None, None]:
        session = self.SessionLocal()
        try:
            yield session
            session.commit()
        except Exception as e:
            session.rollback()
            logger.error(f"Database error: {str(e)}")
            raise
        finally:
            session.close()

    # Run Operations
    def create_run(self, run_id: str, command: str, config_hash: str, seed: int,
                   output_dir: str) -> Run:
        with self.get_session() as session:
            run = Run(
                id=run_id,
                command=command,
                config_hash=config_hash,
                seed=seed,
                output_dir=output_dir,
                status='running'
            )
            session.add(run)
            logger.info(f"Started run {run_id}: {command}")
            return run

    def finish_run(self, run_id: str, status: str, error: Optional[Dict] = None):
        with self.get_session() as session:
            run = session.query(Run).filter_by(id=run_id).first()
            if run:
                run.status = status
                run.error = error
                run.finished_at = datetime.utcnow()
                logger.info(f"Run {run_id} {status}")

    def get_run(self, run_id: str) -> Optional[Run]:
        with self.get_session() as session:
            return session.query(Run).filter_by(id=run_id).first()

    def get_runs(self, command: Optional[str] = None, limit: int = 50) -> List[Run]:
        with self.get_session() as session:
            query = session.query(Run)
            if command:
                query = query.filter_by(command=command)
            return query.order_by(desc(Run.started_at)).limit(limit).all()

    # Stage Operations
    def add_stage(self, run_id: str, tag: str, status: str, metrics: Optional[Dict] = None):
        with self.get_session() as session:
            session.add(RunStage(run_id=run_id, tag=tag, status=status, stage_metrics=metrics or {}))
            logger.log_stage(run_id, tag, status, (metrics or {}).get("map"))

    def get_stages(self, run_id: str) -> List[RunStage]:
        with self.get_session() as session:
            return session.query(RunStage).filter_by(run_id=run_id).order_by(RunStage.id).all()

    # Artifact Operations
    def add_artifact(self, run_id: str, kind: str, path: str, sha256: str, config_hash: str):
        with self.get_session() as session:
            session.add(RunArtifact(run_id=run_id, kind=kind, path=path, sha256=sha256,
                                    config_hash=config_hash))
            logger.log_checkpoint(run_id, kind, path)

    def get_artifacts(self, run_id: Optional[str] = None, kind: Optional[str] = None) -> List[RunArtifact]:
        with self.get_session() as session:
            query = session.query(RunArtifact)
            if run_id:
                query = query.filter_by(run_id=run_id)
            if kind:
                query = query.filter_by(kind=kind)
            return query.order_by(RunArtifact.id).all()

    def latest_artifact(self, path: str) -> Optional[RunArtifact]:
        with self.get_session() as session:
            return session.query(RunArtifact).filter_by(path=path).order_by(desc(RunArtifact.id)).first()

    # Metric Operations
    def add_metric(self, run_id: str, metric_name: str, metric_value: float,
                   metadata: Optional[Dict] = None):
        with self.get_session() as session:
            session.add(RunMetric(
                run_id=run_id,
                metric_name=metric_name,
                metric_value=metric_value,
                meta_info=metadata or {}
            ))

    def get_metrics(self, run_id: str) -> List[RunMetric]:
        with self.get_session() as session:
            return session.query(RunMetric).filter_by(run_id=run_id).order_by(RunMetric.id).all()

db_ops = DatabaseOperations()
