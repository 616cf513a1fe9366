from sqlalchemy import Column, Integer, String, Float, DateTime, ForeignKey, JSON
from sqlalchemy.orm import declarative_base, relationship
from datetime import datetime

Base = declarative_base()

class Run(Base):
    __tablename__ = 'runs'

    id = Column(String, primary_key=True)
    command = Column(String, nullable=False)  # gen-data, warmup, train-wsod, eval, ablate-order, report
    config_hash = Column(String, index=True, nullable=False)
    seed = Column(Integer, nullable=False)
    output_dir = Column(String)
    status = Column(String, default='running')  # running, completed, failed
    error = Column(JSON, nullable=True)
    started_at = Column(DateTime, default=datetime.utcnow)
    finished_at = Column(DateTime, nullable=True)

    # Relationships
    stages = relationship("RunStage", back_populates="run", cascade="all, delete-orphan")
    artifacts = relationship("RunArtifact", back_populates="run", cascade="all, delete-orphan")
    metrics = relationship("RunMetric", back_populates="run", cascade="all, delete-orphan")

class RunStage(Base):
    __tablename__ = 'run_stages'

    id = Column(Integer, primary_key=True, autoincrement=True)
    run_id = Column(String, ForeignKey('runs.id'))
    tag = Column(String, nullable=False)  # FSOD-1 .. FSOD-k, WSOD
    status = Column(String)  # started, completed, failed
    stage_metrics = Column(JSON)
    timestamp = Column(DateTime, default=datetime.utcnow)

    run = relationship("Run", back_populates="stages")

class RunArtifact(Base):
    __tablename__ = 'run_artifacts'

    id = Column(Integer, primary_key=True, autoincrement=True)
    run_id = Column(String, ForeignKey('runs.id'))
    kind = Column(String, nullable=False)  # dataset, detector, wsod, csv, svg, report
    path = Column(String, nullable=False)
    sha256 = Column(String, nullable=False)
    config_hash = Column(String, index=True)
    timestamp = Column(DateTime, default=datetime.utcnow)

    run = relationship("Run", back_populates="artifacts")

class RunMetric(Base):
    __tablename__ = 'run_metrics'

    id = Column(Integer, primary_key=True, autoincrement=True)
    run_id = Column(String, ForeignKey('runs.id'))
    metric_name = Column(String)  # map, ap_class_3, tide_background, ...
    metric_value = Column(Float)
    meta_info = Column(JSON)
    timestamp = Column(DateTime, default=datetime.utcnow)

    run = relationship("Run", back_populates="metrics")
