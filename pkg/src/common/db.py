import datetime
import logging
import uuid
from pathlib import Path
from typing import Optional

from sqlalchemy.engine import Engine
from sqlmodel import Field, Relationship, Session, SQLModel, create_engine

from src.common.settings import get_db_url

logger = logging.getLogger(__name__)

_engines: dict[str, Engine] = {}


def get_engine(db_url: Optional[str] = None) -> Engine:
    url = db_url or get_db_url()
    if url not in _engines:
        if url.startswith("sqlite:///"):
            Path(url.removeprefix("sqlite:///")).parent.mkdir(parents=True, exist_ok=True)
        _engines[url] = create_engine(url)
    return _engines[url]


class Run(SQLModel, table=True):
    __tablename__ = "runs"

    run_id: str = Field(primary_key=True, default_factory=lambda: str(uuid.uuid4()))
    subcommand: str = Field(nullable=False, sa_column_kwargs={"index": True})
    config_hash: str = Field(nullable=False, sa_column_kwargs={"index": True})
    seed: int = Field(default=0)
    out_dir: str = Field(nullable=False)
    status: str = Field(default="pending")  # pending, running, completed, failed
    created_at: datetime.datetime = Field(default_factory=datetime.datetime.utcnow)
    updated_at: datetime.datetime = Field(default_factory=datetime.datetime.utcnow)
    result_summary: str | None = Field(default=None, nullable=True)

    artifacts: list["RunArtifact"] = Relationship(back_populates="run")


class RunArtifact(SQLModel, table=True):
    __tablename__ = "run_artifacts"

    artifact_id: str = Field(primary_key=True, default_factory=lambda: str(uuid.uuid4()))
    run_id: str = Field(foreign_key="runs.run_id")
    kind: str = Field(nullable=False)  # metrics, checkpoint, report, dump, csv, dataset
    path: str = Field(nullable=False)

    run: Optional[Run] = Relationship(back_populates="artifacts")


def create_tables(db_url: Optional[str] = None):
    SQLModel.metadata.create_all(get_engine(db_url))


def get_session(db_url: Optional[str] = None) -> Session:
    return Session(get_engine(db_url))
