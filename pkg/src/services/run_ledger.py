import datetime
import json
import logging
from typing import Any, Dict, List, Optional

from sqlmodel import Session, select

from src.common.db import Run, RunArtifact

logger = logging.getLogger(__name__)


class RunLedgerService:
    """Records every CLI run, its status and the artifacts it wrote"""

    def __init__(self, session: Session):
        self.session = session

    def create_run(self, subcommand: str, config_hash: str, seed: int, out_dir: str) -> Run:
        """Create a run in the pending state"""
        run = Run(subcommand=subcommand, config_hash=config_hash, seed=seed, out_dir=out_dir)
        self.session.add(run)
        self.session.commit()
        self.session.refresh(run)
        return run

    def get_run(self, run_id: str) -> Optional[Run]:
        return self.session.exec(select(Run).where(Run.run_id == run_id)).first()

    def update_run_status(
        self, run_id: str, status: str, result_summary: Optional[Dict[str, Any]] = None
    ):
        """Update run status and summary"""
        run = self.get_run(run_id)
        if run is None:
            logger.warning(f"Run {run_id} not found in ledger")
            return
        run.status = status
        run.updated_at = datetime.datetime.utcnow()
        if result_summary is not None:
            run.result_summary = json.dumps(result_summary, sort_keys=True, default=str)
        self.session.add(run)
        self.session.commit()

    def add_artifact(self, run_id: str, kind: str, path: str) -> RunArtifact:
        artifact = RunArtifact(run_id=run_id, kind=kind, path=path)
        self.session.add(artifact)
        self.session.commit()
        self.session.refresh(artifact)
        return artifact

    def get_artifacts(self, run_id: str) -> List[RunArtifact]:
        return list(
            self.session.exec(select(RunArtifact).where(RunArtifact.run_id == run_id)).all()
        )

    def list_runs(
        self, subcommand: Optional[str] = None, config_hash: Optional[str] = None, limit: int = 20
    ) -> List[Run]:
        query = select(Run)
        if subcommand:
            query = query.where(Run.subcommand == subcommand)
        if config_hash:
            query = query.where(Run.config_hash == config_hash)
        query = query.order_by(Run.created_at.desc()).limit(limit)
        return list(self.session.exec(query).all())
