import json
import logging
from pathlib import Path
from typing import Any, Dict, List

from models import dump_json
from utils import content_hash

logger = logging.getLogger(__name__)

AUDIT_FILE = "audit_log.json"
STAGES = ["flow_stage", "kernel_stage", "checks_stage", "limit_stage"]


class AuditLoggerAgent:
    """
    Audit trail for a scenario run.
    Records the scenario hash, stage statuses and the reports written; no timestamps,
    so identical runs leave identical audit files.
    """

    def __init__(self, output_dir: str):
        self.output_dir = Path(output_dir)

    def log_workflow_execution(self,
                               scenario_text: str,
                               stage_results: Dict[str, Dict[str, Any]],
                               report_files: List[str],
                               final_status: str) -> Dict[str, Any]:
        try:
            audit_entry = {
                "scenario_sha256": content_hash(scenario_text),
                "stages": {
                    stage: {
                        "status": stage_results.get(stage, {}).get("status", "skipped"),
                        "message": stage_results.get(stage, {}).get("message"),
                    }
                    for stage in STAGES
                },
                "reports": sorted(report_files),
                "final_status": final_status,
            }
            self.output_dir.mkdir(parents=True, exist_ok=True)
            audit_path = self.output_dir / AUDIT_FILE
            audit_path.write_text(dump_json(audit_entry) + "\n")
            return {"status": "success", "audit_path": str(audit_path)}
        except (OSError, TypeError, ValueError) as e:
            logger.error(f"Audit logging failed: {e}")
            return {"status": "error", "message": f"Audit logging failed: {str(e)}"}

    def get_audit_trail(self) -> Dict[str, Any]:
        path = self.output_dir / AUDIT_FILE
        if not path.exists():
            return {}
        return json.loads(path.read_text())
