import logging
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Annotated, Any, Dict, List, TypedDict

from langgraph.graph import END, START, StateGraph

from agent.audit_logger_agent import AuditLoggerAgent
from agent.bounds_agent import BOUNDS_CHECKS, BoundsAgent
from agent.entropy_agent import ENTROPY_CHECKS, EntropyAgent
from agent.flow_agent import doubling_checks, flow_node
from agent.kernel_agent import kernel_node, seed_sensitivity
from agent.soliton_agent import soliton_node
from config import HEATLAB_THREADS, caps_with
from errors import HeatLabError, InvalidStateError
from models import CheckReport, Scenario
from store_manager import ArtifactStoreManager

logger = logging.getLogger(__name__)

ALL_STAGES = ("flow", "kernel", "checks", "limit")


class WorkflowState(TypedDict, total=False):
    scenario: Scenario
    stages: List[str]
    trajectory: Any
    kernel: Any
    flow_result: Annotated[Dict[str, Any], "flow_stage"]
    kernel_result: Annotated[Dict[str, Any], "kernel_stage"]
    checks_result: Annotated[Dict[str, Any], "checks_stage"]
    limit_result: Annotated[Dict[str, Any], "limit_stage"]
    limit_report: Any
    reports: List[CheckReport]
    workflow_status: Annotated[str, "finalize_stage"]
    flow_errors: Annotated[List[str], "flow_stage"]
    kernel_errors: Annotated[List[str], "kernel_stage"]
    checks_errors: Annotated[List[str], "checks_stage"]
    limit_errors: Annotated[List[str], "limit_stage"]
    errors: List[str]


def _failed_report(name: str, exc: Exception, control: bool) -> CheckReport:
    code = exc.code if isinstance(exc, HeatLabError) else "internal-error"
    return CheckReport(name=name, passed=False, control=control, notes=[f"{code}: {exc}"])


class HeatLabOrchestrator:
    def __init__(self, threads: int = HEATLAB_THREADS):
        self.threads = max(1, threads)
        self.graph = self._build_workflow()
        self.app = self.graph.compile()
        self.reset_progress()

    def _update_progress(self, node_name: str):
        self.progress[node_name] = True

    def get_progress(self):
        return self.progress

    def reset_progress(self):
        self.progress = {
            "flow_stage": False,
            "kernel_stage": False,
            "checks_stage": False,
            "limit_stage": False,
            "finalize_stage": False,
        }

    def _build_workflow(self) -> StateGraph:
        workflow = StateGraph(WorkflowState)

        workflow.add_node("flow_stage", self._run_flow_stage)
        workflow.add_node("kernel_stage", self._run_kernel_stage)
        workflow.add_node("checks_stage", self._run_checks_stage)
        workflow.add_node("limit_stage", self._run_limit_stage)
        workflow.add_node("finalize_stage", self._finalize_workflow_status)

        workflow.add_edge(START, "flow_stage")
        workflow.add_conditional_edges(
            "flow_stage",
            self._should_continue,
            {"continue": "kernel_stage", "stop": "finalize_stage"}
        )
        workflow.add_edge("kernel_stage", "checks_stage")
        workflow.add_edge("checks_stage", "limit_stage")
        workflow.add_edge("limit_stage", "finalize_stage")
        workflow.add_edge("finalize_stage", END)

        return workflow

    @staticmethod
    def _enabled(state: WorkflowState, stage: str) -> bool:
        return stage in state.get("stages", ALL_STAGES) and state["scenario"].stage_requested(stage)

    def _run_flow_stage(self, state: WorkflowState) -> Dict[str, Any]:
        try:
            result = flow_node({"scenario": state["scenario"]})
            self._update_progress("flow_stage")
            flow_result = result["flow_result"]
            return {
                "flow_result": flow_result,
                "trajectory": result["trajectory"],
                "reports": list(flow_result.get("reports", [])),
                "flow_errors": [],
            }
        except Exception as e:
            self._update_progress("flow_stage")
            logger.error(f"Flow stage failed: {e}")
            return {
                "flow_result": {"status": "error", "message": str(e)},
                "flow_errors": [f"Flow stage error: {str(e)}"]
            }

    def _should_continue(self, state: WorkflowState) -> str:
        """Later stages need a trajectory"""
        if state.get("trajectory") is not None:
            return "continue"
        return "stop"

    def _run_kernel_stage(self, state: WorkflowState) -> Dict[str, Any]:
        if not self._enabled(state, "kernel"):
            return {"kernel_result": {"status": "skipped"}, "kernel_errors": []}
        try:
            result = kernel_node({"scenario": state["scenario"], "trajectory": state["trajectory"]})
            self._update_progress("kernel_stage")
            return {
                "kernel_result": result["kernel_result"],
                "kernel": result.get("kernel"),
                "kernel_errors": result.get("kernel_errors", []),
            }
        except Exception as e:
            self._update_progress("kernel_stage")
            logger.error(f"Kernel stage failed: {e}")
            return {
                "kernel_result": {"status": "error", "message": str(e)},
                "kernel_errors": [f"Kernel stage error: {str(e)}"]
            }

    def _run_check(self, check, state: WorkflowState) -> CheckReport:
        scenario = state["scenario"]
        trajectory = state["trajectory"]
        caps = caps_with(check.caps)
        if check.name in BOUNDS_CHECKS:
            if state.get("kernel") is None:
                raise InvalidStateError("bounds checks need the kernel stage")
            return BoundsAgent(caps).run_check(check, trajectory, state["kernel"])
        if check.name in ENTROPY_CHECKS:
            return EntropyAgent(caps, scenario.seed).run_check(check, trajectory)
        if check.name == "doubling":
            pairs = check.params.get("pairs", scenario.flow.doubling_pairs)
            times = check.params.get("times", scenario.flow.doubling_times)
            report = doubling_checks(trajectory, pairs, times, caps)
        elif check.name == "seed_sensitivity":
            spec = scenario.kernel
            if spec is None:
                raise InvalidStateError("seed sensitivity needs a kernel section")
            report = seed_sensitivity(trajectory, spec.source, spec.l, spec.t_list, spec.dt, spec.seed_eps)
        else:
            raise InvalidStateError(f"no runner for check '{check.name}'")
        report.control = check.control
        return report

    def _run_checks_stage(self, state: WorkflowState) -> Dict[str, Any]:
        if not self._enabled(state, "checks"):
            return {"checks_result": {"status": "skipped"}, "checks_errors": []}
        checks = state["scenario"].checks
        reports: List[CheckReport] = []
        errors: List[str] = []

        def run_one(check):
            try:
                return self._run_check(check, state), None
            except Exception as e:
                return _failed_report(check.name, e, check.control), f"Check {check.name} error: {str(e)}"

        with ThreadPoolExecutor(max_workers=self.threads) as pool:
            # map keeps submission order, so reports stay deterministic
            for report, error in pool.map(run_one, checks):
                reports.append(report)
                if error:
                    errors.append(error)
                status = "passed" if report.passed else "failed"
                logger.info(f"Check {report.name} {status}")
        self._update_progress("checks_stage")
        status = "error" if errors and len(errors) == len(checks) else "success"
        return {
            "checks_result": {"status": status, "count": len(reports)},
            "reports": list(state.get("reports", [])) + reports,
            "checks_errors": errors,
        }

    def _run_limit_stage(self, state: WorkflowState) -> Dict[str, Any]:
        if not self._enabled(state, "limit"):
            return {"limit_result": {"status": "skipped"}, "limit_errors": []}
        try:
            result = soliton_node({"scenario": state["scenario"], "trajectory": state["trajectory"],
                                   "threads": self.threads})
            self._update_progress("limit_stage")
            return {
                "limit_result": {"status": result["limit_result"]["status"]},
                "limit_report": result.get("limit_report"),
                "limit_errors": result.get("limit_errors", []),
            }
        except Exception as e:
            self._update_progress("limit_stage")
            logger.error(f"Limit stage failed: {e}")
            return {
                "limit_result": {"status": "error", "message": str(e)},
                "limit_errors": [f"Limit stage error: {str(e)}"]
            }

    def _finalize_workflow_status(self, state: WorkflowState) -> Dict[str, Any]:
        """Consolidate final status with single writer"""
        all_errors = (
            state.get("flow_errors", []) +
            state.get("kernel_errors", []) +
            state.get("checks_errors", []) +
            state.get("limit_errors", [])
        )
        results = [state.get(key, {}) for key in ("flow_result", "kernel_result", "checks_result", "limit_result")]

        status = "success"
        if any(result.get("status") == "error" for result in results):
            status = "failed"
        elif all_errors:
            status = "partial_success"
        self._update_progress("finalize_stage")
        return {"workflow_status": status, "errors": all_errors}

    def run_workflow(self, scenario: Scenario, stages=ALL_STAGES) -> Dict[str, Any]:
        """Execute the requested stages of a scenario"""
        self.reset_progress()
        initial_state = WorkflowState(
            scenario=scenario,
            stages=list(stages),
            trajectory=None,
            kernel=None,
            flow_result={},
            kernel_result={},
            checks_result={},
            limit_result={},
            limit_report=None,
            reports=[],
            workflow_status="started",
            flow_errors=[],
            kernel_errors=[],
            checks_errors=[],
            limit_errors=[],
        )
        final_state = self.app.invoke(initial_state)
        return {
            "status": final_state["workflow_status"],
            "results": {
                "flow": final_state.get("flow_result", {}),
                "kernel": final_state.get("kernel_result", {}),
                "checks": final_state.get("checks_result", {}),
                "limit": final_state.get("limit_result", {}),
            },
            "trajectory": final_state.get("trajectory"),
            "kernel": final_state.get("kernel"),
            "reports": final_state.get("reports", []),
            "limit_report": final_state.get("limit_report"),
            "errors": final_state.get("errors", []),
        }

    def persist(self, outcome: Dict[str, Any], output_dir: str, scenario_text: str) -> List[str]:
        """Write every artifact of a run plus its audit log; returns the report paths."""
        store = ArtifactStoreManager(output_dir)
        if outcome.get("trajectory") is not None:
            store.save_trajectory(outcome["trajectory"])
        if outcome.get("kernel") is not None:
            store.save_kernel(outcome["kernel"])
        paths = [str(store.save_report(report)) for report in outcome["reports"]]
        if outcome.get("limit_report") is not None:
            paths.append(str(store.save_limit_report(outcome["limit_report"])))
        stage_names = {"flow": "flow_stage", "kernel": "kernel_stage", "checks": "checks_stage",
                       "limit": "limit_stage"}
        relative = [str(Path(path).relative_to(store.root)) for path in paths]
        AuditLoggerAgent(output_dir).log_workflow_execution(
            scenario_text=scenario_text,
            stage_results={stage_names[key]: value for key, value in outcome["results"].items()},
            report_files=relative,
            final_status=outcome["status"],
        )
        return paths
