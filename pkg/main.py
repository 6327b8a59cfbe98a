import argparse
import json
import logging
import sys
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

from pydantic import ValidationError

from config import HEATLAB_LOG_LEVEL, HEATLAB_OUTPUT, HEATLAB_THREADS
from errors import ScenarioError
from models import Scenario, dump_json
from orchestration_agent import HeatLabOrchestrator
from store_manager import ArtifactStoreManager
from utils import clean_name

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CHECK_FAILED = 1
EXIT_USAGE = 2

VERB_STAGES = {
    "run": ("flow", "kernel", "checks", "limit"),
    "flow": ("flow",),
    "kernel": ("flow", "kernel"),
    "check": ("flow", "kernel", "checks"),
    "limit": ("flow", "limit"),
}


def _locate(text: str, loc: Sequence) -> Tuple[int, int]:
    """Line/column of the last key named in a validation error location."""
    keys = [str(part) for part in loc if isinstance(part, str)]
    if not keys:
        return 1, 1
    index = text.find(f'"{keys[-1]}"')
    if index < 0:
        return 1, 1
    line = text.count("\n", 0, index) + 1
    column = index - (text.rfind("\n", 0, index) + 1) + 1
    return line, column


def load_scenario(path: str) -> Tuple[Scenario, str]:
    """Parse and validate a scenario file, raising ScenarioError with a position"""
    try:
        text = Path(path).read_text()
    except OSError as e:
        raise ScenarioError(f"cannot read scenario: {e}") from e
    try:
        payload = json.loads(text)
    except json.JSONDecodeError as e:
        raise ScenarioError(f"malformed JSON: {e.msg}", e.lineno, e.colno) from e
    try:
        return Scenario.model_validate(payload), text
    except ValidationError as e:
        first = e.errors()[0]
        line, column = _locate(text, first["loc"])
        where = ".".join(str(part) for part in first["loc"])
        raise ScenarioError(f"{where}: {first['msg']}", line, column) from e


def _output_dir(args, scenario: Scenario) -> str:
    if args.out:
        return args.out
    if scenario.output:
        return scenario.output
    return str(Path(HEATLAB_OUTPUT) / clean_name(scenario.name))


def _verdict(outcome) -> bool:
    """True iff every non-control check and the limit experiment passed."""
    failed = [r for r in outcome["reports"] if not r.passed and not r.control]
    limit = outcome.get("limit_report")
    limit_failed = limit is not None and not limit.passed and not limit.control
    return not failed and not limit_failed and outcome["status"] != "failed"


def run_stages(args, stages) -> int:
    scenario_path = args.scenario_path or args.scenario
    if not scenario_path:
        print("❌ Error: a scenario file is required", file=sys.stderr)
        return EXIT_USAGE
    try:
        scenario, text = load_scenario(scenario_path)
    except ScenarioError as e:
        print(json.dumps({**e.to_dict(), "line": e.line, "column": e.column}), file=sys.stderr)
        return EXIT_USAGE
    if args.seed is not None:
        scenario.seed = args.seed

    print(f"🔧 Scenario: {scenario.name} ({scenario.model.kind}, n={scenario.model.n})")
    orchestrator = HeatLabOrchestrator(threads=HEATLAB_THREADS)
    outcome = orchestrator.run_workflow(scenario, stages)
    output_dir = _output_dir(args, scenario)
    paths = orchestrator.persist(outcome, output_dir, text)

    for report in outcome["reports"]:
        mark = "✅" if report.passed else ("ℹ️" if report.control else "❌")
        print(f"{mark} check {report.name} {'passed' if report.passed else 'failed'}")
    limit = outcome.get("limit_report")
    if limit is not None:
        mark = "✅" if limit.passed else ("ℹ️" if limit.control else "❌")
        print(f"{mark} limit experiment verdict {limit.verdict} (nonflat={limit.nonflat})")
    for error in outcome["errors"]:
        print(f"❌ {error}")
    print(f"📁 Artifacts written to {output_dir}")

    if _verdict(outcome):
        return EXIT_OK
    for path in paths:
        print(f"   report: {path}")
    return EXIT_CHECK_FAILED


def run_report(args) -> int:
    output_dir = args.out or args.scenario_path or HEATLAB_OUTPUT
    store = ArtifactStoreManager(output_dir)
    table = store.summary_table()
    if table.empty:
        print(f"❌ No reports found under {output_dir}", file=sys.stderr)
        return EXIT_CHECK_FAILED
    if args.format == "json":
        content = dump_json(json.loads(table.to_json(orient="records", double_precision=15)))
        target = Path(output_dir) / "summary.json"
        target.write_text(content + "\n")
    else:
        target = Path(output_dir) / "summary.csv"
        table.to_csv(target, index=False, float_format="%.17g", lineterminator="\n")
        content = target.read_text().rstrip("\n")
    print(content)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="heatlab", description="Ricci flow heat-kernel laboratory")
    parser.add_argument("verb", choices=["run", "report", "flow", "kernel", "check", "limit"])
    parser.add_argument("scenario_path", nargs="?", help="Scenario file (or output dir for 'report')")
    parser.add_argument("--scenario", type=str, help="Scenario JSON file")
    parser.add_argument("--out", type=str, help="Output directory")
    parser.add_argument("--seed", type=int, help="Override the scenario rng seed")
    parser.add_argument("--format", choices=["csv", "json"], default="csv", help="Report table encoding")
    parser.add_argument("--verbose", action="store_true", help="Debug logging")
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else getattr(logging, HEATLAB_LOG_LEVEL.upper(), logging.INFO),
        format='%(asctime)s - %(levelname)s - %(message)s',
    )
    if args.verb == "report":
        return run_report(args)
    return run_stages(args, VERB_STAGES[args.verb])


if __name__ == "__main__":
    sys.exit(main())
