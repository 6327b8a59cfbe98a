import json
import logging
import math
import os
from pathlib import Path
from typing import Any, Dict, List, Optional

import numpy as np
import pandas as pd

from config import HEATLAB_OUTPUT
from errors import InvalidParameterError
from geometry import FLAT_TORUS, WARPED_SPHERE, WarpedProfile, make_flat_torus
from models import CheckReport, LimitReport, dump_json
from utils import FLOAT_FORMAT, clean_name

logger = logging.getLogger(__name__)

PROFILE_COLUMNS = ["t", "x", "a", "b"]
TORUS_COLUMNS = ["t", "index", "side"]
KERNEL_COLUMNS = ["l", "t", "x", "theta_or_coord", "u", "dmu"]


def _write_csv(frame: pd.DataFrame, path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(path, index=False, float_format=FLOAT_FORMAT, lineterminator="\n")
    return path


def _write_json(payload: Any, path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(dump_json(payload) + "\n")
    return path


def _finite(value):
    if value is None:
        return None
    value = float(value)
    return value if math.isfinite(value) else None


class ArtifactStoreManager:
    """Local directory store for profiles, trajectories, kernels and reports."""

    def __init__(self, root: str = HEATLAB_OUTPUT):
        self.root = Path(root)

    def ensure_folder_exists(self, *parts: str) -> Path:
        folder = self.root.joinpath(*parts)
        folder.mkdir(parents=True, exist_ok=True)
        return folder

    # profiles and trajectories

    def save_profile(self, p: WarpedProfile, path: Path) -> Path:
        if p.is_torus:
            frame = pd.DataFrame({"t": p.t, "index": range(p.n), "side": list(p.sides)})
        else:
            frame = pd.DataFrame({"t": p.t, "x": p.x, "a": p.a, "b": p.b})
        return _write_csv(frame, Path(path))

    def load_profile(self, path: Path, n: Optional[int] = None, M: Optional[int] = None) -> WarpedProfile:
        frame = pd.read_csv(path, float_precision="round_trip")
        columns = list(frame.columns)
        if columns == TORUS_COLUMNS:
            if M is None:
                raise InvalidParameterError("torus profiles need the grid size M")
            return make_flat_torus(len(frame), frame["side"].tolist(), M, float(frame["t"].iloc[0]))
        if columns != PROFILE_COLUMNS:
            raise InvalidParameterError(f"unexpected profile header {columns}")
        if n is None:
            raise InvalidParameterError("warped profiles need the dimension n")
        return WarpedProfile(
            n=n,
            kind=WARPED_SPHERE,
            x=frame["x"].to_numpy(),
            a=frame["a"].to_numpy(),
            b=frame["b"].to_numpy(),
            t=float(frame["t"].iloc[0]),
        )

    def save_trajectory(self, tr, name: str = "trajectory") -> Path:
        folder = self.ensure_folder_exists(clean_name(name))
        files = []
        for k, p in enumerate(tr.profiles):
            filename = f"profile_{k:04d}.csv"
            self.save_profile(p, folder / filename)
            files.append(filename)
        manifest = {
            "n": tr.n,
            "kind": tr.kind,
            "M": tr.M,
            "T0": _finite(tr.T0),
            "times": [float(t) for t in tr.times],
            "D0": _finite(tr.D0),
            "kappa": _finite(tr.kappa),
            "exact": tr.exact,
            "static": tr.static,
            "profiles": files,
        }
        _write_json(manifest, folder / "trajectory.json")
        logger.info(f"Saved trajectory with {len(files)} snapshots to {folder}")
        return folder

    def load_trajectory(self, name: str = "trajectory"):
        from agent.flow_agent import FlowTrajectory

        folder = self.root / clean_name(name)
        manifest = json.loads((folder / "trajectory.json").read_text())
        profiles = [self.load_profile(folder / f, manifest["n"], manifest["M"]) for f in manifest["profiles"]]
        T0 = manifest["T0"]
        if T0 is None and (manifest["static"] or manifest["kind"] == FLAT_TORUS):
            T0 = math.inf
        return FlowTrajectory(
            profiles,
            T0=T0,
            exact=manifest["exact"],
            D0=manifest["D0"],
            kappa=manifest["kappa"],
            static=manifest["static"],
        )

    # kernels

    def save_kernel(self, kf, name: str = "kernel") -> Path:
        folder = self.ensure_folder_exists(clean_name(name))
        frames = []
        for k, t in enumerate(kf.times):
            values = np.asarray(kf.values[k])
            if kf.is_torus:
                x = np.arange(values.size)
            else:
                x = np.linspace(0.0, 1.0, values.size)
            frames.append(pd.DataFrame({
                "l": kf.source_time,
                "t": float(t),
                "x": x,
                "theta_or_coord": np.asarray(kf.distances[k]).ravel(),
                "u": values.ravel(),
                "dmu": np.asarray(kf.measures[k]).ravel(),
            }))
        _write_csv(pd.concat(frames, ignore_index=True)[KERNEL_COLUMNS], folder / "kernel.csv")
        source = np.atleast_1d(np.asarray(kf.source, dtype=float)).tolist()
        manifest = {
            "source": source if len(source) > 1 else source[0],
            "l": kf.source_time,
            "direction": kf.direction,
            "eps": kf.seed_eps,
            "times": [float(t) for t in kf.times],
            "solver": {key: kf.solver[key] for key in sorted(kf.solver)},
        }
        _write_json(manifest, folder / "kernel.json")
        return folder

    # reports

    def save_report(self, report: CheckReport, folder: str = "reports") -> Path:
        target = self.ensure_folder_exists(folder)
        stem = clean_name(report.name)
        path = _write_json(report.model_dump(by_alias=True), target / f"{stem}.json")
        if report.rows:
            self.save_samples(report.rows, target / f"{stem}_samples.csv")
        return path

    def save_samples(self, rows: List[Dict[str, Any]], path: Path) -> Path:
        return _write_csv(pd.DataFrame(rows), Path(path))

    def list_reports(self, folder: str = "reports") -> List[Path]:
        target = self.root / folder
        if not target.is_dir():
            return []
        return sorted(p for p in target.glob("*.json"))

    def load_report(self, path: Path) -> CheckReport:
        return CheckReport.model_validate(json.loads(Path(path).read_text()))

    def save_entropy_trace(self, trace, name: str = "entropy_trace") -> Path:
        return _write_csv(trace.to_frame(), self.root / f"{clean_name(name)}.csv")

    def save_limit_report(self, report: LimitReport, name: str = "limit_report") -> Path:
        return _write_json(report.model_dump(by_alias=True), self.root / f"{clean_name(name)}.json")

    def load_limit_report(self, name: str = "limit_report") -> LimitReport:
        return LimitReport.model_validate(json.loads((self.root / f"{clean_name(name)}.json").read_text()))

    def summary_table(self, folder: str = "reports") -> pd.DataFrame:
        """One row per stored check report, failures first."""
        rows = []
        for path in self.list_reports(folder):
            report = self.load_report(path)
            row = {"name": report.name, "pass": report.passed, "margin": report.margin, "control": report.control}
            for key in sorted(report.fitted_constants):
                row[key] = report.fitted_constants[key]
            rows.append(row)
        frame = pd.DataFrame(rows)
        if frame.empty:
            return frame
        return frame.sort_values(["pass", "name"], kind="mergesort").reset_index(drop=True)


def default_store() -> ArtifactStoreManager:
    return ArtifactStoreManager(os.getenv("HEATLAB_OUTPUT", HEATLAB_OUTPUT))
