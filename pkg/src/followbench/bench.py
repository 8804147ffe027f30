"""Evaluation metrics and the benchmark runner.

Two metrics: spacing MSE between simulated and observed trajectories, and
per-mille collision rate over evaluated events. The report renders one row
per (model, dataset) with the two metric blocks side by side, rates shown
as "17.30 (5)" style value-with-count cells.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .errors import ModelEvaluationError
from .events import CarFollowingEvent
from .models.base import AccelerationPolicy
from .sim import rollout

logger = logging.getLogger(__name__)

COLLISION_POLICIES = ("truncate", "skip")


def mse_spacing(sim: Sequence[float] | np.ndarray, obs: Sequence[float] | np.ndarray) -> float:
    """Mean squared difference between two equal-length spacing series."""
    sim = np.asarray(sim, dtype=float)
    obs = np.asarray(obs, dtype=float)
    if sim.shape != obs.shape:
        raise ValueError(f"length mismatch: {sim.shape} vs {obs.shape}")
    if sim.size == 0:
        raise ValueError("cannot compute MSE of empty sequences")
    diff = sim - obs
    return float(np.mean(diff * diff))


def collision_rate(collision_count: int, events: int) -> float:
    """Collisions per thousand evaluated events."""
    if events <= 0:
        raise ValueError("events must be positive")
    if not 0 <= collision_count <= events:
        raise ValueError(f"count {collision_count} outside [0, {events}]")
    return 1000.0 * collision_count / events


@dataclass
class ReportRow:
    model_name: str
    dataset_id: str
    mse_spacing_m2: float
    collision_rate_permille: float
    collision_count: int
    events_evaluated: int
    truncated_events: int
    nonfinite_events: int


@dataclass
class BenchmarkReport:
    rows: list[ReportRow] = field(default_factory=list)
    collision_policy: str = "truncate"
    config_hash: str = ""

    @property
    def any_nonfinite(self) -> bool:
        return any(row.nonfinite_events > 0 for row in self.rows)

    def model_names(self) -> list[str]:
        seen: list[str] = []
        for row in self.rows:
            if row.model_name not in seen:
                seen.append(row.model_name)
        return seen

    def dataset_ids(self) -> list[str]:
        return sorted({row.dataset_id for row in self.rows})


def evaluate_model(
    model: AccelerationPolicy,
    test_events: Sequence[CarFollowingEvent],
    policy_on_collision: str = "truncate",
    *,
    dataset_id: str | None = None,
    jobs: int = 1,
) -> ReportRow:
    """Roll the model over every event and aggregate the two metrics.

    ``truncate`` counts a collided rollout's partial-trajectory MSE toward
    the aggregate; ``skip`` excludes collided events from the MSE but still
    counts the collision. Events on which the model emits a non-finite
    acceleration are logged, dropped from both metrics, and tallied in
    ``nonfinite_events``.
    """
    if policy_on_collision not in COLLISION_POLICIES:
        raise ValueError(f"policy_on_collision must be one of {COLLISION_POLICIES}")
    if not test_events:
        raise ValueError("evaluate_model needs a nonempty test set")
    if dataset_id is None:
        sources = {e.source for e in test_events}
        dataset_id = sources.pop() if len(sources) == 1 else "mixed"

    def run(event: CarFollowingEvent):
        try:
            result = rollout(model, event)
        except ModelEvaluationError as exc:
            logger.warning("model %s failed on %s: %s", model.name, event.event_id, exc)
            return None
        n = result.steps_completed
        return mse_spacing(result.spacing_sim_m, event.spacing_m[:n]), result.collided

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            outcomes = list(pool.map(run, test_events))
    else:
        outcomes = [run(event) for event in test_events]

    mses: list[float] = []
    collisions = 0
    truncated = 0
    nonfinite = 0
    for outcome in outcomes:
        if outcome is None:
            nonfinite += 1
            continue
        event_mse, collided = outcome
        if collided:
            collisions += 1
            if policy_on_collision == "truncate":
                mses.append(event_mse)
                truncated += 1
        else:
            mses.append(event_mse)

    evaluated = len(test_events) - nonfinite
    return ReportRow(
        model_name=model.name,
        dataset_id=dataset_id,
        mse_spacing_m2=float(np.mean(mses)) if mses else math.nan,
        collision_rate_permille=collision_rate(collisions, evaluated) if evaluated else math.nan,
        collision_count=collisions,
        events_evaluated=evaluated,
        truncated_events=truncated,
        nonfinite_events=nonfinite,
    )


def run_benchmark(
    models: Mapping[str, AccelerationPolicy],
    test_events: Sequence[CarFollowingEvent],
    policy_on_collision: str = "truncate",
    *,
    jobs: int = 1,
    config_echo: Mapping | None = None,
) -> BenchmarkReport:
    """One report row per (model, dataset); datasets taken from event sources."""
    if not models:
        raise ValueError("run_benchmark needs at least one model")
    if not test_events:
        raise ValueError("run_benchmark needs a nonempty test set")
    by_dataset: dict[str, list[CarFollowingEvent]] = {}
    for event in test_events:
        by_dataset.setdefault(event.source or "unknown", []).append(event)

    digest_input = json.dumps(
        {
            "models": sorted(models),
            "policy_on_collision": policy_on_collision,
            "n_events": len(test_events),
            "datasets": {k: len(v) for k, v in sorted(by_dataset.items())},
            "config": dict(config_echo or {}),
        },
        sort_keys=True,
        default=str,
    )
    report = BenchmarkReport(
        collision_policy=policy_on_collision,
        config_hash=hashlib.sha256(digest_input.encode()).hexdigest()[:16],
    )
    for name, model in models.items():
        for dataset_id in sorted(by_dataset):
            row = evaluate_model(
                model,
                by_dataset[dataset_id],
                policy_on_collision,
                dataset_id=dataset_id,
                jobs=jobs,
            )
            row.model_name = name
            report.rows.append(row)
    return report


# ---------------------------------------------------------------------------
# Rendering
# ---------------------------------------------------------------------------


def _fmt_mse(value: float) -> str:
    return "nan" if math.isnan(value) else f"{value:.2f}"


def _fmt_rate(row: ReportRow) -> str:
    if math.isnan(row.collision_rate_permille):
        return "nan"
    return f"{row.collision_rate_permille:.2f} ({row.collision_count})"


def report_to_markdown(report: BenchmarkReport) -> str:
    datasets = report.dataset_ids()
    header = (
        ["Model"]
        + [f"MSE of spacing: {d}" for d in datasets]
        + [f"Collision rate ‰ (n): {d}" for d in datasets]
    )
    lines = [
        "# Model benchmark performance",
        "",
        f"Collision handling: {report.collision_policy}; config hash {report.config_hash}.",
        "",
        "| " + " | ".join(header) + " |",
        "|" + "|".join("---" for _ in header) + "|",
    ]
    by_key = {(row.model_name, row.dataset_id): row for row in report.rows}
    for model_name in report.model_names():
        cells = [model_name]
        for dataset in datasets:
            row = by_key.get((model_name, dataset))
            cells.append(_fmt_mse(row.mse_spacing_m2) if row else "-")
        for dataset in datasets:
            row = by_key.get((model_name, dataset))
            cells.append(_fmt_rate(row) if row else "-")
        lines.append("| " + " | ".join(cells) + " |")
    lines.append("")
    return "\n".join(lines)


def report_to_json(report: BenchmarkReport) -> str:
    payload = {
        "collision_policy": report.collision_policy,
        "config_hash": report.config_hash,
        "rows": [asdict(row) for row in report.rows],
    }
    return json.dumps(payload, indent=2, sort_keys=True) + "\n"


def save_report(report: BenchmarkReport, out_dir: str | Path) -> tuple[Path, Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    json_path = out_dir / "report.json"
    md_path = out_dir / "report.md"
    json_path.write_text(report_to_json(report), encoding="utf-8")
    md_path.write_text(report_to_markdown(report), encoding="utf-8")
    return json_path, md_path
