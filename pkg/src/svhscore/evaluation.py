"""RMSE metrics, localization error and the smoothing / mask-radius ablation harness."""

from __future__ import annotations

import csv
import dataclasses
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import EmptySet, InvalidConfig, MissingPrediction
from .infer import JointPrediction
from .records import AnnotatedImage
from .schema import DEFAULT_SCHEMA, JointSchema, Task

ABLATION_VALUES = {
    "p": (0.0, 0.05, 0.1, 0.2),
    "r": (16.0, 24.0, 32.0, 40.0),
}
ABLATION_HEADER = ["param", "value", "seed", "rmse_narrowing", "rmse_erosion"]


@dataclass
class EvalReport:
    rmse_narrowing: float
    rmse_erosion: float
    mean_center_error_px: float
    n_joints_scored: dict

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass
class AblationRow:
    swept_param: str
    value: float
    seed: int
    rmse_narrowing: float
    rmse_erosion: float


def rmse(pairs) -> float:
    pairs = list(pairs)
    if not pairs:
        raise EmptySet("rmse of an empty set")
    diff = np.array([p - t for p, t in pairs], dtype=np.float64)
    return float(np.sqrt(np.mean(diff * diff)))


def score_pairs(predictions, truths, schema: JointSchema = DEFAULT_SCHEMA) -> dict[Task, list[tuple[float, float]]]:
    """(predicted, truth) per task, pooled over every (image, joint) where the task is graded."""
    pairs = {Task.NARROWING: [], Task.EROSION: []}
    for preds, image in zip(predictions, truths, strict=True):
        by_id = {p.joint_type_id: p for p in preds}
        for joint in image.joints:
            for task in Task:
                if not schema.scored(joint.type_id, task, image.limb):
                    continue
                truth = joint.score(task)
                if truth is None:
                    continue
                pred = by_id.get(joint.type_id)
                if pred is None or pred.score(task) is None:
                    raise MissingPrediction(f"no {task.value} prediction for joint {joint.type_id} on {image.key}")
                pairs[task].append((pred.score(task), float(truth)))
    return pairs


def evaluate(
    predictions: Sequence[list[JointPrediction]],
    truths: Sequence[AnnotatedImage],
    schema: JointSchema = DEFAULT_SCHEMA,
) -> EvalReport:
    pairs = score_pairs(predictions, truths, schema)
    dists = []
    for preds, image in zip(predictions, truths):
        by_id = {p.joint_type_id: p for p in preds}
        for joint in image.joints:
            if joint.type_id not in by_id:
                raise MissingPrediction(f"no prediction for joint {joint.type_id} on {image.key}")
            px, py = by_id[joint.type_id].predicted_center
            dists.append(math.hypot(px - joint.x, py - joint.y))
    return EvalReport(
        rmse_narrowing=rmse(pairs[Task.NARROWING]) if pairs[Task.NARROWING] else float("nan"),
        rmse_erosion=rmse(pairs[Task.EROSION]) if pairs[Task.EROSION] else float("nan"),
        mean_center_error_px=float(np.mean(dists)) if dists else float("nan"),
        n_joints_scored={t.value: len(pairs[t]) for t in Task},
    )


def constant_mean_rmse(truths: Sequence[AnnotatedImage], schema: JointSchema = DEFAULT_SCHEMA) -> dict[Task, float]:
    """RMSE of predicting each task's mean truth everywhere (its population std)."""
    out = {}
    for task in Task:
        values = [
            float(j.score(task))
            for im in truths
            for j in im.joints
            if schema.scored(j.type_id, task, im.limb) and j.score(task) is not None
        ]
        mean = float(np.mean(values))
        out[task] = rmse([(mean, v) for v in values])
    return out


# ------------------------------------------------------------------ ablation


def ablation_config(base_cfg, param: str, value: float, seed: int):
    from .targets import MaskConfig, SmoothingConfig

    if param == "p":
        return dataclasses.replace(base_cfg, smoothing=SmoothingConfig(float(value)), seed=seed)
    if param == "r":
        # MaskConfig rejects r > R
        return dataclasses.replace(base_cfg, mask=MaskConfig(float(value), base_cfg.mask.R), seed=seed)
    raise InvalidConfig(f"unknown ablation parameter {param!r} (expected 'p' or 'r')")


def _run_cell(args) -> AblationRow:
    from .train import fit

    dataset, base_cfg, net_cfg, param, value, seed, schema = args
    cfg = ablation_config(base_cfg, param, value, seed)
    result = fit(dataset, cfg, net_cfg, out_dir=None, schema=schema)
    last = result.metrics[-1] if result.metrics else {"val_rmse_narrowing": float("nan"), "val_rmse_erosion": float("nan")}
    return AblationRow(param, float(value), int(seed), last["val_rmse_narrowing"], last["val_rmse_erosion"])


def ablate(
    dataset,
    base_cfg,
    net_cfg,
    param: str,
    seeds: Sequence[int],
    values: Sequence[float] | None = None,
    out_dir=None,
    schema: JointSchema = DEFAULT_SCHEMA,
    workers: int = 1,
) -> list[AblationRow]:
    """Train one model per (value, seed), everything else fixed; score on the validation fold."""
    values = tuple(ABLATION_VALUES[param] if values is None else values)
    if len(set(values)) != len(values) or len(set(seeds)) != len(seeds):
        raise InvalidConfig("ablation values and seeds must be distinct")
    for v in values:
        ablation_config(base_cfg, param, v, 0)
    cells = [(dataset, base_cfg, net_cfg, param, v, s, schema) for v in values for s in seeds]
    if workers > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(workers) as ex:
            rows = list(ex.map(_run_cell, cells))
    else:
        rows = [_run_cell(c) for c in cells]
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_ablation_csv(out / f"ablation_{param}.csv", rows)
        plot_ablation(rows, out / f"ablation_{param}.svg")
    return rows


def write_ablation_csv(path, rows: Sequence[AblationRow]) -> Path:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(ABLATION_HEADER)
        for r in rows:
            writer.writerow([r.swept_param, f"{r.value:g}", r.seed, f"{r.rmse_narrowing:.6f}", f"{r.rmse_erosion:.6f}"])
    return Path(path)


def summarize(rows: Sequence[AblationRow]) -> dict[float, dict[str, tuple[float, float, float]]]:
    """value -> task -> (median, min, max) over seeds."""
    out = {}
    for v in sorted({r.value for r in rows}):
        cell = [r for r in rows if r.value == v]
        out[v] = {}
        for task, attr in (("narrowing", "rmse_narrowing"), ("erosion", "rmse_erosion")):
            vals = np.array([getattr(r, attr) for r in cell])
            out[v][task] = (float(np.median(vals)), float(vals.min()), float(vals.max()))
    return out


def plot_ablation(rows: Sequence[AblationRow], path) -> Path:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    matplotlib.rcParams["svg.hashsalt"] = "svhscore"

    summary = summarize(rows)
    xs = np.array(list(summary))
    param = rows[0].swept_param if rows else "?"
    fig, ax = plt.subplots(figsize=(4.5, 3.2))
    for task, color in (("narrowing", "tab:blue"), ("erosion", "tab:orange")):
        med = np.array([summary[v][task][0] for v in xs])
        lo = np.array([summary[v][task][1] for v in xs])
        hi = np.array([summary[v][task][2] for v in xs])
        ax.plot(xs, med, marker="o", color=color, label=task)
        ax.fill_between(xs, lo, hi, color=color, alpha=0.2)
    ax.set_xlabel("label smoothing p" if param == "p" else "mask radius r (R fixed)")
    ax.set_ylabel("validation RMSE")
    ax.legend()
    fig.tight_layout()
    # fixed metadata keeps the SVG byte-stable across runs
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
    return Path(path)
