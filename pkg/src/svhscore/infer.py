"""Per-joint expected scores and centers from per-pixel head outputs; ensembling."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import EmptyEnsemble, NotNormalized
from .model import NetworkConfig, Params, forward, softmax
from .records import AnnotatedImage
from .schema import DEFAULT_SCHEMA, JointSchema, Limb, Task, score_range


@dataclass
class JointPrediction:
    joint_type_id: int
    expected_narrowing: float | None
    expected_erosion: float | None
    predicted_center: tuple[float, float]
    support: int

    def score(self, task: Task) -> float | None:
        return self.expected_narrowing if task is Task.NARROWING else self.expected_erosion


def decode_expected(dist, tol: float = 1e-6) -> float:
    """Mean class index under ``dist``."""
    dist = np.asarray(dist, dtype=np.float64)
    if abs(dist.sum() - 1.0) > tol:
        raise NotNormalized(f"distribution sums to {dist.sum():.8f}")
    return float(np.arange(dist.shape[-1]) @ dist)


def _clamp(value: float, task: Task, limb: Limb) -> float:
    return float(min(max(value, 0.0), score_range(None, task, limb).max))


def decode_heads(
    seg_prob: np.ndarray,
    narrow_prob: np.ndarray,
    erosion_prob: np.ndarray,
    limb: Limb,
    schema: JointSchema = DEFAULT_SCHEMA,
    clamp: bool = True,
) -> list[JointPrediction]:
    """Aggregate (H, W, K) softmax maps into one prediction per joint of ``limb``.

    Pixels whose segmentation argmax is joint j vote with their damage
    softmax; a joint with no such pixel falls back to a segmentation-
    probability weighted mean over the whole image.
    """
    seg_prob = np.asarray(seg_prob, dtype=np.float64)
    narrow_prob = np.asarray(narrow_prob, dtype=np.float64)
    erosion_prob = np.asarray(erosion_prob, dtype=np.float64)
    h, w, _ = seg_prob.shape
    labels = seg_prob.argmax(axis=-1)
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    out = []
    for type_id in schema.joint_ids(limb):
        region = labels == type_id
        support = int(region.sum())
        pj = seg_prob[..., type_id]
        if support:
            wts = np.where(region, pj, 0.0)
            narrow_dist = narrow_prob[region].mean(axis=0)
            erosion_dist = erosion_prob[region].mean(axis=0)
        else:
            # an underflowed softmax can leave no mass at all; weigh pixels equally then
            wts = pj if pj.sum() > 0 else np.ones_like(pj)
            pj, total = wts, wts.sum()
            narrow_dist = (pj[..., None] * narrow_prob).sum(axis=(0, 1)) / total
            erosion_dist = (pj[..., None] * erosion_prob).sum(axis=(0, 1)) / total
        cx = float((wts * xs).sum() / wts.sum())
        cy = float((wts * ys).sum() / wts.sum())

        narrowing = erosion = None
        if schema.scored(type_id, Task.NARROWING, limb):
            narrowing = decode_expected(narrow_dist)
            if clamp:
                narrowing = _clamp(narrowing, Task.NARROWING, limb)
        if schema.scored(type_id, Task.EROSION, limb):
            erosion = decode_expected(erosion_dist)
            if limb is Limb.FOOT:
                erosion *= 2.0
            if clamp:
                erosion = _clamp(erosion, Task.EROSION, limb)
        out.append(JointPrediction(type_id, narrowing, erosion, (cx, cy), support))
    return out


def head_probabilities(params: Params, cfg: NetworkConfig, images: np.ndarray, batch_size: int = 16):
    """Softmax maps for a stack of (H, W) images, evaluated in chunks."""
    images = np.asarray(images)
    if images.ndim == 2:
        images = images[None]
    outs = [[], [], []]
    for start in range(0, len(images), batch_size):
        logits = forward(params, cfg, images[start : start + batch_size])
        for k, lg in enumerate(logits):
            outs[k].append(softmax(lg))
    return tuple(np.concatenate(o) for o in outs)


def predict_images(
    params: Params,
    cfg: NetworkConfig,
    images: Sequence[AnnotatedImage],
    schema: JointSchema = DEFAULT_SCHEMA,
    clamp: bool = True,
) -> list[list[JointPrediction]]:
    if not images:
        return []
    dtype = params["head.seg.w"].dtype
    stack = np.stack([im.pixels for im in images]).astype(dtype)
    seg, nar, ero = head_probabilities(params, cfg, stack)
    return [decode_heads(seg[i], nar[i], ero[i], im.limb, schema, clamp) for i, im in enumerate(images)]


def predict_image(
    params: Params,
    cfg: NetworkConfig,
    image: AnnotatedImage,
    schema: JointSchema = DEFAULT_SCHEMA,
) -> list[JointPrediction]:
    return predict_images(params, cfg, [image], schema)[0]


def _mean_or_none(values):
    if any(v is None for v in values):
        return None
    return float(np.mean(values))


def ensemble_images(
    members: Sequence[tuple[Params, NetworkConfig]],
    images: Sequence[AnnotatedImage],
    schema: JointSchema = DEFAULT_SCHEMA,
) -> list[list[JointPrediction]]:
    """Average member expected scores and centers per joint, then clamp."""
    if not members:
        raise EmptyEnsemble("ensemble has no members")
    per_member = [predict_images(p, c, images, schema, clamp=False) for p, c in members]
    result = []
    for i, image in enumerate(images):
        joints = []
        for k, first in enumerate(per_member[0][i]):
            preds = [m[i][k] for m in per_member]
            narrowing = _mean_or_none([p.expected_narrowing for p in preds])
            erosion = _mean_or_none([p.expected_erosion for p in preds])
            if narrowing is not None:
                narrowing = _clamp(narrowing, Task.NARROWING, image.limb)
            if erosion is not None:
                erosion = _clamp(erosion, Task.EROSION, image.limb)
            center = tuple(float(v) for v in np.mean([p.predicted_center for p in preds], axis=0))
            support = int(round(np.mean([p.support for p in preds])))
            joints.append(JointPrediction(first.joint_type_id, narrowing, erosion, center, support))
        result.append(joints)
    return result


def ensemble_predict(
    members: Sequence[tuple[Params, NetworkConfig]],
    image: AnnotatedImage,
    schema: JointSchema = DEFAULT_SCHEMA,
) -> list[JointPrediction]:
    return ensemble_images(members, [image], schema)[0]


def write_predictions_csv(path, rows) -> Path:
    """``rows``: iterable of (patient_id, image_key, joint_id, task, predicted, truth-or-None)."""
    path = Path(path)
    rows = list(rows)
    with_truth = any(r[5] is not None for r in rows)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        header = ["patient_id", "image", "joint", "task", "predicted"] + (["truth"] if with_truth else [])
        writer.writerow(header)
        for pid, key, joint, task, predicted, truth in rows:
            row = [pid, key, joint, Task(task).value, f"{predicted:.4f}"]
            if with_truth:
                row.append("" if truth is None else truth)
            writer.writerow(row)
    return path


def prediction_rows(patient_id: str, image: AnnotatedImage, preds: list[JointPrediction]):
    truth = {j.type_id: j for j in image.joints}
    for p in preds:
        for task in Task:
            value = p.score(task)
            if value is None:
                continue
            t = truth.get(p.joint_type_id)
            yield patient_id, image.key, p.joint_type_id, task, value, (t.score(task) if t else None)
