import json

import pytest
from hypothesis import given
from hypothesis import strategies as st

from svhscore.errors import MalformedManifest, ScoreOutOfRange
from svhscore.records import AnnotatedImage, Joint, PatientRecord, IMAGE_KEYS, KEY_LIMB_SIDE
from svhscore.schema import (
    DEFAULT_SCHEMA,
    Limb,
    Side,
    Task,
    default_manifest,
    load_manifest,
    max_total_svh,
    schema_from_dict,
    score_range,
    total_svh,
)
import numpy as np


def test_default_manifest_counts():
    s = DEFAULT_SCHEMA
    assert len(s.types) == 21
    assert s.n_seg_classes == 22
    assert s.background_class == 21
    assert sum(t.has_narrowing for t in s.types) == 15
    assert sum(t.has_erosion for t in s.types) == 16
    assert len(s.foot_map) == 6


def test_score_ranges():
    assert score_range(None, Task.NARROWING, Limb.HAND).max == 4
    assert score_range(None, Task.NARROWING, Limb.FOOT).max == 4
    assert score_range(None, Task.EROSION, Limb.HAND).max == 5
    assert score_range(None, Task.EROSION, Limb.FOOT).max == 10


def test_foot_joints_scored_on_both_tasks():
    for i in DEFAULT_SCHEMA.foot_map:
        assert DEFAULT_SCHEMA.scored(i, Task.NARROWING, Limb.FOOT)
        assert DEFAULT_SCHEMA.scored(i, Task.EROSION, Limb.FOOT)
    assert not DEFAULT_SCHEMA.is_valid_joint(15, Limb.FOOT)


def test_side_flip():
    assert Side.LEFT.flipped() is Side.RIGHT
    assert Side.RIGHT.flipped() is Side.LEFT


def _manifest_with(**changes):
    m = default_manifest()
    m.update(changes)
    return m


@pytest.mark.parametrize(
    "mutate",
    [
        lambda m: m["types"].pop(),
        lambda m: m["types"][0].update(id=3),
        lambda m: m["types"][12].update(narrowing=False),
        lambda m: m.update(foot_map=[0, 1, 2, 3, 4]),
        lambda m: m.update(foot_map=[0, 1, 2, 3, 4, 12]),
        lambda m: m.pop("foot_map"),
    ],
)
def test_malformed_manifests_rejected(mutate):
    m = default_manifest()
    mutate(m)
    with pytest.raises(MalformedManifest):
        schema_from_dict(m)


def test_load_manifest_from_file(tmp_path):
    path = tmp_path / "m.json"
    path.write_text(json.dumps(default_manifest()))
    assert load_manifest(path) == DEFAULT_SCHEMA
    path.write_text("{not json")
    with pytest.raises(MalformedManifest):
        load_manifest(path)


def _patient(scores):
    """Every scored joint on every image gets ``scores(limb, task)``."""
    images = {}
    for key in IMAGE_KEYS:
        limb, side = KEY_LIMB_SIDE[key]
        joints = []
        for i in DEFAULT_SCHEMA.joint_ids(limb):
            n = scores(limb, Task.NARROWING) if DEFAULT_SCHEMA.scored(i, Task.NARROWING, limb) else None
            e = scores(limb, Task.EROSION) if DEFAULT_SCHEMA.scored(i, Task.EROSION, limb) else None
            joints.append(Joint(i, 1.0, 1.0, n, e))
        images[key] = AnnotatedImage(np.zeros((4, 4)), limb, side, joints)
    return PatientRecord("P", images)


def test_max_total_svh_matches_all_max_patient():
    top = _patient(lambda limb, task: score_range(None, task, limb).max)
    assert total_svh(top) == max_total_svh()
    # hands: 2 * (15*4 + 16*5) = 280; feet: 2 * 6 * (4 + 10) = 168
    assert max_total_svh() == 448


def test_total_svh_zero_and_out_of_range():
    assert total_svh(_patient(lambda limb, task: 0)) == 0
    with pytest.raises(ScoreOutOfRange):
        total_svh(_patient(lambda limb, task: 11))


@given(st.integers(0, 4))
def test_total_svh_linear_in_uniform_narrowing(n):
    # 2 hands * 15 + 2 feet * 6 narrowing joints
    p = _patient(lambda limb, task: n if task is Task.NARROWING else 0)
    assert total_svh(p) == n * (2 * 15 + 2 * 6)
