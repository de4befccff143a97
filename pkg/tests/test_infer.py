import csv

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from svhscore.errors import EmptyEnsemble, NotNormalized
from svhscore.evaluation import score_pairs
from svhscore.infer import (
    decode_expected,
    decode_heads,
    ensemble_images,
    ensemble_predict,
    predict_image,
    predict_images,
    prediction_rows,
    write_predictions_csv,
)
from svhscore.model import NetworkConfig, init_params
from svhscore.records import AnnotatedImage, Joint
from svhscore.schema import DEFAULT_SCHEMA, Limb, Side, Task
from svhscore.synth import SynthConfig, make_dataset

NET = NetworkConfig(depth=2, base_channels=4, in_h=32, in_w=32)
SYNTH = SynthConfig(seed=11, n_patients=2, canvas=(32, 32), bar_width=3, bar_height=2, gap_base=1, gap_per_grade=0.5, jitter_px=1)


def test_decode_expected_examples():
    assert decode_expected(np.full(5, 0.2)) == pytest.approx(2.0, abs=1e-12)
    assert decode_expected(np.eye(5)[3]) == 3.0
    assert decode_expected([0.1, 0.2, 0.3, 0.2, 0.2]) == pytest.approx(2.2, abs=1e-12)
    with pytest.raises(NotNormalized):
        decode_expected([0.5, 0.6])


dist_st = arrays(np.float64, st.integers(2, 8), elements=st.floats(0.01, 1)).map(lambda a: a / a.sum())


@given(dist_st)
def test_decode_shift_adds_one(dist):
    shifted = np.concatenate([[0.0], dist])
    assert decode_expected(shifted) == pytest.approx(decode_expected(dist) + 1, abs=1e-12)


def _maps(h, w, seg_label, nar, ero):
    seg = np.zeros((h, w, 22))
    seg[..., seg_label] = 1.0
    return seg, np.broadcast_to(nar, (h, w, 5)).copy(), np.broadcast_to(ero, (h, w, 6)).copy()


def test_foot_erosion_doubled_and_clamped():
    ero = np.zeros(6)
    ero[2], ero[3] = 0.7, 0.3  # expectation 2.3
    seg, nar, ero_map = _maps(4, 4, 21, np.eye(5)[0], ero)
    seg[0, 0] = 0
    seg[0, 0, 0] = 1.0  # joint 0 owns one pixel
    preds = decode_heads(seg, nar, ero_map, Limb.FOOT)
    by_id = {p.joint_type_id: p for p in preds}
    assert by_id[0].expected_erosion == pytest.approx(4.6, abs=1e-12)
    assert by_id[0].support == 1
    top = decode_heads(*_maps(4, 4, 0, np.eye(5)[4], np.eye(6)[5]), Limb.FOOT)
    assert all(p.expected_erosion == 10.0 and p.expected_narrowing == 4.0 for p in top)
    # the hand ceiling is 5: no doubling
    hand = decode_heads(*_maps(4, 4, 0, np.eye(5)[4], np.eye(6)[5]), Limb.HAND)
    assert max(p.expected_erosion for p in hand if p.expected_erosion is not None) == 5.0


def test_all_background_uses_fallback():
    seg, nar, ero = _maps(6, 6, 21, np.full(5, 0.2), np.full(6, 1 / 6))
    seg[..., 21] = 0.9
    seg[..., :21] = 0.1 / 21
    preds = decode_heads(seg, nar, ero, Limb.HAND)
    assert len(preds) == 21
    assert all(p.support == 0 for p in preds)
    for p in preds:
        assert p.predicted_center == pytest.approx((2.5, 2.5))
        if p.expected_narrowing is not None:
            assert p.expected_narrowing == pytest.approx(2.0)


def test_argmax_region_center_and_scores():
    seg, nar, ero = _maps(8, 8, 21, np.eye(5)[0], np.eye(6)[0])
    seg[2:4, 5:7] = np.eye(22)[4]
    nar[2:4, 5:7] = np.eye(5)[3]
    preds = {p.joint_type_id: p for p in decode_heads(seg, nar, ero, Limb.HAND)}
    assert preds[4].support == 4
    assert preds[4].predicted_center == pytest.approx((5.5, 2.5))
    assert preds[4].expected_narrowing == 3.0
    assert preds[15].expected_narrowing is None  # type 15 is erosion only


@pytest.fixture(scope="module")
def images():
    return [im for rec in make_dataset(SYNTH) for im in rec.images.values()]


def test_single_member_ensemble_is_predict_image(images):
    params = init_params(NET, 1)
    for im in images[:2]:
        assert ensemble_predict([(params, NET)], im) == predict_image(params, NET, im)


def test_two_member_mean(monkeypatch):
    import svhscore.infer as infer

    table = {
        1: decode_heads(*_maps(4, 4, 0, np.eye(5)[1], np.eye(6)[0]), Limb.HAND),
        2: decode_heads(*_maps(4, 4, 0, np.eye(5)[2], np.eye(6)[0]), Limb.HAND),
    }
    monkeypatch.setattr(infer, "predict_images", lambda p, c, ims, schema=DEFAULT_SCHEMA, clamp=True: [table[p]] * len(ims))
    out = ensemble_predict([(1, None), (2, None)], AnnotatedImage(np.zeros((4, 4)), Limb.HAND, Side.LEFT, []))
    assert all(p.expected_narrowing == 1.5 for p in out if p.expected_narrowing is not None)


def test_empty_ensemble():
    with pytest.raises(EmptyEnsemble):
        ensemble_predict([], AnnotatedImage(np.zeros((4, 4)), Limb.HAND, Side.LEFT, []))


@settings(max_examples=5, deadline=None)
@given(seeds=st.lists(st.integers(0, 2**31), min_size=2, max_size=4, unique=True))
def test_ensemble_jensen(images, seeds):
    members = [(init_params(NET, s), NET) for s in seeds]
    ens = score_pairs(ensemble_images(members, images), images)
    singles = [score_pairs(predict_images(p, c, images), images) for p, c in members]
    for task in Task:
        mse = lambda pairs: np.mean([(a - b) ** 2 for a, b in pairs])  # noqa: E731
        assert mse(ens[task]) <= np.mean([mse(s[task]) for s in singles]) + 1e-9


def test_predictions_within_range(images):
    params = init_params(NET, 3)
    for im, preds in zip(images, predict_images(params, NET, images)):
        limb = im.limb
        for p in preds:
            assert p.support >= 0
            for task in Task:
                v = p.score(task)
                if v is not None:
                    assert 0 <= v <= (4 if task is Task.NARROWING else (10 if limb is Limb.FOOT else 5))


def test_predictions_csv_format(tmp_path, images):
    params = init_params(NET, 3)
    im = images[0]
    rows = list(prediction_rows("P00", im, predict_image(params, NET, im)))
    path = write_predictions_csv(tmp_path / "p.csv", rows)
    got = list(csv.reader(path.read_text().splitlines()))
    assert got[0] == ["patient_id", "image", "joint", "task", "predicted", "truth"]
    assert len(got) - 1 == len(rows)
    for r in got[1:]:
        assert r[1] == im.key and r[3] in ("narrowing", "erosion")
        assert len(r[4].split(".")[1]) == 4
    no_truth = write_predictions_csv(tmp_path / "q.csv", [("P", "LH", 0, Task.EROSION, 1.0, None)])
    assert no_truth.read_text() == "patient_id,image,joint,task,predicted\nP,LH,0,erosion,1.0000\n"


def test_foot_joint_prediction_reports_truth(images):
    foot = next(im for im in images if im.limb is Limb.FOOT)
    preds = predict_image(init_params(NET, 0), NET, foot)
    truth = {r[2]: r[5] for r in prediction_rows("P", foot, preds) if r[3] is Task.EROSION}
    assert truth == {j.type_id: j.erosion for j in foot.joints}
    assert isinstance(foot.joints[0], Joint)
