from __future__ import annotations

import numpy as np
import numpy.testing as npt
import pytest

from seqloc.errors import NonPositiveDepth, NonPositiveDisparity
from seqloc.geometry import (Transform, nearest_rotation, rotation_angle,
                             rotation_from_axis_angle)


def random_transform(rng: np.random.Generator) -> Transform:
    C = rotation_from_axis_angle(rng.standard_normal(3))
    return Transform(C, rng.standard_normal(3))


def test_compose_with_identity_returns_operand():
    rng = np.random.default_rng(1)
    T = random_transform(rng)
    out = T.compose(Transform.identity())
    npt.assert_allclose(out.matrix, T.matrix, atol=1e-12)


def test_compose_with_inverse_is_identity():
    rng = np.random.default_rng(2)
    for _ in range(5):
        T = random_transform(rng)
        npt.assert_allclose(T.compose(T.inverse()).matrix, np.eye(4), atol=1e-9)


def test_compose_pure_translations_add():
    a = Transform(np.eye(3), np.array([1.0, 0.0, 0.0]))
    b = Transform(np.eye(3), np.array([0.0, 2.0, 0.0]))
    npt.assert_allclose(a.compose(b).r, [1.0, 2.0, 0.0], atol=1e-15)


def test_compose_associative():
    rng = np.random.default_rng(3)
    A, B, C = (random_transform(rng) for _ in range(3))
    left = A.compose(B).compose(C)
    right = A.compose(B.compose(C))
    npt.assert_allclose(left.matrix, right.matrix, atol=1e-9)


def test_long_compose_chain_keeps_rotation_orthonormal():
    rng = np.random.default_rng(4)
    T = Transform.identity()
    for _ in range(2000):
        T = T.compose(random_transform(rng))
    npt.assert_allclose(T.C @ T.C.T, np.eye(3), atol=1e-9)


def test_inverse_of_identity():
    npt.assert_allclose(Transform.identity().inverse().matrix, np.eye(4),
                        atol=1e-15)


def test_inverse_of_pure_translation_negates():
    T = Transform(np.eye(3), np.array([1.0, 2.0, 3.0]))
    npt.assert_allclose(T.inverse().r, [-1.0, -2.0, -3.0], atol=1e-15)


def test_inverse_round_trip_residual():
    rng = np.random.default_rng(5)
    for _ in range(10):
        T = random_transform(rng)
        resid = T.compose(T.inverse()).matrix - np.eye(4)
        assert np.abs(resid).max() < 1e-9


def test_sq_translation_distance_values():
    assert Transform.identity().sq_translation_distance() == 0.0
    T = Transform(np.eye(3), np.array([3.0, 4.0, 0.0]))
    assert T.sq_translation_distance() == pytest.approx(25.0)
    T = Transform(np.eye(3), np.array([0.2, 0.0, 0.0]))
    assert T.sq_translation_distance() == pytest.approx(0.04)


def test_apply_identity_and_quarter_turn():
    p = np.array([1.0, 2.0, 3.0])
    npt.assert_allclose(Transform.identity().apply(p), p, atol=1e-15)
    quarter = Transform(rotation_from_axis_angle(np.array([0, 0, np.pi / 2])),
                        np.zeros(3))
    npt.assert_allclose(quarter.apply(np.array([1.0, 0, 0])), [0, 1, 0],
                        atol=1e-12)


def test_apply_inverse_round_trip():
    rng = np.random.default_rng(6)
    T = random_transform(rng)
    p = rng.standard_normal(3)
    npt.assert_allclose(T.inverse().apply(T.apply(p)), p, atol=1e-9)


def test_apply_distributes_over_compose():
    rng = np.random.default_rng(7)
    A, B = random_transform(rng), random_transform(rng)
    p = rng.standard_normal(3)
    npt.assert_allclose(A.compose(B).apply(p), A.apply(B.apply(p)), atol=1e-9)


def test_project_examples(example_cam):
    npt.assert_allclose(example_cam.project(np.array([0.0, 0.0, 1.0])),
                        [64.0, 48.0, 25.0], atol=1e-12)
    npt.assert_allclose(example_cam.project(np.array([0.5, -0.25, 2.0])),
                        [89.0, 35.5, 12.5], atol=1e-12)


def test_project_rejects_nonpositive_depth(example_cam):
    with pytest.raises(NonPositiveDepth):
        example_cam.project(np.array([0.0, 0.0, -1.0]))
    with pytest.raises(NonPositiveDepth):
        example_cam.project(np.array([1.0, 1.0, 0.0]))


def test_backproject_example_and_guard(example_cam):
    npt.assert_allclose(example_cam.backproject(np.array([64.0, 48.0, 25.0])),
                        [0.0, 0.0, 1.0], atol=1e-12)
    with pytest.raises(NonPositiveDisparity):
        example_cam.backproject(np.array([64.0, 48.0, 0.0]))


def test_projection_round_trips(example_cam):
    rng = np.random.default_rng(8)
    worst_y = 0.0
    worst_p = 0.0
    for _ in range(1000):
        y = np.array([rng.uniform(0, 127), rng.uniform(0, 95),
                      rng.uniform(0.5, 60.0)])
        back = example_cam.project(example_cam.backproject(y))
        worst_y = max(worst_y, np.abs(back - y).max())
        p = np.array([rng.uniform(-2, 2), rng.uniform(-2, 2),
                      rng.uniform(0.2, 10.0)])
        fwd = example_cam.backproject(example_cam.project(p))
        worst_p = max(worst_p, np.abs(fwd - p).max() / np.linalg.norm(p))
    assert worst_y < 1e-9
    assert worst_p < 1e-9


def test_rotation_helpers():
    C = rotation_from_axis_angle(np.array([0.0, 0.0, np.pi / 3]))
    assert rotation_angle(C) == pytest.approx(np.pi / 3, abs=1e-12)
    wobbly = C + 1e-4 * np.random.default_rng(9).standard_normal((3, 3))
    fixed = nearest_rotation(wobbly)
    npt.assert_allclose(fixed @ fixed.T, np.eye(3), atol=1e-12)
    assert np.linalg.det(fixed) == pytest.approx(1.0, abs=1e-12)


def test_transform_json_round_trip():
    rng = np.random.default_rng(10)
    T = random_transform(rng)
    back = Transform.from_json(T.to_json())
    npt.assert_allclose(back.matrix, T.matrix, atol=0)
    doc = T.to_json()
    assert set(doc) == {"matrix"}
    assert len(doc["matrix"]) == 16


def test_camera_json_round_trip(example_cam):
    back = type(example_cam).from_json(example_cam.to_json())
    assert back == example_cam
    assert set(example_cam.to_json()) == {"fu", "fv", "cu", "cv", "b",
                                          "width", "height"}
