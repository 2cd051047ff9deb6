import dataclasses
import math

import numpy as np
import pytest

from kgtransfer.autograd import Tensor
from kgtransfer.distill import (DistillConfig, build_student_space, feature_kd_loss,
                                init_transforms, network_kd_loss, normalized_scores,
                                prediction_kd_loss, retrain, student_distribution,
                                teacher_distribution, total_kd_loss)
from kgtransfer.encoders import EncoderConfig, init_parameters
from kgtransfer.errors import ConfigError, DataError
from kgtransfer.kg import DatasetSplit
from kgtransfer.objective import NceConfig
from kgtransfer.paths import WalkConfig
from kgtransfer.pipeline import Settings, pretrain_teacher, run_lp, run_pr4lp
from kgtransfer.pretrain import Checkpoint, TrainConfig, checkpoint_digest


def value(x):
    return float(np.asarray(x.data if isinstance(x, Tensor) else x))


def test_feature_zero_and_unit_cases():
    e = np.random.default_rng(0).normal(size=(3, 4))
    assert value(feature_kd_loss(e, e, np.eye(4), (e[:1], e[:1]))) == 0.0
    d = 5
    student = np.zeros((1, d))
    teacher = -np.eye(d)[:1]
    assert value(feature_kd_loss(student, teacher, np.eye(d))) == pytest.approx(1 / d)


def test_feature_reference_scalar():
    s = np.array([[1.0, 0.0], [0.0, 2.0], [1.0, 1.0]])
    t = np.array([[0.0, 0.0, 1.0], [1.0, 1.0, 0.0], [0.0, 2.0, 2.0]])
    w = np.array([[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]])
    pair = (s[[0]], s[[2]])
    # W s rows: (1,0,1) (0,2,2) (1,1,2); squared errors 1, 6, 2 over 9 entries
    expect = (1 + 6 + 2) / 9 + (0 + 1) / 2
    assert value(feature_kd_loss(s, t, w, pair)) == pytest.approx(expect, rel=1e-14)


def test_feature_missing_teacher_rows():
    with pytest.raises(DataError):
        feature_kd_loss(np.zeros((2, 3)), np.zeros((1, 3)), np.eye(3))


def test_network_examples():
    assert value(network_kd_loss({"w": np.array(2.0)}, {"w": np.array(5.0)},
                                 {"kd.net.w.left": np.array(1.0)})) == 9.0
    a = {"x": np.array([[1.0, 2.0]]), "y": np.array([3.0])}
    b = {"x": np.array([[0.0, 2.0]]), "y": np.array([1.0])}
    assert value(network_kd_loss(a, b, {})) == pytest.approx((0.5 + 4.0) / 2)
    p = init_parameters(EncoderConfig("rsn", 4), 3, 2)
    assert value(network_kd_loss(p, p, init_transforms(p, p))) == 0.0
    with pytest.raises(DataError):
        network_kd_loss({"x": np.zeros(2)}, {"x": np.zeros(3)}, {})


def test_transforms_bridge_dimensions():
    s = init_parameters(EncoderConfig("rsn", 4), 3, 2)
    t = init_parameters(EncoderConfig("rsn", 6), 3, 2)
    loss = network_kd_loss(s, t, init_transforms(s, t))
    assert np.isfinite(value(loss))


def test_normalized_scores():
    ctx = Tensor(np.array([1.0, 0.0]))
    cands = np.array([[0.0, 0.0], [math.log(3), 0.0], [-math.log(3), 0.0]])
    np.testing.assert_allclose(normalized_scores(cands, ctx).data, [1 / 3, 1 / 2, 1 / 6])
    np.testing.assert_allclose(normalized_scores(np.ones((4, 2)), ctx).data, 0.25)
    assert normalized_scores(cands[:1], ctx).data.tolist() == [1.0]


def test_kl_examples():
    assert value(prediction_kd_loss([0.5, 0.5], Tensor(np.array([0.5, 0.5])))) == 0.0
    assert value(prediction_kd_loss([1.0, 0.0], Tensor(np.array([0.5, 0.5])))) == \
        pytest.approx(0.6931, abs=1e-4)
    expect = 0.75 * math.log(1.5) + 0.25 * math.log(0.5)
    assert value(prediction_kd_loss([0.75, 0.25], Tensor(np.array([0.5, 0.5])))) == \
        pytest.approx(expect, abs=1e-12)
    assert expect == pytest.approx(0.130812, abs=1e-6)
    floored = value(prediction_kd_loss([1.0, 0.0], Tensor(np.array([0.0, 1.0]))))
    assert floored == pytest.approx(-math.log(1e-12))


def test_total():
    assert total_kd_loss(1, 2, 3, 0.5, 0.1) == pytest.approx(2.3)
    assert total_kd_loss(1, 2, 3, 0, 0) == 1
    assert total_kd_loss(0, 0, 0, 0.3, 0.3) == 0


def test_identical_models_give_identical_distributions():
    enc = EncoderConfig("lstm", 4, dropout_rate=0)
    p = init_parameters(enc, 5, 2, 3)
    ck = Checkpoint(enc, p, [f"e{i}" for i in range(5)], ["r", "r'"], np.array([1, 0]))
    paths = np.array([[0, 0, 1, 1, 2]])
    t = teacher_distribution(ck, paths, 5, [1, 2, 3])
    s = student_distribution(p, paths, enc, 5, [1, 2, 3]).data
    np.testing.assert_allclose(t, s, atol=1e-12)
    assert abs(t.sum() - 1) < 1e-12
    with pytest.raises(DataError):
        teacher_distribution(ck, paths, 5, [])


def test_config_validation():
    with pytest.raises(ConfigError):
        DistillConfig(alpha=-1)
    with pytest.raises(ConfigError):
        DistillConfig(valid_every=0)


def small_settings(**distill):
    return Settings(EncoderConfig("rsn", 8, dropout_rate=0.0), WalkConfig(5, 1, 0), NceConfig(k=3),
                    TrainConfig(batch_size=128, learning_rate=0.01, epochs=2),
                    TrainConfig(batch_size=256, learning_rate=0.02, epochs=3),
                    DistillConfig(**{"patience": 100, "valid_every": 1, **distill}))


@pytest.fixture(scope="module")
def teacher(scenario):
    return pretrain_teacher([scenario.background], [], small_settings()).checkpoint


def test_ablation_equals_target_only(scenario, teacher):
    s = small_settings(alpha=0.0, beta=0.0)
    lp = run_lp(scenario.target, scenario.split, s)
    ab = run_pr4lp(scenario.target, scenario.split, scenario.background, scenario.alignment,
                   dataclasses.replace(s, budget=0), teacher)
    assert checkpoint_digest(lp.student.checkpoint) == checkpoint_digest(ab.student.checkpoint)
    assert lp.report.mrr == ab.report.mrr


def test_teacher_untouched_and_student_space(scenario, teacher):
    before = checkpoint_digest(teacher)
    res = run_pr4lp(scenario.target, scenario.split, scenario.background, scenario.alignment,
                    small_settings(), teacher)
    assert checkpoint_digest(teacher) == before
    space = res.student.space
    assert space.num_target_entities == scenario.target.num_entities
    assert len(space.subgraph_entities) == len(res.subgraph.entities)
    assert res.student.history[0]["kd_loss"] > 0


def test_patience_zero_stops_at_first_non_improvement(scenario):
    s = small_settings(patience=0)
    s = dataclasses.replace(s, retrain=dataclasses.replace(s.retrain, epochs=30))
    res = run_lp(scenario.target, scenario.split, s)
    mrrs = [h["valid_mrr"] for h in res.student.history]
    first_bad = next((i for i in range(1, len(mrrs)) if mrrs[i] <= max(mrrs[:i])), None)
    assert first_bad is not None and len(mrrs) == first_bad + 1


def test_missing_validation_and_teacher_rows(scenario, teacher):
    empty = DatasetSplit(scenario.split.train, scenario.split.valid[:0], scenario.split.test)
    s = small_settings()
    with pytest.raises(DataError, match="validation"):
        retrain(scenario.target, empty, s.encoder, s.walk, s.nce, s.retrain)
    from kgtransfer.subgraph import linked_subgraph
    sub = linked_subgraph(scenario.background, scenario.alignment, 50)
    bare = dataclasses.replace(teacher, entities=["nobody"] * len(teacher.entities))
    with pytest.raises(DataError, match="teacher"):
        build_student_space(scenario.target, scenario.split, scenario.background, sub, bare)
