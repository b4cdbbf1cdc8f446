import hashlib
import json

import numpy as np
import pytest
from helpers import pair_video
from oracles import brute_force_hits, random_instance, scalar_mean_recall

from stket.evaluation import (NO_HIT, EvaluationError, FramePredictions, FrameTruth, MetricsReport, accumulate,
                              build_report, evaluate, frequency_prior_baseline, match_triplets, mean_recall_at_k,
                              recall_at_k)
from stket.gradcheck import toy_config, toy_video
from stket.knowledge import build_spatial_matrix, build_temporal_matrix
from stket.model import ModelConfigError, STKET


@pytest.mark.parametrize("task", ["predcls", "sgcls", "sggen"])
def test_matching_agrees_with_brute_force(task):
    rng = np.random.default_rng(["predcls", "sgcls", "sggen"].index(task))
    for _ in range(300):
        pred, gt = random_instance(rng, task)
        ranks = match_triplets(pred, gt, task)
        for k in (1, 2, 3, 5, 8):
            assert list(ranks < k) == brute_force_hits(pred, gt, task, k)


def frame(gt_triplets, boxes=None, classes=None):
    arr = np.array(gt_triplets, dtype=np.int64).reshape(-1, 3)
    boxes = np.array(boxes if boxes is not None else [[0, 0, 10, 10], [5, 5, 20, 20], [30, 30, 40, 40]], float)
    classes = np.array(classes if classes is not None else [0, 1, 2])
    return FrameTruth(boxes, classes, arr[:, 0], arr[:, 1], arr[:, 2])


def preds(triplets, conf, gt):
    arr = np.array(triplets, dtype=np.int64).reshape(-1, 3)
    return FramePredictions(gt.boxes, gt.classes, arr[:, 0], arr[:, 1], arr[:, 2], np.array(conf, float),
                            np.arange(len(arr)))


def test_identical_predictions_hit_everything():
    gt = frame([(0, 1, 0), (0, 2, 1), (0, 1, 3)])
    ranks = match_triplets(preds([(0, 1, 0), (0, 2, 1), (0, 1, 3)], [0.9, 0.8, 0.7], gt), gt, "predcls")
    assert np.all(ranks < 3)


def test_half_recall():
    gt = frame([(0, 1, 0), (0, 2, 1)])
    ranks = match_triplets(preds([(0, 1, 0), (0, 2, 2)], [0.9, 0.8], gt), gt, "predcls")
    assert recall_at_k([ranks], 10) == 50.0


def test_prediction_claims_one_ground_truth():
    gt = frame([(0, 1, 0), (0, 1, 0)])
    ranks = match_triplets(preds([(0, 1, 0)], [0.9], gt), gt, "predcls")
    assert list(ranks) == [0, NO_HIT]


def test_ties_break_by_predicate_then_pair():
    gt = frame([(0, 2, 1)])
    p = FramePredictions(gt.boxes, gt.classes, np.array([0, 0, 0]), np.array([1, 2, 2]), np.array([1, 1, 0]),
                         np.array([0.5, 0.5, 0.5]), np.array([0, 1, 1]))
    np.testing.assert_array_equal(p.order(), [2, 0, 1])
    assert match_triplets(p, gt, "predcls", max_k=2)[0] == NO_HIT
    assert match_triplets(p, gt, "predcls", max_k=3)[0] == 2


def test_sgcls_needs_correct_classes():
    gt = frame([(0, 1, 0)])
    p = FramePredictions(gt.boxes, np.array([0, 2, 2]), np.array([0]), np.array([1]), np.array([0]),
                         np.array([0.9]), np.array([0]))
    assert match_triplets(p, gt, "sgcls")[0] == NO_HIT
    assert match_triplets(p, gt, "predcls")[0] == NO_HIT


def test_sggen_iou_threshold():
    gt = frame([(0, 1, 0)], boxes=[[0, 0, 10, 10], [20, 0, 30, 10]], classes=[0, 1])
    near = np.array([[0, 0, 10, 10], [21, 0, 31, 10]], float)      # IoU 9/11
    far = np.array([[0, 0, 10, 10], [25, 0, 35, 10]], float)       # IoU 1/3
    for boxes, hit in ((near, True), (far, False)):
        p = FramePredictions(boxes, np.array([0, 1]), np.array([0]), np.array([1]), np.array([0]),
                             np.array([0.9]), np.array([0]))
        assert (match_triplets(p, gt, "sggen")[0] != NO_HIT) == hit


def test_recall_arithmetic():
    frames = [np.array([0, NO_HIT]), np.array([1, 2]), np.array([NO_HIT]), np.array([], dtype=np.int64)]
    assert recall_at_k(frames, 10) == pytest.approx(60.0)
    assert recall_at_k([np.array([NO_HIT, NO_HIT])], 10) == 0.0
    assert recall_at_k(frames, 10, "macro") == pytest.approx(100 * (0.5 + 1 + 0) / 3)
    with pytest.raises(EvaluationError):
        recall_at_k([np.array([], dtype=np.int64)], 10)


def test_mean_recall_arithmetic():
    ranks, preds_ = [np.array([0, NO_HIT])], [np.array([0, 1])]
    assert mean_recall_at_k(ranks, preds_, 10, 3) == 50.0
    uniform = [np.array([0, NO_HIT, 0, NO_HIT])], [np.array([0, 0, 1, 1])]
    assert mean_recall_at_k(*uniform, 10, 2) == recall_at_k(uniform[0], 10) == 50.0


def test_frequency_baseline_is_perfect_on_deterministic_pairs():
    v = pair_video([{0}, {0}, {0}])
    acc = accumulate(frequency_prior_baseline(build_spatial_matrix([v]), [v]), [v], "predcls", ks=(1,))
    assert recall_at_k(acc.frame_ranks, 1) == 100.0


def test_frequency_baseline_unseen_pair_is_uniform():
    v = pair_video([{2}])
    empty = build_spatial_matrix([pair_video([{0}], class_names=("person", "cup", "mug"))])
    empty.pair_counts.clear()
    (frames,) = frequency_prior_baseline(empty, [v])
    np.testing.assert_allclose(frames[0].conf, 1 / 3)
    acc = accumulate([frames], [v], "predcls", ks=(1, 3))
    assert recall_at_k(acc.frame_ranks, 1) == 0.0          # predicate 0 wins the tie
    assert recall_at_k(acc.frame_ranks, 3) == 100.0


@pytest.fixture(scope="module")
def trained():
    cfg = toy_config(dropout=0.0)
    videos = [toy_video(s, cfg) for s in range(2)]
    sp, tp = build_spatial_matrix(videos), build_temporal_matrix(videos)
    return STKET(cfg, seed=0), videos, sp, tp


def test_evaluate_report_is_monotone_and_round_trips(trained, tmp_path):
    model, videos, sp, tp = trained
    rep = evaluate(model, videos, "predcls", (1, 3, 10, 20, 50), sp, tp)
    r = [rep.recall[k] for k in ("1", "3", "10", "20", "50")]
    assert r == sorted(r) and all(0 <= x <= 100 for x in r)
    assert rep.recall["50"] == 100.0       # 3 pairs x 6 predicates per frame
    assert MetricsReport.from_json(rep.to_json()) == rep
    assert rep.knowledge_entropy
    rep.write_per_predicate_csv(tmp_path / "p.csv")
    assert (tmp_path / "p.csv").read_text().splitlines()[0] == "id,name,gt_count,R@1,R@3,R@10,R@20,R@50"


def test_evaluate_mean_recall_matches_scalar_oracle(trained):
    model, videos, sp, tp = trained
    from stket.evaluation import predict_video
    preds_ = [predict_video(model, v, "predcls", sp, tp) for v in videos]
    acc = accumulate(preds_, videos, "predcls", (5,))
    rep = build_report(acc, "predcls", videos[0].predicate_names)
    assert rep.mean_recall["5"] == pytest.approx(scalar_mean_recall(acc.frame_ranks, acc.frame_predicates, 5),
                                                 abs=1e-9)


def test_evaluation_is_read_only(trained):
    model, videos, sp, tp = trained
    h = lambda: hashlib.sha256(b"".join(p.data.tobytes() for p in model.parameters())).hexdigest()
    before = h()
    evaluate(model, videos, "sgcls", spatial=sp, temporal=tp)
    assert h() == before


def test_parallel_evaluation_matches_serial(trained):
    model, videos, sp, tp = trained
    a = evaluate(model, videos, "predcls", spatial=sp, temporal=tp)
    b = evaluate(model, videos, "predcls", spatial=sp, temporal=tp, jobs=2)
    assert a.to_json() == b.to_json()


def test_sggen_needs_detections(trained):
    model, videos, sp, tp = trained
    with pytest.raises(EvaluationError):
        evaluate(model, videos, "sggen", spatial=sp, temporal=tp)
    rep = evaluate(model, videos, "sggen", spatial=sp, temporal=tp, detections=videos)
    assert 0 <= rep.recall["50"] <= 100


def test_dataset_model_mismatch(trained):
    _, videos, sp, tp = trained
    with pytest.raises(ModelConfigError):
        evaluate(STKET(toy_config(num_predicates=7, predicate_type_sizes=[1, 2, 4])), videos, "predcls")


@pytest.fixture(scope="module")
def skewed():
    from stket.cli import load_config
    from stket.synthetic import GenConfig, generate_synthetic_dataset
    doc = load_config("benchmark")
    videos, _ = generate_synthetic_dataset(GenConfig.from_dict(doc["generator"]))
    n = doc["benchmark"]["train_videos"]
    return videos[:n], videos[n:]


def test_skewed_set_mean_recall_matches_scalar_oracle(skewed):
    train_v, test_v = skewed
    acc = accumulate(frequency_prior_baseline(build_spatial_matrix(train_v), test_v), test_v, "predcls")
    rep = build_report(acc, "predcls", test_v[0].predicate_names)
    for k in (10, 20, 50):
        assert rep.mean_recall[str(k)] == pytest.approx(
            scalar_mean_recall(acc.frame_ranks, acc.frame_predicates, k), abs=1e-9)


# computed once on the bundled benchmark split and frozen
FROZEN_BASELINE_MR = {"10": 23.71512216965849, "20": 46.537805408945516, "50": 68.41827892831617}


def test_skewed_set_frequency_baseline_is_frozen(skewed):
    train_v, test_v = skewed
    rep = build_report(accumulate(frequency_prior_baseline(build_spatial_matrix(train_v), test_v), test_v,
                                  "predcls"), "predcls", test_v[0].predicate_names)
    for k, v in FROZEN_BASELINE_MR.items():
        assert rep.mean_recall[k] == pytest.approx(v, abs=1e-9)
