"""End-to-end acceptance criteria; each test prints one PASS/FAIL line."""

import json
import time

import numpy as np
import pytest
from helpers import pair_video
from oracles import brute_force_hits, frame_subset, oracle_banks, random_instance

from stket import tensorio
from stket.cli import infer_model_config, load_config
from stket.data import load_annotations, save_annotations
from stket.evaluation import (MetricsReport, accumulate, build_report, evaluate, frequency_prior_baseline,
                              match_triplets)
from stket.gradcheck import run_suite, toy_config
from stket.knowledge import build_spatial_matrix, build_temporal_matrix, load_banks, save_banks
from stket.model import ModelConfig, STKET, prepare_video
from stket.synthetic import GenConfig, generate_synthetic_dataset
from stket.tensor import Tensor
from stket.train import TrainRunConfig, load_checkpoint, save_checkpoint, train


def bundled(name):
    doc = load_config(name)
    videos, dyn = generate_synthetic_dataset(GenConfig.from_dict(doc["generator"]))
    return doc, videos, dyn


def fit(videos, model_overrides, run, spatial, temporal, seed=0, **model_kw):
    cfg = infer_model_config(videos, {**model_overrides, **model_kw})
    model = STKET(cfg, seed)
    train(model, [prepare_video(v, cfg) for v in videos], spatial, temporal, run)
    return model


def test_1_gradcheck(verdict):
    t0 = time.perf_counter()
    results = run_suite(seeds=range(20))
    elapsed = time.perf_counter() - t0
    worst = max(r.error for r in results)
    ops = {r.name for r in results if not r.name.startswith("loss[")}
    ok = all(r.passed for r in results) and elapsed < 120 and len(ops) >= 28
    assert verdict(1, "gradcheck", ok, f"{len(results)} checks, {len(ops)} ops, 20 seeds, "
                                       f"max rel err {worst:.1e}, {elapsed:.0f}s")


def test_2_knowledge_recovery(verdict, recovery_dataset):
    videos, dyn = recovery_dataset
    spatial, temporal = build_spatial_matrix(videos), build_temporal_matrix(videos)
    n_types = len(videos[0].predicate_type_sizes)
    transitions = sum(s.sum() for s in temporal.source_counts.values()) / n_types
    e_err = max(np.abs(spatial.matrix(0, j) - dyn.cooccurrence[j]).max() for j in dyn.cooccurrence)
    t_err = max(np.abs(temporal.matrix(0, j) - dyn.transition[j]).max() for j in dyn.transition)

    subset = frame_subset(videos, 1000)
    o_sp, o_tp = oracle_banks(subset)
    s_sp, s_tp = build_spatial_matrix(subset), build_temporal_matrix(subset)
    exact = (sorted(o_sp) == sorted(s_sp.pair_counts)
             and all(np.array_equal(o_sp[k], s_sp.matrix(*k)) for k in o_sp)
             and all(np.array_equal(o_tp[k], s_tp.matrix(*k)) for k in o_tp))
    ok = transitions >= 50_000 and e_err <= 0.02 and t_err <= 0.02 and exact
    assert verdict(2, "knowledge recovery", ok, f"{transitions:.0f} transitions, E err {e_err:.4f}, "
                                                f"E-hat err {t_err:.4f}, oracle exact on "
                                                f"{sum(len(v.frames) for v in subset)} frames: {exact}")


def test_3_person_cup(verdict):
    hold, drink = 0, 1
    e = build_spatial_matrix([pair_video([{hold}, {hold, drink}])]).matrix(0, 1)
    m = build_temporal_matrix([pair_video([{hold}, {drink}])]).matrix(0, 1)
    expected = np.zeros_like(m)
    expected[hold, drink] = 1.0
    ok = e[hold] == 1.0 and e[drink] == 0.5 and np.array_equal(m, expected)
    assert verdict(3, "person-cup", ok, f"e_hold={e[hold]}, e_drink={e[drink]}, "
                                        f"e-hat_hold,drink={m[hold, drink]}, other mass {m.sum() - m[hold, drink]}")


def test_4_metric_oracle(verdict):
    mismatches = 0
    for i, task in enumerate(("predcls", "sgcls", "sggen") * 334):
        if i == 1000:
            break
        rng = np.random.default_rng([4, i])
        pred, gt = random_instance(rng, task)
        ranks = match_triplets(pred, gt, task)
        for k in (1, 2, 3, 5, 8):
            mismatches += list(ranks < k) != brute_force_hits(pred, gt, task, k)
    monotone = []
    for name in ("micro", "overfit", "benchmark"):
        doc, videos, _ = bundled(name)
        sp = build_spatial_matrix(videos)
        model = STKET(infer_model_config(videos, doc.get("model", {})), 0)
        for rep in (evaluate(model, videos, "predcls", spatial=sp, temporal=build_temporal_matrix(videos)),
                    build_report(accumulate(frequency_prior_baseline(sp, videos), videos, "predcls"),
                                 "predcls", videos[0].predicate_names)):
            for table in (rep.recall, rep.mean_recall):
                monotone.append(table["10"] <= table["20"] <= table["50"])
    ok = mismatches == 0 and all(monotone)
    assert verdict(4, "metric oracle", ok, f"1000 instances, {mismatches} mismatches, "
                                           f"{sum(monotone)}/{len(monotone)} monotone R@K/mR@K tables")


def test_5_architecture(verdict):
    rng = np.random.default_rng(5)
    model = STKET(toy_config(dropout=0.0), seed=5)
    d = model.config.d
    x, s = rng.normal(size=(6, d)), rng.normal(size=(6, d))
    perm = rng.permutation(6)
    out = model.skel_forward(Tensor(x), Tensor(s)).data
    equi = np.abs(model.skel_forward(Tensor(x[perm]), Tensor(s[perm])).data - out[perm]).max()

    plain = STKET(toy_config(dropout=0.0, use_knowledge=False), seed=5)
    plain_err = np.abs(model.skel_forward(Tensor(x), Tensor(np.zeros_like(s))).data
                       - plain.skel_forward(Tensor(x), None).data).max()

    full = STKET(ModelConfig(dtype="float32", dropout=0.0), seed=0)
    cfg = full.config
    k = 3
    fs = Tensor(rng.normal(size=(k, cfg.d)).astype(np.float32))
    know = full.knowledge.f_spa(Tensor(rng.random((k, cfg.num_predicates)).astype(np.float32)))
    y = full.skel_forward(fs, know)
    contracts = (cfg.d == 1936 and y.shape == (k, 1936) and know.shape == (k, 1936)
                 and full.sta_proj.shape == (3872, 1936)
                 and cfg.partition == [3, 6, 17] and cfg.num_predicates == 26
                 and [b.shape[1] for b in full.sta_head.blocks] == [3, 6, 17])
    ok = equi <= 1e-9 and plain_err <= 1e-9 and contracts
    assert verdict(5, "architecture", ok, f"equivariance err {equi:.1e}, plain-attention err {plain_err:.1e}, "
                                          f"contracts 1936 / 3872->1936 / 26=3+6+17: {contracts}")


def test_6_learning_signal(verdict):
    t0 = time.perf_counter()
    doc, videos, _ = bundled("benchmark")
    n_train = doc["benchmark"]["train_videos"]
    seeds = doc["benchmark"]["seeds"]
    train_v, test_v = videos[:n_train], videos[n_train:]
    sp, tp = build_spatial_matrix(train_v), build_temporal_matrix(train_v)
    freq = build_report(accumulate(frequency_prior_baseline(sp, test_v), test_v, "predcls"),
                        "predcls", test_v[0].predicate_names).mean_recall["10"]
    full, ablated = [], []
    for seed in seeds:
        run = TrainRunConfig.from_dict({**doc["train"], "seed": seed})
        for use, bucket in ((True, full), (False, ablated)):
            model = fit(train_v, doc["model"], run, sp, tp, seed, use_knowledge=use)
            bucket.append(evaluate(model, test_v, "predcls", spatial=sp, temporal=tp).mean_recall["10"])
    elapsed = time.perf_counter() - t0
    wins = sum(a > b for a, b in zip(full, ablated))
    ok = min(full) > freq and wins >= 4 and elapsed < 600
    assert verdict(6, "learning signal", ok, f"mR@10 STKET {np.round(full, 1).tolist()} vs no-knowledge "
                                             f"{np.round(ablated, 1).tolist()} vs frequency {freq:.1f}; "
                                             f"wins {wins}/{len(seeds)}, {elapsed:.0f}s")


def test_7_overfit(verdict):
    doc, videos, _ = bundled("overfit")
    sp, tp = build_spatial_matrix(videos), build_temporal_matrix(videos)
    model = fit(videos, doc["model"], TrainRunConfig.from_dict(doc["train"]), sp, tp)
    rep = evaluate(model, videos, "predcls", spatial=sp, temporal=tp)
    candidates = max(len(f.relationships) for v in videos for f in v.frames) * videos[0].num_predicates
    ok = len(videos) == 5 and rep.recall["50"] == 100.0 and candidates > 50
    assert verdict(7, "overfit", ok, f"PredCls R@50 {rep.recall['50']:.1f} on {len(videos)} training videos, "
                                     f"up to {candidates} candidates per frame")


def test_8_determinism_and_persistence(verdict, tmp_path):
    doc, videos, dyn = bundled("micro")
    sp, tp = build_spatial_matrix(videos), build_temporal_matrix(videos)
    cfg = infer_model_config(videos, doc["model"])
    pv = [prepare_video(v, cfg) for v in videos]
    run = TrainRunConfig.from_dict({**doc["train"], "epochs": 4})

    def trained(path, stop=None):
        model = STKET(cfg, 0)
        train(model, pv, sp, tp, TrainRunConfig(**{**run.__dict__, "epochs": stop or run.epochs}),
              checkpoint_dir=path)
        return model

    a, b = trained(tmp_path / "a"), trained(tmp_path / "b")
    identical = all(np.array_equal(x, y) for x, y in zip(a.state_dict().values(), b.state_dict().values()))
    same_bytes = (tmp_path / "a/params.stkt").read_bytes() == (tmp_path / "b/params.stkt").read_bytes()

    trained(tmp_path / "r", stop=2)
    ck = load_checkpoint(tmp_path / "r")
    train(ck.model, pv, ck.spatial, ck.temporal, run, ck.state, start_epoch=ck.epoch, checkpoint_dir=tmp_path / "r")
    resumed = all(np.array_equal(x, y) for x, y in zip(a.state_dict().values(), ck.model.state_dict().values()))
    resumed = resumed and (tmp_path / "r/optim.stkt").read_bytes() == (tmp_path / "a/optim.stkt").read_bytes()

    trips = {}
    back = load_checkpoint(tmp_path / "a")
    save_checkpoint(tmp_path / "a2", back.model, back.state, back.epoch, back.run, back.spatial, back.temporal)
    trips["checkpoint"] = all((tmp_path / "a" / f).read_bytes() == (tmp_path / "a2" / f).read_bytes()
                              for f in ("manifest.json", "params.stkt", "optim.stkt"))
    save_annotations(tmp_path / "ann.json", videos)
    save_annotations(tmp_path / "ann2.json", load_annotations(tmp_path / "ann.json"))
    trips["annotations"] = ((tmp_path / "ann.json").read_text().replace("ann.features", "")
                            == (tmp_path / "ann2.json").read_text().replace("ann2.features", ""))
    trips["annotations"] &= ((tmp_path / "ann.features.stkt").read_bytes()
                             == (tmp_path / "ann2.features.stkt").read_bytes())
    save_banks(tmp_path / "k", sp, tp)
    s2, t2 = load_banks(tmp_path / "k")
    trips["banks"] = (s2.pair_counts == sp.pair_counts
                      and all(np.array_equal(s2.matrix(*p), sp.matrix(*p)) for p in sp.pair_counts)
                      and all(np.array_equal(t2.matrix(*p), tp.matrix(*p)) for p in sp.pair_counts))
    arrays = [np.random.default_rng(8).normal(size=s).astype(t) for s, t in
              (((3, 4), np.float64), ((2, 1, 5), np.float32), ((0,), np.float64), ((), np.float64))]
    tensorio.save_tensors(tmp_path / "t.stkt", arrays)
    trips["tensors"] = all(x.dtype == y.dtype and np.array_equal(x, y)
                           for x, y in zip(arrays, tensorio.load_all(tmp_path / "t.stkt")))
    rep = evaluate(a, videos, "predcls", spatial=sp, temporal=tp)
    trips["report"] = MetricsReport.from_json(rep.to_json()) == rep
    gen = GenConfig.from_dict(doc["generator"])
    trips["generator"] = GenConfig.from_dict(json.loads(json.dumps(gen.to_dict()))) == gen
    trips["model config"] = ModelConfig.from_dict(json.loads(json.dumps(cfg.to_dict()))) == cfg
    pairs = json.loads(dyn.to_json())["pairs"]
    trips["dynamics"] = all(np.array_equal(np.array(pairs[str(j)]["transition"]), dyn.transition[j])
                            and np.array_equal(np.array(pairs[str(j)]["cooccurrence"]), dyn.cooccurrence[j])
                            for j in dyn.transition)

    ok = identical and same_bytes and resumed and all(trips.values())
    assert verdict(8, "determinism and persistence", ok,
                   f"bit-identical {identical and same_bytes}, resume {resumed}, "
                   f"round trips {sorted(k for k, v in trips.items() if v)}")
