"""End-to-end acceptance criteria.

Each test is one numbered criterion; the terminal summary prints one
PASS/FAIL line per criterion. Run alone with ``pytest tests/test_acceptance.py``.
"""
import json
import time
import warnings

import numpy as np
import pytest

from sigmetric.cli import main
from sigmetric.dataio import directory_digest, import_dataset
from sigmetric.distance import DistanceMeasure, dtw_distance
from sigmetric.encoder import EncoderConfig, HeadConfig, load_checkpoint
from sigmetric.metrics import age_bin_masks, auc, average_pairwise_gap, gender_gap, kruskal_wallis
from sigmetric.mining import (MinerSpec, mine_continuous_label, mine_distance_ranked, mine_random,
                              mine_semihard, mine_softhard, squared_distances)
from sigmetric.objectives import ObjectiveSpec
from sigmetric.signals import (SplitSpec, SyntheticCohortConfig, generate_synthetic_cohort, split_by_patient,
                               subsample_patients)
from sigmetric.training import TrainConfig, embed, finetune, predict, pretrain_selfsup, train_supervised_joint

from conftest import TINY_ENCODER
from gradient_suite import LOSS_CASES, PRIMITIVE_CASES, run_case
from metric_suite import check_auc_apr, check_kruskal, check_neighbors
from oracles import dtw_full_table, knn_group_brute


def note(request, text):
    request.node.acceptance_detail = text


def _random_pair(rng, max_len=32):
    d = int(rng.integers(1, 5))
    return rng.normal(size=(d, int(rng.integers(1, max_len + 1)))), rng.normal(size=(d, int(rng.integers(1, max_len + 1))))


@pytest.mark.acceptance(1, "DTW equals the full-table oracle")
def test_dtw_oracle_equivalence(request):
    t0 = time.perf_counter()
    assert dtw_distance(np.array([[0.0, 1.0, 2.0]]), np.array([[0.0, 2.0]])) == 1.0
    rng = np.random.default_rng(1)
    mismatches = 0
    for _ in range(500):
        x, y = _random_pair(rng)
        mismatches += dtw_distance(x, y) != dtw_full_table(x, y)
    elapsed = time.perf_counter() - t0
    note(request, f"{mismatches} mismatches / 500 pairs, {elapsed:.2f}s")
    assert mismatches == 0
    assert elapsed < 5.0


@pytest.mark.acceptance(2, "Sakoe-Chiba band consistency")
def test_band_consistency(request):
    rng = np.random.default_rng(2)
    for _ in range(100):
        x, y = _random_pair(rng)
        full = dtw_distance(x, y)
        longest = max(x.shape[1], y.shape[1])
        assert dtw_distance(x, y, band_radius=longest) == full
        assert dtw_distance(x, y, band_radius=longest + 7) == full
        radii = range(abs(x.shape[1] - y.shape[1]), longest + 1)
        values = [dtw_distance(x, y, band_radius=r) for r in radii]
        assert all(a >= b for a, b in zip(values, values[1:]))
    note(request, "100 pairs, wide band bitwise equal, widening non-increasing")


@pytest.mark.acceptance(3, "finite-difference gradient suite")
def test_gradient_suite(request):
    t0 = time.perf_counter()
    worst = {}
    for name, builder in {**PRIMITIVE_CASES, **LOSS_CASES}.items():
        worst[name] = run_case(name, builder, 50, seed=0)
    elapsed = time.perf_counter() - t0
    name = max(worst, key=worst.get)
    note(request, f"{len(worst)} ops x 50 instances, worst {name} {worst[name]:.2e}, {elapsed:.1f}s")
    assert all(v < 1e-3 for v in worst.values()), worst
    assert elapsed < 60.0


def _miner_batch(rng):
    n = int(rng.integers(3, 17))
    dim = int(rng.integers(1, 5))
    emb = rng.normal(size=(n, dim)) if rng.uniform() < 0.7 else rng.integers(-2, 3, size=(n, dim)).astype(float)
    y = rng.integers(0, 2, n)
    cont = np.round(rng.uniform(5, 30, n), int(rng.integers(0, 2)))
    return emb, y, cont


def _assert_distinct(t):
    assert len(set(map(int, t))) == 3


@pytest.mark.acceptance(4, "miner property suite")
def test_miner_properties(request):
    rng = np.random.default_rng(4)
    counts = dict.fromkeys(("random", "semihard", "softhard", "continuous_label", "distance_ranked"), 0)
    for _ in range(1000):
        emb, y, cont = _miner_batch(rng)
        d2 = squared_distances(emb)
        for a, p, n in mine_random(y, rng).triples:
            _assert_distinct((a, p, n))
            assert y[p] == y[a] != y[n]
            counts["random"] += 1
        for a, p, n in mine_semihard(emb, y, rng).triples:
            _assert_distinct((a, p, n))
            assert y[p] == y[a] != y[n] and d2[a, p] < d2[a, n]
            counts["semihard"] += 1
        for a, p, n in mine_softhard(emb, y, rng).triples:
            _assert_distinct((a, p, n))
            same = [j for j in range(len(y)) if j != a and y[j] == y[a]]
            other = [j for j in range(len(y)) if y[j] != y[a]]
            assert y[p] == y[a] != y[n]
            assert min(d2[a, j] for j in other) < d2[a, n] < max(d2[a, j] for j in same)
            counts["softhard"] += 1
        for a, p, n in mine_continuous_label(cont, rng).triples:
            _assert_distinct((a, p, n))
            gaps = [(abs(cont[j] - cont[a]), j) for j in range(len(cont)) if j != a]
            assert p == min(gaps)[1]
            assert abs(cont[n] - cont[a]) == max(gaps)[0] > min(gaps)[0]
            counts["continuous_label"] += 1
        dist = np.sqrt(d2)
        for a, p, n in mine_distance_ranked(dist, rng).triples:
            _assert_distinct((a, p, n))
            assert p == min((dist[a, j], j) for j in range(len(dist)) if j != a)[1]
            counts["distance_ranked"] += 1
    note(request, "1000 batches; triples checked " + ", ".join(f"{k} {v}" for k, v in counts.items()))
    assert all(counts.values())


@pytest.mark.acceptance(5, "metric oracle suite")
def test_metric_oracles(request):
    auc_err = check_auc_apr(1000, seed=5)
    nn_bad = check_neighbors(1000, seed=5)
    kw_err = check_kruskal(1000, seed=5)
    h, _ = kruskal_wallis([[1, 2, 3], [4, 5, 6]])
    note(request, f"AUC/APR max diff {auc_err:.1e}, neighbour mismatches {nn_bad}, H={h:.12f}")
    assert auc_err == 0.0
    assert nn_bad == 0
    assert kw_err < 1e-10
    assert abs(h - 3.857142857142857) < 1e-9


@pytest.mark.acceptance(6, "subgroup gap arithmetic replays")
def test_gap_arithmetic_replays(request):
    gap = gender_gap(81.3, 73.2)
    age = average_pairwise_gap([77.4, 77.3, 77.8, 77.4])
    note(request, f"gender gap {gap!r}, age gap {age!r}")
    # one-decimal inputs give one-decimal outputs up to float representation
    assert round(gap, 1) == 8.1 and abs(gap - 8.1) < 1e-9
    assert abs(age - 0.25) < 1e-9
    assert abs(age - 0.3) <= 0.05 + 1e-9


@pytest.mark.acceptance(7, "alpha = 0 reduces to the task-only run")
def test_alpha_zero_degeneration(request, tiny_cohort):
    t0 = time.perf_counter()
    tr, va = tiny_cohort["train"], tiny_cohort["valid"]
    base = TrainConfig(encoder=TINY_ENCODER, head=HeadConfig(hidden_dim=8), batch_size=16, epochs=5,
                       seed=11, record_wall_time=False)
    _, plain = train_supervised_joint(tr, va, base.replace(objective=ObjectiveSpec(metric_loss="none")))
    for kind in ("random", "semihard"):
        cfg = base.replace(miner=MinerSpec(kind), objective=ObjectiveSpec(alpha_scale=0.0))
        _, joint = train_supervised_joint(tr, va, cfg)
        assert joint.column("loss_task") == plain.column("loss_task")
        assert joint.column("val_metric") == plain.column("val_metric")
        assert joint.last_state.parameters_equal(plain.last_state)
    elapsed = time.perf_counter() - t0
    note(request, f"5 epochs, random and semihard miners, {elapsed:.1f}s")
    assert elapsed < 120.0


@pytest.mark.slow
@pytest.mark.acceptance(8, "desk-scale learning on the default cohort")
def test_desk_scale_learning(request):
    t0 = time.perf_counter()
    cohort = SyntheticCohortConfig()
    labeled, _, oracle = generate_synthetic_cohort(cohort, return_oracle=True)
    train, valid, _ = split_by_patient(labeled, SplitSpec())
    clean = np.array([oracle[r] for r in labeled.record_ids])
    oracle_auc = auc(clean, labeled.elevated())
    cls_cfg = TrainConfig(epochs=20, seed=0)
    _, cls_hist = train_supervised_joint(train, valid, cls_cfg)
    reg_cfg = cls_cfg.replace(miner=MinerSpec("continuous_label"), objective=ObjectiveSpec(task_loss="rmse"),
                              head=HeadConfig(task="regression"))
    _, reg_hist = train_supervised_joint(train, valid, reg_cfg)
    floor = cohort.label_noise_std
    elapsed = time.perf_counter() - t0
    note(request, f"{len(labeled)} windows, oracle AUC {oracle_auc:.3f}, val AUC {cls_hist.best_value:.3f}, "
                  f"val RMSE {reg_hist.best_value:.3f} (limit {1.5 * floor:.2f}), {elapsed:.0f}s")
    assert oracle_auc >= 0.95
    assert cls_hist.best_value >= 0.90
    assert reg_hist.best_value < 1.5 * floor
    assert elapsed < 600.0


@pytest.mark.slow
@pytest.mark.acceptance(9, "DTW pretraining helps the 10%-label regime")
def test_pretraining_utility(request):
    gains, decreased, pre_aucs, rand_aucs = [], 0, [], []
    for seed in range(5):
        cohort = SyntheticCohortConfig(n_patients=300, d=3, sample_rate_hz=50, seed=seed)
        labeled, unlabeled = generate_synthetic_cohort(cohort)
        train, valid, _ = split_by_patient(labeled, SplitSpec(seed=seed))
        few = subsample_patients(train, 0.1, seed)
        enc = EncoderConfig(embedding_dim=32, n_residual_blocks=2, channels_per_block=(16, 32), stem_stride=2,
                            seed=seed)
        pre_cfg = TrainConfig(encoder=enc, epochs=10, batch_size=32, seed=seed, record_wall_time=False,
                              distance_downsample=2, miner=MinerSpec("distance_ranked", DistanceMeasure("dtw")),
                              objective=ObjectiveSpec(task_loss="none"))
        pre, pre_hist = pretrain_selfsup(unlabeled, pre_cfg)
        losses = pre_hist.column("loss_metric")
        decreased += losses[-1] < losses[0]
        ft_cfg = TrainConfig(encoder=enc, epochs=15, batch_size=16, seed=seed, record_wall_time=False)
        _, with_pre = finetune(pre, few, valid, ft_cfg)
        _, from_scratch = finetune(None, few, valid, ft_cfg)
        pre_aucs.append(with_pre.best_value)
        rand_aucs.append(from_scratch.best_value)
        gains.append(with_pre.best_value - from_scratch.best_value)
    note(request, f"median AUC pretrained {np.median(pre_aucs):.3f} vs random {np.median(rand_aucs):.3f}, "
                  f"median paired gain {np.median(gains):+.3f}, loss decreased in {decreased}/5 seeds")
    assert np.median(gains) >= 0.0
    assert decreased >= 4


SMALL = {
    "cohort": {"n_patients": 40, "d": 3, "sample_rate_hz": 25, "seed": 9},
    "encoder": {"embedding_dim": 8, "n_residual_blocks": 2, "channels_per_block": [4, 8],
                "kernel_size": 3, "stem_stride": 2},
    "head": {"hidden_dim": 8},
    "train": {"epochs": 2, "batch_size": 16, "record_wall_time": False, "distance_downsample": 5},
    "miner": {"measure": {"kind": "dtw", "band_radius": 5}},
    "evaluate": {"n_replicates": 100},
    "sweep": {"grid": [0.1, 1.0]},
}

PIPELINE = [
    ["generate", "--out", "data"],
    ["pretrain", "--data", "data", "--out", "pre"],
    ["train", "--data", "data", "--out", "train"],
    ["finetune", "--data", "data", "--out", "ft", "--pretrained", "pre/checkpoint.bin"],
    ["finetune", "--data", "data", "--out", "ft0", "--no-pretrain"],
    ["evaluate", "--data", "data", "--checkpoint", "train/checkpoint.bin", "--out", "ev", "--subgroups"],
    ["evaluate", "--data", "data", "--checkpoint", "ft/checkpoint.bin", "--out", "evft", "--subgroups"],
    ["sweep", "--data", "data", "--out", "sweep"],
]


@pytest.mark.acceptance(10, "CLI reruns are byte-identical")
def test_cli_reproducibility(request, tmp_path, monkeypatch):
    digests = []
    for run in ("first", "second"):
        cwd = tmp_path / run
        cwd.mkdir()
        monkeypatch.chdir(cwd)
        (cwd / "config.json").write_text(json.dumps(SMALL))
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            for argv in PIPELINE:
                assert main([argv[0], "--config", "config.json", *argv[1:]]) == 0, argv
        digests.append({p.name: directory_digest(p) for p in sorted(cwd.iterdir()) if p.is_dir()})
    differing = sorted(k for k in digests[0] if digests[0][k] != digests[1].get(k))
    note(request, f"{len(PIPELINE)} commands, {len(digests[0])} output directories, differing: {differing or 'none'}")
    assert digests[0] == digests[1]


@pytest.mark.acceptance(11, "fairness audit replays from literal subsets")
def test_fairness_audit(request, tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    cfg = dict(SMALL, cohort={"n_patients": 120, "d": 3, "sample_rate_hz": 25, "seed": 4,
                              "group_confound_strength": 1.0})
    cfg["train"] = dict(SMALL["train"], epochs=3)
    (tmp_path / "config.json").write_text(json.dumps(cfg))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        assert main(["generate", "--config", "config.json", "--out", "data"]) == 0
        assert main(["train", "--config", "config.json", "--data", "data", "--out", "train"]) == 0
        assert main(["evaluate", "--config", "config.json", "--data", "data", "--checkpoint",
                     "train/checkpoint.bin", "--out", "ev", "--subgroups"]) == 0
    report = json.loads((tmp_path / "ev" / "report.json").read_text())
    state = load_checkpoint(tmp_path / "train" / "checkpoint.bin")
    test = import_dataset(tmp_path / "data" / "test")
    preds, emb, y = predict(state, test), embed(state, test), test.elevated()
    genders = test.genders()
    m_auc = next(m for m in report["metrics"] if m["metric"] == "auc")
    male, female = genders == "male", genders == "female"
    gender = auc(preds[male], y[male]) - auc(preds[female], y[female])
    bins = {label: auc(preds[mk], y[mk]) for label, mk in age_bin_masks(test.ages()).items()
            if label in m_auc["subgroups"]}
    age = average_pairwise_gap(list(bins.values()))
    knn = {k: knn_group_brute(emb, female.astype(int).tolist(), k, 1) for k in (2, 3, 5)}
    note(request, f"gender gap {m_auc['gaps']['gender_gap']:+.4f}, age gap over {len(bins)} bins "
                  f"{m_auc['gaps']['age_gap']:.4f}, kNN same-group {[round(v, 3) for v in knn.values()]}")
    assert abs(m_auc["gaps"]["gender_gap"] - gender) <= 1e-9
    assert abs(m_auc["gaps"]["age_gap"] - age) <= 1e-9
    for label, value in bins.items():
        assert abs(m_auc["subgroups"][label][0] - value) <= 1e-9
    for k, value in knn.items():
        assert report["knn_same_group"][str(k)] == value


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-v"]))
