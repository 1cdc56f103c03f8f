"""Evaluation harness: CI math, episodic evaluation determinism across
thread counts, gap measurement, ablation plumbing, report emission."""

import numpy as np
import pytest

from prototransfer.data import make_synthetic_dataset
from prototransfer.augment import pipeline_from_preset
from prototransfer.errors import ContractError
from prototransfer.evaluation import (
    ADAPTOR_NAMES,
    AblationPoint,
    ablation_sweep,
    build_id,
    confidence_interval,
    evaluate,
    format_markdown,
    generalization_gap,
    make_adaptor,
    point_from_config,
    replay_episode,
    umtra_point,
    write_episode_csv,
    write_reports_csv,
)
from prototransfer.network import init_conv4


@pytest.fixture(scope="module")
def small_world():
    ds = make_synthetic_dataset(6, 10, 16, noise_std=0.4, seed=0)
    net = init_conv4(1, 16, seed=0)
    return ds, net


# ---------------------------------------------------------------------------
# confidence intervals
# ---------------------------------------------------------------------------


def test_ci_alternating_oracle():
    """300 zeros and 300 ones: half-width = 1.96 * sqrt(150/599) / sqrt(600)."""
    accs = [float(i % 2) for i in range(600)]
    mean, half = confidence_interval(accs)
    assert mean == pytest.approx(0.5)
    expected = 1.96 * np.std(accs, ddof=1) / np.sqrt(600)
    assert half == pytest.approx(expected, abs=1e-12)
    assert half == pytest.approx(0.04004, abs=1e-4)
    assert half == pytest.approx(0.040042, abs=1e-5)


def test_ci_edge_cases():
    with pytest.raises(ContractError):
        confidence_interval([])
    assert confidence_interval([0.73]) == (0.73, 0.0)
    mean, half = confidence_interval([0.5] * 10)
    assert (mean, half) == (0.5, 0.0)


def test_ci_matches_hand_formula():
    rng = np.random.default_rng(0)
    accs = rng.uniform(0, 1, 37)
    mean, half = confidence_interval(accs)
    assert mean == pytest.approx(accs.mean())
    assert half == pytest.approx(1.96 * accs.std(ddof=1) / np.sqrt(37))


# ---------------------------------------------------------------------------
# evaluate()
# ---------------------------------------------------------------------------


def test_oracle_adaptor_is_perfect(small_world):
    ds, net = small_world
    rep = evaluate("oracle", ds, 5, 1, n_episodes=20, q_queries=5, seed=0, network=net)
    assert rep.mean == 1.0
    assert rep.ci_halfwidth == 0.0
    assert rep.n_episodes == 20
    assert rep.method == "oracle"


def test_random_adaptor_near_chance(small_world):
    ds, _ = small_world
    rep = evaluate("random", ds, 5, 1, n_episodes=200, q_queries=8, seed=1)
    assert rep.mean == pytest.approx(0.2, abs=0.03)


def test_single_episode_has_zero_halfwidth(small_world):
    ds, net = small_world
    rep = evaluate("proto", ds, 5, 1, n_episodes=1, q_queries=5, seed=0, network=net)
    assert rep.ci_halfwidth == 0.0


def test_thread_count_does_not_change_results(small_world):
    ds, net = small_world
    kw = dict(n_episodes=40, q_queries=5, seed=3, network=net)
    r1 = evaluate("proto", ds, 5, 1, threads=1, **kw)
    r4 = evaluate("proto", ds, 5, 1, threads=4, **kw)
    assert np.array_equal(r1.accuracies, r4.accuracies)
    assert r1.mean == r4.mean and r1.ci_halfwidth == r4.ci_halfwidth
    # prototune runs fine-tuning inside each worker; still invariant
    f1 = evaluate("prototune", ds, 3, 2, n_episodes=8, q_queries=4, seed=5, network=net, threads=1)
    f4 = evaluate("prototune", ds, 3, 2, n_episodes=8, q_queries=4, seed=5, network=net, threads=4)
    assert np.array_equal(f1.accuracies, f4.accuracies)


def test_report_recompute_is_consistent(small_world):
    ds, net = small_world
    rep = evaluate("proto", ds, 4, 2, n_episodes=25, q_queries=5, seed=0, network=net)
    mean, half = rep.recompute()
    assert abs(mean - rep.mean) <= 1e-9
    assert abs(half - rep.ci_halfwidth) <= 1e-9
    assert f"{rep.mean * 100:.2f}%" in rep.summary()


def test_replay_episode_reproduces(small_world):
    ds, _ = small_world
    a = replay_episode(ds, 5, 2, 4, seed=9, index=17)
    b = replay_episode(ds, 5, 2, 4, seed=9, index=17)
    assert np.array_equal(a.support_ids, b.support_ids)
    assert np.array_equal(a.query_ids, b.query_ids)
    assert np.array_equal(a.class_ids, b.class_ids)
    c = replay_episode(ds, 5, 2, 4, seed=9, index=18)
    assert not np.array_equal(a.support_ids, c.support_ids)


def test_unknown_adaptor_lists_valid_names():
    with pytest.raises(ContractError, match="prototune"):
        make_adaptor("protofoo")
    assert ADAPTOR_NAMES == ("proto", "prototune", "linear", "oracle", "random")


def test_episode_failure_names_replay_seed(small_world):
    ds, net = small_world

    def flaky(network, episode, seed):
        if episode.support_ids[0] >= 0:  # always
            raise ValueError("boom")

    with pytest.raises(ContractError, match=r"replay with seed=4, index=0"):
        evaluate(flaky, ds, 5, 1, n_episodes=3, q_queries=2, seed=4, network=net)


def test_evaluate_needs_episodes(small_world):
    ds, net = small_world
    with pytest.raises(ContractError, match="episode"):
        evaluate("proto", ds, 5, 1, n_episodes=0, network=net)


# ---------------------------------------------------------------------------
# generalization gap
# ---------------------------------------------------------------------------


def test_gap_on_identical_splits_is_zero(small_world):
    ds, net = small_world
    tr, te, gap = generalization_gap(net, ds, ds, 4, 2, n_episodes=15, q_queries=4, seed=2)
    assert gap == 0.0
    assert np.array_equal(tr.accuracies, te.accuracies)


def test_gap_sign_convention(small_world):
    ds, net = small_world
    other = make_synthetic_dataset(6, 10, 16, noise_std=0.4, seed=1, class_offset=50)
    tr, te, gap = generalization_gap(net, ds, other, 4, 2, n_episodes=10, q_queries=4, seed=0)
    assert gap == pytest.approx(tr.mean - te.mean)


# ---------------------------------------------------------------------------
# ablation machinery
# ---------------------------------------------------------------------------


def test_umtra_point_matches_ways():
    p = umtra_point(5)
    assert (p.batch_size, p.n_queries, p.finetune) == (5, 1, False)
    assert p.label() == "N=5,Q=1"
    assert AblationPoint(50, 3, True).label() == "N=50,Q=3,ft"


def test_ablation_sweep_rows_round_trip_and_pair_seeds(small_world):
    ds, _ = small_world
    pipe = pipeline_from_preset("synthetic", 1, 16)
    points = [umtra_point(3), AblationPoint(6, 2, False)]
    reports = ablation_sweep(
        points, ds, ds, pipe, seed=1, iterations=2, n_ways=3, k_shots=2,
        n_episodes=4, q_queries=3,
    )
    assert len(reports) == 2
    for point, rep in zip(points, reports):
        assert point_from_config(rep.config) == point
        assert rep.config["iterations"] == 2 and rep.config["seed"] == 1
    # paired comparison: both rows evaluate the same episode seeds
    assert reports[0].episode_seeds == reports[1].episode_seeds


def test_ablation_sweep_rejects_empty_grid(small_world):
    ds, _ = small_world
    pipe = pipeline_from_preset("synthetic", 1, 16)
    with pytest.raises(ContractError, match="empty"):
        ablation_sweep([], ds, ds, pipe)


# ---------------------------------------------------------------------------
# report emission
# ---------------------------------------------------------------------------


def test_build_id_depends_only_on_config():
    a = build_id({"x": 1})
    assert a == build_id({"x": 1})
    assert a != build_id({"x": 2})
    assert len(a) == 12 and all(c in "0123456789abcdef" for c in a)


def test_reports_csv_layout(tmp_path, small_world):
    ds, net = small_world
    rep = evaluate("proto", ds, 3, 1, n_episodes=5, q_queries=3, seed=0, network=net)
    rep.config = {"batch_size": 8, "n_queries": 2, "finetune": False, "iterations": 2, "seed": 0}
    path = tmp_path / "reports.csv"
    write_reports_csv(path, [rep], header={"note": "unit"})
    lines = path.read_text().splitlines()
    comments = [l for l in lines if l.startswith("#")]
    assert any(l.startswith("# build_id:") for l in comments)
    assert any(l.startswith("# wall_seconds:") for l in comments)
    assert any(l == "# note: unit" for l in comments)
    body = [l for l in lines if not l.startswith("#")]
    assert body[0] == "method,dataset,split,ways,shots,queries,episodes,mean,ci95,config"
    assert "wall" not in body[0]
    import csv
    import io
    import json

    row = next(csv.reader(io.StringIO(body[1])))
    assert row[0] == "proto"
    assert float(row[7]) == pytest.approx(rep.mean, abs=1e-6)
    # config round-trips through the quoted JSON cell
    assert point_from_config(json.loads(row[9])) == AblationPoint(8, 2, False)


def test_episode_csv_has_replay_rows(tmp_path, small_world):
    ds, net = small_world
    rep = evaluate("proto", ds, 3, 1, n_episodes=5, q_queries=3, seed=42, network=net)
    path = tmp_path / "episodes.csv"
    write_episode_csv(path, rep)
    lines = path.read_text().splitlines()
    assert lines[1] == "episode,base_seed,accuracy"
    assert len(lines) == 2 + 5
    idx, base, acc = lines[2].split(",")
    assert (int(idx), int(base)) == (0, 42)
    assert 0.0 <= float(acc) <= 1.0


def test_markdown_is_aligned(small_world):
    ds, net = small_world
    reps = [
        evaluate("proto", ds, 3, 1, n_episodes=3, q_queries=3, seed=0, network=net),
        evaluate("oracle", ds, 3, 1, n_episodes=3, q_queries=3, seed=0, network=net),
    ]
    table = format_markdown(reps)
    lines = table.splitlines()
    assert len({len(l) for l in lines}) == 1  # every row same width
    assert lines[0].startswith("| method")
    assert "oracle" in lines[3]
