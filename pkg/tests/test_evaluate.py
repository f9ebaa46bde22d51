import copy
import dataclasses
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mbgmn import autodiff as ad
from mbgmn.data import build_graphs, generate_synthetic, leave_one_out_split, sample_batch
from mbgmn.evaluate import (
    DEFAULT_CUTOFFS,
    EvalReport,
    constant_scorer,
    dependency_report,
    evaluate,
    model_scorer,
    popularity_baseline,
    rank_metrics,
    rank_positions,
)
from mbgmn.trainer import TrainConfig, batch_seed, fit, loss, prepare


def big_split(seed=0, rho=0.5):
    t = generate_synthetic(1000, 300, 3, 0.02, rho, seed=seed)
    return leave_one_out_split(t, seed)


@pytest.fixture(scope="module")
def split():
    return big_split()


def check_identities(report):
    cut = report.cutoffs
    assert report.hr[1] == report.ndcg[1]
    for a, b in zip(cut, cut[1:]):
        assert report.hr[a] <= report.hr[b] and report.ndcg[a] <= report.ndcg[b]
    for c in cut:
        assert 0.0 <= report.ndcg[c] <= report.hr[c] <= 1.0


# ------------------------------------------------------------ rank metrics


def test_rank_metric_examples():
    assert rank_metrics(1, 10) == (1.0, 1.0)
    assert rank_metrics(3, 10) == (1.0, 0.5)
    assert rank_metrics(15, 10) == (0.0, 0.0)
    for bad in (0, 101):
        with pytest.raises(ValueError):
            rank_metrics(bad, 10)


@given(rank=st.integers(1, 100))
def test_rank_metrics_identities(rank):
    assert rank_metrics(rank, 1)[0] == rank_metrics(rank, 1)[1]
    prev = (0.0, 0.0)
    for n in range(1, 101):
        hr, ndcg = rank_metrics(rank, n)
        assert 0 <= ndcg <= hr <= 1 and hr >= prev[0] and ndcg >= prev[1]
        prev = (hr, ndcg)
    assert rank_metrics(rank, 100) == (1.0, 1.0 / math.log2(rank + 1))


def test_rank_positions_tie_break_by_item_id():
    cands = np.array([[5, 2, 9, 7], [5, 2, 9, 7]])
    scores = np.array([[1.0, 1.0, 1.0, 2.0], [3.0, 3.0, 0.0, 0.0]])
    assert rank_positions(scores, cands).tolist() == [3, 2]


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**31 - 1))
def test_ranks_are_a_total_order(seed):
    rng = np.random.default_rng(seed)
    cands = np.stack([rng.permutation(200)[:100] for _ in range(3)])
    scores = rng.integers(0, 4, size=(3, 100)).astype(float)
    for col in range(100):
        order = np.concatenate([[col], np.delete(np.arange(100), col)])
        if col == 0:
            firsts = rank_positions(scores, cands)
        ranks = rank_positions(scores[:, order], cands[:, order])
        for row in range(3):
            key = sorted(zip(-scores[row], cands[row]))
            assert ranks[row] == key.index((-scores[row, col], cands[row, col])) + 1
    assert np.all((firsts >= 1) & (firsts <= 100))


# -------------------------------------------------------------- evaluate


def test_constant_scorer_hits_ten_percent(split):
    report = evaluate(split, constant_scorer)
    assert report.n_evaluated >= 500
    assert abs(report.hr[10] - 0.10) <= 0.03, report.hr[10]
    check_identities(report)


def test_random_scorer_hits_ten_percent(split):
    rng = np.random.default_rng(1)
    report = evaluate(split, lambda users, cands: rng.random(cands.shape))
    assert abs(report.hr[10] - 0.10) <= 0.03, report.hr[10]
    check_identities(report)


def test_perfect_and_worst_scorers(split):
    best = evaluate(split, lambda users, cands: (np.arange(100) == 0) * 1.0 + np.zeros(cands.shape))
    assert all(best.hr[c] == 1.0 and best.ndcg[c] == 1.0 for c in best.cutoffs)
    worst = evaluate(split, lambda users, cands: -((np.arange(100) == 0) * 1.0 + np.zeros(cands.shape)))
    assert all(worst.hr[c] == 0.0 for c in worst.cutoffs)


def test_report_matches_rank_metric_average(split):
    rng = np.random.default_rng(2)
    scores = {}

    def scorer(users, cands):
        s = rng.random(cands.shape)
        for u, row in zip(users, s):
            scores[int(u)] = row
        return s

    report = evaluate(split, scorer, chunk=50)
    cands = split.candidates()
    for c in DEFAULT_CUTOFFS:
        hr = ndcg = 0.0
        for n, u in enumerate(split.test_users):
            s = scores[int(u)]
            rank = 1 + sum(1 for j in range(1, 100) if (s[j], -cands[n, j]) > (s[0], -cands[n, 0]))
            h, g = rank_metrics(rank, c)
            hr, ndcg = hr + h, ndcg + g
        assert abs(report.hr[c] - hr / len(split.test_users)) < 1e-12
        assert abs(report.ndcg[c] - ndcg / len(split.test_users)) < 1e-12


def test_buckets_partition_evaluated_users(split):
    report = evaluate(split, constant_scorer)
    assert [b["range"] for b in report.buckets] == ["1-4", "5-12", "13-32", "33+"]
    assert sum(b["n_users"] for b in report.buckets) == report.n_evaluated
    activity = split.train.events_per_user()[split.test_users]
    assert report.buckets[0]["n_users"] == int(np.sum(activity <= 4))


def test_custom_buckets_and_cutoffs(split):
    report = evaluate(split, constant_scorer, cutoffs=(20, 2), buckets=((1, 1000),))
    assert report.cutoffs == [2, 20] and report.buckets[0]["n_users"] == report.n_evaluated


def test_exclusions_are_reported():
    t = generate_synthetic(60, 120, 2, 0.05, 0.5, seed=3)
    s = leave_one_out_split(t, 3)
    report = evaluate(s, constant_scorer)
    assert report.n_excluded == len(s.excluded) > 0
    assert sum(report.exclusions.values()) == report.n_excluded
    assert set(report.exclusions) <= {"fewer than 2 target events", "too few never-interacted items"}


def test_report_json_round_trip_is_byte_identical(split):
    report = evaluate(split, constant_scorer)
    text = report.to_json()
    assert EvalReport.from_json(text).to_json() == text
    assert "HR@10" in report.to_text()


def test_thread_count_does_not_change_report(split, monkeypatch):
    rng_scores = np.random.default_rng(4).random((1000, 300))

    def scorer(users, cands):
        return rng_scores[users[:, None], cands]

    one = evaluate(split, scorer, chunk=32)
    monkeypatch.setenv("MBGMN_THREADS", "4")
    four = evaluate(split, scorer, chunk=32)
    assert one.to_json() == four.to_json()


def test_same_seed_same_report():
    a = evaluate(big_split(5), popularity_baseline(big_split(5)))
    b = evaluate(big_split(5), popularity_baseline(big_split(5)))
    assert a.to_json() == b.to_json()


# ------------------------------------------------------------ popularity


def test_popularity_prefers_frequent_items():
    t = generate_synthetic(300, 150, 2, 0.03, 0.5, seed=6)
    s = leave_one_out_split(t, 6)
    scorer = popularity_baseline(s)
    train = s.train
    counts = np.bincount(train.items[train.kinds == train.target], minlength=train.num_items)
    hi, lo = int(np.argmax(counts)), int(np.argmin(counts))
    out = scorer(np.array([0]), np.array([[lo, hi]]))
    assert out[0, 1] > out[0, 0]


def test_popularity_with_no_target_history_falls_back_to_id_order(split):
    empty = dataclasses.replace(split, train=split.train.select(split.train.kinds != split.train.target))
    scores = popularity_baseline(empty)(split.test_users[:3], split.candidates()[:3])
    assert np.all(scores == 0)
    ranks = rank_positions(scores, split.candidates()[:3])
    expected = [1 + int(np.sum(row[1:] < row[0])) for row in split.candidates()[:3]]
    assert ranks.tolist() == expected


def test_popularity_informative_without_cross_behavior_signal():
    t = generate_synthetic(500, 200, 3, 0.02, 0.0, seed=7)
    s = leave_one_out_split(t, 7)
    assert evaluate(s, popularity_baseline(s)).hr[10] > 0.10


# ------------------------------------------------------------ dependency


@pytest.fixture(scope="module")
def trained():
    t = generate_synthetic(40, 30, 3, 0.1, 0.8, seed=3)
    cfg = TrainConfig(seed=3, dim=8, low_rank_dim=2, track_users=(1, 2))
    data, wiring = prepare(t, cfg)
    s = leave_one_out_split(data, 3)
    g = build_graphs(s.train)
    return s, g, cfg, wiring


def replay_epoch(s, g, cfg, state):
    """Re-run one epoch term by term and average hinge per (source, target)."""
    k = s.train.num_behaviors
    cells = {}
    order = np.random.default_rng(np.random.SeedSequence([cfg.seed, state.epoch])).permutation(s.train.num_users)
    for b, start in enumerate(range(0, len(order), cfg.batch_size)):
        batch = sample_batch(s.train, order[start : start + cfg.batch_size], cfg.samples_per_user,
                             batch_seed(cfg.seed, state.epoch, b), range(k))
        if len(batch) == 0:
            continue
        res = loss(state.model, state.model.forward(g), batch, cfg.weight_decay)
        for src, tgt, h in zip(res.sources, res.targets, res.hinge):
            cells.setdefault((int(src), int(tgt)), []).append(float(h))
        ad.backward(res.total)
        state.optimizer.step(state.model.params, state.lr)
    state.epoch += 1
    state.lr *= cfg.lr_decay
    return [[float(np.mean(cells[(i, j)])) if (i, j) in cells else None for j in range(k)] for i in range(k + 1)]


def test_dependency_matches_replayed_losses(trained):
    s, g, cfg, wiring = trained
    state = fit(s, g, cfg, wiring, epochs=1)
    shadow = copy.deepcopy(state)
    fit(s, g, cfg, wiring, epochs=1, state=state)
    expected = replay_epoch(s, g, cfg, shadow)
    rep = dependency_report(state.logs, last=1)
    assert rep["epochs"] == [2]
    for row, erow in zip(rep["overall"], expected):
        for v, e in zip(row, erow):
            assert (v is None) == (e is None)
            if v is not None:
                assert abs(v - e) < 1e-10 and v >= 0


def test_dependency_window_weights_by_term_counts(trained):
    s, g, cfg, wiring = trained
    state = fit(s, g, cfg, wiring, epochs=3)
    rep = dependency_report(state.logs, last=3, users=[1, 2, 99])
    for i in range(4):
        for j in range(3):
            num = sum(e.attribution[i][j] * e.counts[i][j] for e in state.logs if e.counts[i][j])
            den = sum(e.counts[i][j] for e in state.logs)
            assert abs(rep["overall"][i][j] - num / den) < 1e-10
    assert set(rep["users"]) == {1, 2}


def test_mtask_dependency_has_one_cell(trained):
    s, g, cfg, _ = trained
    cfg = TrainConfig(seed=3, dim=8, low_rank_dim=2, ablate=("mTask",))
    _, wiring = prepare(s.train, cfg)
    state = fit(s, g, cfg, wiring, epochs=1)
    cells = [(i, j) for i, row in enumerate(dependency_report(state.logs)["overall"])
             for j, v in enumerate(row) if v is not None]
    assert cells == [(3, s.train.target)]


def test_dependency_needs_an_epoch():
    with pytest.raises(ValueError):
        dependency_report([])


def test_model_scorer_matches_predict(trained):
    s, g, cfg, wiring = trained
    state = fit(s, g, cfg, wiring, epochs=1)
    scorer = model_scorer(state.model, g, s.train.target)
    users = np.array([4, 9])
    cands = np.stack([np.random.default_rng(n).permutation(30)[:12] for n in range(2)])
    out = scorer(users, cands)
    emb = state.model.forward(g)
    for n in range(2):
        direct = state.model.predict(emb, int(users[n]), cands[n], s.train.target)
        np.testing.assert_allclose(out[n], direct, rtol=0, atol=1e-12)
