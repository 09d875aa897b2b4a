import math
import statistics
import threading

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import exp_hamming_oracle, gp_oracle
from spikeskip.bosearch import (
    AcquisitionSpec,
    GpError,
    GpHyper,
    HistoryError,
    ObjectiveResult,
    SearchParams,
    TrialRecord,
    acquisition_score,
    best_record,
    best_so_far,
    bo_loop,
    encode_many,
    encode_point,
    evaluate_batch,
    gp_fit,
    gp_predict,
    kernel,
    kernel_matrix,
    parse_record,
    propose_batch,
    random_search,
    read_history,
    trials_to_value,
    write_history,
)
from spikeskip.topology import BlockAdjacency, SearchSpace, hamming_distance, serialize_assignment


def block(*codes):
    return (BlockAdjacency(3 if len(codes) == 3 else 4, codes),)


def hamming_objective(target, scale):
    def f(assignment, trial):
        return hamming_distance(assignment, target) / scale
    return f


SPACE3 = SearchSpace.full((3,))
ALL3 = list(SPACE3.enumerate())


class TestEncoding:
    def test_chain(self):
        x = encode_point(block(0, 0, 0))
        assert x.tolist() == [1, 0, 0] * 3

    def test_injective_and_distance_identity(self):
        X = encode_many(ALL3)
        assert len({tuple(row) for row in X}) == 27
        for i, a in enumerate(ALL3):
            for j, b in enumerate(ALL3):
                assert float(((X[i] - X[j]) ** 2).sum()) == 2 * hamming_distance(a, b)


class TestKernel:
    def test_examples(self):
        x, y = encode_point(block(0, 0, 0)), encode_point(block(1, 0, 0))
        assert kernel(x, x) == 1.0
        assert kernel(x, y, GpHyper(gamma=0.0)) == 1.0
        assert kernel(x, y, GpHyper(signal_var=1.0, gamma=math.log(2))) == pytest.approx(0.5, abs=1e-15)
        with pytest.raises(ValueError):
            kernel(x, x[:6])

    def test_matches_oracle(self):
        hyper = GpHyper(signal_var=1.7, gamma=0.35)
        K = kernel_matrix(encode_many(ALL3), encode_many(ALL3), hyper)
        for i, a in enumerate(ALL3):
            for j, b in enumerate(ALL3):
                assert K[i, j] == pytest.approx(exp_hamming_oracle(a, b, hyper), rel=1e-14)

    @settings(max_examples=30)
    @given(st.lists(st.integers(0, 728), min_size=1, max_size=20), st.floats(0.0, 3.0))
    def test_psd(self, idx, gamma):
        space = SearchSpace.full((4,))
        X = encode_many([space.from_index(i) for i in idx])
        K = kernel_matrix(X, X, GpHyper(gamma=gamma))
        assert np.array_equal(K, K.T)
        assert np.linalg.eigvalsh(K).min() >= -1e-8


class TestGp:
    def test_prior(self):
        model = gp_fit([], [])
        mean, var = gp_predict(model, encode_point(block(1, 2, 0)))
        assert (mean, var) == (0.0, 1.0)

    def test_single_observation_interpolates(self):
        x0 = encode_point(block(1, 0, 2))
        model = gp_fit([x0], [0.37], GpHyper(noise_var=1e-12))
        mean, var = gp_predict(model, x0)
        assert mean == pytest.approx(0.37, abs=1e-10)
        assert var == pytest.approx(0.0, abs=1e-10)

    def test_two_points_against_oracle(self):
        pts = [block(0, 0, 0), block(1, 2, 0)]
        vals = [0.2, 0.05]
        hyper = GpHyper()
        model = gp_fit(encode_many(pts), vals, hyper)
        means, variances = gp_oracle(pts, vals, ALL3, hyper)
        got_mean, got_var = model.predict(encode_many(ALL3))
        np.testing.assert_allclose(got_mean, means, rtol=0, atol=1e-10)
        np.testing.assert_allclose(got_var, np.maximum(variances, 0), rtol=0, atol=1e-10)

    def test_two_points_closed_form(self):
        # standardized targets are -1 and +1; 2x2 system solved by hand
        hyper = GpHyper()
        a, b = block(0, 0, 0), block(2, 2, 0)
        k_ab = math.exp(-hyper.gamma * 2)
        s = 1 + hyper.noise_var
        det = s * s - k_ab * k_ab
        alpha = np.array([(s * -1 - k_ab * 1) / det, (s * 1 - k_ab * -1) / det])
        model = gp_fit(encode_many([a, b]), [0.0, 2.0], hyper)
        mean, _ = gp_predict(model, encode_point(a))
        assert mean == pytest.approx(1.0 + 1.0 * (alpha[0] + k_ab * alpha[1]), abs=1e-12)

    def test_random_sets_against_oracle(self):
        rng = np.random.default_rng(0)
        for trial in range(10):
            idx = rng.choice(27, size=rng.integers(1, 11), replace=False)
            pts = [ALL3[i] for i in idx]
            vals = rng.normal(size=len(pts))
            hyper = GpHyper(gamma=float(rng.uniform(0.1, 1.0)))
            means, variances = gp_oracle(pts, vals, ALL3, hyper)
            got_mean, got_var = gp_fit(encode_many(pts), vals, hyper).predict(encode_many(ALL3))
            np.testing.assert_allclose(got_mean, means, atol=1e-8)
            np.testing.assert_allclose(got_var, np.maximum(variances, 0), atol=1e-8)

    def test_observed_variance_small(self):
        rng = np.random.default_rng(1)
        idx = rng.choice(27, size=8, replace=False)
        X = encode_many([ALL3[i] for i in idx])
        y = rng.normal(size=8)
        _, var = gp_fit(X, y).predict(X, standardized=True)
        assert np.all(var <= GpHyper().noise_var + 1e-8)

    def test_interpolation_with_tiny_noise(self):
        rng = np.random.default_rng(2)
        idx = rng.choice(27, size=6, replace=False)
        X = encode_many([ALL3[i] for i in idx])
        y = rng.normal(size=6)
        mean, _ = gp_fit(X, y, GpHyper(noise_var=1e-10)).predict(X)
        np.testing.assert_allclose(mean, y, atol=1e-8)

    def test_prior_reversion_far_away(self):
        hyper = GpHyper(gamma=30.0)
        model = gp_fit(encode_many([block(0, 0, 0)]), [0.9], hyper)
        mean, var = gp_predict(model, encode_point(block(1, 1, 1)), standardized=True)
        assert abs(mean) < 1e-30 and var == pytest.approx(1.0)

    def test_duplicates_without_noise(self):
        x = encode_point(block(1, 1, 1))
        with pytest.raises(GpError):
            gp_fit([x, x], [0.1, 0.2], GpHyper(noise_var=0.0))

    def test_non_finite(self):
        with pytest.raises(GpError):
            gp_fit([encode_point(block(0, 0, 0))], [math.inf])


class TestAcquisition:
    def test_examples(self):
        assert acquisition_score(0.5, 0.1, AcquisitionSpec(kappa=2.0)) == pytest.approx(0.3)
        assert acquisition_score(0.5, 0.4, AcquisitionSpec(kappa=0.0)) == 0.5
        assert acquisition_score(0.5, 0.0, AcquisitionSpec(kappa=7.0)) == 0.5

    def test_decay(self):
        spec = AcquisitionSpec(kappa=2.0, decay=0.5)
        assert acquisition_score(0.0, 1.0, spec, iteration=2) == -0.5

    @given(st.floats(-10, 10), st.floats(0, 5), st.floats(0.01, 5), st.floats(0.01, 5))
    def test_monotone_in_std(self, mean, std, dstd, kappa):
        spec = AcquisitionSpec(kappa=kappa)
        assert acquisition_score(mean, std + dstd, spec) < acquisition_score(mean, std, spec)

    def test_invalid(self):
        with pytest.raises(ValueError):
            AcquisitionSpec(kappa=-1.0)
        with pytest.raises(ValueError):
            AcquisitionSpec(kind="ei")


class TestProposals:
    def observed(self, n, seed):
        rng = np.random.default_rng(seed)
        idx = rng.choice(27, size=n, replace=False)
        pts = [ALL3[i] for i in idx]
        return pts, encode_many(pts), rng.random(n)

    def test_k1_is_argmin(self):
        pts, X, y = self.observed(5, 0)
        model = gp_fit(X, y)
        mean, var = model.predict(encode_many(ALL3))
        score = acquisition_score(mean, np.sqrt(var))
        used = {serialize_assignment(p) for p in pts}
        order = [i for i in np.argsort(score, kind="stable") if serialize_assignment(ALL3[i]) not in used]
        assert propose_batch(X, y, SPACE3, pts, 1) == [ALL3[order[0]]]

    def test_forced_last(self):
        pts = ALL3[:13] + ALL3[14:]
        y = np.linspace(0, 1, 26)
        assert propose_batch(encode_many(pts), y, SPACE3, pts, 1) == [ALL3[13]]

    def test_exhausted(self):
        from spikeskip.topology import SpaceExhausted
        with pytest.raises(SpaceExhausted):
            propose_batch(encode_many(ALL3[:26]), np.zeros(26), SPACE3, ALL3[:26], 2)

    def test_ties_to_canonical_order(self):
        # the prior is flat, so the first pick is the canonically smallest candidate
        assert propose_batch([], [], SPACE3, [], 1) == [ALL3[0]]
        assert propose_batch([], [], SPACE3, ALL3[:2], 1) == [ALL3[2]]

    def test_distinct_batches(self):
        for seed in range(100):
            pts, X, y = self.observed(4, seed)
            batch = propose_batch(X, y, SPACE3, pts, 4, seed=seed)
            names = {serialize_assignment(a) for a in batch}
            assert len(names) == 4
            assert not names & {serialize_assignment(p) for p in pts}

    def test_large_space_uses_pool(self):
        space = SearchSpace.full((5, 5))  # 3^20 assignments
        batch = propose_batch([], [], space, [], 3, seed=4, pool_size=64)
        assert len({serialize_assignment(a) for a in batch}) == 3
        assert batch == propose_batch([], [], space, [], 3, seed=4, pool_size=64)


class TestLoops:
    def test_exhaustive_d2(self):
        space = SearchSpace.full((2,))
        values = {"2:0": 0.3, "2:1": 0.1, "2:2": 0.2}
        best, hist = bo_loop(space, lambda a, t: values[serialize_assignment(a)], SearchParams(budget=3, k=1))
        assert best.assignment == "2:1" and len(hist) == 3

    def test_budget_clamped_to_space(self):
        space = SearchSpace.full((2,))
        _, hist = bo_loop(space, lambda a, t: 0.0, SearchParams(budget=10, k=2))
        assert len(hist) == 3

    def test_history_invariants(self):
        target = block(1, 2, 0, 1, 0, 2)
        space = SearchSpace.full((4,))
        params = SearchParams(budget=30, k=4, seed=3)
        best, hist = bo_loop(space, hamming_objective(target, 6), params)
        assert len(hist) == 30
        assert [r.trial for r in hist] == list(range(30))
        assert len({r.assignment for r in hist}) == 30
        curve = best_so_far(hist)
        assert all(b <= a for a, b in zip(curve, curve[1:]))
        assert best.f == min(r.f for r in hist)
        assert [r.iteration for r in hist[:8]] == [0] * 8

    def test_deterministic(self):
        target = block(2, 2, 1)
        runs = [bo_loop(SPACE3, hamming_objective(target, 3), SearchParams(budget=12, k=3, seed=9))[1]
                for _ in range(2)]
        strip = lambda h: [(r.trial, r.iteration, r.assignment, r.f) for r in h]
        assert strip(runs[0]) == strip(runs[1])

    def test_failures_recorded(self):
        def objective(a, trial):
            if a[0].codes[0] == 2:
                raise RuntimeError("boom")
            return sum(a[0].codes) / 6
        best, hist = bo_loop(SPACE3, objective, SearchParams(budget=20, k=2, seed=1))
        failed = [r for r in hist if r.status == "failed"]
        assert failed and all(r.f == math.inf for r in failed)
        assert len(hist) == 20 and best.ok

    def test_finds_target_d4(self):
        space = SearchSpace.full((4,))
        found = 0
        for seed in range(20):
            target = space.from_index(int(np.random.default_rng(100 + seed).integers(space.size)))
            _, hist = bo_loop(space, hamming_objective(target, 6), SearchParams(budget=60, seed=seed))
            found += trials_to_value(hist, 0.0) is not None
        assert found >= 16

    def test_random_search(self):
        target = block(0, 2, 1)
        objective = hamming_objective(target, 3)
        best, hist = random_search(SPACE3, objective, 27, seed=0)
        assert best.assignment == serialize_assignment(target) and best.f == 0
        a = [r.assignment for r in random_search(SPACE3, objective, 10, seed=4)[1]]
        assert a == [r.assignment for r in random_search(SPACE3, objective, 10, seed=4)[1]]
        curve = best_so_far(hist)
        assert all(y <= x for x, y in zip(curve, curve[1:]))

    def test_bo_beats_random_median(self):
        bo_steps, rs_steps = [], []
        for seed in range(20):
            target = SPACE3.from_index(int(np.random.default_rng(1000 + seed).integers(27)))
            objective = hamming_objective(target, 3)
            _, hb = bo_loop(SPACE3, objective, SearchParams(budget=27, k=4, seed=seed))
            _, hr = random_search(SPACE3, objective, 27, seed=seed)
            bo_steps.append(trials_to_value(hb, 0.0))
            rs_steps.append(trials_to_value(hr, 0.0))
        assert statistics.median(rs_steps) > statistics.median(bo_steps)

    def test_parallel_matches_serial(self):
        lock = threading.Lock()
        calls = []

        def objective(a, trial):
            with lock:
                calls.append(trial)
            return ObjectiveResult(sum(a[0].codes) / 6, accuracy=0.5, firing_rate=0.1, macs=7)
        batch = [(i, ALL3[i]) for i in range(8)]
        serial = evaluate_batch(objective, batch, 0, workers=1)
        parallel = evaluate_batch(objective, batch, 0, workers=4)
        key = lambda rs: [(r.trial, r.assignment, r.f, r.macs) for r in rs]
        assert key(serial) == key(parallel)
        assert sorted(calls) == sorted(list(range(8)) * 2)

    def test_best_record_tie(self):
        hist = [TrialRecord(0, 0, "2:0", 0.5), TrialRecord(1, 0, "2:1", 0.2), TrialRecord(2, 0, "2:2", 0.2)]
        assert best_record(hist).trial == 1
        assert best_record([]) is None

    def test_params_validation(self):
        with pytest.raises(ValueError):
            SearchParams(budget=2, k=4)
        with pytest.raises(ValueError):
            SearchParams(n=-1)
        assert SearchParams(k=3).n_initial == 6


class TestHistoryFile:
    def test_roundtrip(self, tmp_path):
        recs = [
            TrialRecord(0, 0, "3:120", 0.1 + 0.2, 0.75, 0.125, 4608, 1.5, "ok"),
            TrialRecord(1, 1, "3:000/2:1", math.inf, math.nan, math.nan, 0, None, "failed"),
        ]
        path = tmp_path / "history.txt"
        write_history(path, recs)
        back = read_history(path)
        assert back[0] == TrialRecord(0, 0, "3:120", 0.1 + 0.2, 0.75, 0.125, 4608, 1.5, "ok")
        assert back[1].f == math.inf and math.isnan(back[1].accuracy) and back[1].status == "failed"

    def test_without_seconds(self, tmp_path):
        path = tmp_path / "h.txt"
        write_history(path, [TrialRecord(0, 0, "2:1", 0.25, seconds=3.2)], include_seconds=False)
        assert "seconds" not in path.read_text()
        assert read_history(path)[0].seconds is None

    def test_malformed(self, tmp_path):
        path = tmp_path / "h.txt"
        path.write_text("trial=0 iteration=0 assignment=2:1 f=0.1\ntrial=x iteration=0 assignment=2:1 f=0.1\n")
        with pytest.raises(HistoryError, match="line 2"):
            read_history(path)
        with pytest.raises(HistoryError, match="line 5"):
            parse_record("trial=0 bogus", 5)
        with pytest.raises(HistoryError):
            parse_record("trial=0 iteration=0 assignment=2:7 f=0.1", 1)
