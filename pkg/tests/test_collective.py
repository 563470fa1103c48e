import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fp8sim.collective import (
    MAX_SCALE_SPREAD,
    AutoScaleController,
    WorkerSet,
    allreduce_autoscale,
    allreduce_full,
    allreduce_postscale,
    allreduce_prescale,
    allreduce_sharedscale,
    autoscale_update,
    comm_stats,
    fp8_bytes,
    fp32_bytes,
    shared_scale,
)
from fp8sim.experiments import BENCH_COLUMNS, allreduce_bench, gradient_ensemble, ordering_holds
from fp8sim.formats import E4M3, E5M2, FP16, FloatFormat, max_relative_error
from fp8sim.scaling import QuantStats, ScaledTensor, dequantize, quantize, quantize_jit


def workers(rng, n, size, sigma=1.0):
    return WorkerSet(list(rng.normal(0.0, sigma, size=(n, size))))


class TestWorkerSet:
    def test_shapes(self):
        ws = WorkerSet([np.zeros(3), np.ones(3)])
        assert ws.n_workers == 2 and ws.shape == (3,) and ws.size == 3
        np.testing.assert_array_equal(ws.oracle_mean(), np.full(3, 0.5))

    def test_rejects_mismatch_and_empty(self):
        with pytest.raises(ValueError):
            WorkerSet([np.zeros(3), np.zeros(4)])
        with pytest.raises(ValueError):
            WorkerSet([])


class TestPreAndPostScaling:
    def test_single_worker_is_plain_quantization(self):
        g = np.random.default_rng(0).normal(size=256)
        ws = WorkerSet([g])
        out, cs = allreduce_prescale(ws, E4M3)
        ref = quantize_jit(g, E4M3)
        np.testing.assert_array_equal(out.payload, ref.payload)
        assert out.scale == ref.scale
        assert cs.underflow_rate == ref.stats.underflow_rate
        assert cs.overflow_rate == ref.stats.overflow_rate
        post, cs_post = allreduce_postscale(ws, E4M3)
        np.testing.assert_array_equal(post.payload, out.payload)
        assert post.scale == out.scale and cs_post == cs

    def test_prescale_underflows_more_on_small_gradients(self):
        ws = workers(np.random.default_rng(1), 128, 1024, sigma=1e-4)
        _, pre = allreduce_prescale(ws, E4M3)
        _, post = allreduce_postscale(ws, E4M3)
        assert pre.underflow_rate > post.underflow_rate

    def test_postscale_overflows_more_near_range_top(self):
        ws = workers(np.random.default_rng(2), 128, 1024, sigma=1.0)
        _, pre = allreduce_prescale(ws, E4M3)
        _, post = allreduce_postscale(ws, E4M3)
        assert post.overflow_rate > pre.overflow_rate

    def test_identical_workers_recover_tensor(self):
        rng = np.random.default_rng(3)
        t = rng.uniform(0.1, 1.0, 512) * rng.choice([-1, 1], 512)
        out, cs = allreduce_prescale(WorkerSet([t] * 4), E4M3)
        rel = np.abs(dequantize(out) - t) / np.abs(t)
        assert rel.max() <= 4 * max_relative_error(E4M3, "normal")[1]
        assert cs.overflow_rate == 0

    def test_identical_workers_saturate_postscale(self):
        t = np.random.default_rng(3).uniform(0.1, 1.0, 512)
        out, cs = allreduce_postscale(WorkerSet([t] * 4), E4M3)
        assert cs.overflow_rate > 0
        # the largest element sums to 4 * 448 and is clipped to 448
        assert dequantize(out).max() == pytest.approx(t.max() / 4, rel=1e-2)

    def test_opposite_gradients_cancel_exactly(self):
        x = np.random.default_rng(4).normal(size=128)
        out, cs = allreduce_postscale(WorkerSet([x, -x]), E4M3)
        assert np.all(dequantize(out) == 0.0)
        assert cs.snr_db == math.inf  # exact cancellation leaves no noise

    def test_bytes(self):
        ws = workers(np.random.default_rng(5), 8, 4096)
        _, cs = allreduce_prescale(ws, E5M2)
        assert cs.bytes_transferred == fp8_bytes(8, 4096) == 8 * 4096 + 8
        assert allreduce_full(ws)[1].bytes_transferred == fp32_bytes(8, 4096) == 4 * 8 * 4096

    def test_full_precision_reference(self):
        ws = workers(np.random.default_rng(6), 3, 16)
        mean, cs = allreduce_full(ws)
        np.testing.assert_array_equal(mean, ws.oracle_mean())
        assert cs.snr_db == math.inf and cs.underflow_rate == cs.overflow_rate == 0

    def test_deterministic(self):
        ws = workers(np.random.default_rng(7), 16, 512)
        a, _ = allreduce_prescale(ws, E4M3)
        b, _ = allreduce_prescale(ws, E4M3)
        assert a.to_bytes() == b.to_bytes()

    def test_fold_order_is_ascending_worker_index(self):
        # values chosen so the first partial sum saturates in E4M3
        ws = WorkerSet([np.array([448.0]), np.array([448.0]), np.array([-448.0])])
        out, cs = allreduce_postscale(ws, E4M3)
        assert dequantize(out)[0] == 0.0  # (448 + 448 -> 448) - 448
        assert cs.overflow_rate > 0


class TestAutoScaleController:
    def test_overflow_halves(self):
        c = autoscale_update(AutoScaleController(mu=1.0), 1e-4)
        assert c.mu == 0.5 and c.consecutive_below == 0
        assert autoscale_update(c, 1e-4).mu == 0.25

    def test_assign_mode(self):
        c = AutoScaleController(mu=0.5, mode="assign")
        assert autoscale_update(c, 1e-3).mu == 0.5

    def test_threshold_is_strict(self):
        assert autoscale_update(AutoScaleController(), 1e-5).mu > 1.0

    def test_growth_trace_reaches_two(self):
        c = AutoScaleController(mu=1.0)
        factor = 2.0 ** (1 / 1000)
        expected = 1.0
        for _ in range(1000):
            c = autoscale_update(c, 0.0)
            expected = min(2.0, expected * factor)
            assert c.mu == expected
        assert abs(c.mu - 2.0) <= 2.0 * (factor - 1)
        assert c.consecutive_below == 1000

    def test_capped_at_two(self):
        c = AutoScaleController(mu=2.0)
        for _ in range(10):
            c = autoscale_update(c, 0.0)
            assert c.mu == 2.0

    def test_validation(self):
        with pytest.raises(ValueError):
            AutoScaleController(mu=3.0)
        with pytest.raises(ValueError):
            AutoScaleController(threshold=0.0)
        with pytest.raises(ValueError):
            AutoScaleController(mode="other")
        with pytest.raises(ValueError):
            autoscale_update(AutoScaleController(), 1.5)

    @settings(max_examples=200, deadline=None)
    @given(ratios=st.lists(st.floats(0.0, 1.0), max_size=200))
    def test_mu_stays_in_range(self, ratios):
        c = AutoScaleController()
        for r in ratios:
            c = autoscale_update(c, r)
            assert 0 < c.mu <= 2.0


class TestAutoScaling:
    def test_unit_mu_matches_postscale(self):
        ws = workers(np.random.default_rng(8), 8, 512)
        a, ca, _ = allreduce_autoscale(ws, E4M3, AutoScaleController(mu=1.0))
        p, cp = allreduce_postscale(ws, E4M3)
        assert a.to_bytes() == p.to_bytes() and ca == cp

    def test_overflowing_step_halves_mu(self):
        ws = workers(np.random.default_rng(9), 128, 256)
        _, cs, ctrl = allreduce_autoscale(ws, E4M3, AutoScaleController())
        assert cs.max_ratio > 1e-5 and ctrl.mu == 0.5

    def test_beats_prescale_underflow_after_long_run(self):
        rng = np.random.default_rng(10)
        ctrl = AutoScaleController()
        for _ in range(2000):
            ws = workers(rng, 128, 16, sigma=1e-4)
            _, auto, ctrl = allreduce_autoscale(ws, E4M3, ctrl)
        ws = workers(rng, 128, 1024, sigma=1e-4)
        _, auto, _ = allreduce_autoscale(ws, E4M3, ctrl)
        _, pre = allreduce_prescale(ws, E4M3)
        assert auto.underflow_rate < pre.underflow_rate

    def test_alternating_epochs(self):
        rng = np.random.default_rng(11)
        ctrl = AutoScaleController()
        for epoch, sigma in enumerate([1e-4, 10.0, 1e-4, 10.0]):
            for _ in range(15):
                ws = gradient_ensemble(rng, 64, 1024, "lognormal", sigma)
                _, _, ctrl = allreduce_autoscale(ws, E4M3, ctrl)
            ws = gradient_ensemble(rng, 64, 1024, "lognormal", sigma)
            _, auto, ctrl = allreduce_autoscale(ws, E4M3, ctrl)
            _, pre = allreduce_prescale(ws, E4M3)
            _, post = allreduce_postscale(ws, E4M3)
            assert auto.underflow_rate <= max(pre.underflow_rate, post.underflow_rate)
            assert auto.overflow_rate <= max(pre.overflow_rate, post.overflow_rate)
            assert ordering_holds(pre, post, auto), epoch

    def test_error_vanishes_with_mantissa_width(self):
        rng = np.random.default_rng(12)
        ws = gradient_ensemble(rng, 16, 512, "lognormal", 1e-3)
        oracle = ws.oracle_mean()
        errors = []
        for m in (2, 5, 10, 16, 23):
            fmt = FloatFormat(f"E8M{m}", 8, m, 127)
            out, _, _ = allreduce_autoscale(ws, fmt, AutoScaleController(mu=0.75))
            errors.append(np.linalg.norm(dequantize(out) - oracle) / np.linalg.norm(oracle))
        assert all(a > b for a, b in zip(errors, errors[1:]))
        assert errors[-1] < 1e-6


class TestSharedScale:
    def test_minimum_scale_and_eq6(self):
        ts = [quantize(np.array([1.0, -1.0]), E4M3, s) for s in (0.5, 1.0, 2.0)]
        out = allreduce_sharedscale(ts)
        assert out.scale == 3 * 0.5
        np.testing.assert_array_equal(dequantize(out), [1.0, -1.0])

    def test_single_worker_passthrough(self):
        t = quantize_jit(np.random.default_rng(13).normal(size=64), E4M3)
        out = allreduce_sharedscale([t])
        np.testing.assert_array_equal(out.payload, t.payload)
        assert out.scale == t.scale

    def test_identical_workers(self):
        rng = np.random.default_rng(14)
        logical = rng.uniform(0.1, 1.0, 256) * rng.choice([-1, 1], 256)
        t = quantize_jit(logical, E4M3, margin=2)
        out = allreduce_sharedscale([t] * 4)
        want = dequantize(t)
        rel = np.abs(dequantize(out) - want) / np.abs(want)
        assert rel.max() <= max_relative_error(E4M3, "normal")[1]

    def test_errors(self):
        a = quantize(np.ones(2), E4M3, 1.0)
        with pytest.raises(ValueError):
            allreduce_sharedscale([])
        with pytest.raises(ValueError):
            allreduce_sharedscale([a, quantize(np.ones(3), E4M3, 1.0)])
        with pytest.raises(ValueError):
            allreduce_sharedscale([a, quantize(np.ones(2), E5M2, 1.0)])
        with pytest.raises(ValueError):
            allreduce_sharedscale([a, ScaledTensor(a.payload, MAX_SCALE_SPREAD * 4, E4M3)])

    @settings(max_examples=100, deadline=None)
    @given(exps=st.lists(st.integers(-30, 30), min_size=1, max_size=16),
           jitter=st.floats(1.0, 1.99), fmt=st.sampled_from([E4M3, E5M2]))
    def test_output_scale_identity(self, exps, jitter, fmt):
        scales = [jitter * 2.0**e for e in exps]
        ts = [ScaledTensor(np.zeros(4, dtype=np.uint8), s, fmt) for s in scales]
        assert allreduce_sharedscale(ts).scale == len(scales) * min(scales)

    @settings(max_examples=100, deadline=None)
    @given(seed=st.integers(0, 2**31), n=st.sampled_from([2, 3, 4, 8, 16]), fmt=st.sampled_from([E4M3, E5M2]))
    def test_in_range_sums_match_mean(self, seed, n, fmt):
        rng = np.random.default_rng(seed)
        sign = rng.choice([-1.0, 1.0], 128)
        base = 10.0 ** rng.uniform(-6, 3)
        margin = math.ceil(math.log2(n))
        ts = [quantize_jit(sign * base * rng.uniform(0.5, 2.0) * rng.uniform(0.25, 1.0, 128), fmt, margin)
              for _ in range(n)]
        oracle = np.mean([dequantize(t) for t in ts], axis=0)
        out = allreduce_sharedscale(ts)
        rel = np.abs(dequantize(out) - oracle) / np.abs(oracle)
        assert rel.max() <= n * max_relative_error(fmt, "normal")[1]
        assert out.scale == n * min(t.scale for t in ts)

    def test_shared_scale_helper(self):
        ws = WorkerSet([np.array([1.0]), np.array([4.0])])
        assert shared_scale(ws, E4M3) == 448.0 / 4.0


class TestCommStats:
    def test_exact_result(self):
        t = quantize(np.array([1.0, 2.0]), E4M3, 1.0)
        cs = comm_stats(t, np.array([1.0, 2.0]), QuantStats(4, 1, 0, 0), 10)
        assert cs.snr_db == math.inf and cs.underflow_rate == 0.25 and cs.bytes_transferred == 10

    def test_constructed_noise(self):
        rng = np.random.default_rng(15)
        oracle = rng.normal(size=1000)
        t = quantize_jit(oracle, FP16)
        noise = dequantize(t) - oracle
        want = 10 * math.log10(np.sum(oracle**2) / np.sum(noise**2))
        assert comm_stats(t, oracle, t.stats).snr_db == pytest.approx(want, abs=1e-9)

    def test_all_underflow(self):
        # a narrow mini-float: max 3, min subnormal 0.5, so 3 / 64 flushes to zero
        tiny = FloatFormat("E2M1", 2, 1, 1)
        ws = WorkerSet([np.full(4, 1e-3)] * 64)
        out, cs = allreduce_prescale(ws, tiny)
        assert cs.underflow_rate == 1.0
        assert not dequantize(out).any()

    def test_exact_zero_folds_do_not_dilute_underflow(self):
        ws = WorkerSet([np.array([1.0, 1e-30])] * 2 + [np.array([1e-30, 1e-30])] * 126)
        _, cs = allreduce_prescale(ws, E4M3)
        zero_inputs = 2 * 128 - 2
        assert cs.underflow_rate == zero_inputs / (zero_inputs + 2 + 127)


class TestBench:
    @pytest.mark.parametrize("strategy", ["pre", "post", "auto", "shared"])
    def test_rows(self, strategy):
        rows = allreduce_bench(8, strategy, "normal", 1e-3, steps=3, size=256)
        assert [r["step"] for r in rows] == [0, 1, 2]
        assert all(tuple(r) == BENCH_COLUMNS for r in rows)
        assert all(0 <= r["underflow_rate"] <= 1 and 0 <= r["overflow_rate"] <= 1 for r in rows)

    def test_deterministic(self):
        assert allreduce_bench(4, "auto", steps=3, size=64) == allreduce_bench(4, "auto", steps=3, size=64)

    def test_unknown_strategy(self):
        with pytest.raises(ValueError):
            allreduce_bench(4, "ring")
        with pytest.raises(ValueError):
            gradient_ensemble(np.random.default_rng(0), 2, 4, "cauchy")
