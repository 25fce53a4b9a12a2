import math

import numpy as np
import pytest

from agglo import bench
from agglo.bench import (
    BenchConfig,
    BenchRecord,
    case_inputs,
    check_scaling,
    crossover,
    fit_scaling,
    make_case,
    mean_times,
    monotone_inversions,
    read_csv,
    run_bench,
    summarize,
    time_call,
    write_csv,
)
from agglo.errors import ContractError
from agglo.tensor import track_allocations

LENGTHS = (64, 128, 256, 512, 1024, 2048)
TINY = BenchConfig(batch=2, d_model=16, heads_or_classes=4, seq_lengths=(8, 16, 32), replicas=2, warmup=0)


def synthetic(fn, kind="full", lengths=LENGTHS, replicas=2):
    return [BenchRecord(kind, True, n, r, fn(n)) for n in lengths for r in range(replicas)]


@pytest.mark.parametrize("power", [1, 2])
def test_exact_power_law_slope(power):
    fit = fit_scaling(synthetic(lambda n: 1e-7 * n ** power))["full"]
    assert abs(fit.slope - power) < 1e-6
    assert fit.stderr < 1e-6
    assert fit.lengths == (512, 1024, 2048)


def test_affine_time_slope_below_one():
    c = 1e-6
    fit = fit_scaling(synthetic(lambda n: c * n + c * 64))["full"]
    # closed form over 512..2048: OLS of log(n + 64) on log(n)
    x = np.log([512, 1024, 2048])
    y = np.log([576, 1088, 2112])
    expected = np.polyfit(x, y, 1)[0]
    assert 0.8 < fit.slope < 1.0
    assert fit.slope == pytest.approx(expected, abs=1e-9)


def test_fit_uses_top_half_rounded_up_with_floor_of_three():
    recs = synthetic(lambda n: float(n), lengths=tuple(2 ** k for k in range(3, 10)))
    assert fit_scaling(recs)["full"].lengths == (64, 128, 256, 512)
    recs = synthetic(lambda n: float(n), lengths=(1, 2, 4))
    assert fit_scaling(recs)["full"].lengths == (1, 2, 4)


def test_fit_needs_three_lengths():
    with pytest.raises(ContractError):
        fit_scaling(synthetic(lambda n: 1.0 * n, lengths=(64, 128)))


def test_fit_averages_replicas():
    recs = [BenchRecord("full", True, n, r, n * (1.0 + 0.1 * r)) for n in (4, 8, 16) for r in range(3)]
    assert mean_times(recs)["full"][8] == pytest.approx(8 * 1.1)
    assert fit_scaling(recs)["full"].slope == pytest.approx(1.0)


def test_crossover_algebraic_intersection():
    recs = synthetic(lambda n: float(n), "agglomerative") + synthetic(lambda n: n * n / 256, "full")
    assert crossover(recs) == 256


def test_crossover_none_when_agglomerative_always_slower():
    recs = synthetic(lambda n: 2.0 * n, "agglomerative") + synthetic(lambda n: 1.0 * n, "full")
    assert crossover(recs) is None
    assert "none within measured range" in summarize(recs)


def test_crossover_needs_both_kinds():
    with pytest.raises(ContractError):
        crossover(synthetic(lambda n: 1.0 * n))


def test_monotone_inversions_tolerate_small_noise():
    times = {64: 1.0, 128: 0.97, 256: 2.0, 512: 1.5}
    recs = synthetic(lambda n: times[n], "agglomerative", lengths=tuple(times))
    assert monotone_inversions(recs, "agglomerative") == [512]


def test_check_scaling_bands():
    fits = {"full": bench.ScalingFit(1.69, 0.0, ()), "agglomerative": bench.ScalingFit(1.0, 0.0, ())}
    assert check_scaling(fits) == ["full slope 1.690 outside [1.7, 2.3]"]
    fits["full"] = bench.ScalingFit(2.0, 0.0, ())
    assert check_scaling(fits) == []


@pytest.mark.parametrize("kwargs", [
    dict(seq_lengths=(64, 64, 128)),
    dict(seq_lengths=(128, 64, 256)),
    dict(replicas=1),
    dict(d_model=10, heads_or_classes=4),
    dict(kinds=("sparse",)),
])
def test_config_invariants(kwargs):
    with pytest.raises(ContractError):
        BenchConfig(**kwargs)


def test_record_requires_positive_seconds():
    with pytest.raises(ContractError):
        BenchRecord("full", True, 8, 0, 0.0)


def test_default_config_cardinality_without_timing(monkeypatch):
    monkeypatch.setattr(bench, "make_case", lambda *a: (lambda: None))
    monkeypatch.setattr(bench, "time_call", lambda fn: 1e-3)
    recs = run_bench(BenchConfig())
    assert len(recs) == 60
    assert {(r.kind, r.seq_len, r.replica) for r in recs} == {
        (k, n, i) for k in ("full", "agglomerative") for n in LENGTHS for i in range(5)
    }


def test_tiny_run_records_positive_times():
    recs = run_bench(TINY)
    assert len(recs) == 2 * 3 * 2
    assert all(r.seconds > 0 and r.masked for r in recs)


def test_inputs_identical_across_kinds_and_reruns():
    a = case_inputs(BenchConfig(), 64, 3)
    np.testing.assert_array_equal(a, case_inputs(BenchConfig(), 64, 3))
    assert not np.array_equal(a, case_inputs(BenchConfig(), 64, 4))
    assert a.dtype == np.float32 and a.shape == (32, 64, 512)


def test_memory_error_skips_record(monkeypatch):
    real = bench.make_case

    def flaky(config, kind, seq_len, replica):
        if kind == "full" and seq_len == 32:
            def boom():
                raise MemoryError
            return boom
        return real(config, kind, seq_len, replica)

    monkeypatch.setattr(bench, "make_case", flaky)
    skipped = []
    recs = run_bench(TINY, skipped=skipped)
    assert len(recs) == 10 and len(skipped) == 2
    assert "full seq_len=32" in skipped[0]


def test_agglomerative_case_allocates_nothing_quadratic():
    cfg = BenchConfig(batch=2, d_model=32, heads_or_classes=4, seq_lengths=(1024,), replicas=2)
    fn = make_case(cfg, "agglomerative", 1024, 0)
    with track_allocations() as tracker:
        fn()
    assert tracker.max_elements < 1024 * 1024
    full = make_case(cfg, "full", 1024, 0)
    with track_allocations() as tracker:
        full()
    assert tracker.max_elements >= 4 * 1024 * 1024


@pytest.mark.parametrize("kind", ["full", "agglomerative"])
def test_backward_timing_mode(kind):
    cfg = BenchConfig(batch=2, d_model=16, heads_or_classes=4, seq_lengths=(8,), replicas=2, backward=True)
    make_case(cfg, kind, 8, 0)()


def test_unmasked_mode_runs():
    cfg = BenchConfig(batch=2, d_model=16, heads_or_classes=4, seq_lengths=(8, 16, 32), replicas=2, masked=False)
    assert all(not r.masked for r in run_bench(cfg))


def test_time_call_repeats_fast_calls():
    calls = []
    t = time_call(lambda: calls.append(1))
    assert len(calls) >= 4 and t > 0


def test_csv_round_trip(tmp_path):
    recs = synthetic(lambda n: n * 1e-6, "agglomerative", lengths=(8, 16, 32))
    path = tmp_path / "bench.csv"
    write_csv(recs, path)
    assert path.read_text().splitlines()[0] == "kind,masked,seq_len,replica,seconds"
    back = read_csv(path)
    assert [(r.kind, r.masked, r.seq_len, r.replica) for r in back] == [
        (r.kind, r.masked, r.seq_len, r.replica) for r in recs
    ]
    assert all(math.isclose(a.seconds, b.seconds, rel_tol=1e-6) for a, b in zip(back, recs))


def test_meta_records_pinning(tmp_path):
    meta = bench.machine_meta(TINY, bench.PinStatus(False, None, "not allowed"), ["x"])
    bench.write_meta(meta, tmp_path / "m.txt")
    text = (tmp_path / "m.txt").read_text()
    assert "pinned=no\n" in text and "seed=0\n" in text and "dtype=float32\n" in text
    assert "skipped.0=x\n" in text
