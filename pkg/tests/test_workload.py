import json
import math

import numpy as np
import pytest

from coserve.workload import (
    DegenerateSpecError,
    LogNormalSpec,
    Request,
    Trace,
    TraceError,
    WorkloadError,
    fit_lognormal,
    gen_synthetic,
    load_trace,
    save_trace,
)


def write_jsonl(path, rows):
    path.write_text("\n".join(json.dumps(r) for r in rows) + "\n", encoding="utf-8")


def test_load_trace_identity(tmp_path):
    rows = [
        {"id": "a", "arrival_s": 0.0, "prompt_len": 10, "output_len": 5},
        {"id": "b", "arrival_s": 1.5, "prompt_len": 20, "output_len": 6},
        {"id": "c", "arrival_s": 3.0, "prompt_len": 30, "output_len": 7, "extra": "ignored"},
    ]
    p = tmp_path / "t.jsonl"
    write_jsonl(p, rows)
    trace = load_trace(p)
    assert [r.id for r in trace] == ["a", "b", "c"]
    assert trace.requests[2].prompt_len == 30


def test_load_trace_zero_prompt_len_names_row(tmp_path):
    p = tmp_path / "t.jsonl"
    write_jsonl(p, [
        {"id": "a", "arrival_s": 0.0, "prompt_len": 10, "output_len": 5},
        {"id": "b", "arrival_s": 1.0, "prompt_len": 0, "output_len": 5},
    ])
    with pytest.raises(TraceError, match=r":2"):
        load_trace(p)


def test_load_trace_resorts_stably(tmp_path):
    # Oracle: python's sorted() with a stable key.
    rows = [
        {"id": "c", "arrival_s": 3.0, "prompt_len": 3, "output_len": 1},
        {"id": "a", "arrival_s": 1.0, "prompt_len": 1, "output_len": 1},
        {"id": "a2", "arrival_s": 1.0, "prompt_len": 2, "output_len": 1},
        {"id": "b", "arrival_s": 2.0, "prompt_len": 2, "output_len": 1},
    ]
    p = tmp_path / "t.jsonl"
    write_jsonl(p, rows)
    trace = load_trace(p)
    expected = [r["id"] for r in sorted(rows, key=lambda r: r["arrival_s"])]
    assert [r.id for r in trace] == expected  # "a" before "a2": stable


def test_load_trace_lossless_multiset(tmp_path):
    rng = np.random.default_rng(5)
    rows = [
        {"id": f"r{i}", "arrival_s": float(rng.uniform(0, 100)),
         "prompt_len": int(rng.integers(1, 50)), "output_len": int(rng.integers(1, 20))}
        for i in range(200)
    ]
    p = tmp_path / "t.jsonl"
    write_jsonl(p, rows)
    trace = load_trace(p)
    got = sorted((r.arrival_s, r.prompt_len, r.output_len) for r in trace)
    want = sorted((r["arrival_s"], r["prompt_len"], r["output_len"]) for r in rows)
    assert got == want


def test_load_trace_errors(tmp_path):
    p = tmp_path / "empty.jsonl"
    p.write_text("", encoding="utf-8")
    with pytest.raises(TraceError, match="empty"):
        load_trace(p)
    with pytest.raises(TraceError, match="format"):
        load_trace(p, format="csv")
    p2 = tmp_path / "bad.jsonl"
    p2.write_text('{"id": "a"\n', encoding="utf-8")
    with pytest.raises(TraceError, match=r":1"):
        load_trace(p2)
    p3 = tmp_path / "dup.jsonl"
    write_jsonl(p3, [
        {"id": "a", "arrival_s": 0.0, "prompt_len": 1, "output_len": 1},
        {"id": "a", "arrival_s": 1.0, "prompt_len": 1, "output_len": 1},
    ])
    with pytest.raises(TraceError, match="duplicate"):
        load_trace(p3)


def test_load_trace_replay_fields_and_gen_cap(tmp_path):
    p = tmp_path / "t.jsonl"
    write_jsonl(p, [
        {"id": "a", "arrival_s": 0.0, "prompt_len": 10, "output_len": 500,
         "ttft_s": 0.4, "tbt_s": [0.05, 0.06]},
    ])
    trace = load_trace(p, gen_cap=128)
    req = trace.requests[0]
    assert req.ttft_s == 0.4
    assert req.tbt_s == (0.05, 0.06)
    assert req.output_len == 128


def test_save_load_roundtrip(tmp_path):
    trace = gen_synthetic(LogNormalSpec(mu=3.0, sigma=0.5, n=50), 10.0, seed=3)
    p = tmp_path / "t.jsonl"
    save_trace(trace, p)
    again = load_trace(p)
    assert [r.id for r in again] == [r.id for r in trace]
    assert np.allclose(again.arrivals(), trace.arrivals())


def test_trace_invariants():
    with pytest.raises(TraceError):
        Trace(())
    with pytest.raises(TraceError):
        Request(id="x", arrival_s=-1.0, prompt_len=1, output_len=1)


# ---- fit_lognormal -------------------------------------------------------

def test_fit_lognormal_hand_case():
    # ln values {0, 2}: mu = 1, population sigma = 1.
    spec = fit_lognormal([1.0, math.e ** 2])
    assert spec.mu == pytest.approx(1.0)
    assert spec.sigma == pytest.approx(1.0)


def test_fit_lognormal_degenerate_and_errors():
    with pytest.raises(DegenerateSpecError):
        fit_lognormal([math.e, math.e, math.e])
    with pytest.raises(WorkloadError):
        fit_lognormal([2.0])
    with pytest.raises(WorkloadError):
        fit_lognormal([1.0, -1.0])


def test_fit_lognormal_roundtrip_monte_carlo():
    rng = np.random.default_rng(42)
    draws = rng.lognormal(0.5, 0.8, size=100_000)
    spec = fit_lognormal(draws)
    assert abs(spec.mu - 0.5) < 0.02
    assert abs(spec.sigma - 0.8) < 0.02


# ---- gen_synthetic -------------------------------------------------------

def test_gen_synthetic_mean_interarrival():
    trace = gen_synthetic(LogNormalSpec(mu=4.0, sigma=0.7, n=1000), 30.0, seed=11)
    gaps = np.diff(np.concatenate([[0.0], trace.arrivals()]))
    assert 27.0 <= gaps.mean() <= 33.0


def test_gen_synthetic_deterministic(tmp_path):
    spec = LogNormalSpec(mu=4.0, sigma=0.7, n=200)
    a = gen_synthetic(spec, 30.0, seed=7)
    b = gen_synthetic(spec, 30.0, seed=7)
    pa, pb = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
    save_trace(a, pa)
    save_trace(b, pb)
    assert pa.read_bytes() == pb.read_bytes()


def test_gen_synthetic_degenerate_lengths():
    # Spread small enough that every draw rounds to exactly exp(mu).  One
    # ulp below log(100) keeps exp(mu) under the integer boundary, where
    # float log(100) itself would land a hair above and ceil to 101.
    mu = float(np.nextafter(math.log(100), 0))
    spec = LogNormalSpec(mu=mu, sigma=1e-18, n=500)
    trace = gen_synthetic(spec, 1.0, seed=0)
    assert set(int(l) for l in trace.prompt_lens()) == {100}


def test_gen_synthetic_sorted_and_floor():
    trace = gen_synthetic(LogNormalSpec(mu=-3.0, sigma=0.1, n=100), 1.0, seed=1)
    assert np.all(np.diff(trace.arrivals()) >= 0)
    assert trace.prompt_lens().min() >= 1
