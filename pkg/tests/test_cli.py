import json

import numpy as np
import pytest

from coserve.cli import EXIT_DATA, EXIT_OK, EXIT_USAGE, main
from coserve.workload import LogNormalSpec, gen_synthetic, save_trace


@pytest.fixture
def workspace(tmp_path):
    """Synthetic trace + profiling traces + cost config on disk."""
    rng = np.random.default_rng(33)

    trace = gen_synthetic(LogNormalSpec(mu=4.0, sigma=0.7, n=300), 5.0, seed=1, output_len=16)
    trace_path = tmp_path / "trace.jsonl"
    save_trace(trace, trace_path)

    # Device profiling trace: linear ttft with mild noise.
    dev_rows = []
    for i in range(64):
        l = int(rng.integers(8, 512))
        dev_rows.append({"id": f"d{i}", "arrival_s": float(i), "prompt_len": l,
                         "output_len": 1, "ttft_s": 0.0319 * l + 0.2 + float(rng.normal(0, 0.05))})
    dev_path = tmp_path / "device.jsonl"
    dev_path.write_text("\n".join(json.dumps(r) for r in dev_rows), encoding="utf-8")

    srv_rows = []
    for i in range(64):
        srv_rows.append({"id": f"s{i}", "arrival_s": float(i), "prompt_len": 10,
                         "output_len": 1, "ttft_s": float(rng.lognormal(-0.5, 0.8)),
                         "tbt_s": [0.04, 0.05]})
    srv_path = tmp_path / "server.jsonl"
    srv_path.write_text("\n".join(json.dumps(r) for r in srv_rows), encoding="utf-8")

    cost_path = tmp_path / "cost.json"
    cost_path.write_text(json.dumps({
        "constrained": "device",
        "pricing_model": "GPT-4o-mini",
        "arch": "bloom-1.1b",
        "lambda_per_mflop": 5.0,
    }), encoding="utf-8")
    return tmp_path, trace_path, dev_path, srv_path, cost_path


def test_profile_plan_simulate_report_flow(workspace, capsys):
    tmp, trace, dev, srv, cost = workspace
    profile = tmp / "profile.json"
    assert main(["profile", "--device-trace", str(dev), "--server-trace", str(srv),
                 "--out", str(profile)]) == EXIT_OK
    printed = capsys.readouterr().out
    assert "pearson" in printed
    assert "P99" in printed
    snap = json.loads(profile.read_text())
    assert snap["device"]["k"] > 0
    assert len(snap["server"]["ttft_samples"]) == 64

    policy = tmp / "policy.json"
    assert main(["plan", "--trace", str(trace), "--profile", str(profile),
                 "--cost", str(cost), "--b", "0.5", "--out", str(policy)]) == EXIT_OK
    audit = json.loads(policy.read_text())
    assert audit["constraint"] == "device"
    assert audit["w_tail"] > 0
    assert audit["table"]

    out = tmp / "run"
    args = ["simulate", "--trace", str(trace), "--profile", str(profile),
            "--cost", str(cost), "--grid", "0.2,0.8", "--seeds", "2",
            "--seed", "7", "--baselines", "stoch", "--out", str(out)]
    assert main(args) == EXIT_OK
    report = out / "report.json"
    assert report.exists()
    rows = json.loads(report.read_text())["rows"]
    assert {r["method"] for r in rows} == {"coserve", "stoch"}

    long_csv = tmp / "long.csv"
    assert main(["report", "--report", str(report), "--out", str(long_csv)]) == EXIT_OK
    header = long_csv.read_text().splitlines()[0]
    assert header == "method,b,metric,value"


def test_simulate_deterministic(workspace):
    tmp, trace, dev, srv, cost = workspace
    profile = tmp / "profile.json"
    main(["profile", "--device-trace", str(dev), "--server-trace", str(srv),
          "--out", str(profile)])
    args = lambda out: ["simulate", "--trace", str(trace), "--profile", str(profile),
                        "--cost", str(cost), "--grid", "0.5", "--seeds", "2",
                        "--seed", "3", "--baselines", "", "--out", out]
    assert main(args(str(tmp / "r1"))) == EXIT_OK
    assert main(args(str(tmp / "r2"))) == EXIT_OK
    assert (tmp / "r1/report.csv").read_bytes() == (tmp / "r2/report.csv").read_bytes()
    assert (tmp / "r1/report.json").read_bytes() == (tmp / "r2/report.json").read_bytes()


def test_replay_requires_ttft_fields(workspace):
    tmp, trace, dev, srv, cost = workspace
    profile = tmp / "profile.json"
    main(["profile", "--device-trace", str(dev), "--server-trace", str(srv),
          "--out", str(profile)])
    # the synthetic trace has no recorded ttft_s -> data error
    rc = main(["replay", "--trace", str(trace), "--profile", str(profile),
               "--cost", str(cost), "--grid", "0.5", "--out", str(tmp / "rr")])
    assert rc == EXIT_DATA
    # the server trace does carry ttft_s -> works
    rc = main(["replay", "--trace", str(srv), "--profile", str(profile),
               "--cost", str(cost), "--grid", "0.5", "--seeds", "1",
               "--baselines", "", "--out", str(tmp / "rr2")])
    assert rc == EXIT_OK


def test_profile_malformed_trace_exits_2(tmp_path, capsys):
    bad = tmp_path / "bad.jsonl"
    bad.write_text('{"id": "a", "arrival_s": 0.0, "prompt_len": -3, "output_len": 1}\n',
                   encoding="utf-8")
    assert main(["profile", "--device-trace", str(bad)]) == EXIT_DATA
    assert ":1" in capsys.readouterr().err


def test_usage_errors_exit_1():
    assert main(["simulate"]) == EXIT_USAGE  # missing required args
    assert main(["frobnicate"]) == EXIT_USAGE


def test_bad_grid_exits_2(workspace):
    tmp, trace, dev, srv, cost = workspace
    profile = tmp / "profile.json"
    main(["profile", "--device-trace", str(dev), "--server-trace", str(srv),
          "--out", str(profile)])
    rc = main(["simulate", "--trace", str(trace), "--profile", str(profile),
               "--cost", str(cost), "--grid", "0.5,1.7", "--out", str(tmp / "x")])
    assert rc == EXIT_DATA


def test_plan_server_constrained_and_explicit_rates(workspace, capsys):
    tmp, trace, dev, srv, cost = workspace
    profile = tmp / "profile.json"
    main(["profile", "--device-trace", str(dev), "--server-trace", str(srv),
          "--out", str(profile)])
    capsys.readouterr()
    cost_s = tmp / "cost_server.json"
    cost_s.write_text(json.dumps({
        "constrained": "server",
        "rates": {"server_prefill_per_tok": 1e-6, "server_decode_per_tok": 2e-6,
                  "device_prefill_flops_per_tok": 10.0,
                  "device_decode_flops_per_tok": 10.0, "lambda_per_mflop": 1.0},
    }), encoding="utf-8")
    policy = tmp / "policy_s.json"
    assert main(["plan", "--trace", str(trace), "--profile", str(profile),
                 "--cost", str(cost_s), "--b", "0.5", "--out", str(policy)]) == EXIT_OK
    out = capsys.readouterr().out
    assert "server-constrained plan: l_th=" in out
    audit = json.loads(policy.read_text())
    assert audit["constraint"] == "server"
    assert audit["table"] == []


def test_cost_config_auto_classification(workspace):
    tmp, trace, dev, srv, cost = workspace
    from coserve.cli import _load_cost_config, _resolve_kind
    from coserve.cost import Constrained

    auto = tmp / "auto.json"
    # device FLOPs priced above server rates -> device-constrained
    auto.write_text(json.dumps({
        "constrained": "auto",
        "rates": {"server_prefill_per_tok": 1e-7, "server_decode_per_tok": 2e-7,
                  "device_prefill_flops_per_tok": 1e6,
                  "device_decode_flops_per_tok": 1e6, "lambda_per_mflop": 1.0},
    }), encoding="utf-8")
    rates, constrained = _load_cost_config(str(auto))
    assert _resolve_kind(rates, constrained) is Constrained.DEVICE


def test_serve_rejects_bad_budget(tmp_path):
    cfg = {
        "upstreams": [
            {"name": "d", "role": "device", "base_url": "http://d"},
            {"name": "s", "role": "server", "base_url": "http://s"},
        ],
        "cost": {"server_prefill_per_tok": 1e-7, "server_decode_per_tok": 6e-7,
                 "device_prefill_flops_per_tok": 1e9, "device_decode_flops_per_tok": 8e8,
                 "lambda_per_mflop": 5.0},
        "budget": {"b": 1.5, "constrained": "device"},
        "device": {"k": 0.03, "c": 0.2, "decode_rate": 14.0},
        "server_ttft_seed_s": [0.1] * 16,
        "length_samples": [16, 32, 64],
    }
    p = tmp_path / "gw.json"
    p.write_text(json.dumps(cfg), encoding="utf-8")
    assert main(["serve", "--config", str(p)]) == EXIT_DATA
