import json

import numpy as np
import pytest
import yaml

from gen import listing_workflow
from agentserve.cli import compare_reports, main
from agentserve.profiler.pfa import write_traces
from agentserve.sim.workloads import synthetic_trace

SMALL = {
    "workload": {"builtin": "coding_assistant", "n_workflows": 3, "warmup_workflows": 20,
                 "arrival": {"rate": 0.05, "cv": 1.0}},
    "cluster": {"models": {"reasoning": {"replicas": 1}, "code": {"replicas": 1}}},
    "policy": ["pythia", "fcfs"],
    "seeds": [1],
}


def write_config(tmp_path, doc=SMALL, name="exp.yaml"):
    path = tmp_path / name
    path.write_text(yaml.safe_dump(doc))
    return str(path)


def run_small(tmp_path, *extra):
    out = tmp_path / "out"
    code = main(["run", write_config(tmp_path), "--output-dir", str(out), *extra])
    return code, out


def write_listing_traces(path, n, seed, prefix):
    wf, rng = listing_workflow(), np.random.default_rng(seed)
    write_traces(path, [r for i in range(n) for r in synthetic_trace(wf, f"{prefix}{i}", rng)])


# -- run -----------------------------------------------------------------------------


def test_run_writes_named_reports(tmp_path):
    code, out = run_small(tmp_path)
    assert code == 0
    names = sorted(p.name for p in out.iterdir())
    assert names == ["fcfs_1.json", "fcfs_1_jct.csv", "fcfs_1_queue.csv",
                     "pythia_1.json", "pythia_1_jct.csv", "pythia_1_queue.csv"]
    summary = json.loads((out / "pythia_1.json").read_text())
    assert summary["policy"] == "pythia" and summary["seed"] == 1


def test_rerun_is_byte_identical(tmp_path):
    _, out = run_small(tmp_path)
    first = {p.name: p.read_bytes() for p in out.iterdir()}
    run_small(tmp_path)
    assert {p.name: p.read_bytes() for p in out.iterdir()} == first


def test_parallel_jobs_match_sequential(tmp_path):
    _, out = run_small(tmp_path)
    seq = {p.name: p.read_bytes() for p in out.iterdir()}
    out2 = tmp_path / "par"
    assert main(["run", write_config(tmp_path), "--output-dir", str(out2), "--jobs", "2"]) == 0
    assert {p.name: p.read_bytes() for p in out2.iterdir()} == seq


def test_concurrency_sweep_layout(tmp_path):
    code, out = run_small(tmp_path, "--concurrency", "1,2", "--policy", "fcfs",
                          "--seeds", "1,2")
    assert code == 0
    assert sorted(p.name for p in out.iterdir()) == ["concurrency_1", "concurrency_2"]
    for d in out.iterdir():
        assert sorted(p.name for p in d.glob("*.json")) == ["fcfs_1.json", "fcfs_2.json"]


def test_missing_key_exits_1(tmp_path, capsys):
    doc = {k: v for k, v in SMALL.items() if k != "cluster"}
    assert main(["run", write_config(tmp_path, doc)]) == 1
    assert "cluster" in capsys.readouterr().err


def test_missing_config_file_exits_1(tmp_path):
    assert main(["run", str(tmp_path / "absent.yaml")]) == 1


def test_deadlock_exits_2(tmp_path, capsys):
    doc = dict(SMALL, cluster={"models": {"reasoning": {"replicas": 1, "kv_capacity": 50},
                                          "code": {"replicas": 1, "kv_capacity": 50}}})
    assert main(["run", write_config(tmp_path, doc), "--output-dir", str(tmp_path)]) == 2
    assert "runtime error" in capsys.readouterr().err


# -- compare -----------------------------------------------------------------------------


def test_compare_self_ratios_are_one(tmp_path, capsys):
    _, out = run_small(tmp_path)
    rep = str(out / "pythia_1.json")
    csv_path = tmp_path / "cmp.csv"
    assert main(["compare", rep, rep, "--csv", str(csv_path)]) == 0
    summary = json.loads((out / "pythia_1.json").read_text())
    rows = compare_reports([("a", summary), ("b", summary)])
    for _, vals, ratios in rows:
        if vals[0] is not None:
            assert ratios == [1.0, 1.0]
    assert csv_path.read_text().startswith("metric,")
    capsys.readouterr()


def test_compare_policies_baseline_label(tmp_path, capsys):
    _, out = run_small(tmp_path)
    args = ["compare", str(out / "pythia_1.json"), str(out / "fcfs_1.json"),
            "--baseline", "fcfs_1", "--csv", str(tmp_path / "c.csv")]
    assert main(args) == 0
    assert "baseline: fcfs_1" in capsys.readouterr().out


def test_compare_absent_metric(tmp_path):
    _, out = run_small(tmp_path)
    full = json.loads((out / "fcfs_1.json").read_text())
    partial = dict(full)
    del partial["ttft"]
    (tmp_path / "partial.json").write_text(json.dumps(partial))
    rows = dict((m, (v, r)) for m, v, r in compare_reports([("a", full), ("b", partial)]))
    assert rows["ttft_mean_s"][0][1] is None and rows["ttft_mean_s"][1][1] is None
    csv_path = tmp_path / "c.csv"
    assert main(["compare", str(out / "fcfs_1.json"), str(tmp_path / "partial.json"),
                 "--csv", str(csv_path)]) == 0
    line = next(ln for ln in csv_path.read_text().splitlines() if ln.startswith("ttft_mean_s"))
    assert "absent" in line


def test_compare_rejects_mixed_workloads(tmp_path, capsys):
    _, out = run_small(tmp_path)
    other = json.loads((out / "fcfs_1.json").read_text())
    other["workload_id"] = "something-else"
    (tmp_path / "other.json").write_text(json.dumps(other))
    assert main(["compare", str(out / "fcfs_1.json"), str(tmp_path / "other.json"),
                 "--csv", str(tmp_path / "c.csv")]) == 1
    assert "different workloads" in capsys.readouterr().err


def test_compare_needs_two_reports(tmp_path):
    _, out = run_small(tmp_path)
    assert main(["compare", str(out / "fcfs_1.json")]) == 1


# -- profile -----------------------------------------------------------------------------


def test_profile_empty_file(tmp_path, capsys):
    (tmp_path / "empty.ndjson").write_text("")
    out = tmp_path / "p.json"
    assert main(["profile", str(tmp_path / "empty.ndjson"), "-o", str(out)]) == 0
    assert "no roles profiled" in capsys.readouterr().out
    assert out.exists()


def test_profile_reports_malformed_line(tmp_path, capsys):
    path = tmp_path / "t.ndjson"
    write_listing_traces(path, 5, 0, "w")
    n = len(path.read_text().splitlines())
    with open(path, "a") as fh:
        fh.write("{broken\n")
    assert main(["profile", str(path), "-o", str(tmp_path / "p.json")]) == 0
    captured = capsys.readouterr()
    assert f"t.ndjson:{n + 1}:" in captured.err
    assert "ingested 5 traces" in captured.out


def test_profile_holdout_acceptance(tmp_path, capsys):
    write_listing_traces(tmp_path / "train.ndjson", 200, 1, "train")
    write_listing_traces(tmp_path / "test.ndjson", 100, 2, "test")
    assert main(["profile", str(tmp_path / "train.ndjson"), "-o", str(tmp_path / "p.json"),
                 "--holdout", str(tmp_path / "test.ndjson")]) == 0
    line = next(ln for ln in capsys.readouterr().out.splitlines()
                if ln.startswith("held-out acceptance [listing]"))
    ok, n = line.split(": ")[1].split(" = ")[0].split("/")
    assert n == "100" and int(ok) >= 95


def test_profile_missing_trace_file(tmp_path):
    assert main(["profile", str(tmp_path / "nope.ndjson"), "-o", str(tmp_path / "p.json")]) == 1


def test_bad_seed_list_is_usage_error(tmp_path):
    with pytest.raises(SystemExit):
        main(["run", write_config(tmp_path), "--seeds", "a,b"])
