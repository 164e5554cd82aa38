import json
import subprocess
import sys

import pytest

from hetero_kv.cli import SWEEP_COLUMNS, main
from hetero_kv.config import WorkloadProfile, load_model_config, predict_uniform_waste
from hetero_kv.trace import read_trace


def run(capsys, *argv):
    code = main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


def test_predict_waste_is_the_library_value(capsys):
    code, out, _ = run(capsys, "predict-waste", "--model-config", "mllama", "-T", "43", "-I", "6193")
    assert code == 0
    assert float(out) == predict_uniform_waste(load_model_config("mllama"), WorkloadProfile(43, 6193))
    assert abs(float(out) - 0.796) <= 1e-3


def test_console_script_entry_point():
    proc = subprocess.run([sys.executable, "-m", "hetero_kv.cli", "predict-waste", "--model-config", "gemma2-like",
                           "-T", "8192"], capture_output=True, text=True)
    assert proc.returncode == 0 and float(proc.stdout) == 0.25


def test_usage_error_exit_code(capsys):
    with pytest.raises(SystemExit) as e:
        main(["simulate", "--model-config", "mllama"])
    assert e.value.code == 1


def test_config_error_exit_code(capsys, tmp_path):
    bad = tmp_path / "bad.cfg"
    bad.write_text("name: x\ngroups: []\n")
    code, _, err = run(capsys, "predict-waste", "--model-config", str(bad), "-T", "1")
    assert code == 1 and "config error" in err


def test_trace_error_exit_code(capsys, tmp_path):
    bad = tmp_path / "bad.jsonl"
    bad.write_text('{"id": "a", "arrival_step": 0, "segments": [{"kind": "audio", "tokens": 3}], "output_tokens": 1}\n')
    code, _, err = run(capsys, "simulate", "--model-config", "llama-like", "--trace", str(bad), "--memory-bytes", "1000000")
    assert code == 2 and "trace error" in err


def test_run_guard_exit_code(capsys, tmp_path):
    trace = tmp_path / "t.jsonl"
    assert main(["gen-trace", "--kind", "static", "--param", "num_requests=1", "--param", "prompt_tokens=50",
                 "--out", str(trace)]) == 0
    code, _, err = run(capsys, "simulate", "--model-config", "llama-like", "--trace", str(trace),
                       "--memory-bytes", "1000000000", "--max-steps", "3")
    assert code == 3 and "run guard" in err


def test_simulate_writes_metrics_and_summary(capsys, tmp_path):
    trace, metrics, summary = tmp_path / "t.jsonl", tmp_path / "m.csv", tmp_path / "s.json"
    main(["gen-trace", "--kind", "static", "--param", "num_requests=2", "--param", "prompt_tokens=40",
          "--param", "output_tokens=3", "--out", str(trace)])
    code = main(["simulate", "--model-config", "gemma2-like", "--trace", str(trace), "--memory-bytes", "10000000000",
                 "--scale", "0.01", "--chunk-size", "32", "--metrics-out", str(metrics), "--summary-out", str(summary)])
    assert code == 0
    header = metrics.read_text().splitlines()[0].split(",")
    assert header[:3] == ["step", "used_full", "used_window"]
    assert {"wasted", "unallocated", "batch", "preemptions", "hits"} <= set(header)
    s = json.loads(summary.read_text())
    assert s["requests"] == 2 and s["memory_bytes"] == 100_000_000


def test_bundled_trace_by_name(capsys, tmp_path):
    summary = tmp_path / "s.json"
    code = main(["simulate", "--model-config", "llama-like", "--trace", "static-sliding",
                 "--memory-bytes", "10000000000", "--summary-out", str(summary)])
    assert code == 0 and json.loads(summary.read_text())["requests"] == 8
    code, _, err = run(capsys, "simulate", "--model-config", "llama-like", "--trace", "no-such-trace",
                       "--memory-bytes", "1000000")
    assert code == 2 and "trace error" in err


def test_gen_trace_long_doc_range(tmp_path):
    out = tmp_path / "d.jsonl"
    assert main(["gen-trace", "--kind", "long-doc-qa", "--seed", "7", "--scale", "0.01", "--param", "num_requests=20",
                 "--out", str(out)]) == 0
    reqs = read_trace(out)
    assert len(reqs) == 20
    assert all(550 <= r.prompt_tokens <= 1100 for r in reqs)
    assert all(50 <= r.output_tokens <= 100 for r in reqs)


def test_gen_trace_multi_article_counts(tmp_path):
    out = tmp_path / "m.jsonl"
    main(["gen-trace", "--kind", "multi-article-prefix", "--param", "num_articles=2", "--param", "questions=3",
          "--out", str(out)])
    reqs = read_trace(out)
    assert len(reqs) == 6
    assert len({r.prefix_group for r in reqs}) == 2


@pytest.mark.parametrize("kind", ["long-doc-qa", "multi-article-prefix", "dynamic-length", "vision-mmmu-like"])
def test_gen_trace_is_deterministic(tmp_path, kind):
    files = []
    for i in range(2):
        out = tmp_path / f"{i}.jsonl"
        main(["gen-trace", "--kind", kind, "--seed", "11", "--scale", "0.01", "--out", str(out)])
        files.append(out.read_bytes())
    assert files[0] == files[1]


def test_gen_trace_bad_param(capsys):
    code, _, _ = run(capsys, "gen-trace", "--kind", "long-doc-qa", "--param", "bogus=1")
    assert code == 2
    code, _, _ = run(capsys, "gen-trace", "--kind", "long-doc-qa", "--param", "input_min=900", "--param", "input_max=5")
    assert code == 2


def _sweep(capsys, tmp_path, *models):
    trace = tmp_path / "t.jsonl"
    main(["gen-trace", "--kind", "static", "--param", "num_requests=4", "--param", "prompt_tokens=8192",
          "--scale", "0.05", "--out", str(trace)])
    # scaling shrinks the window to 205 tokens and the budget to 2 GB
    argv = ["sweep", "--trace", str(trace), "--memory-bytes", "40000000000", "--scale", "0.05", "--chunk-size", "512"]
    for m in models:
        argv += ["--model-config", m]
    code, out, _ = run(capsys, *argv)
    assert code == 0
    lines = out.splitlines()
    assert lines[0].split("\t") == list(SWEEP_COLUMNS)
    return [dict(zip(SWEEP_COLUMNS, line.split("\t"))) for line in lines[1:]]


def test_sweep_homogeneous_rows_match(capsys, tmp_path):
    rows = _sweep(capsys, tmp_path, "llama-like")
    assert [r["strategy"] for r in rows] == ["lcm", "uniform"]
    strip = [{k: v for k, v in r.items() if k != "strategy"} for r in rows]
    assert strip[0] == strip[1]


def test_sweep_sliding_window_waste(capsys, tmp_path):
    rows = _sweep(capsys, tmp_path, "gemma2-like", "llama-like")
    assert [(r["model"], r["strategy"]) for r in rows] == [
        ("gemma2-like", "lcm"), ("gemma2-like", "uniform"), ("llama-like", "lcm"), ("llama-like", "uniform")]
    assert float(rows[0]["waste_fraction"]) < float(rows[1]["waste_fraction"])


def test_sweep_reports_failed_cells_and_continues(capsys, tmp_path):
    trace = tmp_path / "t.jsonl"
    main(["gen-trace", "--kind", "static", "--param", "num_requests=2", "--param", "prompt_tokens=100",
          "--out", str(trace)])
    code, out, _ = run(capsys, "sweep", "--model-config", "llama-like", "--trace", str(trace),
                       "--memory-bytes", "5000000", "--strategy", "lcm")
    assert code == 0
    assert "error:" in out.splitlines()[1]


GOLDEN_LAYOUT = """\
# large_page_bytes=768 num_large_pages=1
group\tlayer\tlarge_page\tslot\texec_page\tstart\tend
cross\t0\t0\t0\t0\t0\t128
cross\t1\t0\t0\t0\t128\t256
cross\t0\t0\t1\t1\t256\t384
cross\t1\t0\t1\t1\t384\t512
cross\t0\t0\t2\t2\t512\t640
cross\t1\t0\t2\t2\t640\t768
self\t0\t0\t0\t0\t0\t128
self\t1\t0\t0\t0\t128\t256
self\t2\t0\t0\t0\t256\t384
self\t0\t0\t1\t1\t384\t512
self\t1\t0\t1\t1\t512\t640
self\t2\t0\t1\t1\t640\t768
"""


def test_layout_dump_golden(capsys, tmp_path):
    cfg = tmp_path / "two_groups.cfg"
    cfg.write_text("name: two_groups\ngroups:\n"
                   "  - {name: cross, kind: cross_attention, num_layers: 2, bytes_per_token_per_layer: 128}\n"
                   "  - {name: self, kind: full, num_layers: 3, bytes_per_token_per_layer: 128}\n")
    code, out, _ = run(capsys, "layout-dump", "--model-config", str(cfg), "--num-large-pages", "1")
    assert code == 0 and out == GOLDEN_LAYOUT


def test_layout_dump_rejects_gcd(capsys):
    code, _, err = run(capsys, "layout-dump", "--model-config", "mllama", "--strategy", "gcd")
    assert code == 1 and "does not tile" in err
