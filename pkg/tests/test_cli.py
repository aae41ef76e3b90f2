import json

import pytest

from commonkv.cli import main
from commonkv.evaluation import CSV_COLUMNS


@pytest.fixture()
def workdir(tmp_path):
    model = tmp_path / "model.tnsr"
    assert main(["gen-toy", "--out", str(model), "--seed", "42"]) == 0
    return tmp_path


def test_gen_toy_deterministic(tmp_path):
    a, b = tmp_path / "a.tnsr", tmp_path / "b.tnsr"
    assert main(["gen-toy", "--out", str(a), "--seed", "7"]) == 0
    assert main(["gen-toy", "--out", str(b), "--seed", "7"]) == 0
    assert a.read_bytes() == b.read_bytes()


def test_gen_toy_rejects_bad_heads(tmp_path):
    code = main(["gen-toy", "--out", str(tmp_path / "x.tnsr"),
                 "--q-heads", "3", "--kv-heads", "2", "--d-hidden", "48"])
    assert code == 2


def test_transform_and_report(workdir):
    model = workdir / "model.tnsr"
    fact = workdir / "fact.tnsr"
    assert main(["transform", "--model", str(model), "--out", str(fact)]) == 0
    report = json.loads((workdir / "fact.tnsr.report.json").read_text())
    assert report["rank"] == 45 and report["rank_fraction"] == 0.7
    assert report["group_size"] == 4
    # idempotent bytes
    fact2 = workdir / "fact2.tnsr"
    assert main(["transform", "--model", str(model), "--out", str(fact2)]) == 0
    assert fact.read_bytes() == fact2.read_bytes()


def test_transform_full_rank_report(workdir):
    model = workdir / "model.tnsr"
    out = workdir / "full.tnsr"
    assert main(["transform", "--model", str(model), "--out", str(out),
                 "--group-size", "1", "--rank-fraction", "1.0"]) == 0
    report = json.loads((workdir / "full.tnsr.report.json").read_text())
    assert max(report["recon_errors"].values()) <= 1e-5


def test_transform_divisibility_exit_code(workdir):
    code = main(["transform", "--model", str(workdir / "model.tnsr"),
                 "--out", str(workdir / "bad.tnsr"), "--group-size", "3"])
    assert code == 2


def test_fisher_file_contents(workdir):
    model = workdir / "model.tnsr"
    out = workdir / "fisher.json"
    assert main(["fisher", "--model", str(model), "--out", str(out),
                 "--samples", "3", "--seq-len", "24", "--seed", "5"]) == 0
    payload = json.loads(out.read_text())
    assert payload["kind"] == "fisher_weights"
    assert len(payload["per_layer"]) == 8
    assert all(f >= 0 for f in payload["per_layer"])
    assert payload["seed"] == 5 and len(payload["corpus_hash"]) == 64


def test_profile_report(workdir):
    model = workdir / "model.tnsr"
    fact = workdir / "fact.tnsr"
    main(["transform", "--model", str(model), "--out", str(fact)])
    out = workdir / "sim.json"
    assert main(["profile", "--model", str(model), "--factorized", str(fact),
                 "--out", str(out), "--tokens", "48"]) == 0
    payload = json.loads(out.read_text())
    assert set(payload["means"]) == {"key", "value", "hidden", "latent"}
    assert all(-1.0 <= v <= 1.0 for v in payload["means"].values())


def test_run_session_report(workdir):
    model = workdir / "model.tnsr"
    fact = workdir / "fact.tnsr"
    fisher = workdir / "fisher.json"
    main(["transform", "--model", str(model), "--out", str(fact)])
    main(["fisher", "--model", str(model), "--out", str(fisher),
          "--samples", "2", "--seq-len", "24"])
    out = workdir / "run.json"
    assert main(["run", "--model", str(model), "--factorized", str(fact),
                 "--mode", "commonkv", "--ratio", "0.5", "--merge", "fisher",
                 "--fisher-file", str(fisher), "--tokens", "96",
                 "--generate", "4", "--out", str(out)]) == 0
    payload = json.loads(out.read_text())
    assert payload["achieved_ratio"] >= 0.5
    assert payload["plan"]["merged_groups"]
    assert payload["seed"] == 42
    assert len(bytes.fromhex(payload["generated_bytes"])) == 4


def test_run_requires_factorized_for_commonkv(workdir):
    code = main(["run", "--model", str(workdir / "model.tnsr"),
                 "--mode", "commonkv"])
    assert code == 2


def test_run_capacity_exit_code(workdir):
    code = main(["run", "--model", str(workdir / "model.tnsr"),
                 "--mode", "baseline", "--tokens", "300"])
    assert code == 4


def test_missing_model_is_io_error(tmp_path):
    code = main(["transform", "--model", str(tmp_path / "nope.tnsr"),
                 "--out", str(tmp_path / "x.tnsr")])
    assert code == 6


def test_short_corpus_is_input_error(workdir):
    tiny = workdir / "tiny.bin"
    tiny.write_bytes(b"a")
    code = main(["run", "--model", str(workdir / "model.tnsr"),
                 "--mode", "baseline", "--corpus", str(tiny)])
    assert code == 3


def test_bench_csv_and_summary(workdir):
    model = workdir / "model.tnsr"
    fact = workdir / "fact.tnsr"
    main(["transform", "--model", str(model), "--out", str(fact)])
    csv_path = workdir / "bench.csv"
    summary_path = workdir / "summary.json"
    assert main(["bench", "--model", str(model), "--factorized", str(fact),
                 "--out", str(csv_path), "--summary", str(summary_path),
                 "--ratios", "0.3,0.5", "--seeds", "0", "--tokens", "64",
                 "--workers", "2"]) == 0
    lines = csv_path.read_text().strip().split("\n")
    assert lines[0] == ",".join(CSV_COLUMNS)
    assert len(lines) == 1 + 1 + 3 * 2   # header + baseline + 3 modes x 2 ratios
    summary = json.loads(summary_path.read_text())
    assert summary["config"]["n_layers"] == 8
    assert summary["by_mode"]["baseline"]["mean_achieved_ratio"] == 0.0


def test_config_file_defaults_with_flag_override(workdir):
    cfg_path = workdir / "cfg.json"
    cfg_path.write_text(json.dumps({"tokens": 64, "ratio": 0.3, "merge": "mean",
                                    "mode": "commonkv"}))
    model = workdir / "model.tnsr"
    fact = workdir / "fact.tnsr"
    main(["transform", "--model", str(model), "--out", str(fact)])
    out = workdir / "run.json"
    # flag --ratio must beat the config file's 0.3
    assert main(["run", "--model", str(model), "--factorized", str(fact),
                 "--config", str(cfg_path), "--ratio", "0.6",
                 "--out", str(out)]) == 0
    payload = json.loads(out.read_text())
    assert payload["target_ratio"] == 0.6
    assert payload["n_tokens"] == 64   # taken from the config file


def test_check_passes_and_writes_report(workdir):
    out = workdir / "check.txt"
    assert main(["check", "--seed", "42", "--out", str(out)]) == 0
    text = out.read_text()
    assert "overall: PASS" in text
    assert "FAIL" not in text.replace("PASS/FAIL", "")
