import json

import pytest

from personarank.cli import run

SYNTH = ["--num-queries", "12", "--docs-per-query", "6", "--dim", "8"]
FAST = ["--epochs", "2", "--bottleneck", "4", "--batch-size", "16"]


def files(root):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


@pytest.fixture(scope="module")
def synth(tmp_path_factory):
    out = tmp_path_factory.mktemp("synth")
    assert run(["gen-synth", "--out", str(out), *SYNTH]) == 0
    return out


def test_gen_synth_outputs(synth):
    names = set(files(synth))
    assert {"queries.tsv", "qrels.txt", "embeddings.jsonl", "rewrites.jsonl", "provenance.json"} <= names
    prov = json.loads((synth / "provenance.json").read_text())
    assert prov["seed"] == 0 and prov["command"] == "gen-synth" and "numpy" in prov


def test_rewrite_mock(synth, tmp_path):
    out = tmp_path / "r"
    args = ["rewrite", "--queries", str(synth / "queries.tsv"), "--backend", "mock", "--max-iters", "5", "--out", str(out)]
    assert run(args) == 0
    lines = (out / "rewrites.jsonl").read_text().splitlines()
    assert len(lines) == 12 * 4
    assert (out / "transcript.jsonl").stat().st_size > 0
    prov = json.loads((out / "provenance.json").read_text())
    assert str(synth / "queries.tsv") in prov["inputs"]


def test_rewrite_scripted_fallback(synth, tmp_path):
    script = tmp_path / "s.json"
    script.write_text(json.dumps({"C_check": "-1 -1"}))
    out = tmp_path / "r"
    assert run(["rewrite", "--queries", str(synth / "queries.tsv"), "--script", str(script), "--max-iters", "2",
                "--personas", "woman", "--out", str(out)]) == 0
    recs = [json.loads(l) for l in (out / "rewrites.jsonl").read_text().splitlines()]
    assert all(r["status"] == "FallbackOriginal" and r["iterations"] == 2 for r in recs)


def test_token_never_written(synth, tmp_path, monkeypatch):
    monkeypatch.setenv("PERSONARANK_API_TOKEN", "tok-do-not-log")
    out = tmp_path / "r"
    run(["rewrite", "--queries", str(synth / "queries.tsv"), "--out", str(out)])
    for blob in files(out).values():
        assert b"tok-do-not-log" not in blob


def test_train_eval_checkpoint(synth, tmp_path):
    tr = tmp_path / "t"
    data = ["--embeddings", str(synth / "embeddings.jsonl"), "--qrels", str(synth / "qrels.txt")]
    assert run(["train", *data, *FAST, "--out", str(tr)]) == 0
    assert (tr / "checkpoint.json").exists()
    assert len((tr / "loss_curve.csv").read_text().splitlines()) == 1 + 3
    ev = tmp_path / "e"
    assert run(["eval", *data, "--checkpoint", str(tr / "checkpoint.json"), "--n", "5,10", "--out", str(ev)]) == 0
    report = json.loads((ev / "report.json").read_text())
    assert set(report["robustness"]) == {"vndcg@5", "vndcg@10", "vnap"}
    assert len(list((ev / "runs").glob("*.run"))) == 5


def test_eval_five_run_files(synth, tmp_path):
    tr, ev = tmp_path / "t", tmp_path / "e"
    data = ["--embeddings", str(synth / "embeddings.jsonl"), "--qrels", str(synth / "qrels.txt")]
    run(["train", *data, *FAST, "--out", str(tr)])
    run(["eval", *data, "--checkpoint", str(tr / "checkpoint.json"), "--out", str(ev)])
    runs = [str(ev / "runs" / f"{r}.run") for r in ("original", "woman", "man", "student", "elder")]
    out = tmp_path / "e2"
    assert run(["eval", "--runs", *runs, "--qrels", str(synth / "qrels.txt"), "--n", "10,20", "--out", str(out)]) == 0
    a = json.loads((ev / "report.json").read_text())
    b = json.loads((out / "report.json").read_text())
    assert set(b["robustness"]) == {"vndcg@10", "vndcg@20", "vnap"}
    assert a["runs"] == b["runs"] and a["robustness"] == b["robustness"]


def test_sweep_six_rows(tmp_path):
    out = tmp_path / "s"
    assert run(["sweep", "--synthetic", *SYNTH, *FAST, "--alphas", "5,10,15,20,25,30", "--out", str(out)]) == 0
    assert len((out / "sweep.csv").read_text().strip().splitlines()) == 7
    assert len(json.loads((out / "sweep.json").read_text())["rows"]) == 6


def test_ablate_outputs(tmp_path):
    out = tmp_path / "a"
    assert run(["ablate", "--synthetic", *SYNTH, *FAST, "--out", str(out)]) == 0
    rows = json.loads((out / "ablation.json").read_text())["rows"]
    assert [r["label"] for r in rows] == ["full", "w/o-L", "w/o-N", "w/o-N+L"]


def test_judge(synth, tmp_path):
    out = tmp_path / "j"
    assert run(["judge", "--rewrites", str(synth / "rewrites.jsonl"), "--out", str(out)]) == 0
    hist = json.loads((out / "judge_histogram.json").read_text())
    assert hist["woman"]["semantic"][5] == 12


def test_config_file_and_flag_precedence(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"epochs": 1, "alpha": 3.0, "num_queries": 8, "docs_per_query": 4, "dim": 6,
                               "bottleneck": 2}))
    out = tmp_path / "o"
    assert run(["ablate", "--synthetic", "--config", str(cfg), "--alpha", "4", "--out", str(out)]) == 0
    settings = json.loads((out / "provenance.json").read_text())["settings"]
    assert settings["epochs"] == 1 and settings["alpha"] == 4.0


# -- exit codes ------------------------------------------------------------


def test_unknown_flag_is_usage_error(capsys):
    assert run(["train", "--no-such-flag"]) == 2


def test_missing_subcommand(capsys):
    assert run([]) == 2


def test_missing_input_is_data_error(tmp_path, capsys):
    assert run(["eval", "--runs", "nope.run", "x.run", "--qrels", "nope", "--out", str(tmp_path)]) == 3
    err = capsys.readouterr().err.strip().splitlines()
    assert len(err) == 1 and err[0].startswith("error: DataError:")


def test_unknown_config_key(tmp_path, capsys):
    cfg = tmp_path / "c.json"
    cfg.write_text('{"bogus": 1}')
    assert run(["train", "--config", str(cfg), "--out", str(tmp_path)]) == 3


def test_backend_failure_exit_code(synth, tmp_path, capsys):
    script = tmp_path / "s.json"
    script.write_text(json.dumps({"C_check": "no numbers here"}))
    code = run(["rewrite", "--queries", str(synth / "queries.tsv"), "--script", str(script), "--out", str(tmp_path / "o")])
    assert code == 4
    assert capsys.readouterr().err.startswith("error: ParseError:")


def test_http_backend_unreachable_exit_code(synth, tmp_path, capsys):
    code = run(["rewrite", "--queries", str(synth / "queries.tsv"), "--backend", "http", "--endpoint",
                "http://127.0.0.1:9/x", "--attempts", "1", "--timeout", "1", "--out", str(tmp_path / "o")])
    assert code == 4
    assert capsys.readouterr().err.startswith("error: BackendError:")


def test_http_backend_needs_endpoint(synth, tmp_path, capsys):
    assert run(["rewrite", "--queries", str(synth / "queries.tsv"), "--backend", "http", "--out", str(tmp_path)]) == 2


# -- determinism -----------------------------------------------------------


@pytest.mark.parametrize(
    "argv",
    [
        ["gen-synth", *SYNTH],
        ["rewrite", "--queries", "{synth}/queries.tsv", "--jobs", "4"],
        ["judge", "--rewrites", "{synth}/rewrites.jsonl"],
        ["train", "--embeddings", "{synth}/embeddings.jsonl", "--qrels", "{synth}/qrels.txt", *FAST],
        ["ablate", "--synthetic", *SYNTH, *FAST],
        ["sweep", "--synthetic", *SYNTH, *FAST, "--alphas", "0,5"],
    ],
    ids=lambda a: a[0],
)
def test_byte_identical_reruns(argv, synth, tmp_path):
    argv = [a.format(synth=synth) for a in argv]
    a, b = tmp_path / "a", tmp_path / "b"
    assert run([*argv, "--out", str(a)]) == 0
    first = files(a)
    assert run([*argv, "--out", str(a)]) == 0
    assert files(a) == first
    assert run([*argv, "--out", str(b)]) == 0
    second = files(b)
    assert first.keys() == second.keys()
    for name in first:
        if name == "provenance.json":
            pa = json.loads(first[name])
            pb = json.loads(second[name])
            pa["settings"].pop("out"), pb["settings"].pop("out")
            assert pa == pb
        else:
            assert first[name] == second[name], name
