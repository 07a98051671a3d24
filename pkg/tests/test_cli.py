import json

import pytest

from zoomrl.cli import main
from zoomrl.datapipe import dumps_jsonl
from zoomrl.geom import Box
from zoomrl.task import Task

TOOL = '{"name": "image_zoom_in", "arguments": {"box": [0, 0, 10, 10]}}'


def stderr_records(capsys):
    return [json.loads(line) for line in capsys.readouterr().err.splitlines() if line.strip()]


@pytest.fixture
def corpus(tmp_path):
    task = Task("t1", "Which color?", "A", ("red", "blue"), Box(0, 0, 10, 10), Box(0, 0, 100, 100))
    traces = [
        {"task_id": "t1", "raw_text": f"<think>look</think> <tool_call>{TOOL}</tool_call> <think>ok</think> <answer>A</answer>"},
        {"task_id": "t1", "raw_text": "<think>guess</think> <answer>B</answer>"},
        {"task_id": "missing", "raw_text": "<think>x</think> <answer>A</answer>"},
    ]
    (tmp_path / "tasks.jsonl").write_text(dumps_jsonl([task.to_json()]))
    (tmp_path / "traces.jsonl").write_text(dumps_jsonl(traces))
    return tmp_path


def test_score(corpus, capsys):
    out = corpus / "out"
    args = ["score", "--traces", str(corpus / "traces.jsonl"), "--tasks", str(corpus / "tasks.jsonl"), "--out", str(out)]
    assert main(args) == 0
    report = json.loads((out / "report.json").read_text())
    assert report["scored"] == 2
    assert report["report"]["acc_ans"] == 0.5 and report["report"]["acc_rat"] == 1.0
    assert report["flagged"][0]["problem"] == "missing-task"
    rows = [json.loads(l) for l in (out / "scores.jsonl").read_text().splitlines()]
    assert rows[0]["reward"]["r_total"] == pytest.approx(3.9)
    assert stderr_records(capsys)[0] == {"warning": "flagged-traces", "count": 1}


def test_score_unreadable_input(tmp_path, capsys):
    assert main(["score", "--traces", str(tmp_path / "nope"), "--tasks", "x", "--out", str(tmp_path)]) == 2
    assert stderr_records(capsys)[0]["error"] == "unreadable-input"


def test_invalid_config_lists_problems(tmp_path, capsys):
    cfg = tmp_path / "c.yaml"
    cfg.write_text("sim:\n  group_size: 0\n  bogus: 1\n")
    assert main(["curate", "--records", "x", "--config", str(cfg), "--out", str(tmp_path)]) == 2
    err = stderr_records(capsys)[0]
    assert err["error"] == "invalid-config" and len(err["problems"]) == 2


def test_curate_rerun_is_byte_identical(tmp_path):
    recs = tmp_path / "r.jsonl"
    assert main(["synth-records", "--n", "120", "--out", str(recs)]) == 0
    for d in ("a", "b"):
        assert main(["curate", "--records", str(recs), "--seed", "5", "--out", str(tmp_path / d)]) == 0
    for name in ("tasks.jsonl", "manifest.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_train_sim_all_modes_then_report(tmp_path, capsys):
    cfg = tmp_path / "c.yaml"
    cfg.write_text("sim:\n  iterations: 3\n  batch_size: 2\n  group_size: 4\n")
    out = tmp_path / "runs"
    args = ["train-sim", "--config", str(cfg), "--reward-mode", "all", "--out", str(out)]
    assert main(args) == 0
    csvs = sorted(p.name for p in out.glob("*.csv"))
    assert csvs == ["naive_stepwise_seed0.csv", "outcome_only_seed0.csv", "virl_seed0.csv"]
    first = {p.name: p.read_bytes() for p in out.glob("*.csv")}
    assert main(args) == 0
    assert first == {p.name: p.read_bytes() for p in out.glob("*.csv")}

    rep = tmp_path / "report"
    assert main(["report", *(str(out / c) for c in csvs), "--out", str(rep)]) == 0
    header = (rep / "answer_acc.csv").read_text().splitlines()[0]
    assert header == "iteration,naive_stepwise_seed0,outcome_only_seed0,virl_seed0"


def test_report_schema_mismatch(tmp_path, capsys):
    (tmp_path / "a.csv").write_text("iteration,x\n0,1\n")
    (tmp_path / "b.csv").write_text("iteration,y\n0,1\n")
    assert main(["report", str(tmp_path / "a.csv"), str(tmp_path / "b.csv"), "--out", str(tmp_path)]) == 2
    assert stderr_records(capsys)[0]["error"] == "schema-mismatch"


def test_report_truncates_to_shortest(tmp_path, capsys):
    (tmp_path / "a.csv").write_text("iteration,x\n0,1\n1,2\n")
    (tmp_path / "b.csv").write_text("iteration,x\n0,5\n")
    assert main(["report", str(tmp_path / "a.csv"), str(tmp_path / "b.csv"), "--out", str(tmp_path / "o")]) == 0
    assert (tmp_path / "o" / "x.csv").read_text() == "iteration,a,b\n0,1,5\n"
    assert stderr_records(capsys)[0]["warning"] == "truncated"


@pytest.mark.parametrize("template,states_limit", [("clear", True), ("ambiguous", False)])
def test_prompt(template, states_limit, capsys):
    assert main(["prompt", "--prompt-template", template, "--question", "What is red?"]) == 0
    text = capsys.readouterr().out
    assert "What is red?" in text and "image_zoom_in" in text
    assert ("6" in text) == states_limit
