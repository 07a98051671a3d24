"""Command-line entry point.

Subcommands::

    zoomrl score      --traces T.jsonl --tasks K.jsonl --out DIR
    zoomrl train-sim  [--config C.yaml] [--seed N] [--reward-mode MODE|all] --out DIR [--traces T.jsonl]
    zoomrl curate     --records R.jsonl [--config C.yaml] [--seed N] --out DIR
    zoomrl synth-records --n 500 [--seed N] --out R.jsonl
    zoomrl report     LOG.csv [LOG.csv ...] --out DIR
    zoomrl prompt     [--prompt-template clear|ambiguous] [--question TEXT]

Errors and warnings go to stderr as one JSON object per line. Outputs are written
atomically and are byte-identical across reruns with the same inputs and seed.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import os
import sys
import tempfile
from pathlib import Path
from typing import Any, Sequence

from pydantic import ValidationError

from .config import ConfigValidationError, RunConfig, dump_config, load_config
from .datapipe import PipelineError, RegionRecord, curate, dumps_jsonl, read_jsonl, synthetic_records
from .geom import GeometryError
from .metrics import MetricsError, aggregate, diagnose, score_trace
from .prompts import TEMPLATES, render_prompt
from .reward import ConfigError, RewardMode, total_reward
from .task import Task
from .trace import TraceConfig, parse_trace

EXIT_OK, EXIT_RUNTIME, EXIT_INPUT = 0, 1, 2


class CliError(Exception):
    def __init__(self, code: str, message: str, status: int = EXIT_INPUT, **extra: Any):
        super().__init__(message)
        self.code = code
        self.status = status
        self.extra = extra

    def record(self) -> dict[str, Any]:
        return {"error": self.code, "message": str(self), **self.extra}


def _emit(obj: dict[str, Any]) -> None:
    print(json.dumps(obj, sort_keys=True), file=sys.stderr)


def _warn(kind: str, **fields: Any) -> None:
    _emit({"warning": kind, **fields})


def write_atomic(path: str | Path, text: str) -> None:
    """Write to a temp file in the target directory, then rename over the target."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _dumps(obj: Any) -> str:
    return json.dumps(obj, sort_keys=True, indent=2) + "\n"


def _read_rows(path: str, what: str) -> list[dict[str, Any]]:
    try:
        return read_jsonl(path)
    except OSError as err:
        raise CliError("unreadable-input", f"cannot read {what} file: {err.strerror}", path=path) from None
    except PipelineError as err:
        raise CliError("malformed-input", str(err), path=path) from None


def _load_run_config(args: argparse.Namespace) -> RunConfig:
    try:
        cfg = load_config(args.config)
    except OSError as err:
        raise CliError("unreadable-input", f"cannot read config: {err.strerror}", path=args.config) from None
    except ConfigValidationError as err:
        raise CliError("invalid-config", "config validation failed", problems=err.problems) from None
    except Exception as err:  # yaml syntax errors
        raise CliError("invalid-config", f"config is not valid YAML: {err}", path=args.config) from None
    overrides: dict[str, Any] = {}
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    if getattr(args, "prompt_template", None) is not None:
        overrides["prompt_template"] = args.prompt_template
    if overrides:
        try:
            cfg = cfg.with_overrides(**overrides)
        except ValidationError as err:
            problems = [f"{'.'.join(map(str, e['loc']))}: {e['msg']}" for e in err.errors()]
            raise CliError("invalid-config", "config validation failed", problems=problems) from None
    return cfg


def cmd_score(args: argparse.Namespace) -> int:
    cfg = _load_run_config(args)
    mode = RewardMode(args.reward_mode or cfg.sim.reward_mode)
    trace_rows = _read_rows(args.traces, "traces")
    task_rows = _read_rows(args.tasks, "tasks")
    tasks: dict[str, Task] = {}
    for n, row in enumerate(task_rows, 1):
        try:
            t = Task.from_json(row)
        except (KeyError, TypeError, ValueError) as err:
            raise CliError("malformed-input", f"{args.tasks}:{n}: bad task record ({err})", path=args.tasks) from None
        tasks[t.task_id] = t

    r = cfg.reward
    out_rows, scores, flagged = [], [], []
    for n, row in enumerate(trace_rows, 1):
        task_id = str(row.get("task_id", ""))
        raw = row.get("raw_text", row.get("raw"))
        task = tasks.get(task_id)
        problem = None
        if not isinstance(raw, str):
            problem = "missing-raw-text"
        elif task is None:
            problem = "missing-task"
        if problem is None:
            try:
                trace, verdict = parse_trace(raw, TraceConfig(max_rounds=cfg.sim.env.max_rounds, bounds=task.bounds))
                breakdown = total_reward(
                    trace, verdict, task, r.fidelity, r.redundancy, r.format, mode=mode, naive_bonus=r.naive_bonus
                )
                s = score_trace(trace, task)
            except (ConfigError, GeometryError) as err:
                problem = f"unscorable: {err}"
        if problem is not None:
            flagged.append({"line": n, "task_id": task_id, "problem": problem})
            out_rows.append({"line": n, "task_id": task_id, "error": problem})
            continue
        scores.append(s)
        out_rows.append(
            {
                "line": n,
                "task_id": task_id,
                "verdict": verdict.to_json(),
                "reward": breakdown.to_json(),
                "answer_correct": s.answer_correct,
                "zoom_count": s.zoom_count,
                "best_coverage": s.best_coverage,
            }
        )
    out = Path(args.out)
    write_atomic(out / "scores.jsonl", dumps_jsonl(out_rows))
    summary: dict[str, Any] = {"reward_mode": mode.value, "scored": len(scores), "flagged": flagged}
    if scores:
        report = aggregate(scores, args.hit_threshold)
        summary["report"] = report.to_json()
        summary["illusion"] = diagnose(report).to_json()
    else:
        summary["report"] = None
    write_atomic(out / "report.json", _dumps(summary))
    if flagged:
        _warn("flagged-traces", count=len(flagged))
    return EXIT_OK


def _modes(arg: str | None, cfg: RunConfig) -> list[RewardMode]:
    if arg == "all":
        return list(RewardMode)
    return [RewardMode(arg or cfg.sim.reward_mode)]


def cmd_train_sim(args: argparse.Namespace) -> int:
    from .sim.train import PolicyUpdateError, run_experiment

    cfg = _load_run_config(args)
    out = Path(args.out)
    all_traces: list[dict[str, Any]] = []
    for mode in _modes(args.reward_mode, cfg):
        run_cfg = cfg.with_overrides(**{"sim.reward_mode": mode.value})
        try:
            result = run_experiment(run_cfg, keep_traces=bool(args.traces))
        except PolicyUpdateError as err:
            dump = out / f"{mode.value}_seed{cfg.seed}.failure.json"
            write_atomic(dump, _dumps({"message": str(err), **err.dump}))
            raise CliError("policy-update-failed", str(err), status=EXIT_RUNTIME, dump=str(dump)) from None
        stem = f"{mode.value}_seed{cfg.seed}"
        write_atomic(out / f"{stem}.csv", result.log.to_csv())
        write_atomic(out / f"{stem}.manifest.json", _dumps(result.manifest(run_cfg)))
        for rec in result.traces:
            rec["reward_mode"] = mode.value
        all_traces.extend(result.traces)
    write_atomic(out / "config.effective.yaml", dump_config(cfg))
    if args.traces:
        write_atomic(args.traces, dumps_jsonl(all_traces))
    return EXIT_OK


def cmd_curate(args: argparse.Namespace) -> int:
    cfg = _load_run_config(args)
    rows = _read_rows(args.records, "records")
    records, skipped = [], []
    for n, row in enumerate(rows, 1):
        try:
            records.append(RegionRecord.from_json(row))
        except (KeyError, TypeError, ValueError) as err:
            skipped.append({"line": n, "problem": str(err)})
    if skipped:
        _warn("skipped-records", count=len(skipped), first=skipped[0])
    c = cfg.curate
    try:
        result = curate(
            records,
            cfg.seed,
            pad_frac=c.pad_frac,
            nms_iou=c.nms_iou,
            max_area_frac=c.max_area_frac,
            attempts=c.attempts,
            rollout_seed=c.rollout_seed,
        )
    except PipelineError as err:
        raise CliError("pipeline-failed", str(err)) from None
    manifest = {**result.manifest, "skipped_records": skipped}
    out = Path(args.out)
    write_atomic(out / "tasks.jsonl", dumps_jsonl(t.to_json() for t in result.tasks))
    write_atomic(out / "manifest.json", _dumps(manifest))
    return EXIT_OK


def cmd_synth_records(args: argparse.Namespace) -> int:
    recs = synthetic_records(args.n, args.seed)
    write_atomic(args.out, dumps_jsonl(r.to_json() for r in recs))
    return EXIT_OK


def _read_log(path: str) -> tuple[list[str], list[list[str]]]:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as err:
        raise CliError("unreadable-input", f"cannot read log: {err.strerror}", path=path) from None
    rows = list(csv.reader(io.StringIO(text)))
    if not rows:
        raise CliError("schema-mismatch", "empty log file", path=path)
    return rows[0], rows[1:]


def cmd_report(args: argparse.Namespace) -> int:
    logs = [(Path(p).stem, *_read_log(p)) for p in args.logs]
    header = logs[0][1]
    if not header or header[0] != "iteration":
        raise CliError("schema-mismatch", "first column must be 'iteration'", path=args.logs[0])
    for (name, h, _), path in zip(logs, args.logs):
        if h != header:
            raise CliError("schema-mismatch", f"columns of {name} differ from {logs[0][0]}", path=path)
    names = [name for name, _, _ in logs]
    if len(set(names)) != len(names):
        raise CliError("schema-mismatch", "log file names must be distinct")
    lengths = [len(rows) for _, _, rows in logs]
    n = min(lengths)
    if len(set(lengths)) > 1:
        _warn("truncated", iterations=dict(zip(names, lengths)), kept=n)
    out = Path(args.out)
    for col, metric in enumerate(header[1:], 1):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["iteration", *names])
        for i in range(n):
            w.writerow([logs[0][2][i][0], *(rows[i][col] for _, _, rows in logs)])
        write_atomic(out / f"{metric}.csv", buf.getvalue())
    return EXIT_OK


def cmd_prompt(args: argparse.Namespace) -> int:
    cfg = _load_run_config(args)
    text = render_prompt(cfg.prompt_template, args.question, max_rounds=cfg.sim.env.max_rounds)
    sys.stdout.write(text)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML run config (defaults apply when omitted)")
    common.add_argument("--seed", type=int, help="override the config seed")
    common.add_argument("--prompt-template", choices=TEMPLATES)

    p = argparse.ArgumentParser(prog="zoomrl", description=__doc__.split("\n\n")[0])
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("score", parents=[common], help="score trace records against tasks")
    s.add_argument("--traces", required=True)
    s.add_argument("--tasks", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--reward-mode", choices=[m.value for m in RewardMode])
    s.add_argument("--hit-threshold", type=float, default=None)
    s.set_defaults(func=cmd_score)

    s = sub.add_parser("train-sim", parents=[common], help="run the seeded toy training loop")
    s.add_argument("--reward-mode", choices=[m.value for m in RewardMode] + ["all"])
    s.add_argument("--out", required=True)
    s.add_argument("--traces", help="also write every rollout as a JSON-lines trace record")
    s.set_defaults(func=cmd_train_sim)

    s = sub.add_parser("curate", parents=[common], help="build MCQ tasks from region records")
    s.add_argument("--records", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_curate)

    s = sub.add_parser("synth-records", help="write a synthetic region-record fixture")
    s.add_argument("--n", type=int, default=500)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth_records)

    s = sub.add_parser("report", help="merge training logs into per-metric CSVs")
    s.add_argument("logs", nargs="+")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_report)

    s = sub.add_parser("prompt", parents=[common], help="print a system prompt template")
    s.add_argument("--question", default="{question}")
    s.set_defaults(func=cmd_prompt)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except CliError as err:
        _emit(err.record())
        return err.status
    except MetricsError as err:
        _emit({"error": "metrics-failed", "message": str(err)})
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
