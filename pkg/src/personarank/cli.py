"""Command-line entry point: ``personarank <subcommand> [flags]``.

Every subcommand writes its outputs and a ``provenance.json`` under
``--out``. Settings resolve as built-in default, then ``--config`` (a flat
JSON object keyed by flag name with underscores), then explicit flags.

Exit codes: 0 success, 2 usage error, 3 data error, 4 backend error. On
failure a single ``error: <Class>: <message>`` line goes to stderr.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import platform
import sys
from collections import Counter
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__
from . import io as pio
from .errors import BackendError, DataError, ParseError, PersonaRankError
from .harness import (
    DEFAULT_ALPHAS,
    AblationMode,
    Dataset,
    SyntheticSpec,
    TrainConfig,
    ablate,
    evaluate,
    format_comparison,
    generate_synthetic,
    rows_to_csv,
    summary_row,
    sweep_alpha,
    train,
)
from .metrics import evaluate_runs
from .ranker import load_checkpoint, save_checkpoint
from .rewrite import HttpBackend, LLMClient, MockBackend, ScriptedBackend, Transcript, judge_quality, rewrite_all
from .rewrite.backends import DEFAULT_TOKEN_ENV
from .types import ALL_ROLES, PERSONAS, Query, Role

logger = logging.getLogger("personarank")

EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_BACKEND = 4

DEFAULTS: dict[str, dict] = {
    "common": {"seed": 0, "out": "out", "jobs": 1},
    "data": {"num_levels": 3},
    "synthetic": {"num_queries": 200, "docs_per_query": 20, "noise_scale": 0.3, "dim": 16},
    "train": {
        "alpha": 10.0,
        "learning_rate": 0.05,
        "momentum": 0.9,
        "epochs": 30,
        "batch_size": 32,
        "bottleneck": 8,
        "mode": "full",
        "roles": "original,woman,man,student,elder",
        "exclude_original_from_robust": False,
        "divergence": "symmetric_kl",
        "test_fraction": 0.5,
    },
    "eval": {"n": "10,20"},
    "backend": {
        "backend": "mock",
        "script": None,
        "endpoint": None,
        "model": "gpt-3.5-turbo",
        "token_env": DEFAULT_TOKEN_ENV,
        "temperature": 0.7,
        "attempts": 3,
        "backoff": 0.5,
        "timeout": 30.0,
    },
    "rewrite": {"max_iters": 5, "strict": False, "personas": "woman,man,student,elder"},
    "sweep": {"alphas": ",".join(f"{a:g}" for a in DEFAULT_ALPHAS)},
}

GROUPS = {
    "gen-synth": ("common", "data", "synthetic"),
    "rewrite": ("common", "backend", "rewrite"),
    "judge": ("common", "backend"),
    "train": ("common", "data", "train"),
    "eval": ("common", "data", "eval"),
    "ablate": ("common", "data", "synthetic", "train", "eval"),
    "sweep": ("common", "data", "synthetic", "train", "eval", "sweep"),
}


class UsageError(PersonaRankError):
    pass


# -- argument parsing ------------------------------------------------------


def _common(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("global")
    g.add_argument("--seed", type=int, help="random seed (default 0)")
    g.add_argument("--out", help="output directory (default ./out)")
    g.add_argument("--config", help="flat JSON file of option defaults")
    g.add_argument("--jobs", type=int, help="parallel workers (default 1)")
    g.add_argument("-v", "--verbose", action="store_true", default=False)


def _data(p: argparse.ArgumentParser, inputs: bool = True) -> None:
    if inputs:
        p.add_argument("--embeddings", help="pair embeddings JSONL")
        p.add_argument("--qrels", help="TREC qrels file")
    p.add_argument("--num-levels", type=int, choices=(3, 5), help="relevance levels (default 3)")


def _synthetic(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("synthetic data")
    g.add_argument("--num-queries", type=int)
    g.add_argument("--docs-per-query", type=int)
    g.add_argument("--noise-scale", type=float)
    g.add_argument("--dim", type=int)


def _train(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("training")
    g.add_argument("--alpha", type=float, help="robust loss weight (default 10)")
    g.add_argument("--learning-rate", "--lr", dest="learning_rate", type=float)
    g.add_argument("--momentum", type=float)
    g.add_argument("--epochs", type=int)
    g.add_argument("--batch-size", type=int, help="(query, doc) groups per batch")
    g.add_argument("--bottleneck", type=int)
    g.add_argument("--mode", choices=[m.value for m in AblationMode])
    g.add_argument("--roles", help="comma-separated roles fed to the head")
    g.add_argument("--exclude-original-from-robust", action="store_const", const=True)
    g.add_argument("--divergence", choices=("symmetric_kl", "js"))
    g.add_argument("--test-fraction", type=float, help="held-out query share for ablate/sweep")


def _backend(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("LLM backend")
    g.add_argument("--backend", choices=("mock", "scripted", "http"))
    g.add_argument("--script", help="JSON file mapping template id to responses (scripted backend)")
    g.add_argument("--endpoint", help="chat-completions URL (http backend)")
    g.add_argument("--model")
    g.add_argument("--token-env", help=f"env var holding the API token (default {DEFAULT_TOKEN_ENV})")
    g.add_argument("--temperature", type=float)
    g.add_argument("--attempts", type=int, help="calls allowed per request (default 3)")
    g.add_argument("--backoff", type=float, help="initial retry delay in seconds")
    g.add_argument("--timeout", type=float)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="personarank", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"personarank {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")

    p = sub.add_parser("gen-synth", help="write a seeded synthetic dataset")
    _common(p)
    _data(p, inputs=False)
    _synthetic(p)

    p = sub.add_parser("rewrite", help="rewrite queries for each persona")
    _common(p)
    p.add_argument("--queries", required=True, help="queries TSV (qid<TAB>text)")
    _backend(p)
    p.add_argument("--max-iters", type=int)
    p.add_argument("--strict", action="store_const", const=True, help="accept only exact matches")
    p.add_argument("--personas", help="comma-separated personas (default all four)")

    p = sub.add_parser("judge", help="score rewrites 0-5 with an LLM judge")
    _common(p)
    p.add_argument("--rewrites", required=True, help="rewrites JSONL")
    _backend(p)

    p = sub.add_parser("train", help="train the ranking head")
    _common(p)
    _data(p)
    _train(p)

    p = sub.add_parser("eval", help="effectiveness and robustness metrics")
    _common(p)
    _data(p)
    p.add_argument("--runs", nargs="+", help="TREC run files, one per role")
    p.add_argument("--run-roles", help="roles of --runs in order (default original,woman,man,student,elder)")
    p.add_argument("--checkpoint", help="checkpoint JSON to score --embeddings with")
    p.add_argument("--n", help="comma-separated NDCG cutoffs (default 10,20)")

    for name, help_text in (("ablate", "full model vs the three ablations"), ("sweep", "alpha sweep")):
        p = sub.add_parser(name, help=help_text)
        _common(p)
        _data(p)
        p.add_argument("--synthetic", action="store_true", default=False, help="generate data instead of reading files")
        _synthetic(p)
        _train(p)
        p.add_argument("--n", help="comma-separated NDCG cutoffs (default 10,20)")
        if name == "sweep":
            p.add_argument("--alphas", help="comma-separated alpha values (default 5,10,...,30)")
    return parser


def resolve(args: argparse.Namespace) -> dict:
    """Merge built-in defaults, the config file and explicit flags."""
    allowed: dict = {}
    for group in GROUPS[args.command]:
        allowed.update(DEFAULTS[group])
    settings = dict(allowed)
    if args.config:
        path = Path(args.config)
        if not path.exists():
            raise DataError(f"{path}: no such file")
        try:
            cfg = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise DataError(f"{path}: {exc.msg}") from None
        if not isinstance(cfg, dict):
            raise DataError(f"{path}: config must be a flat JSON object")
        unknown = sorted(set(cfg) - set(allowed))
        if unknown:
            raise DataError(f"{path}: unknown option(s) for {args.command}: {', '.join(unknown)}")
        settings.update(cfg)
    for key, value in vars(args).items():
        if value is not None and key not in ("command", "config", "verbose"):
            settings[key] = value
    return settings


# -- helpers ---------------------------------------------------------------


def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def write_provenance(out: Path, command: str, settings: dict, inputs: Sequence[str], extra: dict | None = None) -> None:
    block = {
        "tool": "personarank",
        "version": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "command": command,
        "seed": settings.get("seed"),
        "settings": {k: settings[k] for k in sorted(settings)},
        "inputs": {str(p): _sha256(p) for p in inputs if p},
    }
    if extra:
        block.update(extra)
    _write_text(out / "provenance.json", json.dumps(block, indent=2, sort_keys=True) + "\n")


def _write_text(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)


def _write_jsonl(path: Path, rows) -> None:
    _write_text(path, "".join(json.dumps(r, ensure_ascii=False, sort_keys=True) + "\n" for r in rows))


def _roles(text: str) -> list[Role]:
    try:
        return [Role.parse(t) for t in text.split(",") if t.strip()]
    except DataError as exc:
        raise UsageError(str(exc)) from None


def _ints(text: str) -> list[int]:
    try:
        return [int(t) for t in str(text).split(",") if t.strip()]
    except ValueError:
        raise UsageError(f"expected comma-separated integers, got {text!r}") from None


def _floats(text: str) -> list[float]:
    try:
        return [float(t) for t in str(text).split(",") if t.strip()]
    except ValueError:
        raise UsageError(f"expected comma-separated numbers, got {text!r}") from None


def _train_config(s: dict) -> TrainConfig:
    return TrainConfig(
        bottleneck=int(s["bottleneck"]),
        num_levels=int(s["num_levels"]),
        alpha=float(s["alpha"]),
        learning_rate=float(s["learning_rate"]),
        momentum=float(s["momentum"]),
        epochs=int(s["epochs"]),
        batch_size=int(s["batch_size"]),
        seed=int(s["seed"]),
        roles=tuple(_roles(s["roles"])),
        mode=AblationMode(s["mode"]),
        include_original_in_robust=not s["exclude_original_from_robust"],
        divergence=s["divergence"],
        test_fraction=float(s["test_fraction"]),
    )


def _load_data(s: dict, synthetic: bool = False) -> tuple[Dataset, list[str]]:
    if synthetic:
        spec = SyntheticSpec(
            num_queries=int(s["num_queries"]),
            docs_per_query=int(s["docs_per_query"]),
            noise_scale=float(s["noise_scale"]),
            seed=int(s["seed"]),
            dim=int(s["dim"]),
            num_levels=int(s["num_levels"]),
        )
        return generate_synthetic(spec), []
    if not s.get("embeddings") or not s.get("qrels"):
        raise UsageError("--embeddings and --qrels are required (or --synthetic)")
    records = pio.load_embeddings(s["embeddings"])
    qrels = pio.load_qrels(s["qrels"], int(s["num_levels"]))
    return Dataset.from_embeddings(records, qrels), [s["embeddings"], s["qrels"]]


def _client(s: dict) -> LLMClient:
    kind = s["backend"]
    if s.get("script") and kind == "mock":
        kind = "scripted"
    if kind == "mock":
        backend = MockBackend()
    elif kind == "scripted":
        if not s.get("script"):
            raise UsageError("--backend scripted needs --script")
        path = Path(s["script"])
        if not path.exists():
            raise DataError(f"{path}: no such file")
        backend = ScriptedBackend(json.loads(path.read_text(encoding="utf-8")))
    else:
        if not s.get("endpoint"):
            raise UsageError("--backend http needs --endpoint")
        backend = HttpBackend(s["endpoint"], s["model"], s["token_env"], float(s["timeout"]))
    return LLMClient(
        backend,
        attempts=int(s["attempts"]),
        backoff=float(s["backoff"]) if kind == "http" else 0.0,
        temperature=float(s["temperature"]),
        transcript=Transcript(),
    )


# -- subcommands -----------------------------------------------------------


def cmd_gen_synth(s: dict, out: Path) -> None:
    spec = SyntheticSpec(
        num_queries=int(s["num_queries"]),
        docs_per_query=int(s["docs_per_query"]),
        noise_scale=float(s["noise_scale"]),
        seed=int(s["seed"]),
        dim=int(s["dim"]),
        num_levels=int(s["num_levels"]),
    )
    data = generate_synthetic(spec)
    pio.write_queries(out / "queries.tsv", data.queries)
    pio.write_rewrites(out / "rewrites.jsonl", data.rewrites)
    pio.write_qrels(out / "qrels.txt", data.qrels)
    pio.write_embeddings(out / "embeddings.jsonl", data.embeddings())
    write_provenance(out, "gen-synth", s, [], {"data_hash": data.fingerprint()})
    print(f"wrote {len(data.qids)} queries, {len(data.qrels)} judgments, "
          f"{len(data.qids) * len(data.docids[0]) * len(data.roles)} embeddings to {out}")


def cmd_rewrite(s: dict, out: Path) -> None:
    queries = pio.load_queries(s["queries"])
    client = _client(s)
    records = rewrite_all(
        queries, _roles(s["personas"]), client, int(s["max_iters"]), bool(s["strict"]), int(s["jobs"])
    )
    pio.write_rewrites(out / "rewrites.jsonl", records)
    _write_jsonl(out / "transcript.jsonl", client.transcript.entries())
    status = Counter(r.status.value for r in records)
    write_provenance(out, "rewrite", s, [s["queries"], s.get("script")], {"status_counts": dict(sorted(status.items()))})
    print(f"rewrote {len(queries)} queries into {len(records)} records: "
          + ", ".join(f"{k}={v}" for k, v in sorted(status.items())))


def cmd_judge(s: dict, out: Path) -> None:
    records = pio.load_rewrites(s["rewrites"])
    client = _client(s)
    rows = []
    hist = {r.label: {"semantic": [0] * 6, "persona": [0] * 6} for r in PERSONAS}
    for rec in records:
        scores = judge_quality(Query(rec.qid, rec.original_text), rec.rewritten_text, rec.role, client)
        rows.append({"qid": rec.qid, "role": rec.role.label, "semantic": scores.semantic, "persona": scores.persona})
        bucket = hist.setdefault(rec.role.label, {"semantic": [0] * 6, "persona": [0] * 6})
        bucket["semantic"][scores.semantic] += 1
        bucket["persona"][scores.persona] += 1
    _write_jsonl(out / "judgments.jsonl", rows)
    _write_text(out / "judge_histogram.json", json.dumps(hist, indent=2, sort_keys=True) + "\n")
    _write_jsonl(out / "transcript.jsonl", client.transcript.entries())
    write_provenance(out, "judge", s, [s["rewrites"], s.get("script")])
    print(f"judged {len(rows)} rewrites")


def cmd_train(s: dict, out: Path) -> None:
    data, inputs = _load_data(s)
    config = _train_config(s)
    result = train(data.select_roles(config.roles), config)
    save_checkpoint(out / "checkpoint.json", result.params, {"config": config.to_dict(), "data_hash": result.data_hash})
    _write_text(out / "loss_curve.csv", rows_to_csv(result.curve_rows()))
    write_provenance(out, "train", s, inputs, {"data_hash": result.data_hash})
    first, last = result.curve[0], result.curve[-1]
    print(f"trained {config.epochs} epochs: total loss {first.total:.6f} -> {last.total:.6f}")


def cmd_eval(s: dict, out: Path) -> None:
    ns = _ints(s["n"])
    if s.get("runs"):
        if not s.get("qrels"):
            raise UsageError("--qrels is required")
        roles = _roles(s["run_roles"]) if s.get("run_roles") else list(ALL_ROLES)
        if len(s["runs"]) > len(roles):
            raise UsageError(f"{len(s['runs'])} runs but only {len(roles)} roles")
        qrels = pio.load_qrels(s["qrels"], int(s["num_levels"]))
        runs = [pio.load_run(path, role) for path, role in zip(s["runs"], roles)]
        report = evaluate_runs(runs, qrels, ns)
        inputs = [*s["runs"], s["qrels"]]
    elif s.get("checkpoint"):
        params = load_checkpoint(s["checkpoint"])
        data, inputs = _load_data(s)
        report, runs = evaluate(params, data, ns)
        for run in runs:
            pio.write_run(out / "runs" / f"{run.role.label}.run", run)
        inputs = [s["checkpoint"], *inputs]
    else:
        raise UsageError("eval needs --runs or --checkpoint")
    _write_text(out / "report.json", report.to_json())
    table = report.format_table()
    _write_text(out / "report.txt", table)
    write_provenance(out, "eval", s, inputs)
    print(table, end="")


def _experiment_outputs(out: Path, name: str, experiments, ns) -> str:
    rows = [summary_row(e) for e in experiments]
    payload = {
        "rows": rows,
        "reports": {e.label: e.report.to_dict() for e in experiments},
        "curves": {e.label: [b.as_dict() for b in e.curve] for e in experiments},
        "data_hashes": {e.label: {"train": e.train_hash, "test": e.test_hash} for e in experiments},
    }
    _write_text(out / f"{name}.json", json.dumps(payload, indent=2, sort_keys=True) + "\n")
    _write_text(out / f"{name}.csv", rows_to_csv(rows))
    table = format_comparison(rows, ns)
    _write_text(out / f"{name}.txt", table)
    return table


def cmd_ablate(s: dict, out: Path) -> None:
    data, inputs = _load_data(s, s.get("synthetic", False))
    ns = _ints(s["n"])
    experiments = ablate(data, _train_config(s), ns)
    table = _experiment_outputs(out, "ablation", experiments, ns)
    write_provenance(out, "ablate", s, inputs, {"data_hash": data.fingerprint()})
    print(table, end="")


def cmd_sweep(s: dict, out: Path) -> None:
    data, inputs = _load_data(s, s.get("synthetic", False))
    ns = _ints(s["n"])
    experiments = sweep_alpha(data, _train_config(s), _floats(s["alphas"]), ns)
    table = _experiment_outputs(out, "sweep", experiments, ns)
    write_provenance(out, "sweep", s, inputs, {"data_hash": data.fingerprint()})
    print(table, end="")


COMMANDS = {
    "gen-synth": cmd_gen_synth,
    "rewrite": cmd_rewrite,
    "judge": cmd_judge,
    "train": cmd_train,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "sweep": cmd_sweep,
}


def run(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        settings = resolve(args)
        out = Path(settings["out"])
        out.mkdir(parents=True, exist_ok=True)
        COMMANDS[args.command](settings, out)
    except UsageError as exc:
        print(f"error: UsageError: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (BackendError, ParseError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_BACKEND
    except (DataError, PersonaRankError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_DATA
    return 0


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
