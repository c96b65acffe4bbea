"""Effectiveness and robustness metrics.

NDCG uses gain ``2**grade - 1`` and discount ``1/log2(rank + 1)``. AP
binarises at grade >= 1. Robustness is measured across K runs of the
same queries, one per role:

* VNDCG@N: population variance of the K run-level mean NDCG@N values.
* VNAP: per query, AP of each run divided by the mean AP across runs,
  population variance of those K ratios, then the mean over queries
  (queries whose mean AP is 0 are skipped).
"""

from __future__ import annotations

import json
import math
import statistics
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .errors import DataError
from .types import Qrels, RankedRun

RELEVANT_GRADE = 1


def dcg(grades: Sequence[int], n: int) -> float:
    return sum((2.0 ** g - 1.0) / math.log2(i + 2) for i, g in enumerate(grades[:n]))


def ndcg_at_n(ranking: Sequence[str], qrels: Qrels, qid: str, n: int) -> float:
    if n < 1:
        raise DataError(f"N must be >= 1, got {n}")
    judged = qrels.for_query(qid)
    ideal = dcg(sorted(judged.values(), reverse=True), n)
    if ideal == 0.0:
        return 0.0
    return dcg([judged.get(d, 0) for d in ranking], n) / ideal


def average_precision(ranking: Sequence[str], qrels: Qrels, qid: str) -> float:
    judged = qrels.for_query(qid)
    n_relevant = sum(1 for g in judged.values() if g >= RELEVANT_GRADE)
    if n_relevant == 0:
        return 0.0
    hits = 0
    total = 0.0
    for rank, docid in enumerate(ranking, start=1):
        if judged.get(docid, 0) >= RELEVANT_GRADE:
            hits += 1
            total += hits / rank
    return total / n_relevant


def population_variance(values: Iterable[float]) -> float:
    """Divide-by-K variance; exact rational arithmetic, so equal inputs give exactly 0."""
    x = [float(v) for v in values]
    if not x:
        raise DataError("variance of an empty sequence")
    return float(statistics.pvariance(x))


def _check_runs(runs: Sequence[RankedRun]) -> list[str]:
    if len(runs) < 2:
        raise DataError("robustness metrics need at least two runs")
    qids = sorted(runs[0].qids)
    for run in runs[1:]:
        if sorted(run.qids) != qids:
            raise DataError(f"run {run.tag!r} covers a different set of queries than run {runs[0].tag!r}")
    return qids


def mean_ndcg(run: RankedRun, qrels: Qrels, n: int, qids: Sequence[str] | None = None) -> float:
    qids = run.qids if qids is None else qids
    if not qids:
        return 0.0
    return float(np.mean([ndcg_at_n(run.docids(q), qrels, q, n) for q in qids]))


def mean_average_precision(run: RankedRun, qrels: Qrels, qids: Sequence[str] | None = None) -> float:
    qids = run.qids if qids is None else qids
    if not qids:
        return 0.0
    return float(np.mean([average_precision(run.docids(q), qrels, q) for q in qids]))


def vndcg_from_values(values: Sequence[float]) -> float:
    return population_variance(values)


def vndcg_at_n(runs: Sequence[RankedRun], qrels: Qrels, n: int) -> float:
    qids = _check_runs(runs)
    return vndcg_from_values([mean_ndcg(r, qrels, n, qids) for r in runs])


def nap_and_vnap(runs: Sequence[RankedRun], qrels: Qrels) -> tuple[dict[str, list[float]], float]:
    """Per-query NAP vectors (one entry per run) and VNAP."""
    qids = _check_runs(runs)
    table: dict[str, list[float]] = {}
    variances = []
    for q in qids:
        aps = [average_precision(r.docids(q), qrels, q) for r in runs]
        mean = statistics.fmean(aps)
        if mean == 0.0:
            continue
        table[q] = [a / mean for a in aps]
        # Var(AP / m) = Var(AP) / m^2, without the rounding of the ratios
        variances.append(population_variance(aps) / mean**2)
    if not variances:
        raise DataError("every query has zero mean AP; VNAP is undefined")
    return table, float(np.mean(variances))


@dataclass
class MetricReport:
    ns: list[int]
    runs: dict[str, dict[str, float]]
    robustness: dict[str, float]
    per_query: dict[str, dict[str, dict[str, float]]] = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "ns": self.ns,
            "runs": self.runs,
            "robustness": self.robustness,
            "per_query": self.per_query,
            "meta": self.meta,
        }

    @classmethod
    def from_dict(cls, obj: dict) -> "MetricReport":
        return cls(
            ns=[int(n) for n in obj["ns"]],
            runs=obj["runs"],
            robustness=obj["robustness"],
            per_query=obj.get("per_query", {}),
            meta=obj.get("meta", {}),
        )

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def mean_ndcg(self, n: int) -> float:
        return float(np.mean([r[f"ndcg@{n}"] for r in self.runs.values()]))

    def format_table(self) -> str:
        """Plain-text table; VNDCG is shown on the e-5 scale."""
        cols = [f"ndcg@{n}" for n in self.ns] + ["map"]
        width = max([len(k) for k in self.runs] + [8])
        lines = [" ".join([f"{'role':<{width}}"] + [f"{c:>9}" for c in cols])]
        for role, vals in self.runs.items():
            lines.append(" ".join([f"{role:<{width}}"] + [f"{vals[c]:>9.4f}" for c in cols]))
        lines.append("")
        for n in self.ns:
            v = self.robustness[f"vndcg@{n}"]
            lines.append(f"VNDCG@{n}: {v:.4e}  ({v * 1e5:.4g} e-5)")
        if "vnap" in self.robustness:
            lines.append(f"VNAP: {self.robustness['vnap']:.4f}")
        return "\n".join(lines) + "\n"


def evaluate_runs(runs: Sequence[RankedRun], qrels: Qrels, ns: Sequence[int] = (10,)) -> MetricReport:
    """Effectiveness per run and robustness across runs."""
    qids = _check_runs(runs) if len(runs) > 1 else sorted(runs[0].qids)
    ns = sorted({int(n) for n in ns})
    out_runs: dict[str, dict[str, float]] = {}
    per_query: dict[str, dict[str, dict[str, float]]] = {}
    labels = []
    for run in runs:
        label = run.role.label if run.role.label not in out_runs else f"{run.role.label}:{run.tag}"
        labels.append(label)
        detail = {}
        for q in qids:
            docs = run.docids(q)
            row = {f"ndcg@{n}": ndcg_at_n(docs, qrels, q, n) for n in ns}
            row["ap"] = average_precision(docs, qrels, q)
            detail[q] = row
        per_query[label] = detail
        summary = {f"ndcg@{n}": float(np.mean([detail[q][f"ndcg@{n}"] for q in qids])) if qids else 0.0 for n in ns}
        summary["map"] = float(np.mean([detail[q]["ap"] for q in qids])) if qids else 0.0
        out_runs[label] = summary
    robustness: dict[str, float] = {}
    if len(runs) > 1:
        for n in ns:
            robustness[f"vndcg@{n}"] = vndcg_from_values([out_runs[l][f"ndcg@{n}"] for l in labels])
        robustness["vnap"] = nap_and_vnap(runs, qrels)[1]
    return MetricReport(ns=list(ns), runs=out_runs, robustness=robustness, per_query=per_query)
