"""Training, evaluation, ablation and alpha sweeps for the ranking head."""

from __future__ import annotations

import csv
import enum
import hashlib
import io
import logging
from dataclasses import asdict, dataclass, field, replace
from typing import Sequence

import numpy as np

from .errors import DataError, TrainingError
from .loss import LossBreakdown, LossConfig, total_loss
from .metrics import MetricReport, evaluate_runs
from .ranker import MmoeParams, backward, forward, init_params
from .types import (
    ALL_ROLES,
    PairEmbedding,
    Qrels,
    Query,
    QuerySet,
    RankedRun,
    RewriteRecord,
    RewriteStatus,
    RewriteStep,
    Role,
)

logger = logging.getLogger(__name__)

DEFAULT_ALPHAS = (5.0, 10.0, 15.0, 20.0, 25.0, 30.0)


class AblationMode(str, enum.Enum):
    FULL = "full"
    NO_ROBUST_LOSS = "w/o-L"
    NO_MMOE = "w/o-N"
    NEITHER = "w/o-N+L"

    @property
    def uses_mmoe(self) -> bool:
        return self in (AblationMode.FULL, AblationMode.NO_ROBUST_LOSS)

    @property
    def uses_robust_loss(self) -> bool:
        return self in (AblationMode.FULL, AblationMode.NO_MMOE)


@dataclass(frozen=True)
class TrainConfig:
    bottleneck: int = 8
    num_levels: int = 3
    alpha: float = 10.0
    learning_rate: float = 0.05
    momentum: float = 0.9
    epochs: int = 30
    batch_size: int = 32
    seed: int = 0
    roles: tuple[Role, ...] = ALL_ROLES
    mode: AblationMode = AblationMode.FULL
    epsilon: float = 1e-7
    include_original_in_robust: bool = True
    divergence: str = "symmetric_kl"
    test_fraction: float = 0.5

    def __post_init__(self) -> None:
        object.__setattr__(self, "mode", AblationMode(self.mode))
        object.__setattr__(self, "roles", tuple(Role.parse(r) for r in self.roles))
        if self.learning_rate < 0:
            raise DataError("learning_rate must be >= 0")
        if self.epochs < 1:
            raise DataError("epochs must be >= 1")
        if self.batch_size < 1:
            raise DataError("batch_size must be >= 1")
        if not 0 <= self.momentum < 1:
            raise DataError("momentum must be in [0, 1)")
        if not 0 <= self.test_fraction < 1:
            raise DataError("test_fraction must be in [0, 1)")
        if len(set(self.roles)) != len(self.roles) or len(self.roles) < 1:
            raise DataError("roles must be distinct and non-empty")

    @property
    def effective_alpha(self) -> float:
        return self.alpha if self.mode.uses_robust_loss else 0.0

    def loss_config(self) -> LossConfig:
        return LossConfig(
            alpha=self.effective_alpha,
            epsilon=self.epsilon,
            include_original_in_robust=self.include_original_in_robust,
            divergence=self.divergence,  # type: ignore[arg-type]
        )

    def to_dict(self) -> dict:
        out = asdict(self)
        out["mode"] = self.mode.value
        out["roles"] = [r.label for r in self.roles]
        return out


@dataclass(frozen=True)
class SyntheticSpec:
    num_queries: int = 200
    docs_per_query: int = 20
    num_roles: int = 5
    noise_scale: float = 0.3
    seed: int = 0
    dim: int = 16
    num_levels: int = 3

    def __post_init__(self) -> None:
        if self.num_queries < 1 or self.docs_per_query < 1:
            raise DataError("num_queries and docs_per_query must be positive")
        if self.num_roles != len(ALL_ROLES):
            raise DataError(f"num_roles must be {len(ALL_ROLES)}")
        if self.noise_scale < 0:
            raise DataError("noise_scale must be >= 0")
        if self.dim < 3:
            raise DataError("dim must be >= 3")
        if self.num_levels not in (3, 5):
            raise DataError("num_levels must be 3 or 5")


@dataclass
class Dataset:
    """Dense view of pair embeddings: ``X[q, j, k]`` is query q, doc j, role k."""

    qids: list[str]
    docids: list[list[str]]
    roles: tuple[Role, ...]
    X: np.ndarray  # (Q, D, K, d)
    qrels: Qrels
    queries: QuerySet = field(default_factory=QuerySet)
    rewrites: list[RewriteRecord] = field(default_factory=list)

    @property
    def dim(self) -> int:
        return int(self.X.shape[-1])

    @property
    def labels(self) -> np.ndarray:
        return np.array([[self.qrels.grade(q, d) for d in docs] for q, docs in zip(self.qids, self.docids)])

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.X).tobytes())
        h.update(self.labels.astype(np.int64).tobytes())
        h.update("\x1f".join(self.qids).encode())
        h.update("\x1f".join(d for docs in self.docids for d in docs).encode())
        h.update(",".join(r.label for r in self.roles).encode())
        return h.hexdigest()

    def subset(self, qids: Sequence[str]) -> "Dataset":
        index = {q: i for i, q in enumerate(self.qids)}
        rows = [index[q] for q in qids]
        return Dataset(list(qids), [self.docids[i] for i in rows], self.roles, self.X[rows], self.qrels)

    def select_roles(self, roles: Sequence[Role]) -> "Dataset":
        cols = []
        for r in roles:
            if r not in self.roles:
                raise DataError(f"dataset has no embeddings for role {r.label}")
            cols.append(self.roles.index(r))
        return Dataset(self.qids, self.docids, tuple(roles), self.X[:, :, cols], self.qrels, self.queries, self.rewrites)

    def embeddings(self) -> list[PairEmbedding]:
        return [
            PairEmbedding(q, role, d, self.X[i, j, k])
            for i, (q, docs) in enumerate(zip(self.qids, self.docids))
            for j, d in enumerate(docs)
            for k, role in enumerate(self.roles)
        ]

    @classmethod
    def from_embeddings(cls, records: Sequence[PairEmbedding], qrels: Qrels) -> "Dataset":
        """Pack records into the dense view; every (query, doc) needs every role."""
        if not records:
            raise DataError("no embeddings supplied")
        dim = records[0].dim
        qids: list[str] = []
        docs: dict[str, list[str]] = {}
        roles: list[Role] = []
        table: dict[tuple[str, str, Role], np.ndarray] = {}
        for r in records:
            if r.dim != dim:
                raise DataError(f"dimension mismatch: expected {dim}, got {r.dim}")
            if r.qid not in docs:
                qids.append(r.qid)
                docs[r.qid] = []
            if r.docid not in docs[r.qid]:
                docs[r.qid].append(r.docid)
            if r.role not in roles:
                roles.append(r.role)
            table[(r.qid, r.docid, r.role)] = r.vec
        roles.sort()
        n_docs = {len(v) for v in docs.values()}
        if len(n_docs) != 1:
            raise DataError("every query must have the same number of documents")
        gaps = [
            f"({q}, {d}, {role.label})"
            for q in qids
            for d in docs[q]
            for role in roles
            if (q, d, role) not in table
        ]
        if gaps:
            shown = ", ".join(gaps[:10]) + (" ..." if len(gaps) > 10 else "")
            raise DataError(f"missing {len(gaps)} embedding(s): {shown}")
        X = np.array([[[table[(q, d, r)] for r in roles] for d in docs[q]] for q in qids])
        return cls(qids, [docs[q] for q in qids], tuple(roles), X, qrels)


# -- synthetic data --------------------------------------------------------


_GRADE_QUANTILES = {3: (0.5, 0.8), 5: (0.4, 0.6, 0.75, 0.9)}
# perturbation multiplier per role index; the original query drifts least
ROLE_GAINS = (0.5, 1.0, 1.5, 2.0, 2.5)
STYLE_SIGNAL = 0.4
CORE_NOISE = 0.2
LABEL_NOISE = 0.3


def generate_synthetic(spec: SyntheticSpec) -> Dataset:
    """Seeded desk-scale stand-in for a judged corpus with persona rewrites.

    Each (query, doc) pair has a latent vector ``z``. The first half of
    the coordinates ("core") carries most of the relevance signal, the
    second half ("style") a weaker share; grades quantise that linear
    score plus noise. Role ``k`` sees

        e_k = z + noise_scale * gain_k * s * (M_k z + xi)

    with ``s`` = 1 on style coordinates and ``CORE_NOISE`` on core ones,
    ``M_k`` a fixed per-role warp and ``xi`` fresh noise, so rewrites
    mostly disturb the style coordinates and ``noise_scale = 0`` makes
    all roles identical.
    """
    rng = np.random.default_rng(spec.seed)
    d, Q, D = spec.dim, spec.num_queries, spec.docs_per_query
    roles = ALL_ROLES
    core = d // 2

    w_core = rng.normal(size=core)
    w_core /= np.linalg.norm(w_core)
    w_style = rng.normal(size=d - core)
    w_style *= STYLE_SIGNAL / np.linalg.norm(w_style)
    direction = np.concatenate([w_core, w_style])
    warps = rng.normal(size=(len(roles), d, d)) / np.sqrt(d)
    z = rng.normal(size=(Q, 1, d)) * 0.5 + rng.normal(size=(Q, D, d))
    score = z @ direction + LABEL_NOISE * rng.normal(size=(Q, D))
    cuts = np.quantile(score, _GRADE_QUANTILES[spec.num_levels])
    grades = np.searchsorted(cuts, score, side="right")

    scale = np.concatenate([np.full(core, CORE_NOISE), np.ones(d - core)])
    gains = np.asarray(ROLE_GAINS)[None, None, :, None]
    xi = rng.normal(size=(Q, D, len(roles), d))
    warped = np.einsum("kab,qdb->qdka", warps, z)
    X = z[:, :, None, :] + spec.noise_scale * gains * scale * (warped + xi)

    width = len(str(Q - 1))
    qids = [f"q{i:0{width}d}" for i in range(Q)]
    dwidth = len(str(D - 1))
    docids = [[f"{q}-d{j:0{dwidth}d}" for j in range(D)] for q in qids]
    qrels = Qrels(spec.num_levels)
    for i, q in enumerate(qids):
        for j, doc in enumerate(docids[i]):
            qrels.set(q, doc, int(grades[i, j]))

    queries = QuerySet(Query(q, f"synthetic query {q}") for q in qids)
    rewrites = [
        RewriteRecord(
            qid=q,
            role=role,
            original_text=f"synthetic query {q}",
            rewritten_text=f"synthetic query {q} as {role.label}",
            intent_summary=f"information need of {q}",
            iterations=1,
            s0=1,
            s1=1,
            status=RewriteStatus.ACCEPTED,
            history=(RewriteStep("B_rewrite", f"synthetic query {q} as {role.label}", 1, 1),),
        )
        for q in qids
        for role in roles
        if role is not Role.ORIGINAL
    ]
    return Dataset(qids, docids, roles, X, qrels, queries, rewrites)


def split_queries(data: Dataset, test_fraction: float, seed: int) -> tuple[Dataset, Dataset]:
    """Deterministic query-level split; with ``test_fraction == 0`` both halves are the full set."""
    if test_fraction == 0:
        return data, data
    rng = np.random.default_rng([seed, 0x5EED])
    order = rng.permutation(len(data.qids))
    n_test = max(1, int(round(test_fraction * len(data.qids))))
    if n_test >= len(data.qids):
        raise DataError("test split would leave no training queries")
    test_idx = set(order[:n_test].tolist())
    train = [q for i, q in enumerate(data.qids) if i not in test_idx]
    test = [q for i, q in enumerate(data.qids) if i in test_idx]
    return data.subset(train), data.subset(test)


# -- training --------------------------------------------------------------


@dataclass
class TrainResult:
    params: MmoeParams
    curve: list[LossBreakdown]
    config: TrainConfig
    data_hash: str

    def curve_rows(self) -> list[dict]:
        return [{"epoch": i, **b.as_dict()} for i, b in enumerate(self.curve)]


def _role_columns(data: Dataset, roles: Sequence[Role]) -> list[int]:
    missing = [r.label for r in roles if r not in data.roles]
    if missing:
        raise DataError(f"dataset has no embeddings for role(s) {', '.join(missing)}")
    return [data.roles.index(r) for r in roles]


def _groups(data: Dataset, roles: Sequence[Role]) -> tuple[np.ndarray, np.ndarray]:
    cols = _role_columns(data, roles)
    X = data.X[:, :, cols, :]
    return X.reshape(-1, len(cols), data.dim), data.labels.reshape(-1)


def _objective(params, X, y, role_idx, loss_cfg, roles):
    G, K, d = X.shape
    trace = forward(params, X.reshape(-1, d), np.tile(role_idx, G))
    preds = trace.y_hat.reshape(G, K, -1)
    breakdown, grad = total_loss(preds, y, loss_cfg, roles)
    return breakdown, trace, grad


def train(data: Dataset, config: TrainConfig, init: MmoeParams | None = None) -> TrainResult:
    """Mini-batch gradient descent with momentum on the hybrid objective.

    Batches are sets of (query, doc) groups carrying every included role.
    ``curve[0]`` is the loss before the first update and ``curve[e]`` the
    loss on the full training set after epoch ``e``.
    """
    roles = list(config.roles)
    X, y = _groups(data, roles)
    if y.size and y.max() >= config.num_levels:
        raise DataError(f"labels exceed num_levels={config.num_levels}")
    role_idx = np.array([int(r) for r in roles])
    params = init.copy() if init is not None else init_params(
        data.dim, config.bottleneck, config.num_levels, config.seed, use_mmoe=config.mode.uses_mmoe
    )
    params.use_mmoe = config.mode.uses_mmoe
    loss_cfg = config.loss_config()
    velocity = params.zeros_like()
    shuffle_rng = np.random.default_rng([config.seed, 1])

    def full_loss() -> LossBreakdown:
        breakdown, _, _ = _objective(params, X, y, role_idx, loss_cfg, roles)
        if not np.isfinite(breakdown.total):
            raise TrainingError(f"non-finite loss {breakdown} (lr={config.learning_rate}, alpha={config.alpha})")
        return breakdown

    curve = [full_loss()]
    for epoch in range(1, config.epochs + 1):
        order = shuffle_rng.permutation(len(y))
        for start in range(0, len(order), config.batch_size):
            batch = order[start : start + config.batch_size]
            breakdown, trace, grad = _objective(params, X[batch], y[batch], role_idx, loss_cfg, roles)
            if not np.isfinite(breakdown.total):
                raise TrainingError(f"non-finite loss at epoch {epoch}, batch offset {start}: {breakdown}")
            grads = backward(params, trace, grad.reshape(-1, params.L))
            for (_, p), (_, v), (_, g) in zip(params.tensors(), velocity.tensors(), grads.tensors()):
                v *= config.momentum
                v -= config.learning_rate * g
                p += v
        curve.append(full_loss())
        logger.debug("epoch %d: %s", epoch, curve[-1])
    return TrainResult(params, curve, config, data.fingerprint())


# -- evaluation ------------------------------------------------------------


def expected_grade(y_hat: np.ndarray) -> np.ndarray:
    """Ranking score: sum_c c * P(grade = c)."""
    return y_hat @ np.arange(y_hat.shape[-1], dtype=np.float64)


def score_runs(params: MmoeParams, data: Dataset, roles: Sequence[Role] | None = None, gating="learned", tag="personarank") -> list[RankedRun]:
    if params.d != data.dim:
        raise DataError(f"checkpoint dimension {params.d} does not match data dimension {data.dim}")
    roles = list(data.roles if roles is None else roles)
    cols = _role_columns(data, roles)
    runs = []
    for role, col in zip(roles, cols):
        E = data.X[:, :, col, :].reshape(-1, data.dim)
        scores = expected_grade(forward(params, E, int(role), gating).y_hat).reshape(len(data.qids), -1)
        rankings = {
            q: list(zip(docs, scores[i].tolist())) for i, (q, docs) in enumerate(zip(data.qids, data.docids))
        }
        runs.append(RankedRun(role, rankings, tag=f"{tag}-{role.label}"))
    return runs


def evaluate(params: MmoeParams, data: Dataset, ns: Sequence[int] = (10,), gating="learned") -> tuple[MetricReport, list[RankedRun]]:
    runs = score_runs(params, data, gating=gating)
    report = evaluate_runs(runs, data.qrels, ns)
    report.meta = {"data_hash": data.fingerprint(), "queries": len(data.qids), "gating": gating}
    return report, runs


# -- experiments -----------------------------------------------------------


@dataclass
class Experiment:
    label: str
    config: TrainConfig
    report: MetricReport
    curve: list[LossBreakdown]
    train_hash: str
    test_hash: str


def run_experiment(data: Dataset, config: TrainConfig, ns: Sequence[int] = (10, 20), label: str | None = None) -> Experiment:
    train_set, test_set = split_queries(data, config.test_fraction, config.seed)
    result = train(train_set, config)
    report, _ = evaluate(result.params, test_set.select_roles(config.roles), ns)
    report.meta.update(
        {"config": config.to_dict(), "train_hash": result.data_hash, "final_loss": result.curve[-1].as_dict()}
    )
    return Experiment(label or config.mode.value, config, report, result.curve, result.data_hash, test_set.fingerprint())


def ablation_configs(base: TrainConfig) -> list[TrainConfig]:
    return [replace(base, mode=m) for m in AblationMode]


def ablate(data: Dataset, base: TrainConfig, ns: Sequence[int] = (10, 20)) -> list[Experiment]:
    """Full model and the three ablations, same data split and seed."""
    return [run_experiment(data, cfg, ns) for cfg in ablation_configs(base)]


def sweep_alpha(
    data: Dataset, base: TrainConfig, alphas: Sequence[float] = DEFAULT_ALPHAS, ns: Sequence[int] = (10, 20)
) -> list[Experiment]:
    if not alphas:
        raise DataError("alphas must be non-empty")
    if any(a < 0 for a in alphas):
        raise DataError("alphas must be >= 0")
    return [
        run_experiment(data, replace(base, alpha=float(a), mode=AblationMode.FULL), ns, label=f"alpha={a:g}")
        for a in alphas
    ]


def summary_row(exp: Experiment) -> dict:
    r = exp.report
    row: dict = {"label": exp.label, "mode": exp.config.mode.value, "alpha": exp.config.effective_alpha}
    for n in r.ns:
        row[f"ndcg@{n}"] = r.mean_ndcg(n)
    row["map"] = float(np.mean([v["map"] for v in r.runs.values()]))
    for n in r.ns:
        row[f"vndcg@{n}"] = r.robustness[f"vndcg@{n}"]
    row["vnap"] = r.robustness.get("vnap", 0.0)
    return row


def rows_to_csv(rows: Sequence[dict]) -> str:
    if not rows:
        return ""
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})
    return buf.getvalue()


def format_comparison(rows: Sequence[dict], ns: Sequence[int]) -> str:
    """Metrics as rows, experiments as columns; VNDCG on the e-5 scale."""
    header = ["metric"] + [r["label"] for r in rows]
    lines = [header]
    for n in ns:
        lines.append([f"NDCG@{n}"] + [f"{r[f'ndcg@{n}']:.4f}" for r in rows])
    for n in ns:
        lines.append([f"VNDCG@{n}(e-5)"] + [f"{r[f'vndcg@{n}'] * 1e5:.4g}" for r in rows])
    lines.append(["VNAP"] + [f"{r['vnap']:.4f}" for r in rows])
    widths = [max(len(row[i]) for row in lines) for i in range(len(header))]
    return "\n".join("  ".join(c.rjust(w) for c, w in zip(row, widths)) for row in lines) + "\n"
