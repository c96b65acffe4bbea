"""Robust MMoE ranking head over frozen pair embeddings.

Each role ``k`` has its own bottleneck adapter and gate; one adapter is
shared by all roles. For an embedding ``e``::

    v = A_k(e)            w = A_shared(e)
    g = softmax(G_k e)    h = g[0] * v + g[1] * w
    y_hat = softmax(W_c h + b_c)

where ``A(e) = e + W_up relu(W_down e + b_down) + b_up``. Without the
MMoE block the head is ``softmax(W_c e + b_c)``. Everything is float64 and
gradients are derived by hand.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Iterator, Literal

import numpy as np

from .errors import DataError
from .types import NUM_ROLES, Role

Gating = Literal["learned", "shared", "specific"]

CHECKPOINT_FORMAT = "personarank-mmoe"
CHECKPOINT_VERSION = 1


@dataclass
class AdapterParams:
    W_down: np.ndarray  # (b, d)
    b_down: np.ndarray  # (b,)
    W_up: np.ndarray  # (d, b)
    b_up: np.ndarray  # (d,)

    def arrays(self) -> Iterator[tuple[str, np.ndarray]]:
        for f in fields(self):
            yield f.name, getattr(self, f.name)


@dataclass
class MmoeParams:
    adapters: list[AdapterParams]
    shared: AdapterParams
    gates: np.ndarray  # (K, 2, d)
    W_c: np.ndarray  # (L, d)
    b_c: np.ndarray  # (L,)
    seed: int | None = None
    use_mmoe: bool = True

    @property
    def d(self) -> int:
        return int(self.W_c.shape[1])

    @property
    def b(self) -> int:
        return int(self.shared.W_down.shape[0])

    @property
    def L(self) -> int:
        return int(self.W_c.shape[0])

    @property
    def dims(self) -> dict[str, int]:
        return {"d": self.d, "b": self.b, "L": self.L}

    def tensors(self) -> Iterator[tuple[str, np.ndarray]]:
        """Every trainable array with a stable name, in a fixed order."""
        for k, adapter in enumerate(self.adapters):
            for name, arr in adapter.arrays():
                yield f"adapters.{k}.{name}", arr
        for name, arr in self.shared.arrays():
            yield f"shared.{name}", arr
        yield "gates", self.gates
        yield "W_c", self.W_c
        yield "b_c", self.b_c

    def zeros_like(self) -> "MmoeParams":
        return MmoeParams(
            adapters=[AdapterParams(*(np.zeros_like(a) for _, a in ad.arrays())) for ad in self.adapters],
            shared=AdapterParams(*(np.zeros_like(a) for _, a in self.shared.arrays())),
            gates=np.zeros_like(self.gates),
            W_c=np.zeros_like(self.W_c),
            b_c=np.zeros_like(self.b_c),
            seed=self.seed,
            use_mmoe=self.use_mmoe,
        )

    def copy(self) -> "MmoeParams":
        out = self.zeros_like()
        for (_, dst), (_, src) in zip(out.tensors(), self.tensors()):
            dst[...] = src
        return out

    def validate(self) -> None:
        d, b, L = self.d, self.b, self.L
        if len(self.adapters) != NUM_ROLES:
            raise DataError(f"expected {NUM_ROLES} role adapters, got {len(self.adapters)}")
        expected = {"W_down": (b, d), "b_down": (b,), "W_up": (d, b), "b_up": (d,)}
        for adapter in [*self.adapters, self.shared]:
            for name, arr in adapter.arrays():
                if arr.shape != expected[name]:
                    raise DataError(f"adapter {name} has shape {arr.shape}, expected {expected[name]}")
        if self.gates.shape != (NUM_ROLES, 2, d):
            raise DataError(f"gates have shape {self.gates.shape}, expected {(NUM_ROLES, 2, d)}")
        if self.b_c.shape != (L,):
            raise DataError(f"b_c has shape {self.b_c.shape}, expected {(L,)}")
        if not 2 <= b < d:
            raise DataError(f"bottleneck must satisfy 2 <= b < d, got b={b}, d={d}")
        if L not in (3, 5):
            raise DataError(f"L must be 3 or 5, got {L}")
        for name, arr in self.tensors():
            if not np.all(np.isfinite(arr)):
                raise DataError(f"non-finite values in {name}")


def _glorot(rng: np.random.Generator, rows: int, cols: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (rows + cols))
    return rng.uniform(-limit, limit, size=(rows, cols))


def _adapter(rng: np.random.Generator, d: int, b: int) -> AdapterParams:
    return AdapterParams(_glorot(rng, b, d), np.zeros(b), _glorot(rng, d, b), np.zeros(d))


def init_params(d: int, b: int, L: int, seed: int = 0, use_mmoe: bool = True) -> MmoeParams:
    """Glorot-uniform weights, zero biases, deterministic per seed."""
    if not 2 <= b < d:
        raise DataError(f"bottleneck must satisfy 2 <= b < d, got b={b}, d={d}")
    if L not in (3, 5):
        raise DataError(f"L must be 3 or 5, got {L}")
    rng = np.random.default_rng(seed)
    adapters = [_adapter(rng, d, b) for _ in range(NUM_ROLES)]
    shared = _adapter(rng, d, b)
    gates = np.stack([_glorot(rng, 2, d) for _ in range(NUM_ROLES)])
    W_c = _glorot(rng, L, d)
    return MmoeParams(adapters, shared, gates, W_c, np.zeros(L), seed=seed, use_mmoe=use_mmoe)


def softmax(x: np.ndarray) -> np.ndarray:
    z = x - x.max(axis=-1, keepdims=True)
    ez = np.exp(z)
    return ez / ez.sum(axis=-1, keepdims=True)


def _as_batch(e: np.ndarray, d: int) -> np.ndarray:
    e = np.asarray(e, dtype=np.float64)
    if e.ndim == 1:
        e = e[None, :]
    if e.ndim != 2 or e.shape[1] != d:
        raise DataError(f"embedding dimension {e.shape[-1]} does not match head dimension {d}")
    return e


def adapter_forward(a: AdapterParams, e: np.ndarray) -> np.ndarray:
    d = a.W_up.shape[0]
    batch = _as_batch(e, d)
    out = batch + np.maximum(batch @ a.W_down.T + a.b_down, 0.0) @ a.W_up.T + a.b_up
    return out[0] if np.ndim(e) == 1 else out


@dataclass
class ForwardTrace:
    """Intermediates of a batched forward pass, one row per example.

    ``g`` and the adapter fields are ``None`` when the MMoE block is off.
    """

    e: np.ndarray
    roles: np.ndarray
    h: np.ndarray
    logits: np.ndarray
    y_hat: np.ndarray
    z_k: np.ndarray | None = None
    v: np.ndarray | None = None
    z_s: np.ndarray | None = None
    w: np.ndarray | None = None
    gate_logits: np.ndarray | None = None
    g: np.ndarray | None = None
    gating: str = "learned"
    mixed: bool = True

    def __len__(self) -> int:
        return int(self.e.shape[0])

    def __getitem__(self, i: int) -> "ForwardTrace":
        pick = lambda x: None if x is None else x[i]  # noqa: E731
        return ForwardTrace(
            **{f.name: pick(getattr(self, f.name)) for f in fields(self) if f.name not in ("gating", "mixed")},
            gating=self.gating,
            mixed=self.mixed,
        )


def forward(p: MmoeParams, e: np.ndarray, roles, gating: Gating = "learned") -> ForwardTrace:
    """Batched forward pass; ``roles`` gives the role index of each row."""
    E = _as_batch(e, p.d)
    roles = np.broadcast_to(np.asarray(roles, dtype=np.int64), (E.shape[0],)).copy()
    if roles.size and (roles.min() < 0 or roles.max() >= NUM_ROLES):
        raise DataError(f"role index out of range [0, {NUM_ROLES - 1}]")

    if not p.use_mmoe:
        logits = E @ p.W_c.T + p.b_c
        return ForwardTrace(E, roles, E, logits, softmax(logits), mixed=False, gating=gating)

    n = E.shape[0]
    z_k = np.empty((n, p.b))
    v = np.empty_like(E)
    gate_logits = np.empty((n, 2))
    for k in np.unique(roles):
        m = roles == k
        ad = p.adapters[k]
        z_k[m] = E[m] @ ad.W_down.T + ad.b_down
        v[m] = E[m] + np.maximum(z_k[m], 0.0) @ ad.W_up.T + ad.b_up
        gate_logits[m] = E[m] @ p.gates[k].T
    sh = p.shared
    z_s = E @ sh.W_down.T + sh.b_down
    w = E + np.maximum(z_s, 0.0) @ sh.W_up.T + sh.b_up

    if gating == "learned":
        g = softmax(gate_logits)
    elif gating == "shared":
        g = np.tile([0.0, 1.0], (n, 1))
    elif gating == "specific":
        g = np.tile([1.0, 0.0], (n, 1))
    else:
        raise ValueError(f"unknown gating mode {gating!r}")
    h = g[:, :1] * v + g[:, 1:] * w
    logits = h @ p.W_c.T + p.b_c
    return ForwardTrace(E, roles, h, logits, softmax(logits), z_k, v, z_s, w, gate_logits, g, gating, True)


def mmoe_forward(p: MmoeParams, e: np.ndarray, k: Role | int, gating: Gating = "learned") -> ForwardTrace:
    """Single-example forward pass; the trace holds 1-d arrays."""
    e = np.asarray(e, dtype=np.float64)
    if e.ndim != 1:
        raise DataError("mmoe_forward takes a single embedding vector")
    return forward(p, e[None, :], [int(Role.parse(k))], gating)[0]


def _adapter_backward(ad: AdapterParams, grad: AdapterParams, e, z, dout) -> None:
    a = np.maximum(z, 0.0)
    grad.W_up += dout.T @ a
    grad.b_up += dout.sum(axis=0)
    dz = (dout @ ad.W_up) * (z > 0)
    grad.W_down += dz.T @ e
    grad.b_down += dz.sum(axis=0)


def backward(p: MmoeParams, trace: ForwardTrace, loss_grads: np.ndarray) -> MmoeParams:
    """Gradients of ``sum_i <loss_grads[i], y_hat[i]>`` w.r.t. every parameter.

    ``loss_grads`` holds dLoss/dy_hat per example; the returned structure
    mirrors ``p``.
    """
    gy = np.asarray(loss_grads, dtype=np.float64)
    if gy.ndim == 1:
        gy = gy[None, :]
    y = trace.y_hat if trace.y_hat.ndim == 2 else trace.y_hat[None, :]
    if gy.shape != y.shape:
        raise DataError(f"loss gradient shape {gy.shape} does not match predictions {y.shape}")
    if trace.e.ndim == 1:
        trace = _batch_of_one(trace)

    grad = p.zeros_like()
    dlogits = y * (gy - (gy * y).sum(axis=1, keepdims=True))
    grad.W_c += dlogits.T @ trace.h
    grad.b_c += dlogits.sum(axis=0)
    if not trace.mixed:
        return grad

    dh = dlogits @ p.W_c
    g = trace.g
    dv = g[:, :1] * dh
    dw = g[:, 1:] * dh
    _adapter_backward(p.shared, grad.shared, trace.e, trace.z_s, dw)
    if trace.gating == "learned":
        dg = np.stack([(dh * trace.v).sum(axis=1), (dh * trace.w).sum(axis=1)], axis=1)
        du = g * (dg - (g * dg).sum(axis=1, keepdims=True))
    else:
        du = None
    for k in np.unique(trace.roles):
        m = trace.roles == k
        _adapter_backward(p.adapters[k], grad.adapters[k], trace.e[m], trace.z_k[m], dv[m])
        if du is not None:
            grad.gates[k] += du[m].T @ trace.e[m]
    return grad


def _batch_of_one(t: ForwardTrace) -> ForwardTrace:
    lift = lambda x: None if x is None else np.asarray(x)[None, ...]  # noqa: E731
    return ForwardTrace(
        **{f.name: lift(getattr(t, f.name)) for f in fields(t) if f.name not in ("gating", "mixed")},
        gating=t.gating,
        mixed=t.mixed,
    )


# -- checkpoints -----------------------------------------------------------


def params_to_dict(p: MmoeParams) -> dict:
    return {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "dims": p.dims,
        "seed": p.seed,
        "use_mmoe": p.use_mmoe,
        "tensors": {
            name: {"shape": list(arr.shape), "data": arr.ravel(order="C").tolist()} for name, arr in p.tensors()
        },
    }


def params_from_dict(obj: dict) -> MmoeParams:
    if obj.get("format") != CHECKPOINT_FORMAT:
        raise DataError("not a personarank checkpoint")
    try:
        dims = obj["dims"]
        d, b, L = int(dims["d"]), int(dims["b"]), int(dims["L"])
        p = init_params(d, b, L, seed=0, use_mmoe=bool(obj.get("use_mmoe", True)))
        p.seed = obj.get("seed")
        tensors = obj["tensors"]
        for name, arr in p.tensors():
            t = tensors[name]
            if tuple(t["shape"]) != arr.shape:
                raise DataError(f"checkpoint tensor {name} has shape {t['shape']}, expected {list(arr.shape)}")
            arr[...] = np.asarray(t["data"], dtype=np.float64).reshape(arr.shape)
    except KeyError as exc:
        raise DataError(f"checkpoint missing {exc}") from None
    p.validate()
    return p


def save_checkpoint(path, p: MmoeParams, extra: dict | None = None) -> None:
    obj = params_to_dict(p)
    if extra:
        obj["meta"] = extra
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, sort_keys=True) + "\n", encoding="utf-8")


def load_checkpoint(path) -> MmoeParams:
    path = Path(path)
    if not path.exists():
        raise DataError(f"{path}: no such file")
    try:
        obj = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: {exc.msg}") from None
    return params_from_dict(obj)
