"""Routed low-rank adapter layer with exact analytic gradients.

A frozen linear map W0 (d x h) is augmented by a shared down-projection
A (r x h), n specialized up-projection heads B_i (d x r), and a router
Wr (n x r) that produces token-level softmax gates over the heads:

    P     = H A^T                       shared rank-r projection
    S     = row_softmax(P Wr^T)         per-token routing weights
    dH    = sum_i diag(S[:, i]) P B_i^T
    H_out = H W0^T + (alpha / r) dH

With n = 1 the gate is identically 1 and the layer collapses exactly to a
plain low-rank adapter. All B_i start at zero, so a freshly initialized
layer reproduces the frozen path bit for bit.

backward returns hand-derived gradients for A, every B_i, Wr and the input
H, including the routing path through the softmax (S depends on A both
through the head values and through the router logits). The derivation is
gated by central finite differences in the test suite.

Dropout, when enabled in train mode, is applied to H on the adapter branch
only (the frozen path consumes raw H), with inverted scaling 1/(1 - p);
the router therefore sees the dropped-out projection.
"""

from __future__ import annotations

import base64
import binascii
import dataclasses
import json
from dataclasses import dataclass, field

import numpy as np

from . import numkit
from .numkit import Rng, ShapeError, as_matrix, matmul, row_softmax

SEGMENT_TAGS = ("visual", "audio", "text")

CHECKPOINT_VERSION = 1


class CheckpointError(Exception):
    """Base class for checkpoint load failures."""


class CheckpointVersionError(CheckpointError):
    """Checkpoint file declares an unsupported format version."""


class CheckpointShapeError(CheckpointError):
    """Tensor dimensions disagree with the declared layer config."""


class CheckpointDataError(CheckpointError):
    """Checkpoint payload is structurally corrupt (JSON, keys, or base64)."""


@dataclass(frozen=True)
class ILoRAConfig:
    """Layer dimensions and hyperparameters.

    h: input width, d: output width, r: rank, n: head count,
    alpha: update scale (applied as alpha / r), dropout_p: in [0, 1).
    """

    h: int
    d: int
    r: int
    n: int
    alpha: float
    dropout_p: float = 0.0

    def __post_init__(self):
        for name in ("h", "d", "r", "n"):
            v = getattr(self, name)
            if not isinstance(v, int) or v < 1:
                raise ValueError(f"config field {name} must be a positive integer, got {v!r}")
        if self.r > min(self.h, self.d):
            raise ValueError(
                f"config field r must satisfy 1 <= r <= min(h, d) = "
                f"{min(self.h, self.d)}, got {self.r}"
            )
        if not self.alpha > 0:
            raise ValueError(f"config field alpha must be positive, got {self.alpha!r}")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ValueError(
                f"config field dropout_p must lie in [0, 1), got {self.dropout_p!r}"
            )

    @property
    def scaling(self) -> float:
        return self.alpha / self.r


@dataclass
class ILoRALayer:
    """Frozen W0 plus trainable {A, B_1..B_n, Wr}. W0 is never updated."""

    config: ILoRAConfig
    W0: np.ndarray
    A: np.ndarray
    B: list[np.ndarray]
    Wr: np.ndarray

    def trainable(self) -> list[np.ndarray]:
        """Trainable parameters in canonical order: A, B_0..B_{n-1}, Wr."""
        return [self.A, *self.B, self.Wr]

    def set_trainable(self, params: list[np.ndarray]) -> None:
        n = self.config.n
        if len(params) != n + 2:
            raise ShapeError(f"expected {n + 2} parameter tensors, got {len(params)}")
        self.A = params[0]
        self.B = list(params[1 : 1 + n])
        self.Wr = params[1 + n]

    def copy(self) -> "ILoRALayer":
        return ILoRALayer(
            config=self.config,
            W0=self.W0.copy(),
            A=self.A.copy(),
            B=[b.copy() for b in self.B],
            Wr=self.Wr.copy(),
        )


@dataclass(frozen=True)
class TokenBatch:
    """A token matrix H (L x h) with per-token segment tags and a task label."""

    H: np.ndarray
    segment_tags: tuple[str, ...]
    task_id: int = 0

    def __post_init__(self):
        h = as_matrix(self.H, "H")
        object.__setattr__(self, "H", h)
        tags = tuple(self.segment_tags)
        object.__setattr__(self, "segment_tags", tags)
        if len(tags) != h.shape[0]:
            raise ShapeError(
                f"segment_tags length {len(tags)} does not match L={h.shape[0]}"
            )
        for t in tags:
            if t not in SEGMENT_TAGS:
                raise ValueError(f"unknown segment tag {t!r}; expected one of {SEGMENT_TAGS}")


def uniform_tags(length: int) -> tuple[str, ...]:
    """Position-block tags: a ceil-third visual, a third audio, the rest text."""
    n_v = (length + 2) // 3
    n_a = (length + 1) // 3
    return ("visual",) * n_v + ("audio",) * n_a + ("text",) * (length - n_v - n_a)


@dataclass
class RoutingTrace:
    """Per-token routing weights S (L x n) plus the batch's token metadata."""

    S: np.ndarray
    segment_tags: tuple[str, ...]
    task_id: int

    @property
    def n(self) -> int:
        return self.S.shape[1]


@dataclass
class Gradients:
    dA: np.ndarray
    dB: list[np.ndarray]
    dWr: np.ndarray
    dH: np.ndarray


@dataclass
class ForwardCache:
    """Intermediates captured by forward for the matching backward call."""

    Hd: np.ndarray          # adapter-branch input (post-dropout in train mode)
    P: np.ndarray
    S: np.ndarray
    U: list[np.ndarray]     # head values P B_i^T
    mask: np.ndarray | None  # inverted-dropout mask, None in eval / p = 0
    param_ids: tuple[int, ...] = field(repr=False, default=())


def init(config: ILoRAConfig, rng: Rng) -> ILoRALayer:
    """Draw a fresh layer. Draw order: W0, then A, then Wr; all B_i are zero.

    W0 ~ Gaussian(0, 1/h) (variance 1/h), A is Kaiming-uniform over fan-in h,
    Wr ~ Gaussian with std 0.02 to break routing symmetry. Because every B_i
    starts at zero the layer's forward equals the frozen path exactly.
    """
    if not isinstance(config, ILoRAConfig):
        config = ILoRAConfig(**config)
    w0 = rng.normal(config.d, config.h, std=float(np.sqrt(1.0 / config.h)))
    bound = float(np.sqrt(6.0 / config.h))
    a = rng.uniform(config.r, config.h, -bound, bound)
    b = [np.zeros((config.d, config.r)) for _ in range(config.n)]
    wr = rng.normal(config.n, config.r, std=0.02)
    return ILoRALayer(config=config, W0=w0, A=a, B=b, Wr=wr)


def plain_lora(config: ILoRAConfig, rng: Rng) -> ILoRALayer:
    """The n = 1 special case: one head, degenerate router, textbook behavior."""
    if config.n != 1:
        config = dataclasses.replace(config, n=1)
    return init(config, rng)


def param_count(layer: ILoRALayer) -> int:
    """Trainable entries: r*h + n*d*r + n*r. The frozen W0 is excluded."""
    c = layer.config
    return c.r * c.h + c.n * c.d * c.r + c.n * c.r


def forward(
    layer: ILoRALayer,
    batch: TokenBatch,
    train_mode: bool = False,
    rng: Rng | None = None,
) -> tuple[np.ndarray, RoutingTrace, ForwardCache]:
    """Apply the layer to a token batch.

    Returns (H_out, trace, cache). Eval mode is deterministic and never
    consumes randomness; train mode requires an rng when dropout_p > 0.
    """
    cfg = layer.config
    H = batch.H
    if H.shape[1] != cfg.h:
        raise ShapeError(f"batch width mismatch: expected h={cfg.h}, got {H.shape[1]}")

    mask = None
    Hd = H
    if train_mode and cfg.dropout_p > 0.0:
        if rng is None:
            raise ValueError("train-mode forward with dropout_p > 0 requires an rng")
        keep = rng.random(H.shape[0], H.shape[1]) >= cfg.dropout_p
        mask = keep.astype(np.float64) / (1.0 - cfg.dropout_p)
        Hd = H * mask

    P = matmul(Hd, layer.A.T)
    S = row_softmax(matmul(P, layer.Wr.T))
    U = [matmul(P, Bi.T) for Bi in layer.B]
    delta = np.zeros((H.shape[0], cfg.d))
    for i in range(cfg.n):
        delta += S[:, i : i + 1] * U[i]
    H_out = matmul(H, layer.W0.T) + cfg.scaling * delta

    trace = RoutingTrace(S=S.copy(), segment_tags=batch.segment_tags, task_id=batch.task_id)
    cache = ForwardCache(
        Hd=Hd,
        P=P,
        S=S,
        U=U,
        mask=mask,
        param_ids=tuple(id(p) for p in layer.trainable()),
    )
    return H_out, trace, cache


def backward(layer: ILoRALayer, cache: ForwardCache, dH_out: np.ndarray) -> Gradients:
    """Exact gradients of a scalar loss with upstream gradient dH_out.

    Both paths through A are included: the value path P B_i^T and the routing
    path S(P Wr^T). The cache must come from a forward on this exact layer
    state; swapped parameters invalidate it.
    """
    if cache.param_ids != tuple(id(p) for p in layer.trainable()):
        raise ValueError("stale cache: layer parameters changed since the forward pass")
    cfg = layer.config
    dY = as_matrix(dH_out, "dH_out")
    if dY.shape != (cache.Hd.shape[0], cfg.d):
        raise ShapeError(
            f"dH_out shape {dY.shape} does not match output shape "
            f"({cache.Hd.shape[0]}, {cfg.d})"
        )
    c = cfg.scaling
    P, S, U = cache.P, cache.S, cache.U

    dB: list[np.ndarray] = []
    dP = np.zeros_like(P)
    dS = np.zeros_like(S)
    for i in range(cfg.n):
        dUi = c * S[:, i : i + 1] * dY
        dB.append(matmul(dUi.T, P))
        dP += matmul(dUi, layer.B[i])
        dS[:, i] = c * np.sum(dY * U[i], axis=1)
    # softmax backward, rowwise: dG = S * (dS - <dS, S>)
    dG = S * (dS - np.sum(dS * S, axis=1, keepdims=True))
    dWr = matmul(dG.T, P)
    dP += matmul(dG, layer.Wr)
    dA = matmul(dP.T, cache.Hd)
    dH = matmul(dY, layer.W0)
    dHd = matmul(dP, layer.A)
    if cache.mask is not None:
        dHd = dHd * cache.mask
    dH = dH + dHd
    return Gradients(dA=dA, dB=dB, dWr=dWr, dH=dH)


def drop_head(layer: ILoRALayer, i: int) -> ILoRALayer:
    """Copy of the layer with head i zeroed. The router is left untouched, so
    routing mass still flows to the dead head."""
    if not 0 <= i < layer.config.n:
        raise IndexError(f"head index {i} out of range for n={layer.config.n}")
    out = layer.copy()
    out.B[i] = np.zeros_like(out.B[i])
    return out


def gradient_check(
    seed: int = 0,
    instances: int = 20,
    L: int = 4,
    h: int = 8,
    d: int = 6,
    r: int = 3,
    n: int = 3,
    step: float = 1e-6,
    tolerance: float = 1e-6,
    backward_fn=None,
) -> dict:
    """Gate the analytic backward against central finite differences.

    For each random instance, the loss is a fixed random-weighted sum of the
    layer output; every trainable tensor and the input H are checked. Returns
    a report with per-tensor worst relative errors; ok is False iff any
    exceeds the tolerance. backward_fn is injectable for negative controls.
    """
    if backward_fn is None:
        backward_fn = backward
    cfg = ILoRAConfig(h=h, d=d, r=r, n=n, alpha=2.0 * r, dropout_p=0.0)
    worst: dict[str, dict] = {}
    failures: list[str] = []

    def rel_err(analytic: np.ndarray, fd: np.ndarray) -> float:
        scale = max(float(np.max(np.abs(fd))), 1e-8)
        return float(np.max(np.abs(analytic - fd))) / scale

    for k in range(instances):
        rng = Rng(seed, stream=1000 + k)
        layer = init(cfg, rng)
        for b in layer.B:
            b += rng.normal(d, r, std=0.5)
        H = rng.normal(L, h)
        weights = rng.normal(L, d)
        batch = TokenBatch(H=H, segment_tags=uniform_tags(L))

        out, _, cache = forward(layer, batch)
        grads = backward_fn(layer, cache, weights)

        def loss_with(name: str, value: np.ndarray) -> float:
            trial = layer.copy()
            if name == "A":
                trial.A = value
            elif name == "Wr":
                trial.Wr = value
            elif name.startswith("B."):
                trial.B[int(name[2:])] = value
            got, _, _ = forward(
                trial, TokenBatch(H=H, segment_tags=batch.segment_tags)
            )
            return float(np.sum(weights * got))

        checks: list[tuple[str, np.ndarray, np.ndarray]] = [
            ("A", grads.dA, layer.A),
            ("Wr", grads.dWr, layer.Wr),
        ]
        for i in range(n):
            checks.append((f"B.{i}", grads.dB[i], layer.B[i]))
        for name, analytic, value in checks:
            fd = numkit.finite_diff_grad(lambda v, nm=name: loss_with(nm, v), value, step)
            e = rel_err(analytic, fd)
            entry = worst.setdefault(name, {"max_rel_err": 0.0, "instance": 0})
            if e > entry["max_rel_err"]:
                worst[name] = {"max_rel_err": e, "instance": k}
            if e > tolerance:
                failures.append(f"{name} at instance {k}: rel err {e:.3e}")

        def loss_h(hv: np.ndarray) -> float:
            got, _, _ = forward(
                layer, TokenBatch(H=hv, segment_tags=batch.segment_tags)
            )
            return float(np.sum(weights * got))

        fd_h = numkit.finite_diff_grad(loss_h, H, step)
        e = rel_err(grads.dH, fd_h)
        entry = worst.setdefault("H", {"max_rel_err": 0.0, "instance": 0})
        if e > entry["max_rel_err"]:
            worst["H"] = {"max_rel_err": e, "instance": k}
        if e > tolerance:
            failures.append(f"H at instance {k}: rel err {e:.3e}")

    if n == 1 and "Wr" in worst:
        worst["Wr"]["skipped_as_zero"] = True

    return {
        "ok": not failures,
        "instances": instances,
        "dims": {"L": L, "h": h, "d": d, "r": r, "n": n},
        "tolerance": tolerance,
        "worst": worst,
        "failures": failures,
    }


def checkpoint_to_dict(layer: ILoRALayer) -> dict:
    """The checkpoint document: JSON envelope, base64 row-major f64 tensors."""
    cfg = layer.config
    tensors = [("W0", layer.W0), ("A", layer.A)]
    tensors += [(f"B.{i}", layer.B[i]) for i in range(cfg.n)]
    tensors.append(("Wr", layer.Wr))
    return {
        "version": CHECKPOINT_VERSION,
        "config": {
            "h": cfg.h,
            "d": cfg.d,
            "r": cfg.r,
            "n": cfg.n,
            "alpha": cfg.alpha,
            "dropout_p": cfg.dropout_p,
        },
        "tensors": [
            {
                "name": name,
                "rows": int(t.shape[0]),
                "cols": int(t.shape[1]),
                "data_b64": base64.b64encode(
                    np.ascontiguousarray(t, dtype="<f8").tobytes()
                ).decode("ascii"),
            }
            for name, t in tensors
        ],
    }


def save_checkpoint(layer: ILoRALayer, path) -> None:
    with open(path, "w", encoding="ascii") as fh:
        json.dump(checkpoint_to_dict(layer), fh, indent=1)
        fh.write("\n")


def load_checkpoint_dict(doc: dict) -> ILoRALayer:
    """Rebuild a layer from a parsed checkpoint document."""
    if not isinstance(doc, dict):
        raise CheckpointDataError("checkpoint root must be a JSON object")
    version = doc.get("version")
    if version != CHECKPOINT_VERSION:
        raise CheckpointVersionError(
            f"unsupported checkpoint version {version!r}; expected {CHECKPOINT_VERSION}"
        )
    try:
        cfg_doc = doc["config"]
        cfg = ILoRAConfig(
            h=int(cfg_doc["h"]),
            d=int(cfg_doc["d"]),
            r=int(cfg_doc["r"]),
            n=int(cfg_doc["n"]),
            alpha=float(cfg_doc["alpha"]),
            dropout_p=float(cfg_doc["dropout_p"]),
        )
        entries = {t["name"]: t for t in doc["tensors"]}
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointDataError(f"malformed checkpoint structure: {exc}") from exc

    expected = {"W0": (cfg.d, cfg.h), "A": (cfg.r, cfg.h), "Wr": (cfg.n, cfg.r)}
    for i in range(cfg.n):
        expected[f"B.{i}"] = (cfg.d, cfg.r)
    if set(entries) != set(expected):
        raise CheckpointDataError(
            f"tensor set mismatch: got {sorted(entries)}, expected {sorted(expected)}"
        )

    def decode(name: str) -> np.ndarray:
        entry = entries[name]
        rows, cols = int(entry["rows"]), int(entry["cols"])
        if (rows, cols) != expected[name]:
            raise CheckpointShapeError(
                f"tensor {name} has shape ({rows}, {cols}), expected {expected[name]}"
            )
        try:
            raw = base64.b64decode(entry["data_b64"], validate=True)
        except (binascii.Error, TypeError) as exc:
            raise CheckpointDataError(f"tensor {name}: corrupt base64 payload") from exc
        if len(raw) != rows * cols * 8:
            raise CheckpointDataError(
                f"tensor {name}: payload holds {len(raw)} bytes, expected {rows * cols * 8}"
            )
        return np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(rows, cols)

    return ILoRALayer(
        config=cfg,
        W0=decode("W0"),
        A=decode("A"),
        B=[decode(f"B.{i}") for i in range(cfg.n)],
        Wr=decode("Wr"),
    )


def load_checkpoint(path) -> ILoRALayer:
    """Read a checkpoint file. Version, shape, and payload corruption raise
    distinct error classes."""
    try:
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise CheckpointDataError(f"checkpoint is not valid JSON: {exc}") from exc
    return load_checkpoint_dict(doc)
