"""Synthetic multi-task training harness.

The experiment family: a frozen base map W_shared is shared by all tasks,
and each task t adds a rank-r residual C_t A* on top of it, where A* is one
orthonormal row basis shared across tasks and the C_t have mutually
orthogonal column spaces. Task inputs are unit Gaussians around a
task-specific mean that lies inside A*'s row space, so a router that sees
the A-projected features can tell tasks apart. Labels are

    y = x W_shared^T + x (C_t A*)^T + sigma * eps.

This is exactly the structure a routed adapter with one shared A and
specialized heads can fit, while a single plain low-rank adapter must
average the conflicting residuals. Training pools are finite (a fixed
number of sequences per task) and evaluation sets are fresh fixed draws, so
single-task runs can overfit their pool and multi-task transfer is measured
honestly: identical budgets and schedules, only the data composition varies.

Arms: frozen (no adapter), lora (one shared plain adapter at rank r),
lora_matched_budget (plain adapter with rank inflated to match the routed
parameter count), multi_lora (one plain adapter per task, hard-routed by
task id), and ilora (shared A, n heads, learned soft routing).

Randomness is organized in named Philox streams off the experiment seed, so
every arm sees identical pools, eval sets, and batch schedules, and reports
are bit-reproducible.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import adapter as ad
from .adapter import ILoRAConfig, ILoRALayer, RoutingTrace, TokenBatch, uniform_tags
from .analysis import ActivationReport, activation_stats
from .numkit import NumericalError, Rng, matmul

ARMS = ("frozen", "lora", "lora_matched_budget", "multi_lora", "ilora")

# Stream layout off the experiment seed. Pools and eval sets are keyed by
# task id, not by position in the trained subset, so single-task and
# multi-task runs see byte-identical per-task data.
STREAM_TASKS = 1
STREAM_INIT = 2
STREAM_BATCH = 3
STREAM_DROPOUT = 4
STREAM_POOL_BASE = 200
STREAM_EVAL_BASE = 300


@dataclass(frozen=True)
class TaskSpec:
    """One synthetic task: input mean shift, residual factor, noise level.

    a_star and w_shared are shared objects across the tasks of one suite.
    """

    task_id: int
    mu: np.ndarray          # (h,) input mean, inside A*'s row space
    C: np.ndarray           # (d, r) residual output factor
    sigma: float
    a_star: np.ndarray      # (r, h), orthonormal rows, shared
    w_shared: np.ndarray    # (d, h), frozen base map, shared

    @property
    def residual(self) -> np.ndarray:
        """The task's rank-r residual map C A* (d x h)."""
        return matmul(self.C, self.a_star)


@dataclass(frozen=True)
class HarnessConfig:
    seed: int = 0
    n_tasks: int = 3
    h: int = 16
    d: int = 16
    r: int = 4
    n_heads: int = 3
    alpha: float = 8.0
    dropout_p: float = 0.0
    seq_len: int = 8
    steps: int = 2000
    batch: int = 32
    lr: float = 1e-2
    schedule: str = "cosine"
    shift: float = 8.0
    sigma: float = 0.1
    n_seq_pool: int = 16
    eval_seqs: int = 128
    log_every: int = 100

    def __post_init__(self):
        for name in ("n_tasks", "h", "d", "r", "n_heads", "seq_len", "steps",
                     "batch", "n_seq_pool", "eval_seqs", "log_every"):
            v = getattr(self, name)
            if not isinstance(v, int) or v < 1:
                raise ValueError(f"config field {name} must be a positive integer, got {v!r}")
        if self.r > min(self.h, self.d):
            raise ValueError(
                f"config field r must satisfy r <= min(h, d) = {min(self.h, self.d)}, "
                f"got {self.r}"
            )
        if self.schedule not in ("cosine", "constant"):
            raise ValueError(f"config field schedule must be cosine or constant, got {self.schedule!r}")
        if not self.lr > 0:
            raise ValueError(f"config field lr must be positive, got {self.lr!r}")
        if self.sigma < 0:
            raise ValueError(f"config field sigma must be >= 0, got {self.sigma!r}")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ValueError(f"config field dropout_p must lie in [0, 1), got {self.dropout_p!r}")

    def adapter_config(self, n: int | None = None, r: int | None = None) -> ILoRAConfig:
        return ILoRAConfig(
            h=self.h,
            d=self.d,
            r=self.r if r is None else r,
            n=self.n_heads if n is None else n,
            alpha=self.alpha if r is None else 2.0 * r,
            dropout_p=self.dropout_p,
        )


@dataclass
class TrainReport:
    """Outcome of one training run, JSON-serializable via to_dict.

    The synergy fields (single_task_loss, per_task_gain, positive_fraction,
    net_score) are None until a synergy comparison fills them in. Attachments
    (loss curve rows, routing traces, trained layers) ride along for callers
    but are not part of the JSON document.
    """

    arm: str
    seed: int
    task_ids: list[int]
    steps: int
    per_task_loss: dict[int, float]
    param_count: int
    activations: dict | None = None
    single_task_loss: dict[int, float] | None = None
    per_task_gain: dict[int, float] | None = None
    positive_fraction: float | None = None
    negative_fraction: float | None = None
    net_score: float | None = None
    loss_rows: list[tuple[int, int, float]] = field(default_factory=list, repr=False)
    traces: list[RoutingTrace] = field(default_factory=list, repr=False)
    layers: dict[str, ILoRALayer] = field(default_factory=dict, repr=False)

    @property
    def total_loss(self) -> float:
        return float(sum(self.per_task_loss.values()))

    def to_dict(self) -> dict:
        return {
            "arm": self.arm,
            "seed": self.seed,
            "task_ids": list(self.task_ids),
            "steps": self.steps,
            "per_task_loss": {str(k): v for k, v in self.per_task_loss.items()},
            "total_loss": self.total_loss,
            "param_count": self.param_count,
            "activations": self.activations,
            "single_task_loss": None
            if self.single_task_loss is None
            else {str(k): v for k, v in self.single_task_loss.items()},
            "per_task_gain": None
            if self.per_task_gain is None
            else {str(k): v for k, v in self.per_task_gain.items()},
            "positive_fraction": self.positive_fraction,
            "negative_fraction": self.negative_fraction,
            "net_score": self.net_score,
        }

    @staticmethod
    def from_dict(doc: dict) -> "TrainReport":
        return TrainReport(
            arm=doc["arm"],
            seed=int(doc["seed"]),
            task_ids=[int(t) for t in doc["task_ids"]],
            steps=int(doc["steps"]),
            per_task_loss={int(k): float(v) for k, v in doc["per_task_loss"].items()},
            param_count=int(doc["param_count"]),
            activations=doc.get("activations"),
            single_task_loss=None
            if doc.get("single_task_loss") is None
            else {int(k): float(v) for k, v in doc["single_task_loss"].items()},
        )


def orthonormal_columns(m: np.ndarray) -> np.ndarray:
    """Modified Gram-Schmidt with one re-orthogonalization pass. Avoids
    LAPACK so generated suites are identical across platforms."""
    m = np.array(m, dtype=np.float64)
    rows, cols = m.shape
    if cols > rows:
        raise ValueError(f"cannot orthonormalize {cols} columns in dimension {rows}")
    q = np.zeros_like(m)
    for j in range(cols):
        v = m[:, j].copy()
        for _ in range(2):
            for i in range(j):
                v -= float(np.sum(q[:, i] * v)) * q[:, i]
        norm = math.sqrt(float(np.sum(v * v)))
        if norm < 1e-12:
            raise ValueError(f"degenerate column {j} during orthonormalization")
        q[:, j] = v / norm
    return q


def generate_tasks(
    n_tasks: int,
    h: int,
    d: int,
    r: int,
    rng: Rng,
    shift: float = 8.0,
    sigma: float = 0.1,
) -> list[TaskSpec]:
    """Draw a task suite: shared orthonormal A*, shared base W_shared, and
    per-task residual factors C_t with mutually orthogonal column spaces
    (exact when d >= n_tasks * r). Mean shifts lie inside A*'s row space.
    """
    if n_tasks < 1:
        raise ValueError(f"n_tasks must be >= 1, got {n_tasks}")
    if r > min(h, d):
        raise ValueError(f"infeasible dims: r={r} exceeds min(h, d)={min(h, d)}")
    a_star = orthonormal_columns(rng.normal(h, r)).T           # (r, h)
    w_shared = rng.normal(d, h, std=math.sqrt(1.0 / h))
    c_seed = rng.normal(d, n_tasks * r)
    if d >= n_tasks * r:
        blocks = orthonormal_columns(c_seed)
        cs = [blocks[:, t * r : (t + 1) * r] for t in range(n_tasks)]
    else:
        cs = [orthonormal_columns(c_seed[:, t * r : (t + 1) * r]) for t in range(n_tasks)]
    m_seed = rng.normal(r, n_tasks)
    if n_tasks <= r:
        dirs = orthonormal_columns(m_seed)
    else:
        dirs = m_seed / np.sqrt((m_seed * m_seed).sum(axis=0, keepdims=True))
    tasks = []
    for t in range(n_tasks):
        mu = shift * matmul(a_star.T, dirs[:, t : t + 1]).ravel()
        tasks.append(
            TaskSpec(
                task_id=t,
                mu=mu,
                C=np.ascontiguousarray(cs[t]),
                sigma=sigma,
                a_star=a_star,
                w_shared=w_shared,
            )
        )
    return tasks


def build_suite(config: HarnessConfig) -> list[TaskSpec]:
    return generate_tasks(
        config.n_tasks,
        config.h,
        config.d,
        config.r,
        Rng(config.seed, STREAM_TASKS),
        shift=config.shift,
        sigma=config.sigma,
    )


def _draw_tokens(task: TaskSpec, rng: Rng, count: int) -> tuple[np.ndarray, np.ndarray]:
    h = task.mu.shape[0]
    d = task.w_shared.shape[0]
    x = task.mu[None, :] + rng.normal(count, h)
    noise = rng.normal(count, d)
    y = matmul(x, task.w_shared.T) + matmul(x, task.residual.T) + task.sigma * noise
    return x, y


def task_pool(task: TaskSpec, config: HarnessConfig) -> tuple[np.ndarray, np.ndarray]:
    """The task's finite training pool, identical across arms and subsets."""
    rng = Rng(config.seed, STREAM_POOL_BASE + task.task_id)
    return _draw_tokens(task, rng, config.n_seq_pool * config.seq_len)


def task_eval(task: TaskSpec, config: HarnessConfig) -> tuple[np.ndarray, np.ndarray]:
    """The task's fixed fresh evaluation set."""
    rng = Rng(config.seed, STREAM_EVAL_BASE + task.task_id)
    return _draw_tokens(task, rng, config.eval_seqs * config.seq_len)


def frozen_loss(task: TaskSpec, config: HarnessConfig) -> float:
    """Eval loss of the bare W_shared path on one task."""
    x, y = task_eval(task, config)
    pred = matmul(x, task.w_shared.T)
    return float(np.mean((pred - y) ** 2))


def expected_frozen_loss(task: TaskSpec) -> float:
    """Analytic expectation of the frozen loss: residual energy plus noise.

    With x ~ N(mu, I), E|x R^T|^2 = |R mu|^2 + tr(R R^T), divided by d for
    the mean-square convention, plus sigma^2.
    """
    r_map = task.residual
    d = r_map.shape[0]
    r_mu = matmul(r_map, task.mu.reshape(-1, 1))
    energy = float(np.sum(r_mu * r_mu)) + float(np.sum(r_map * r_map))
    return energy / d + task.sigma**2


def matched_budget_rank(h: int, d: int, r: int, n: int) -> int:
    """Plain-adapter rank whose parameter count matches the routed layer's,
    capped at min(h, d) to keep the rank bound valid."""
    exact = (r * h + n * d * r + n * r - r) / (h + d)
    return min(min(h, d), max(1, int(math.floor(exact + 0.5))))


class Adam:
    """Adam with bias correction; beta1=0.9, beta2=0.999, eps=1e-8."""

    def __init__(self, shapes: list[tuple[int, int]]):
        self.m = [np.zeros(s) for s in shapes]
        self.v = [np.zeros(s) for s in shapes]
        self.t = 0

    def step(self, params: list[np.ndarray], grads: list[np.ndarray], lr: float) -> list[np.ndarray]:
        self.t += 1
        b1, b2, eps = 0.9, 0.999, 1e-8
        out = []
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m[:] = b1 * m + (1 - b1) * g
            v[:] = b2 * v + (1 - b2) * (g * g)
            m_hat = m / (1 - b1**self.t)
            v_hat = v / (1 - b2**self.t)
            out.append(p - lr * m_hat / (np.sqrt(v_hat) + eps))
        return out


def _lr_at(config: HarnessConfig, step: int) -> float:
    if config.schedule == "constant":
        return config.lr
    return config.lr * 0.5 * (1.0 + math.cos(math.pi * step / config.steps))


def _eval_model(layers: dict[int, ILoRALayer] | ILoRALayer, tasks, config, collect_traces=False):
    """Per-task eval losses (and traces) for a trained model. layers is
    either one shared layer or a per-task-id dict for hard routing."""
    losses: dict[int, float] = {}
    traces: list[RoutingTrace] = []
    tags = uniform_tags(config.seq_len) * config.eval_seqs
    for task in tasks:
        layer = layers[task.task_id] if isinstance(layers, dict) else layers
        x, y = task_eval(task, config)
        batch = TokenBatch(H=x, segment_tags=tags, task_id=task.task_id)
        pred, trace, _ = ad.forward(layer, batch)
        losses[task.task_id] = float(np.mean((pred - y) ** 2))
        if collect_traces:
            traces.append(trace)
    return losses, traces


def _one_hot_traces(tasks, order: list[int], config) -> list[RoutingTrace]:
    """Synthetic traces for hard task-id routing: one-hot rows over the
    per-task adapters, in the adapters' task order."""
    tags = uniform_tags(config.seq_len) * config.eval_seqs
    length = config.eval_seqs * config.seq_len
    traces = []
    for task in tasks:
        s = np.zeros((length, len(order)))
        s[:, order.index(task.task_id)] = 1.0
        traces.append(RoutingTrace(S=s, segment_tags=tuple(tags), task_id=task.task_id))
    return traces


def train(model_kind: str, tasks: list[TaskSpec], config: HarnessConfig, rng: Rng) -> TrainReport:
    """Train one arm on the given tasks and evaluate on their fixed eval sets.

    The passed rng drives layer initialization (and dropout, through a
    derived stream); pools, eval sets, and the batch schedule come from
    streams keyed only by config.seed and task ids, so arms are compared on
    identical data. Loss rows are logged on the eval sets at log_every
    cadence. Raises NumericalError with the step index if the loss diverges.
    """
    if model_kind not in ARMS:
        raise ValueError(f"unknown model kind {model_kind!r}; expected one of {ARMS}")
    if not tasks:
        raise ValueError("train requires at least one task")
    ids = [t.task_id for t in tasks]
    if len(set(ids)) != len(ids):
        raise ValueError(f"duplicate task ids in {ids}")
    w_shared = tasks[0].w_shared
    for t in tasks[1:]:
        if not np.array_equal(t.w_shared, w_shared):
            raise ValueError("tasks do not share a common base map")

    pools = {t.task_id: task_pool(t, config) for t in tasks}

    # model construction; every arm's frozen base is the suite's shared map
    hard_routing = model_kind == "multi_lora"
    if model_kind == "ilora":
        layer_map = {None: ad.init(config.adapter_config(), rng)}
    elif model_kind == "lora":
        layer_map = {None: ad.plain_lora(config.adapter_config(n=1), rng)}
    elif model_kind == "lora_matched_budget":
        r2 = matched_budget_rank(config.h, config.d, config.r, config.n_heads)
        layer_map = {None: ad.plain_lora(config.adapter_config(n=1, r=r2), rng)}
    elif model_kind == "multi_lora":
        layer_map = {t.task_id: ad.plain_lora(config.adapter_config(n=1), rng) for t in tasks}
    else:  # frozen: an untrained zero-update adapter, forward is the base path
        layer_map = {None: ad.plain_lora(config.adapter_config(n=1), rng)}
    for layer in layer_map.values():
        layer.W0 = w_shared

    def current_layers():
        if hard_routing:
            return dict(layer_map)
        return layer_map[None]

    n_params = sum(ad.param_count(l) for l in layer_map.values())
    if model_kind == "frozen":
        n_params = 0

    batch_rng = Rng(config.seed, STREAM_BATCH)
    drop_rng = Rng(config.seed, STREAM_DROPOUT)
    opts = {key: Adam([p.shape for p in l.trainable()]) for key, l in layer_map.items()}
    tags = uniform_tags(config.seq_len) * config.batch
    loss_rows: list[tuple[int, int, float]] = []

    def log_eval(step: int):
        losses, _ = _eval_model(current_layers(), tasks, config, collect_traces=False)
        for t in tasks:
            loss_rows.append((step, t.task_id, losses[t.task_id]))

    log_eval(0)
    train_model = model_kind != "frozen"
    L = config.seq_len
    for step in range(config.steps):
        slot_tasks = batch_rng.integers(0, len(tasks), size=config.batch)
        slot_seqs = batch_rng.integers(0, config.n_seq_pool, size=config.batch)
        if train_model:
            lr = _lr_at(config, step)
            total = config.batch * L * config.d
            if hard_routing:
                step_loss = 0.0
                for t in tasks:
                    rows = np.nonzero(slot_tasks == ids.index(t.task_id))[0]
                    if rows.size == 0:
                        continue
                    xs = np.concatenate(
                        [pools[t.task_id][0][s * L : (s + 1) * L] for s in slot_seqs[rows]]
                    )
                    ys = np.concatenate(
                        [pools[t.task_id][1][s * L : (s + 1) * L] for s in slot_seqs[rows]]
                    )
                    layer = layer_map[t.task_id]
                    batch = TokenBatch(
                        H=xs, segment_tags=uniform_tags(L) * rows.size, task_id=t.task_id
                    )
                    pred, _, cache = ad.forward(
                        layer, batch, train_mode=True, rng=drop_rng
                    )
                    diff = pred - ys
                    step_loss += float(np.sum(diff * diff))
                    grads = ad.backward(layer, cache, 2.0 * diff / total)
                    new = opts[t.task_id].step(
                        layer.trainable(), [grads.dA, *grads.dB, grads.dWr], lr
                    )
                    layer.set_trainable(new)
                step_loss /= total
            else:
                xs = np.concatenate(
                    [
                        pools[ids[ti]][0][s * L : (s + 1) * L]
                        for ti, s in zip(slot_tasks, slot_seqs)
                    ]
                )
                ys = np.concatenate(
                    [
                        pools[ids[ti]][1][s * L : (s + 1) * L]
                        for ti, s in zip(slot_tasks, slot_seqs)
                    ]
                )
                layer = layer_map[None]
                batch = TokenBatch(H=xs, segment_tags=tags)
                pred, _, cache = ad.forward(layer, batch, train_mode=True, rng=drop_rng)
                diff = pred - ys
                step_loss = float(np.sum(diff * diff)) / total
                grads = ad.backward(layer, cache, 2.0 * diff / total)
                new = opts[None].step(layer.trainable(), [grads.dA, *grads.dB, grads.dWr], lr)
                layer.set_trainable(new)
            if not math.isfinite(step_loss):
                raise NumericalError(f"training loss diverged to non-finite at step {step}")
        if (step + 1) % config.log_every == 0 or step == config.steps - 1:
            log_eval(step + 1)

    final_losses, real_traces = _eval_model(current_layers(), tasks, config, collect_traces=True)
    if model_kind == "multi_lora":
        traces = _one_hot_traces(tasks, ids, config)
    elif model_kind == "frozen":
        traces = []
    else:
        traces = real_traces
    activations = activation_stats(traces).to_dict() if traces else None

    if hard_routing:
        layers = {f"task{t.task_id}": layer_map[t.task_id] for t in tasks}
    else:
        layers = {"adapter": layer_map[None]}
    return TrainReport(
        arm=model_kind,
        seed=config.seed,
        task_ids=ids,
        steps=config.steps,
        per_task_loss=final_losses,
        param_count=n_params,
        activations=activations,
        loss_rows=loss_rows,
        traces=traces,
        layers=layers,
    )


def run_arm(model_kind: str, config: HarnessConfig, task_subset: list[int] | None = None) -> TrainReport:
    """Convenience wrapper: build the suite for config.seed and train one arm
    on all tasks or a subset of task ids."""
    tasks = build_suite(config)
    if task_subset is not None:
        by_id = {t.task_id: t for t in tasks}
        missing = [t for t in task_subset if t not in by_id]
        if missing:
            raise ValueError(f"unknown task ids {missing}; suite has {sorted(by_id)}")
        tasks = [by_id[t] for t in task_subset]
    return train(model_kind, tasks, config, Rng(config.seed, STREAM_INIT))


def synergy_report(multi: TrainReport, singles: list[TrainReport]) -> dict:
    """Per-task gains of multi-task training over single-task baselines,
    with the positive fraction and net score. Fails on mismatched task sets.
    """
    single_by_task: dict[int, float] = {}
    for rep in singles:
        if len(rep.task_ids) != 1:
            raise ValueError(
                f"each single-task report must cover exactly one task, got {rep.task_ids}"
            )
        t = rep.task_ids[0]
        if t in single_by_task:
            raise ValueError(f"duplicate single-task report for task {t}")
        single_by_task[t] = rep.per_task_loss[t]
    if set(single_by_task) != set(multi.task_ids):
        raise ValueError(
            f"task sets differ: multi has {sorted(multi.task_ids)}, "
            f"singles cover {sorted(single_by_task)}"
        )
    gains = {t: single_by_task[t] - multi.per_task_loss[t] for t in multi.task_ids}
    n = len(gains)
    pos = sum(1 for g in gains.values() if g > 0) / n
    neg = sum(1 for g in gains.values() if g < 0) / n
    return {
        "task_ids": sorted(multi.task_ids),
        "multi_task_loss": {str(t): multi.per_task_loss[t] for t in multi.task_ids},
        "single_task_loss": {str(t): single_by_task[t] for t in multi.task_ids},
        "per_task_gain": {str(t): gains[t] for t in multi.task_ids},
        "positive_fraction": pos,
        "negative_fraction": neg,
        "net_score": pos - neg,
    }


def apply_synergy(multi: TrainReport, singles: list[TrainReport]) -> TrainReport:
    """Copy of the multi report with the synergy fields filled in."""
    summary = synergy_report(multi, singles)
    out = replace(multi)
    out.single_task_loss = {int(k): v for k, v in summary["single_task_loss"].items()}
    out.per_task_gain = {int(k): v for k, v in summary["per_task_gain"].items()}
    out.positive_fraction = summary["positive_fraction"]
    out.negative_fraction = summary["negative_fraction"]
    out.net_score = summary["net_score"]
    return out


def pooled_net(summaries: list[dict]) -> dict:
    """Pool per-task outcomes across several synergy summaries (for example
    one per seed): fraction of (task, run) pairs improved minus degraded."""
    if not summaries:
        raise ValueError("pooled_net requires at least one summary")
    pos = neg = total = 0
    for s in summaries:
        for g in s["per_task_gain"].values():
            total += 1
            if g > 0:
                pos += 1
            elif g < 0:
                neg += 1
    return {
        "pairs": total,
        "positive_fraction": pos / total,
        "negative_fraction": neg / total,
        "net_score": (pos - neg) / total,
    }


def losses_to_csv(rows: list[tuple[int, int, float]]) -> str:
    lines = ["step,task_id,loss"]
    lines += [f"{step},{task},{loss:.17g}" for step, task, loss in rows]
    return "\n".join(lines) + "\n"
