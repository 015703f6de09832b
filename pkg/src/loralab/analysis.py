"""Routing diagnostics: head-weight similarity, activation statistics, and
trace export for external plotting.

Similarity is cosine similarity between flattened head weight matrices,
which is scale-free. Activation statistics are token-weighted means of the
routing rows, grouped overall and per task, with the Shannon entropy
(natural log) of each per-task mean as a compactness measure.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np

from .adapter import ILoRALayer, RoutingTrace


@dataclass
class SimilarityReport:
    """Pairwise head similarities averaged across layers.

    Entries are None where undefined (a zero-norm head has no direction, so
    its similarities are reported as undefined rather than NaN).
    """

    pairwise: list[list[float | None]]
    mean_offdiag: float | None
    per_layer: list[list[list[float | None]]]

    def to_dict(self) -> dict:
        return {
            "pairwise": self.pairwise,
            "mean_offdiag": self.mean_offdiag,
            "per_layer": self.per_layer,
        }


@dataclass
class ActivationReport:
    per_head_mean: list[float]
    per_task: dict[int, list[float]]
    entropy_per_task: dict[int, float]

    def to_dict(self) -> dict:
        return {
            "per_head_mean": self.per_head_mean,
            "per_task": {str(k): v for k, v in self.per_task.items()},
            "entropy_per_task": {str(k): v for k, v in self.entropy_per_task.items()},
        }


def _layer_similarity(layer: ILoRALayer) -> list[list[float | None]]:
    n = layer.config.n
    flats = [b.ravel() for b in layer.B]
    norms = [float(np.linalg.norm(f)) for f in flats]
    out: list[list[float | None]] = [[None] * n for _ in range(n)]
    for i in range(n):
        for j in range(n):
            if norms[i] == 0.0 or norms[j] == 0.0:
                continue
            out[i][j] = float(np.dot(flats[i], flats[j]) / (norms[i] * norms[j]))
    return out


def head_similarity(layers: list[ILoRALayer]) -> SimilarityReport:
    """Cosine similarity between flattened B heads, per layer and averaged.

    The summary matrix averages each (i, j) entry across the layers where it
    is defined; depth-resolved values are kept in per_layer.
    """
    if not layers:
        raise ValueError("head_similarity requires at least one layer")
    n = layers[0].config.n
    for layer in layers:
        if layer.config.n != n:
            raise ValueError(
                f"all layers must share the head count, got {layer.config.n} and {n}"
            )
    per_layer = [_layer_similarity(layer) for layer in layers]

    pairwise: list[list[float | None]] = [[None] * n for _ in range(n)]
    for i in range(n):
        for j in range(n):
            vals = [m[i][j] for m in per_layer if m[i][j] is not None]
            if vals:
                pairwise[i][j] = float(np.mean(vals))

    offdiag = [
        pairwise[i][j]
        for i in range(n)
        for j in range(n)
        if i != j and pairwise[i][j] is not None
    ]
    mean_offdiag = float(np.mean(offdiag)) if offdiag else None
    return SimilarityReport(pairwise=pairwise, mean_offdiag=mean_offdiag, per_layer=per_layer)


def activation_stats(traces: list[RoutingTrace]) -> ActivationReport:
    """Token-weighted routing means, overall and grouped by task id."""
    if not traces:
        raise ValueError("activation_stats requires at least one trace")
    n = traces[0].n
    for t in traces:
        if t.n != n:
            raise ValueError(f"all traces must share n, got {t.n} and {n}")

    stacked = np.concatenate([t.S for t in traces], axis=0)
    per_head_mean = stacked.mean(axis=0)

    per_task: dict[int, np.ndarray] = {}
    for task in sorted({t.task_id for t in traces}):
        rows = np.concatenate([t.S for t in traces if t.task_id == task], axis=0)
        per_task[task] = rows.mean(axis=0)

    def entropy(p: np.ndarray) -> float:
        nz = p[p > 0]
        return float(-(nz * np.log(nz)).sum())

    return ActivationReport(
        per_head_mean=[float(x) for x in per_head_mean],
        per_task={k: [float(x) for x in v] for k, v in per_task.items()},
        entropy_per_task={k: entropy(v) for k, v in per_task.items()},
    )


def traces_to_csv(traces: list[RoutingTrace], n: int | None = None) -> str:
    """Render traces as CSV text: token_index, task_id, segment_tag, s_0..s_{n-1}.

    token_index counts within each trace, so a reader can recover trace
    boundaries from the resets. Floats are written at 17 significant digits
    for lossless 64-bit round-trips. An empty trace list needs an explicit
    n to size the header (an untrained run still writes a schema-valid file).
    """
    if not traces:
        if n is None:
            raise ValueError("traces_to_csv requires at least one trace or an explicit n")
    else:
        n = traces[0].n
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["token_index", "task_id", "segment_tag"] + [f"s_{i}" for i in range(n)])
    for trace in traces:
        for idx in range(trace.S.shape[0]):
            row = [str(idx), str(trace.task_id), trace.segment_tags[idx]]
            row += [f"{v:.17g}" for v in trace.S[idx]]
            writer.writerow(row)
    return buf.getvalue()


def export_traces(traces: list[RoutingTrace], path) -> None:
    with open(path, "w", encoding="ascii", newline="") as fh:
        fh.write(traces_to_csv(traces))


def traces_from_csv(text: str) -> list[RoutingTrace]:
    """Parse trace CSV back into RoutingTrace objects (boundaries inferred
    from token_index resets)."""
    reader = csv.reader(io.StringIO(text))
    header = next(reader, None)
    if not header or header[:3] != ["token_index", "task_id", "segment_tag"]:
        raise ValueError("trace CSV header is malformed")
    n = len(header) - 3
    traces: list[RoutingTrace] = []
    rows: list[list[float]] = []
    tags: list[str] = []
    task = 0

    def flush():
        if rows:
            traces.append(
                RoutingTrace(
                    S=np.array(rows, dtype=np.float64),
                    segment_tags=tuple(tags),
                    task_id=task,
                )
            )

    for row in reader:
        if not row:
            continue
        idx = int(row[0])
        if idx == 0:
            flush()
            rows, tags = [], []
            task = int(row[1])
        rows.append([float(v) for v in row[3 : 3 + n]])
        tags.append(row[2])
    flush()
    return traces


def load_traces(path) -> list[RoutingTrace]:
    with open(path, "r", encoding="ascii") as fh:
        return traces_from_csv(fh.read())
