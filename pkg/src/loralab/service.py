"""HTTP facade over the adapter, harness, analysis, and mask tooling.

The app exposes one POST route per command. Failures fall into three kinds
mirrored by the CLI's exit codes: bad requests (malformed configs, schema
violations, mismatched task sets) come back as HTTP 400/422 with
failure_kind "validation"; numerical failures (divergence, a failed
gradient check) come back as HTTP 200 with ok false so the caller can
distinguish "the run was wrong" from "the request was wrong"; I/O is the
caller's problem since every payload travels inline.
"""

import base64
import binascii

from fastapi import FastAPI
from fastapi.exceptions import RequestValidationError
from fastapi.responses import JSONResponse
from pydantic import BaseModel

from . import adapter as ad
from . import maskgeom
from .analysis import activation_stats, head_similarity, traces_from_csv, traces_to_csv
from .harness import (
    ARMS,
    HarnessConfig,
    TrainReport,
    losses_to_csv,
    run_arm,
    synergy_report,
)
from .numkit import NumericalError

app = FastAPI(title="loralab", version="0.1.0")


def _validation_payload(detail: str) -> dict:
    return {"ok": False, "failure_kind": "validation", "detail": detail}


def _numerical_payload(detail: str) -> dict:
    return {"ok": False, "failure_kind": "numerical", "detail": detail}


class ValidationFailure(Exception):
    """Raised by handlers for semantically bad requests; mapped to HTTP 400."""


@app.exception_handler(ValidationFailure)
async def _on_validation_failure(request, exc: ValidationFailure):
    return JSONResponse(status_code=400, content=_validation_payload(str(exc)))


@app.exception_handler(RequestValidationError)
async def _on_schema_failure(request, exc: RequestValidationError):
    return JSONResponse(status_code=422, content=_validation_payload(str(exc)))


@app.get("/health")
def health() -> dict:
    return {"ok": True, "version": app.version}


class GradCheckRequest(BaseModel):
    seed: int = 0
    instances: int = 20
    seq_len: int = 4
    h: int = 8
    d: int = 6
    r: int = 3
    n_heads: int = 3
    tolerance: float = 1e-6


@app.post("/grad-check")
def grad_check(req: GradCheckRequest) -> dict:
    try:
        report = ad.gradient_check(
            seed=req.seed,
            instances=req.instances,
            L=req.seq_len,
            h=req.h,
            d=req.d,
            r=req.r,
            n=req.n_heads,
            tolerance=req.tolerance,
        )
    except ValueError as exc:
        raise ValidationFailure(str(exc))
    if report["ok"]:
        return {"ok": True, "report": report}
    return {**_numerical_payload("gradient check exceeded tolerance"), "report": report}


class TrainRequest(BaseModel):
    arm: str = "ilora"
    seed: int = 0
    n_tasks: int = 3
    h: int = 16
    d: int = 16
    r: int = 4
    n_heads: int = 3
    alpha: float | None = None
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
    task_subset: list[int] | None = None


def _train_config(req: TrainRequest) -> HarnessConfig:
    alpha = 2.0 * req.r if req.alpha is None else req.alpha
    try:
        return HarnessConfig(
            seed=req.seed,
            n_tasks=req.n_tasks,
            h=req.h,
            d=req.d,
            r=req.r,
            n_heads=req.n_heads,
            alpha=alpha,
            dropout_p=req.dropout_p,
            seq_len=req.seq_len,
            steps=req.steps,
            batch=req.batch,
            lr=req.lr,
            schedule=req.schedule,
            shift=req.shift,
            sigma=req.sigma,
            n_seq_pool=req.n_seq_pool,
            eval_seqs=req.eval_seqs,
            log_every=req.log_every,
        )
    except ValueError as exc:
        raise ValidationFailure(str(exc))


def _checkpoint_files(report: TrainReport) -> list[dict]:
    files = []
    for key, layer in sorted(report.layers.items()):
        name = "checkpoint.json" if key == "adapter" else f"checkpoint.{key}.json"
        files.append({"filename": name, "content": ad.checkpoint_to_dict(layer)})
    return files


@app.post("/train")
def train(req: TrainRequest) -> dict:
    if req.arm not in ARMS:
        raise ValidationFailure(f"unknown arm {req.arm!r}; expected one of {list(ARMS)}")
    config = _train_config(req)
    try:
        report = run_arm(req.arm, config, task_subset=req.task_subset)
    except ValueError as exc:
        raise ValidationFailure(str(exc))
    except NumericalError as exc:
        return _numerical_payload(str(exc))
    n_header = next(iter(report.layers.values())).config.n
    return {
        "ok": True,
        "report": report.to_dict(),
        "losses_csv": losses_to_csv(report.loss_rows),
        "traces_csv": traces_to_csv(report.traces, n=n_header),
        "checkpoints": _checkpoint_files(report),
    }


class CheckpointPayload(BaseModel):
    filename: str = "checkpoint.json"
    content: dict


class AnalyzeRequest(BaseModel):
    checkpoints: list[CheckpointPayload]
    traces_csv: str | None = None


@app.post("/analyze")
def analyze(req: AnalyzeRequest) -> dict:
    if not req.checkpoints:
        raise ValidationFailure("analyze requires at least one checkpoint")
    layers = []
    for item in req.checkpoints:
        try:
            layers.append(ad.load_checkpoint_dict(item.content))
        except (ad.CheckpointError, ValueError) as exc:
            raise ValidationFailure(f"{item.filename}: {exc}")
    similarity = head_similarity(layers).to_dict()
    activations = None
    if req.traces_csv is not None:
        try:
            traces = traces_from_csv(req.traces_csv)
        except ValueError as exc:
            raise ValidationFailure(f"traces: {exc}")
        if traces:
            activations = activation_stats(traces).to_dict()
    return {"ok": True, "similarity": similarity, "activations": activations}


class MaskPromptRequest(BaseModel):
    pgm_b64: str
    k: int = 3
    iou_cap: float = 0.3


@app.post("/maskprompt")
def maskprompt(req: MaskPromptRequest) -> dict:
    try:
        raw = base64.b64decode(req.pgm_b64, validate=True)
    except (binascii.Error, ValueError):
        raise ValidationFailure("pgm_b64 is not valid base64")
    try:
        mask = maskgeom.read_pgm(raw)
        target = maskgeom.sample_points(mask, k=req.k, iou_cap=req.iou_cap)
    except ValueError as exc:
        raise ValidationFailure(str(exc))
    return {"ok": True, "target": target.to_dict()}


class ReportRequest(BaseModel):
    multi: dict
    singles: list[dict]


@app.post("/report")
def report(req: ReportRequest) -> dict:
    try:
        multi = TrainReport.from_dict(req.multi)
        singles = [TrainReport.from_dict(doc) for doc in req.singles]
    except (KeyError, TypeError, ValueError) as exc:
        raise ValidationFailure(f"malformed train report: {exc}")
    try:
        summary = synergy_report(multi, singles)
    except ValueError as exc:
        raise ValidationFailure(str(exc))
    return {"ok": True, "summary": summary}
