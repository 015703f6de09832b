"""Command-line client for the loralab service.

Every subcommand talks to the HTTP facade: in-process by default (no socket,
no server to manage), or to a running instance via --server. Exit codes:
0 success, 1 validation failure, 2 numerical failure (divergence or a failed
gradient check), 3 I/O failure. All numeric output is written at 17
significant digits so files round-trip 64-bit floats exactly.
"""

import base64
import json
import os
import sys
from pathlib import Path

import click

OUT_ENV = "LORALAB_OUT"

EXIT_VALIDATION = 1
EXIT_NUMERICAL = 2
EXIT_IO = 3

GRAD_CHECK_KEYS = {"seed", "instances", "seq_len", "h", "d", "r", "n_heads", "tolerance"}
TRAIN_KEYS = {
    "arm", "seed", "n_tasks", "h", "d", "r", "n_heads", "alpha", "dropout_p",
    "seq_len", "steps", "batch", "lr", "schedule", "shift", "sigma",
    "n_seq_pool", "eval_seqs", "log_every", "task_subset", "output_dir",
}


def jdump(obj) -> str:
    """JSON text with every float at 17 significant digits."""
    def render(x, pad: str) -> str:
        inner = pad + "  "
        if isinstance(x, bool):
            return "true" if x else "false"
        if isinstance(x, float):
            return f"{x:.17g}"
        if isinstance(x, int):
            return str(x)
        if x is None:
            return "null"
        if isinstance(x, str):
            return json.dumps(x)
        if isinstance(x, dict):
            if not x:
                return "{}"
            items = ",\n".join(
                f"{inner}{json.dumps(str(k))}: {render(v, inner)}" for k, v in x.items()
            )
            return "{\n" + items + "\n" + pad + "}"
        if isinstance(x, (list, tuple)):
            if not x:
                return "[]"
            items = ",\n".join(f"{inner}{render(v, inner)}" for v in x)
            return "[\n" + items + "\n" + pad + "]"
        raise TypeError(f"cannot serialize {type(x).__name__}")

    return render(obj, "") + "\n"


def fail(code: int, message: str):
    click.echo(f"error: {message}", err=True)
    sys.exit(code)


def read_text(path) -> str:
    try:
        return Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        fail(EXIT_IO, f"cannot read {path}: {exc}")


def read_json(path):
    text = read_text(path)
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        fail(EXIT_VALIDATION, f"{path} is not valid JSON: {exc}")


def write_file(path: Path, content: str):
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(content, encoding="utf-8")
    except OSError as exc:
        fail(EXIT_IO, f"cannot write {path}: {exc}")
    click.echo(f"wrote {path}")


def out_dir(config_value=None) -> Path:
    env = os.environ.get(OUT_ENV)
    if env:
        return Path(env)
    if config_value:
        return Path(config_value)
    return Path(".")


def check_keys(config: dict, allowed: set, what: str):
    unknown = sorted(set(config) - allowed)
    if unknown:
        fail(EXIT_VALIDATION, f"unknown {what} config keys: {', '.join(unknown)}")


class Client:
    """Thin POST wrapper over either transport."""

    def __init__(self, server: str | None):
        if server is None:
            import warnings

            with warnings.catch_warnings():
                # the installed test client announces its own deprecations
                # on import; that is not something our users can act on
                warnings.simplefilter("ignore")
                from fastapi.testclient import TestClient

            from .service import app

            self._client = TestClient(app)
        else:
            import httpx

            self._client = httpx.Client(base_url=server, timeout=600.0)

    def call(self, path: str, payload: dict) -> dict:
        try:
            resp = self._client.post(path, json=payload)
        except Exception as exc:
            fail(EXIT_IO, f"request to {path} failed: {exc}")
        try:
            body = resp.json()
        except ValueError:
            fail(EXIT_IO, f"non-JSON response from {path} (HTTP {resp.status_code})")
        if resp.status_code >= 400:
            fail(EXIT_VALIDATION, body.get("detail", f"HTTP {resp.status_code}"))
        return body


def require_ok(body: dict) -> dict:
    if body.get("ok"):
        return body
    kind = body.get("failure_kind", "numerical")
    code = EXIT_NUMERICAL if kind == "numerical" else EXIT_VALIDATION
    fail(code, body.get("detail", "request failed"))


@click.group()
@click.option("--server", default=None, metavar="URL",
              help="Base URL of a running service; defaults to in-process.")
@click.pass_context
def main(ctx, server):
    """Train, check, and analyze routed low-rank adapters."""
    ctx.obj = Client(server)


@main.command("grad-check")
@click.argument("config", required=False)
@click.pass_obj
def grad_check(client: Client, config):
    """Check the analytic backward against finite differences.

    CONFIG is an optional JSON file overriding dims, seed, instance count,
    and tolerance. Exit status is 2 iff any relative error exceeds it.
    """
    payload = read_json(config) if config else {}
    if not isinstance(payload, dict):
        fail(EXIT_VALIDATION, "grad-check config must be a JSON object")
    check_keys(payload, GRAD_CHECK_KEYS, "grad-check")
    body = client.call("/grad-check", payload)
    click.echo(jdump(body["report"]), nl=False)
    if not body.get("ok"):
        fail(EXIT_NUMERICAL, body.get("detail", "gradient check failed"))


@main.command()
@click.argument("config")
@click.pass_obj
def train(client: Client, config):
    """Train one arm from a JSON experiment manifest.

    Writes report.json, losses.csv, traces.csv, and checkpoint files to the
    output directory (manifest output_dir, overridden by $LORALAB_OUT).
    """
    manifest = read_json(config)
    if not isinstance(manifest, dict):
        fail(EXIT_VALIDATION, "train config must be a JSON object")
    check_keys(manifest, TRAIN_KEYS, "train")
    dest = out_dir(manifest.pop("output_dir", None))
    body = require_ok(client.call("/train", manifest))
    write_file(dest / "report.json", jdump(body["report"]))
    write_file(dest / "losses.csv", body["losses_csv"])
    write_file(dest / "traces.csv", body["traces_csv"])
    for item in body["checkpoints"]:
        write_file(dest / item["filename"], jdump(item["content"]))
    losses = body["report"]["per_task_loss"]
    summary = "  ".join(f"task {t}: {losses[t]:.6g}" for t in sorted(losses))
    click.echo(f"final eval loss  {summary}")


@main.command()
@click.argument("checkpoints", nargs=-1, required=True)
@click.option("--traces", default=None, metavar="CSV",
              help="Routing trace CSV from a training run.")
@click.option("--out", default=None, metavar="DIR", help="Output directory.")
@click.pass_obj
def analyze(client: Client, checkpoints, traces, out):
    """Compute head similarity (and routing stats) from checkpoints.

    Writes similarity.json, and activations.json when traces are given.
    """
    payload = {
        "checkpoints": [
            {"filename": os.path.basename(p), "content": read_json(p)} for p in checkpoints
        ]
    }
    if traces is not None:
        payload["traces_csv"] = read_text(traces)
    body = require_ok(client.call("/analyze", payload))
    dest = out_dir(out)
    write_file(dest / "similarity.json", jdump(body["similarity"]))
    if body["activations"] is not None:
        write_file(dest / "activations.json", jdump(body["activations"]))
    mean = body["similarity"]["mean_offdiag"]
    click.echo(f"mean off-diagonal similarity: {'undefined' if mean is None else f'{mean:.6g}'}")


@main.command()
@click.argument("mask")
@click.option("--k", default=3, show_default=True, help="Number of circle centers.")
@click.option("--iou-cap", default=0.3, show_default=True,
              help="Maximum pairwise IoU between selected circles.")
@click.pass_obj
def maskprompt(client: Client, mask, k, iou_cap):
    """Turn a PGM mask into box-and-points supervision JSON on stdout."""
    try:
        raw = Path(mask).read_bytes()
    except OSError as exc:
        fail(EXIT_IO, f"cannot read {mask}: {exc}")
    payload = {
        "pgm_b64": base64.b64encode(raw).decode("ascii"),
        "k": k,
        "iou_cap": iou_cap,
    }
    body = require_ok(client.call("/maskprompt", payload))
    click.echo(jdump(body["target"]), nl=False)


@main.command()
@click.argument("multi")
@click.argument("singles", nargs=-1, required=True)
@click.pass_obj
def report(client: Client, multi, singles):
    """Score multi-task training against single-task baselines.

    MULTI is a multi-task report.json; SINGLES are one report.json per task.
    Prints the synergy summary (per-task gains, positive fraction, net score).
    """
    payload = {
        "multi": read_json(multi),
        "singles": [read_json(p) for p in singles],
    }
    body = require_ok(client.call("/report", payload))
    click.echo(jdump(body["summary"]), nl=False)


if __name__ == "__main__":
    main()
