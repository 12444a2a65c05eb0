"""Workspace-level operations behind the service endpoints and the CLI.

A workspace is a directory holding the generated model (as a P=1 pack), the
input batch (TSV triples), per-worker pack files, and the JSON reports each
run produces. Matrix payloads stay on disk; callers exchange paths and
summary JSON.
"""

from __future__ import annotations

import json
import os
from pathlib import Path

import numpy as np

from .costs import CostReport, PricingConfig, default_pricing, predict
from .pack import build_packs, model_to_pack, pack_filename, pack_to_model, read_pack, write_pack
from .partition import cut_metrics, partition_model
from .runtime import RunConfig, RunResult, run_inference
from .sparse import SparseMatrix, serial_inference
from .workbench import (
    GenSpec,
    generate_inputs,
    generate_model,
    load_matrix_tsv,
    nonzero_row_indices,
    save_matrix_tsv,
)

__all__ = [
    "generate_workspace",
    "ingest_workspace",
    "partition_workspace",
    "run_workspace",
    "compare_workspace",
    "compare_outputs",
    "load_workspace_meta",
]

SCHEMA_VERSION = 1

MODEL_FILE = "model.fsdp"
INPUTS_FILE = "inputs.tsv"
META_FILE = "workspace.json"


def _write_json(path: Path, payload: dict) -> None:
    payload = {"schema_version": SCHEMA_VERSION, **payload}
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def load_workspace_meta(out_dir: str | os.PathLike) -> dict:
    path = Path(out_dir) / META_FILE
    if not path.exists():
        raise FileNotFoundError(f"workspace meta not found: {path} (run generate first)")
    return json.loads(path.read_text(encoding="utf-8"))


def generate_workspace(spec: GenSpec, out_dir: str | os.PathLike) -> dict:
    """Generate model + inputs and cache them on disk."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    model = generate_model(spec)
    inputs = generate_inputs(spec)
    model_path = out / MODEL_FILE
    inputs_path = out / INPUTS_FILE
    write_pack(model_to_pack(model), model_path)
    save_matrix_tsv(inputs, inputs_path)
    meta = {
        "neurons": spec.neurons,
        "layers": spec.layers,
        "nnz_per_row": spec.nnz_per_row,
        "batch": spec.batch,
        "input_density": spec.input_density,
        "seed": spec.seed,
        "bias": model.activation.bias,
        "y_max": model.activation.y_max,
    }
    _write_json(out / META_FILE, meta)
    return {
        "schema_version": SCHEMA_VERSION,
        "model_path": str(model_path),
        "inputs_path": str(inputs_path),
        "layer_nnz": [w.nnz for w in model.layers],
        "input_nnz": inputs.nnz,
    }


def ingest_workspace(
    layer_paths: list[str],
    inputs_path: str,
    neurons: int,
    batch: int,
    out_dir: str | os.PathLike,
    bias: float = -0.30,
    y_max: float = 32.0,
) -> dict:
    """Build a workspace from external TSV layer files and an input batch."""
    from .sparse import ActivationSpec
    from .workbench import load_model_tsv

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for path in list(layer_paths) + [inputs_path]:
        if not Path(path).exists():
            raise FileNotFoundError(f"TSV file not found: {path}")
    model = load_model_tsv(layer_paths, neurons, ActivationSpec(bias=bias, y_max=y_max))
    inputs = load_matrix_tsv(inputs_path, neurons, batch)
    model_path = out / MODEL_FILE
    write_pack(model_to_pack(model), model_path)
    save_matrix_tsv(inputs, out / INPUTS_FILE)
    meta = {
        "neurons": neurons,
        "layers": model.n_layers,
        "nnz_per_row": None,
        "batch": batch,
        "input_density": None,
        "seed": None,
        "bias": model.activation.bias,
        "y_max": model.activation.y_max,
    }
    _write_json(out / META_FILE, meta)
    return {
        "schema_version": SCHEMA_VERSION,
        "model_path": str(model_path),
        "inputs_path": str(out / INPUTS_FILE),
        "layer_nnz": [w.nnz for w in model.layers],
        "input_nnz": inputs.nnz,
    }


def _load_model(out_dir: Path):
    model_path = out_dir / MODEL_FILE
    if not model_path.exists():
        raise FileNotFoundError(f"model pack not found: {model_path}")
    return pack_to_model(read_pack(model_path))


def _load_inputs(out_dir: Path) -> SparseMatrix:
    meta = load_workspace_meta(out_dir)
    inputs_path = out_dir / INPUTS_FILE
    if not inputs_path.exists():
        raise FileNotFoundError(f"inputs file not found: {inputs_path}")
    return load_matrix_tsv(inputs_path, meta["neurons"], meta["batch"])


def partition_workspace(
    out_dir: str | os.PathLike,
    workers: int,
    scheme: str = "hgp",
    epsilon: float = 0.10,
    seed: int = 0,
) -> dict:
    """Partition the cached model into per-worker pack files."""
    out = Path(out_dir)
    model = _load_model(out)
    plan = partition_model(model, workers, epsilon=epsilon, scheme=scheme, seed=seed)
    packs = build_packs(plan, model)
    paths = []
    for pack in packs:
        path = out / pack_filename(pack.worker, workers)
        write_pack(pack, path)
        paths.append(str(path))
    metrics = cut_metrics(plan, model)
    metrics_path = out / f"cut_metrics_p{workers}_{scheme}.json"
    _write_json(metrics_path, {"workers": workers, "scheme": scheme, "epsilon": epsilon,
                               "seed": seed, "metrics": metrics})
    return {
        "schema_version": SCHEMA_VERSION,
        "pack_paths": paths,
        "metrics_path": str(metrics_path),
        "cut_metrics": metrics,
    }


def _load_packs(out: Path, config: RunConfig):
    if config.channel == "serial":
        model_path = out / MODEL_FILE
        if not model_path.exists():
            raise FileNotFoundError(f"model pack not found: {model_path}")
        return [read_pack(model_path)]
    packs = []
    for m in range(config.workers):
        path = out / pack_filename(m, config.workers)
        if not path.exists():
            raise FileNotFoundError(f"pack file not found: {path} (run partition first)")
        packs.append(read_pack(path))
    return packs


def compare_outputs(got: SparseMatrix, want: SparseMatrix) -> int | None:
    """Global id of the first differing row, or None when bit-identical."""
    got_rows = {int(g): i for i, g in enumerate(got.row_ids)}
    want_rows = {int(g): i for i, g in enumerate(want.row_ids)}
    for gid in sorted(set(got_rows) | set(want_rows)):
        gi, wi = got_rows.get(gid), want_rows.get(gid)
        if gi is None or wi is None:
            return gid
        g_cols, g_vals = got.row_slice(gi)
        w_cols, w_vals = want.row_slice(wi)
        if not (np.array_equal(g_cols, w_cols) and np.array_equal(g_vals, w_vals)):
            return gid
    return None


def _median_run(runs: list[tuple[RunResult, CostReport]]) -> tuple[RunResult, CostReport]:
    by_time = sorted(runs, key=lambda rc: rc[1].inputs["t_bar_s"])
    return by_time[len(by_time) // 2]


def _execute(
    out: Path,
    config: RunConfig,
    repeats: int,
) -> tuple[RunResult, CostReport]:
    packs = _load_packs(out, config)
    inputs = _load_inputs(out)
    runs = []
    for _ in range(max(1, repeats)):
        result = run_inference(config, packs, inputs)
        report = predict(config.channel, config.workers, config.memory_mb, result.meter, config.pricing)
        runs.append((result, report))
    return _median_run(runs)


def run_workspace(
    out_dir: str | os.PathLike,
    workers: int,
    channel: str,
    branching: int = 4,
    memory_mb: int = 1024,
    seed: int = 0,
    pricing: PricingConfig | None = None,
    verify: bool = False,
    repeats: int = 3,
) -> dict:
    """Run inference from cached packs; optionally verify against the oracle."""
    out = Path(out_dir)
    config = RunConfig(
        workers=workers,
        channel=channel,
        branching=branching,
        memory_mb=memory_mb,
        pricing=pricing or default_pricing(),
        seed=seed,
    )
    result, report = _execute(out, config, repeats)

    suffix = f"{channel}_p{workers}"
    output_path = out / f"output_{suffix}.tsv"
    save_matrix_tsv(result.output, output_path)
    meter_path = out / f"meter_{suffix}.json"
    _write_json(meter_path, result.meter.to_json())
    cost_path = out / f"cost_{suffix}.json"
    _write_json(cost_path, report.to_json())

    verification = {"checked": False, "passed": None, "first_diff_row": None}
    if verify:
        oracle = serial_inference(_load_model(out), _load_inputs(out))
        first_diff = compare_outputs(result.output, oracle)
        verification = {
            "checked": True,
            "passed": first_diff is None,
            "first_diff_row": first_diff,
        }
    return {
        "schema_version": SCHEMA_VERSION,
        "output_path": str(output_path),
        "meter_path": str(meter_path),
        "cost_path": str(cost_path),
        "meter": result.meter.to_json(),
        "cost_report": report.to_json(),
        "elapsed_s": {str(k): v for k, v in sorted(result.elapsed_s.items())},
        "output_rows": nonzero_row_indices(result.output),
        "verification": verification,
    }


def compare_workspace(
    out_dir: str | os.PathLike,
    workers_list: list[int],
    channels: list[str] | None = None,
    scheme: str = "hgp",
    epsilon: float = 0.10,
    branching: int = 4,
    memory_mb: int = 1024,
    seed: int = 0,
    pricing: PricingConfig | None = None,
    repeats: int = 3,
) -> dict:
    """Run the {serial, queue, object} x P matrix and tabulate cost/runtime."""
    out = Path(out_dir)
    channels = channels or ["serial", "queue", "object"]
    pricing = pricing or default_pricing()
    rows = []
    for channel in channels:
        p_values = [1] if channel == "serial" else workers_list
        for workers in p_values:
            if channel != "serial":
                missing = [
                    m for m in range(workers) if not (out / pack_filename(m, workers)).exists()
                ]
                if missing:
                    partition_workspace(out, workers, scheme=scheme, epsilon=epsilon, seed=seed)
            config = RunConfig(
                workers=workers,
                channel=channel,
                branching=branching,
                memory_mb=memory_mb,
                pricing=pricing,
                seed=seed,
            )
            result, report = _execute(out, config, repeats)
            rows.append(
                {
                    "channel": channel,
                    "workers": workers,
                    "scheme": "-" if channel == "serial" else scheme,
                    "t_bar_s": report.inputs["t_bar_s"],
                    "c_lambda": report.c_lambda,
                    "c_sns": report.c_sns,
                    "c_sqs": report.c_sqs,
                    "c_s3": report.c_s3,
                    "total_cost": report.total,
                }
            )

    columns = ["channel", "workers", "scheme", "t_bar_s", "c_lambda", "c_sns", "c_sqs", "c_s3", "total_cost"]
    csv_lines = [",".join(columns)]
    for row in rows:
        csv_lines.append(",".join(_cell(row[c]) for c in columns))
    csv_path = out / "compare.csv"
    csv_path.write_text("\n".join(csv_lines) + "\n", encoding="utf-8")

    table = _render_table(columns, rows)
    text_path = out / "compare.txt"
    text_path.write_text(table + "\n", encoding="utf-8")
    _write_json(out / "compare.json", {"rows": rows})
    return {
        "schema_version": SCHEMA_VERSION,
        "rows": rows,
        "csv_path": str(csv_path),
        "text_path": str(text_path),
        "table": table,
    }


def _cell(value) -> str:
    if isinstance(value, float):
        return f"{value:.6g}"
    return str(value)


def _render_table(columns: list[str], rows: list[dict]) -> str:
    rendered = [[_cell(row[c]) for c in columns] for row in rows]
    widths = [max(len(c), *(len(r[i]) for r in rendered)) if rendered else len(c)
              for i, c in enumerate(columns)]
    header = "  ".join(c.ljust(widths[i]) for i, c in enumerate(columns))
    ruler = "  ".join("-" * widths[i] for i in range(len(columns)))
    lines = [header, ruler]
    for r in rendered:
        lines.append("  ".join(r[i].ljust(widths[i]) for i in range(len(columns))))
    return "\n".join(lines)
