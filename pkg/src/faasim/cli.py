"""Operator CLI: a thin client of the HTTP service.

Without ``--server`` the commands mount the service in-process, so no daemon
is needed for single-machine use; with ``--server`` (or ``FAASIM_SERVER``)
the same requests go to a running instance, in which case ``--out`` paths
are interpreted on the server host.
"""

from __future__ import annotations

import asyncio
import dataclasses

import click
import httpx

from .costs import load_pricing

DEFAULT_TIMEOUT_S = 600.0


class ServiceClient:
    """Synchronous JSON-over-HTTP client, in-process by default."""

    def __init__(self, server: str | None = None):
        self._server = server
        self._app = None

    def post(self, path: str, payload: dict) -> dict:
        if self._server:
            with httpx.Client(base_url=self._server, timeout=DEFAULT_TIMEOUT_S) as client:
                response = client.post(path, json=payload)
        else:
            response = asyncio.run(self._post_in_process(path, payload))
        if response.status_code >= 400:
            raise click.ClickException(_error_detail(response))
        return response.json()

    async def _post_in_process(self, path: str, payload: dict) -> httpx.Response:
        if self._app is None:
            from .service.app import create_app

            self._app = create_app()
        transport = httpx.ASGITransport(app=self._app)
        async with httpx.AsyncClient(
            transport=transport, base_url="http://faasim.local", timeout=DEFAULT_TIMEOUT_S
        ) as client:
            return await client.post(path, json=payload)


def _error_detail(response: httpx.Response) -> str:
    try:
        detail = response.json().get("detail")
    except (ValueError, AttributeError):
        detail = None
    if detail is None:
        detail = response.text
    if isinstance(detail, list):  # pydantic validation errors
        detail = "; ".join(
            f"{'.'.join(str(p) for p in item.get('loc', []))}: {item.get('msg')}" for item in detail
        )
    return f"{response.status_code}: {detail}"


def _pricing_payload(pricing_file: str | None) -> dict | None:
    if pricing_file is None:
        return None
    return dataclasses.asdict(load_pricing(pricing_file))


@click.group()
@click.option("--server", envvar="FAASIM_SERVER", default=None, metavar="URL",
              help="Target a running service instead of the in-process app.")
@click.pass_context
def main(ctx: click.Context, server: str | None) -> None:
    """Distributed sparse DNN inference over emulated serverless channels."""
    ctx.obj = ServiceClient(server)


@main.command()
@click.option("--n", "neurons", type=int, required=True, help="Neurons per layer.")
@click.option("--layers", type=int, required=True, help="Layer count.")
@click.option("--nnz-per-row", type=int, required=True, help="Nonzeros per weight row.")
@click.option("--batch", type=int, default=1, show_default=True, help="Inference batch size.")
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--out", "out_dir", required=True, type=click.Path(), help="Workspace directory.")
@click.pass_obj
def generate(client: ServiceClient, neurons, layers, nnz_per_row, batch, seed, out_dir) -> None:
    """Generate a synthetic model and input batch into a workspace."""
    result = client.post("/generate", {
        "out_dir": out_dir,
        "neurons": neurons,
        "layers": layers,
        "nnz_per_row": nnz_per_row,
        "batch": batch,
        "seed": seed,
    })
    click.echo(f"model:  {result['model_path']}")
    click.echo(f"inputs: {result['inputs_path']} ({result['input_nnz']} nnz)")


@main.command()
@click.argument("layer_files", nargs=-1, required=True, type=click.Path())
@click.option("--inputs", "inputs_file", required=True, type=click.Path(),
              help="Input batch TSV (1-based 'row col value' triples).")
@click.option("--n", "neurons", type=int, required=True, help="Neurons per layer.")
@click.option("--batch", type=int, required=True, help="Number of input columns.")
@click.option("--out", "out_dir", required=True, type=click.Path())
@click.pass_obj
def ingest(client: ServiceClient, layer_files, inputs_file, neurons, batch, out_dir) -> None:
    """Build a workspace from external TSV layer files (one per layer, in order)."""
    result = client.post("/ingest", {
        "out_dir": out_dir,
        "layer_paths": list(layer_files),
        "inputs_path": inputs_file,
        "neurons": neurons,
        "batch": batch,
    })
    click.echo(f"model:  {result['model_path']} ({sum(result['layer_nnz'])} nnz)")
    click.echo(f"inputs: {result['inputs_path']} ({result['input_nnz']} nnz)")


@main.command()
@click.option("--workers", type=int, required=True, help="Number of parts P.")
@click.option("--scheme", type=click.Choice(["hgp", "random"]), default="hgp", show_default=True)
@click.option("--epsilon", type=float, default=0.10, show_default=True, help="Load imbalance bound.")
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--out", "out_dir", required=True, type=click.Path())
@click.pass_obj
def partition(client: ServiceClient, workers, scheme, epsilon, seed, out_dir) -> None:
    """Partition the workspace model into per-worker packs."""
    result = client.post("/partition", {
        "out_dir": out_dir,
        "workers": workers,
        "scheme": scheme,
        "epsilon": epsilon,
        "seed": seed,
    })
    metrics = result["cut_metrics"]
    click.echo(f"packs: {len(result['pack_paths'])} files in {out_dir}")
    click.echo(
        f"volume: {metrics['total_volume_rows']} rows, "
        f"max send {metrics['max_send_volume']}, "
        f"imbalance {metrics['load_imbalance']:.3f}"
    )
    click.echo(f"metrics: {result['metrics_path']}")


@main.command()
@click.option("--workers", type=int, required=True)
@click.option("--branching", type=int, default=4, show_default=True, help="Invocation tree fan-out.")
@click.option("--channel", type=click.Choice(["serial", "queue", "object"]), default="queue",
              show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--pricing", "pricing_file", type=click.Path(exists=True), default=None,
              help="Pricing profile file (client-side; sent inline).")
@click.option("--verify", is_flag=True, help="Check the output against the serial oracle.")
@click.option("--repeats", type=int, default=3, show_default=True, help="Runs per result (median).")
@click.option("--out", "out_dir", required=True, type=click.Path())
@click.pass_context
def run(ctx: click.Context, workers, branching, channel, seed, pricing_file, verify, repeats,
        out_dir) -> None:
    """Run distributed inference from the workspace packs."""
    client: ServiceClient = ctx.obj
    result = client.post("/run", {
        "out_dir": out_dir,
        "workers": workers,
        "channel": channel,
        "branching": branching,
        "seed": seed,
        "verify": verify,
        "repeats": repeats,
        "pricing": _pricing_payload(pricing_file),
    })
    cost = result["cost_report"]
    click.echo(f"output: {result['output_path']} ({len(result['output_rows'])} nonzero rows)")
    click.echo(f"meter:  {result['meter_path']}")
    click.echo(
        f"cost:   {cost['predicted']['total']:.6g} predicted "
        f"/ {cost['metered_total']:.6g} metered -> {result['cost_path']}"
    )
    verification = result["verification"]
    if verification["checked"]:
        if verification["passed"]:
            click.echo("verify: PASS (bit-identical to the serial oracle)")
        else:
            click.echo(f"verify: FAIL (first differing row {verification['first_diff_row']})")
            ctx.exit(1)


@main.command()
@click.option("--workers", "workers_list", type=int, multiple=True, required=True,
              help="Worker counts to sweep (repeatable).")
@click.option("--channel", "channels", type=click.Choice(["serial", "queue", "object"]),
              multiple=True, default=("serial", "queue", "object"), show_default=True)
@click.option("--scheme", type=click.Choice(["hgp", "random"]), default="hgp", show_default=True)
@click.option("--epsilon", type=float, default=0.10, show_default=True)
@click.option("--branching", type=int, default=4, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--pricing", "pricing_file", type=click.Path(exists=True), default=None)
@click.option("--repeats", type=int, default=3, show_default=True)
@click.option("--out", "out_dir", required=True, type=click.Path())
@click.pass_obj
def compare(client: ServiceClient, workers_list, channels, scheme, epsilon, branching, seed,
            pricing_file, repeats, out_dir) -> None:
    """Sweep channels x worker counts and tabulate runtime and cost."""
    result = client.post("/compare", {
        "out_dir": out_dir,
        "workers": list(workers_list),
        "channels": list(channels),
        "scheme": scheme,
        "epsilon": epsilon,
        "branching": branching,
        "seed": seed,
        "repeats": repeats,
        "pricing": _pricing_payload(pricing_file),
    })
    click.echo(result["table"])
    click.echo(f"csv: {result['csv_path']}")


@main.command()
@click.option("--host", default="127.0.0.1", show_default=True)
@click.option("--port", type=int, default=8811, show_default=True)
def serve(host: str, port: int) -> None:
    """Run the HTTP service."""
    import uvicorn

    from .service.app import create_app

    uvicorn.run(create_app(), host=host, port=port)


if __name__ == "__main__":
    main()
