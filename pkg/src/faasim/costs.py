"""Closed-form cost prediction and reconciliation against the meter.

Compute cost is ``P * c_inv + P * T_bar * M * c_run_mb_s`` with ``T_bar`` the
mean worker runtime. The queue channel adds billed publishes, transferred
bytes and queue API calls; the object channel adds PUT/GET/LIST requests.
``predict`` also re-prices the meter's raw event log; prediction and that
independent reconciliation must agree exactly for every run.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from importlib import resources

from .channels import MeterSnapshot
from .errors import ContractViolation

__all__ = [
    "PricingConfig",
    "CostReport",
    "default_pricing",
    "load_pricing",
    "save_pricing",
    "cost_lambda",
    "cost_queue",
    "cost_object",
    "reconcile_events",
    "predict",
]

PRICING_KEYS = ("c_inv", "c_run_mb_s", "c_pub", "c_byte", "c_qapi", "c_put", "c_get", "c_list")


@dataclass(frozen=True)
class PricingConfig:
    """Per-event prices; all non-negative, currency-agnostic."""

    c_inv: float
    c_run_mb_s: float
    c_pub: float
    c_byte: float
    c_qapi: float
    c_put: float
    c_get: float
    c_list: float

    def __post_init__(self):
        for key in PRICING_KEYS:
            if getattr(self, key) < 0:
                raise ContractViolation(f"price {key} must be non-negative")


def _parse_pricing_text(text: str, origin: str) -> PricingConfig:
    values: dict[str, float] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ContractViolation(f"{origin}:{lineno}: expected 'key = value'")
        key, _, raw = stripped.partition("=")
        key = key.strip()
        if key not in PRICING_KEYS:
            raise ContractViolation(f"{origin}:{lineno}: unknown pricing key {key!r}")
        try:
            values[key] = float(raw.strip())
        except ValueError as exc:
            raise ContractViolation(f"{origin}:{lineno}: {exc}") from exc
    missing = [k for k in PRICING_KEYS if k not in values]
    if missing:
        raise ContractViolation(f"{origin}: missing pricing keys {missing}")
    return PricingConfig(**values)


def load_pricing(path: str | os.PathLike) -> PricingConfig:
    with open(path, "r", encoding="utf-8") as fh:
        return _parse_pricing_text(fh.read(), str(path))


def save_pricing(pricing: PricingConfig, path: str | os.PathLike) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for key in PRICING_KEYS:
            fh.write(f"{key} = {getattr(pricing, key)!r}\n")


def default_pricing() -> PricingConfig:
    text = resources.files("faasim.data").joinpath("pricing_default.cfg").read_text()
    return _parse_pricing_text(text, "pricing_default.cfg")


def cost_lambda(n_workers: int, t_bar: float, memory_mb: float, pricing: PricingConfig) -> float:
    """Compute cost: invocations plus MB-seconds of runtime."""
    return n_workers * pricing.c_inv + n_workers * t_bar * memory_mb * pricing.c_run_mb_s


def cost_queue(s: int, z: int, q: int, pricing: PricingConfig) -> dict[str, float]:
    return {
        "c_sns": s * pricing.c_pub + z * pricing.c_byte,
        "c_sqs": q * pricing.c_qapi,
    }


def cost_object(v: int, r: int, l: int, pricing: PricingConfig) -> float:
    return v * pricing.c_put + r * pricing.c_get + l * pricing.c_list


_EVENT_PRICES = {
    "invoke": "c_inv",
    "sns_publish": "c_pub",
    "sns_bytes": "c_byte",
    "sqs_call": "c_qapi",
    "s3_put": "c_put",
    "s3_get": "c_get",
    "s3_list": "c_list",
}


def reconcile_events(meter: MeterSnapshot, memory_mb: float, pricing: PricingConfig) -> float:
    """Re-price the raw event log; independent of the closed-form formulas."""
    total = 0.0
    for event in meter.events:
        if event.kind == "runtime_s":
            total += event.units * memory_mb * pricing.c_run_mb_s
        else:
            total += event.units * getattr(pricing, _EVENT_PRICES[event.kind])
    return total


@dataclass(frozen=True)
class CostReport:
    """Predicted components, the reconciled per-event total, and the inputs."""

    channel: str
    c_lambda: float
    c_sns: float
    c_sqs: float
    c_s3: float
    total: float
    metered_total: float
    inputs: dict

    def to_json(self) -> dict:
        return {
            "schema_version": 1,
            "channel": self.channel,
            "predicted": {
                "c_lambda": self.c_lambda,
                "c_sns": self.c_sns,
                "c_sqs": self.c_sqs,
                "c_s3": self.c_s3,
                "total": self.total,
            },
            "metered_total": self.metered_total,
            "inputs": self.inputs,
        }


def predict(
    channel: str,
    n_workers: int,
    memory_mb: float,
    meter: MeterSnapshot,
    pricing: PricingConfig,
) -> CostReport:
    """Apply the closed-form model to a frozen meter and reconcile it."""
    if channel not in ("serial", "queue", "object"):
        raise ContractViolation(f"unknown channel {channel!r}")
    if channel in ("serial", "queue") and (meter.puts or meter.gets or meter.lists):
        raise ContractViolation(f"object-store counters nonzero on a {channel} run")
    if channel in ("serial", "object") and (
        meter.billed_publishes or meter.publish_bytes or meter.queue_calls
    ):
        raise ContractViolation(f"queue counters nonzero on a {channel} run")
    if meter.invocations != n_workers:
        raise ContractViolation(
            f"meter saw {meter.invocations} invocations for {n_workers} workers"
        )

    t_bar = meter.total_runtime_s / n_workers if n_workers else 0.0
    c_lam = cost_lambda(n_workers, t_bar, memory_mb, pricing)
    c_sns = c_sqs = c_s3 = 0.0
    if channel == "queue":
        parts = cost_queue(meter.billed_publishes, meter.publish_bytes, meter.queue_calls, pricing)
        c_sns, c_sqs = parts["c_sns"], parts["c_sqs"]
    elif channel == "object":
        c_s3 = cost_object(meter.puts, meter.gets, meter.lists, pricing)
    total = c_lam + c_sns + c_sqs + c_s3
    return CostReport(
        channel=channel,
        c_lambda=c_lam,
        c_sns=c_sns,
        c_sqs=c_sqs,
        c_s3=c_s3,
        total=total,
        metered_total=reconcile_events(meter, memory_mb, pricing),
        inputs={
            "P": n_workers,
            "t_bar_s": t_bar,
            "memory_mb": memory_mb,
            "S": meter.billed_publishes,
            "Z": meter.publish_bytes,
            "Q": meter.queue_calls,
            "V": meter.puts,
            "R": meter.gets,
            "L": meter.lists,
        },
    )
