import pytest

from faasim.channels import Meter
from faasim.costs import (
    PricingConfig,
    cost_lambda,
    cost_object,
    cost_queue,
    default_pricing,
    load_pricing,
    predict,
    reconcile_events,
    save_pricing,
)
from faasim.errors import ContractViolation

UNIT = PricingConfig(1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0)


class TestFormulas:
    def test_zero_workers_zero_cost(self):
        assert cost_lambda(0, 0.0, 1000, default_pricing()) == 0.0

    def test_hand_arithmetic(self):
        pricing = PricingConfig(2e-7, 1.7e-8, 0, 0, 0, 0, 0, 0)
        got = cost_lambda(2, 1.0, 1000, pricing)
        assert got == pytest.approx(3.44e-5, rel=1e-12)

    def test_memory_scales_runtime_term_only(self):
        pricing = default_pricing()
        base = cost_lambda(4, 2.0, 1000, pricing)
        doubled = cost_lambda(4, 2.0, 2000, pricing)
        invocation_term = 4 * pricing.c_inv
        assert doubled - invocation_term == pytest.approx(2 * (base - invocation_term), rel=1e-12)

    def test_queue_zero_meters(self):
        parts = cost_queue(0, 0, 0, UNIT)
        assert parts["c_sns"] == 0.0 and parts["c_sqs"] == 0.0

    def test_queue_plug_in(self):
        parts = cost_queue(4, 262144, 3, UNIT)
        assert parts["c_sns"] == 4 + 262144
        assert parts["c_sqs"] == 3

    def test_object_plug_in(self):
        assert cost_object(2, 3, 5, UNIT) == 10


class TestPricingFiles:
    def test_default_profile_magnitudes(self):
        p = default_pricing()
        # queue/pub-sub API calls sit about one OOM below PUT/LIST
        assert p.c_put / p.c_pub >= 5
        assert p.c_list / p.c_qapi >= 5

    def test_round_trip(self, tmp_path):
        path = tmp_path / "pricing.cfg"
        save_pricing(default_pricing(), path)
        assert load_pricing(path) == default_pricing()

    def test_missing_key_rejected(self, tmp_path):
        path = tmp_path / "pricing.cfg"
        path.write_text("c_inv = 1.0\n")
        with pytest.raises(ContractViolation, match="missing"):
            load_pricing(path)

    def test_unknown_key_rejected(self, tmp_path):
        path = tmp_path / "pricing.cfg"
        path.write_text("c_bogus = 1.0\n")
        with pytest.raises(ContractViolation, match="unknown"):
            load_pricing(path)

    def test_negative_price_rejected(self):
        with pytest.raises(ContractViolation):
            PricingConfig(-1, 0, 0, 0, 0, 0, 0, 0)


def serial_meter(n_workers=1, seconds=2.0):
    meter = Meter()
    for w in range(n_workers):
        meter.add_invocation()
        meter.add_runtime(w, seconds)
    return meter


class TestPredict:
    def test_serial_total_is_lambda_only(self):
        snap = serial_meter().snapshot()
        report = predict("serial", 1, 512, snap, default_pricing())
        assert report.total == report.c_lambda
        assert report.c_sns == report.c_sqs == report.c_s3 == 0.0

    def test_queue_reproduces_billing_example(self):
        meter = serial_meter(2, 1.0)
        meter.add_publish(4, 262144)  # one 256 KB publish
        meter.add_queue_call()
        snap = meter.snapshot()
        report = predict("queue", 2, 128, snap, UNIT)
        assert report.c_sns == 4 + 262144

    def test_reconciliation_matches_prediction(self):
        pricing = default_pricing()
        meter = serial_meter(3, 0.5)
        meter.add_publish(2, 70000)
        meter.add_publish(1, 100)
        for _ in range(5):
            meter.add_queue_call()
        snap = meter.snapshot()
        report = predict("queue", 3, 1024, snap, pricing)
        assert report.metered_total == pytest.approx(report.total, rel=1e-12)

    def test_channel_counter_mismatch(self):
        meter = serial_meter(1, 1.0)
        meter.add_put("bucket-0/k")
        with pytest.raises(ContractViolation, match="object-store counters"):
            predict("queue", 1, 128, meter.snapshot(), UNIT)

    def test_invocation_count_mismatch(self):
        meter = serial_meter(2, 1.0)
        with pytest.raises(ContractViolation, match="invocations"):
            predict("serial", 3, 128, meter.snapshot(), UNIT)

    def test_monotone_in_counters(self):
        pricing = default_pricing()
        base = serial_meter(1, 1.0)
        base.add_publish(1, 10)
        more = serial_meter(1, 1.0)
        more.add_publish(2, 10)
        lo = predict("queue", 1, 128, base.snapshot(), pricing)
        hi = predict("queue", 1, 128, more.snapshot(), pricing)
        assert hi.total >= lo.total

    def test_reconcile_is_independent_path(self):
        # reconcile walks events; wipe counters consistency by constructing
        # a meter manually and verify the event path alone prices runtime
        meter = Meter()
        meter.add_runtime(0, 2.0)
        got = reconcile_events(meter.snapshot(), 100, UNIT)
        assert got == pytest.approx(200.0, rel=1e-12)
