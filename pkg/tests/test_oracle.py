"""Query metering, budgets, modes, transports."""

import threading

import numpy as np
import pytest
import torch

from subattack.core import ImageBatch, OracleMode, StageTag, ToyDatasetSpec, generate_toy_dataset
from subattack.harness import TargetRecipe, train_target
from subattack.oracle import (
    BudgetExhausted,
    LocalOracle,
    OracleConfig,
    QueryLedger,
    RecordingOracle,
    RemoteOracle,
    Transport,
    TransportError,
)


def constant_probs(n_classes: int, hot: int = 0):
    def fn(pixels: torch.Tensor) -> torch.Tensor:
        probs = torch.full((pixels.shape[0], n_classes), 0.02 / (n_classes - 1))
        probs[:, hot] = 0.98
        return probs

    return fn


def make_oracle(mode=OracleMode.PROBABILITY, budget=None, n_classes=10):
    return LocalOracle(constant_probs(n_classes), n_classes, OracleConfig(mode, budget=budget))


def batch_of(n: int, size: int = 8) -> ImageBatch:
    return ImageBatch(torch.rand(n, 3, size, size), tuple([0] * n))


class TestLedger:
    def test_fresh_ledger_all_zero(self):
        oracle = make_oracle()
        snap = oracle.snapshot_ledger()
        assert snap == QueryLedger(0, 0, 0)
        assert snap.total == 0 and snap.n_qb == 0

    def test_counts_batch_under_stage(self):
        oracle = make_oracle(budget=500_000)
        oracle.query(batch_of(32), StageTag.STAGE1)
        snap = oracle.snapshot_ledger()
        assert snap.n_stage1 == 32 and snap.total == 32

    def test_total_is_sum_of_stages(self):
        oracle = make_oracle()
        oracle.query(batch_of(5), StageTag.STAGE1)
        oracle.query(batch_of(7), StageTag.STAGE2)
        oracle.query(batch_of(3), StageTag.EVAL)
        snap = oracle.snapshot_ledger()
        assert (snap.n_stage1, snap.n_stage2, snap.n_eval) == (5, 7, 3)
        assert snap.total == 15
        assert snap.n_qb == 12  # evaluation excluded from the attack total

    def test_attack_pipeline_total_example(self):
        # stage totals consistent with a 500k budget split 389 / 499611
        snap = QueryLedger(n_stage1=389, n_stage2=499_611, n_eval=0)
        assert snap.n_qb == 500_000

    def test_budget_all_or_nothing(self):
        oracle = make_oracle(budget=10)
        with pytest.raises(BudgetExhausted) as err:
            oracle.query(batch_of(32), StageTag.STAGE2)
        assert err.value.ledger == QueryLedger(0, 0, 0)
        assert oracle.snapshot_ledger().total == 0

    def test_budget_not_charged_for_eval(self):
        oracle = make_oracle(budget=10)
        oracle.query(batch_of(32), StageTag.EVAL)  # allowed: eval is outside the budget
        oracle.query(batch_of(10), StageTag.STAGE2)
        with pytest.raises(BudgetExhausted):
            oracle.query(batch_of(1), StageTag.STAGE2)

    def test_concurrent_queries_match_serial_replay(self):
        def run(oracle):
            threads = [
                threading.Thread(target=lambda: oracle.query(batch_of(32), StageTag.STAGE2))
                for _ in range(3)
            ]
            for t in threads:
                t.start()
            for t in threads:
                t.join()
            return oracle.snapshot_ledger()

        concurrent = run(make_oracle(budget=500))
        serial = make_oracle(budget=500)
        for _ in range(3):
            serial.query(batch_of(32), StageTag.STAGE2)
        assert concurrent == serial.snapshot_ledger()
        assert concurrent.n_stage2 == 96


class TestModes:
    def test_label_only_strips_probabilities(self):
        oracle = make_oracle(OracleMode.LABEL_ONLY)
        outputs = oracle.query(batch_of(4), StageTag.EVAL)
        assert all(o.probs is None for o in outputs)
        assert all(o.mode is OracleMode.LABEL_ONLY for o in outputs)

    def test_probability_outputs_validated(self):
        oracle = make_oracle()
        outputs = oracle.query(batch_of(4), StageTag.EVAL)
        assert all(abs(sum(o.probs) - 1) < 1e-6 for o in outputs)
        assert all(o.label == 0 for o in outputs)

    def test_local_oracle_deterministic(self):
        ds = generate_toy_dataset(ToyDatasetSpec(4, 16, 20, seed=5))
        model, _ = train_target(ds, TargetRecipe(epochs=3), seed=0)
        oracle = LocalOracle.from_model(model, 4, OracleConfig(OracleMode.PROBABILITY))
        batch = generate_toy_dataset(ToyDatasetSpec(4, 16, 2, seed=6))
        out1 = oracle.query(batch, StageTag.EVAL)
        out2 = oracle.query(batch, StageTag.EVAL)
        assert [o.probs for o in out1] == [o.probs for o in out2]


class TestRecordingOracle:
    def test_conservation_against_ledger(self):
        inner = make_oracle(budget=1000)
        rec = RecordingOracle(inner)
        rec.query(batch_of(10), StageTag.STAGE1)
        rec.query(batch_of(20), StageTag.STAGE2)
        rec.query(batch_of(5), StageTag.EVAL)
        assert rec.images_seen == rec.snapshot_ledger().total == 35
        assert rec.per_stage[StageTag.STAGE1] == 10

    def test_failed_batch_not_recorded(self):
        rec = RecordingOracle(make_oracle(budget=5))
        with pytest.raises(BudgetExhausted):
            rec.query(batch_of(10), StageTag.STAGE1)
        assert rec.images_seen == 0


class FlakyPost:
    """Scripted transport: fails ``failures`` times, then answers."""

    def __init__(self, failures: int, n_classes: int = 3):
        self.failures = failures
        self.calls = 0
        self.n_classes = n_classes

    def __call__(self, url: str, payload: dict, timeout: float) -> dict:
        self.calls += 1
        if self.calls <= self.failures:
            raise ConnectionError("scripted failure")
        b = payload["shape"][0]
        probs = np.full((b, self.n_classes), 1.0 / self.n_classes)
        return {"labels": probs.argmax(1).tolist(), "probs": probs.tolist()}


class TestRemoteOracle:
    def _oracle(self, post, mode=OracleMode.PROBABILITY, budget=None):
        return RemoteOracle(
            "http://target.invalid",
            3,
            OracleConfig(mode, Transport.REMOTE, budget=budget),
            post=post,
        )

    def test_retries_then_succeeds_counting_once(self):
        post = FlakyPost(failures=2)
        oracle = self._oracle(post)
        outputs = oracle.query(batch_of(4), StageTag.STAGE2)
        assert len(outputs) == 4
        assert post.calls == 3  # two failures + one success
        assert oracle.snapshot_ledger().n_stage2 == 4

    def test_gives_up_after_retries(self):
        post = FlakyPost(failures=10)
        oracle = self._oracle(post)
        with pytest.raises(TransportError) as err:
            oracle.query(batch_of(2), StageTag.STAGE2)
        assert err.value.retries == 3
        assert post.calls == 4  # initial attempt + 3 retries
        assert oracle.snapshot_ledger().total == 0

    def test_label_only_response_without_probs(self):
        def post(url, payload, timeout):
            assert payload["mode"] == "label_only"
            b = payload["shape"][0]
            return {"labels": [1] * b, "probs": None}

        oracle = self._oracle(post, mode=OracleMode.LABEL_ONLY)
        outputs = oracle.query(batch_of(3), StageTag.EVAL)
        assert [o.label for o in outputs] == [1, 1, 1]
        assert all(o.probs is None for o in outputs)

    def test_payload_shape_and_data_round_trip(self):
        captured = {}

        def post(url, payload, timeout):
            captured.update(payload)
            b = payload["shape"][0]
            return {"labels": [0] * b, "probs": [[1.0, 0.0, 0.0]] * b}

        oracle = self._oracle(post)
        batch = batch_of(2, size=4)
        oracle.query(batch, StageTag.EVAL)
        assert captured["shape"] == [2, 3, 4, 4]
        import base64

        decoded = np.frombuffer(base64.b64decode(captured["data"]), dtype="<f4")
        np.testing.assert_allclose(decoded.reshape(2, 3, 4, 4), batch.pixels.numpy())


class TestConfig:
    def test_budget_must_be_positive(self):
        with pytest.raises(ValueError):
            OracleConfig(OracleMode.PROBABILITY, budget=0)

    def test_transport_mismatch_rejected(self):
        with pytest.raises(ValueError, match="REMOTE"):
            RemoteOracle("http://x", 2, OracleConfig(OracleMode.PROBABILITY, Transport.LOCAL))
