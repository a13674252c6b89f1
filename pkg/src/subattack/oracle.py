"""Black-box target access with exact, budget-enforced query metering.

Every answered image increments exactly one per-stage counter. The query
budget covers the attack pipeline (stage-1 inference + stage-2 training);
final-evaluation queries are metered under ``n_eval`` but never count
against the budget and never enter the reported attack query total.
Budget enforcement is all-or-nothing per batch: a batch that does not fit
raises ``BudgetExhausted`` and leaves every counter unchanged.
"""

from __future__ import annotations

import base64
import enum
import threading
from dataclasses import dataclass
from typing import Callable

import numpy as np
import torch

from .core import ImageBatch, OracleMode, OracleOutput, StageTag
from .models import load_target_checkpoint


class Transport(enum.Enum):
    LOCAL = "local"
    REMOTE = "remote"


@dataclass(frozen=True)
class OracleConfig:
    mode: OracleMode
    transport: Transport = Transport.LOCAL
    budget: int | None = None

    def __post_init__(self) -> None:
        if self.budget is not None and self.budget <= 0:
            raise ValueError("budget must be a positive integer when set")


@dataclass(frozen=True)
class QueryLedger:
    """Point-in-time snapshot of the per-stage query counters."""

    n_stage1: int = 0
    n_stage2: int = 0
    n_eval: int = 0

    @property
    def total(self) -> int:
        return self.n_stage1 + self.n_stage2 + self.n_eval

    @property
    def n_qb(self) -> int:
        """Attack-pipeline query total: stage-1 + stage-2 (evaluation excluded)."""
        return self.n_stage1 + self.n_stage2

    def to_dict(self) -> dict:
        return {
            "n_stage1": self.n_stage1,
            "n_stage2": self.n_stage2,
            "n_eval": self.n_eval,
            "n_qb": self.n_qb,
            "total": self.total,
        }


class BudgetExhausted(RuntimeError):
    """Raised when a batch does not fit in the remaining budget."""

    def __init__(self, requested: int, budget: int, ledger: QueryLedger):
        super().__init__(
            f"query budget exhausted: requested {requested}, "
            f"budget {budget}, already spent {ledger.n_qb}"
        )
        self.requested = requested
        self.budget = budget
        self.ledger = ledger


class TransportError(RuntimeError):
    """Remote transport failed after all retries."""

    def __init__(self, message: str, retries: int):
        super().__init__(f"{message} (after {retries} retries)")
        self.retries = retries


class Oracle:
    """Base class: metering, budget enforcement, and mode handling.

    Subclasses implement ``_answer(pixels) -> probability tensor (B, N)``.
    The budget check, the model call, and the counter increment run under one
    lock, so concurrent callers see a serialized check-and-increment.
    """

    def __init__(self, config: OracleConfig, num_classes: int, initial_ledger: QueryLedger | None = None):
        self.config = config
        self.num_classes = num_classes
        self._lock = threading.Lock()
        start = initial_ledger or QueryLedger()
        self._n = {
            StageTag.STAGE1: start.n_stage1,
            StageTag.STAGE2: start.n_stage2,
            StageTag.EVAL: start.n_eval,
        }

    def _answer(self, pixels: torch.Tensor) -> torch.Tensor:
        raise NotImplementedError

    def query(self, batch: ImageBatch, stage: StageTag) -> list[OracleOutput]:
        """Answer one output per image and count the batch under ``stage``."""
        size = len(batch)
        with self._lock:
            if (
                self.config.budget is not None
                and stage is not StageTag.EVAL
                and self._n[StageTag.STAGE1] + self._n[StageTag.STAGE2] + size > self.config.budget
            ):
                raise BudgetExhausted(size, self.config.budget, self._snapshot_locked())
            probs = self._answer(batch.pixels)
            self._n[stage] += size
        probs_np = probs.detach().cpu().double().numpy()
        if self.config.mode is OracleMode.LABEL_ONLY:
            return [OracleOutput.label_only(int(row.argmax())) for row in probs_np]
        return [OracleOutput.from_probs(row) for row in probs_np]

    def _snapshot_locked(self) -> QueryLedger:
        return QueryLedger(self._n[StageTag.STAGE1], self._n[StageTag.STAGE2], self._n[StageTag.EVAL])

    def snapshot_ledger(self) -> QueryLedger:
        with self._lock:
            return self._snapshot_locked()


class LocalOracle(Oracle):
    """Oracle over an in-process predict function returning probabilities."""

    def __init__(
        self,
        predict_fn: Callable[[torch.Tensor], torch.Tensor],
        num_classes: int,
        config: OracleConfig,
        initial_ledger: QueryLedger | None = None,
    ):
        if config.transport is not Transport.LOCAL:
            raise ValueError("LocalOracle requires LOCAL transport")
        super().__init__(config, num_classes, initial_ledger)
        self._predict = predict_fn

    def _answer(self, pixels: torch.Tensor) -> torch.Tensor:
        with torch.no_grad():
            return self._predict(pixels)

    @classmethod
    def from_model(
        cls,
        model: torch.nn.Module,
        num_classes: int,
        config: OracleConfig,
        initial_ledger: QueryLedger | None = None,
    ) -> "LocalOracle":
        model.eval()
        return cls(lambda x: torch.softmax(model(x), dim=1), num_classes, config, initial_ledger)

    @classmethod
    def from_checkpoint(
        cls, path, config: OracleConfig, initial_ledger: QueryLedger | None = None
    ) -> "LocalOracle":
        model, meta = load_target_checkpoint(path)
        return cls.from_model(model, int(meta["num_classes"]), config, initial_ledger)


def _default_post(url: str, payload: dict, timeout: float) -> dict:
    import requests

    resp = requests.post(url, json=payload, timeout=timeout)
    resp.raise_for_status()
    return resp.json()


class RemoteOracle(Oracle):
    """Oracle over HTTP POST ``<base_url>/classify``.

    Request body: ``{"shape": [B, C, H, W], "mode": <mode>, "data": <base64
    raw little-endian float32>}``. Response: ``{"labels": [...], "probs":
    [[...]] | null}``. Transient failures are retried idempotently up to
    ``retries`` times; an answered batch is counted exactly once.
    """

    def __init__(
        self,
        base_url: str,
        num_classes: int,
        config: OracleConfig,
        retries: int = 3,
        timeout: float = 30.0,
        post: Callable[[str, dict, float], dict] | None = None,
    ):
        if config.transport is not Transport.REMOTE:
            raise ValueError("RemoteOracle requires REMOTE transport")
        super().__init__(config, num_classes)
        self.base_url = base_url.rstrip("/")
        self.retries = retries
        self.timeout = timeout
        self._post = post or _default_post

    def _answer(self, pixels: torch.Tensor) -> torch.Tensor:
        arr = pixels.detach().cpu().numpy().astype("<f4", copy=False)
        payload = {
            "shape": list(arr.shape),
            "mode": self.config.mode.value,
            "data": base64.b64encode(arr.tobytes()).decode("ascii"),
        }
        last_error: Exception | None = None
        for _ in range(self.retries + 1):
            try:
                reply = self._post(f"{self.base_url}/classify", payload, self.timeout)
                break
            except Exception as exc:
                last_error = exc
        else:
            raise TransportError(f"POST {self.base_url}/classify failed: {last_error}", self.retries)
        if reply.get("probs") is not None:
            return torch.from_numpy(np.asarray(reply["probs"], dtype=np.float64))
        labels = np.asarray(reply["labels"], dtype=np.int64)
        onehot = np.zeros((labels.size, self.num_classes), dtype=np.float64)
        onehot[np.arange(labels.size), labels] = 1.0
        return torch.from_numpy(onehot)


class RecordingOracle:
    """Wrapper that records every answered batch; used to audit metering.

    ``images_seen`` must equal the wrapped ledger's ``total`` after any run.
    """

    def __init__(self, inner: Oracle):
        self.inner = inner
        self.images_seen = 0
        self.per_stage = {StageTag.STAGE1: 0, StageTag.STAGE2: 0, StageTag.EVAL: 0}
        self._lock = threading.Lock()

    @property
    def config(self) -> OracleConfig:
        return self.inner.config

    @property
    def num_classes(self) -> int:
        return self.inner.num_classes

    def query(self, batch: ImageBatch, stage: StageTag) -> list[OracleOutput]:
        outputs = self.inner.query(batch, stage)
        with self._lock:
            self.images_seen += len(batch)
            self.per_stage[stage] += len(batch)
        return outputs

    def snapshot_ledger(self) -> QueryLedger:
        return self.inner.snapshot_ledger()
