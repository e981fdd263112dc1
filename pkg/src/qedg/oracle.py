"""Hard-label oracles and query accounting.

Every oracle answers a batch of inputs with class indices only and charges
one query per sample to its :class:`QueryLedger`.  Budgets are checked
before a batch is sent; a batch that cannot be admitted in full is refused
and nothing is charged.
"""
from __future__ import annotations

import json
import logging
import socket
import threading
import urllib.error
import urllib.request
from dataclasses import dataclass, field

import numpy as np

from .nets import Network

log = logging.getLogger(__name__)


class BudgetExceeded(RuntimeError):
    def __init__(self, count: int, budget: int | None, requested: int):
        super().__init__(f"query budget exhausted: q={count}, budget={budget}, requested {requested}")
        self.count = count
        self.budget = budget
        self.requested = requested


class RemoteError(RuntimeError):
    """Base class for failures of the remote oracle."""


class RemoteUnavailable(RemoteError):
    pass


class RemoteTimeout(RemoteUnavailable):
    pass


class RemoteHTTPError(RemoteError):
    def __init__(self, status: int, body: str = ""):
        super().__init__(f"HTTP {status}: {body[:200]}")
        self.status = status


class MalformedResponse(RemoteError):
    pass


@dataclass
class QueryLedger:
    """Monotone count of samples sent to the oracle."""

    budget: int | None = None
    count: int = 0
    history: list[tuple[int, int]] = field(default_factory=list)

    def __post_init__(self):
        self._lock = threading.Lock()
        if self.budget is not None and self.budget < 0:
            raise ValueError("budget must be nonnegative")

    @property
    def remaining(self) -> int | None:
        return None if self.budget is None else self.budget - self.count

    def check(self, n: int) -> None:
        with self._lock:
            if self.budget is not None and self.count + n > self.budget:
                raise BudgetExceeded(self.count, self.budget, n)

    def charge(self, n: int) -> None:
        with self._lock:
            if self.budget is not None and self.count + n > self.budget:
                raise BudgetExceeded(self.count, self.budget, n)
            self.count += int(n)

    def record_epoch(self, epoch: int) -> None:
        self.history.append((int(epoch), self.count))


class Oracle:
    """Common surface: ``predict_hard(x) -> labels`` plus a ledger."""

    num_classes: int
    ledger: QueryLedger

    def predict_hard(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError


def _as_batch(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float32)
    if x.ndim != 2:
        raise ValueError(f"oracle input must be a 2-D batch, got shape {x.shape}")
    return x


class LocalOracle(Oracle):
    """Frozen in-process target; ties in the argmax go to the lowest class."""

    def __init__(self, network: Network, ledger: QueryLedger | None = None):
        self.network = network
        self.num_classes = network.num_classes
        self.ledger = ledger if ledger is not None else QueryLedger()

    def predict_hard(self, x) -> np.ndarray:
        x = _as_batch(x)
        self.ledger.check(len(x))
        labels = self.network.predict(x)
        self.ledger.charge(len(x))
        return labels


def noisy_predict(oracle: Oracle, x, phi: float, rng: np.random.Generator) -> np.ndarray:
    """Query ``oracle`` and replace each label, with probability ``phi``, by a
    uniformly drawn incorrect class."""
    if not 0.0 <= phi < 0.5:
        raise ValueError(f"flip probability must lie in [0, 0.5), got {phi}")
    clean = oracle.predict_hard(x)
    return _flip(clean, phi, oracle.num_classes, rng)


def _flip(clean: np.ndarray, phi: float, k: int, rng: np.random.Generator) -> np.ndarray:
    if phi == 0.0:
        return clean
    flip = rng.random(clean.shape[0]) < phi
    # offset in 1..k-1 lands on a different class, uniformly
    offset = rng.integers(1, k, size=clean.shape[0])
    return np.where(flip, (clean + offset) % k, clean).astype(np.int64)


class NoisyOracle(Oracle):
    """Wraps an oracle and flips each answer with probability ``phi``."""

    def __init__(self, inner: Oracle, phi: float, rng: np.random.Generator | int = 0):
        if not 0.0 <= phi < 0.5:
            raise ValueError(f"flip probability must lie in [0, 0.5), got {phi}")
        self.inner = inner
        self.phi = float(phi)
        self.rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
        self.num_classes = inner.num_classes

    @property
    def ledger(self) -> QueryLedger:
        return self.inner.ledger

    def predict_hard(self, x) -> np.ndarray:
        return noisy_predict(self.inner, x, self.phi, self.rng)


class RemoteOracle(Oracle):
    """Client for the JSON ``POST /predict`` hard-label protocol.

    Request body ``{"instances": [[...], ...]}``; response
    ``{"labels": [...], "model_id": "..."}``.  HTTP 429 means the server's
    budget guard tripped and is raised as :class:`BudgetExceeded` without
    retrying.  Other failures are retried up to ``retries`` extra times.
    Failed batches are never charged to the ledger.
    """

    def __init__(
        self,
        url: str,
        num_classes: int,
        ledger: QueryLedger | None = None,
        timeout: float = 10.0,
        retries: int = 2,
    ):
        self.url = url.rstrip("/")
        if not self.url.endswith("/predict"):
            self.url += "/predict"
        self.num_classes = int(num_classes)
        self.ledger = ledger if ledger is not None else QueryLedger()
        self.timeout = timeout
        self.retries = int(retries)
        self.model_id: str | None = None
        self._seq = 0

    def _request_once(self, body: bytes, n: int) -> np.ndarray:
        req = urllib.request.Request(
            self.url, data=body, method="POST", headers={"Content-Type": "application/json"}
        )
        try:
            with urllib.request.urlopen(req, timeout=self.timeout) as resp:
                payload = resp.read()
        except urllib.error.HTTPError as exc:
            text = exc.read().decode("utf-8", "replace")
            if exc.code == 429:
                raise BudgetExceeded(self.ledger.count, self.ledger.budget, n) from exc
            raise RemoteHTTPError(exc.code, text) from exc
        except (socket.timeout, TimeoutError) as exc:
            raise RemoteTimeout(f"timeout after {self.timeout}s contacting {self.url}") from exc
        except urllib.error.URLError as exc:
            if isinstance(exc.reason, (socket.timeout, TimeoutError)):
                raise RemoteTimeout(f"timeout after {self.timeout}s contacting {self.url}") from exc
            raise RemoteUnavailable(f"cannot reach {self.url}: {exc.reason}") from exc
        except (ConnectionError, OSError) as exc:
            raise RemoteUnavailable(f"cannot reach {self.url}: {exc}") from exc
        try:
            doc = json.loads(payload)
            labels = doc["labels"]
        except (ValueError, KeyError, TypeError) as exc:
            raise MalformedResponse(f"unparseable response: {payload[:200]!r}") from exc
        if not isinstance(labels, list) or len(labels) != n:
            raise MalformedResponse(f"expected {n} labels, got {len(labels) if isinstance(labels, list) else labels!r}")
        if not all(isinstance(v, int) and not isinstance(v, bool) and 0 <= v < self.num_classes for v in labels):
            raise MalformedResponse(f"labels outside [0, {self.num_classes})")
        self.model_id = doc.get("model_id")
        return np.asarray(labels, dtype=np.int64)

    def predict_hard(self, x) -> np.ndarray:
        x = _as_batch(x)
        n = len(x)
        self.ledger.check(n)
        body = json.dumps({"instances": x.tolist()}).encode("utf-8")
        self._seq += 1
        last: RemoteError | None = None
        for attempt in range(self.retries + 1):
            try:
                labels = self._request_once(body, n)
            except RemoteError as exc:
                last = exc
                log.warning("remote request #%d attempt %d failed: %s", self._seq, attempt + 1, exc)
                continue
            self.ledger.charge(n)
            log.debug("remote request #%d: %d instances -> ok", self._seq, n)
            return labels
        assert last is not None
        if isinstance(last, (RemoteUnavailable, MalformedResponse)):
            raise last
        raise RemoteUnavailable(f"remote oracle failed after {self.retries + 1} attempts: {last}") from last


def predict_hard(oracle: Oracle, x) -> np.ndarray:
    return oracle.predict_hard(x)
