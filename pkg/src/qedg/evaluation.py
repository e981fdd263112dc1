"""Fidelity metrics and transfer-attack protocols.

Adversarial examples are crafted white-box on the substitute and judged on
the target.  Only samples the target classifies correctly are attacked; in
targeted mode each gets a seeded random target class different from its
true label.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import kernels
from . import tensor as T
from .losses import per_sample_cross_entropy
from .tensor import DTYPE, NonFiniteError, Tensor


def predict_labels(model, x) -> np.ndarray:
    """Hard labels from a Network, any object with ``predict``, or a logits callable."""
    x = np.asarray(x, dtype=DTYPE)
    if hasattr(model, "predict"):
        return np.asarray(model.predict(x), dtype=np.int64)
    return np.asarray(model(Tensor(x)).data.argmax(axis=1), dtype=np.int64)


def accuracy(model, x, y) -> float:
    y = np.asarray(y, dtype=np.int64)
    if y.size == 0:
        raise ValueError("accuracy of an empty test set is undefined")
    return float((predict_labels(model, x) == y).mean())


def consistency_rate(substitute, target, probes) -> float:
    """Fraction of probes on which the two models' argmax labels agree."""
    probes = np.asarray(probes, dtype=DTYPE)
    if len(probes) == 0:
        raise ValueError("consistency over an empty probe set is undefined")
    return float((predict_labels(substitute, probes) == predict_labels(target, probes)).mean())


@dataclass
class KappaResult:
    kappa: float
    p_o: float
    p_e: float
    n: int


def cohens_kappa(a, b, k: int) -> KappaResult:
    """Chance-corrected agreement of two label vectors over ``k`` classes.

    p_o is the diagonal mass of the confusion matrix, p_e the sum over
    classes of the product of the two marginals.
    """
    a = np.asarray(a, dtype=np.int64)
    b = np.asarray(b, dtype=np.int64)
    if a.shape != b.shape:
        raise ValueError("prediction vectors differ in length")
    n = a.size
    if n == 0:
        raise ValueError("kappa of zero samples is undefined")
    cm = kernels.confusion_matrix(a, b, k).astype(np.float64)
    p_o = float(np.trace(cm) / n)
    p_e = float((cm.sum(axis=1) / n) @ (cm.sum(axis=0) / n))
    if p_e >= 1.0:
        kappa = 1.0 if p_o >= 1.0 else 0.0
    else:
        kappa = (p_o - p_e) / (1.0 - p_e)
    return KappaResult(kappa, p_o, p_e, n)


@dataclass
class AttackParams:
    kind: str  # "fgsm" | "bim" | "pgd"
    epsilon: float
    step_size: float = 0.01
    iterations: int | None = None
    targeted: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("fgsm", "bim", "pgd"):
            raise ValueError(f"unknown attack kind '{self.kind}'")
        if self.epsilon < 0 or self.step_size <= 0:
            raise ValueError("epsilon must be >= 0 and step_size > 0")
        if self.iterations is not None and self.iterations < 1:
            raise ValueError("iterations must be >= 1")

    @property
    def effective_step(self) -> float:
        return min(self.step_size, self.epsilon)

    @property
    def effective_iterations(self) -> int:
        if self.iterations is not None:
            return self.iterations
        if self.epsilon == 0:
            return 1
        return max(1, math.ceil(1.5 * self.epsilon / self.step_size))


def _model_logits(model, x: Tensor) -> Tensor:
    if hasattr(model, "forward"):
        return model.forward(x, frozen=True)
    return model(x)


def _loss_gradient(model, x: np.ndarray, labels: np.ndarray) -> np.ndarray:
    xt = Tensor(x, requires_grad=True, name="adv_input")
    loss = T.tsum(per_sample_cross_entropy(_model_logits(model, xt), labels))
    loss.backward()
    g = xt.grad
    if g is None:
        return np.zeros_like(x)
    if not np.isfinite(g).all():
        raise NonFiniteError("adv_input", "input gradient")
    return g


def craft_adversarial(model, x, labels, params: AttackParams, bounds=(0.0, 1.0)) -> np.ndarray:
    """FGSM / BIM / PGD inside the L-infinity ball of radius epsilon.

    ``labels`` are the true labels (untargeted: climb their loss) or the
    chosen target labels (targeted: descend their loss).  ``bounds`` is a
    (low, high) pair of scalars or per-feature arrays.
    """
    x = np.asarray(x, dtype=DTYPE)
    labels = np.asarray(labels, dtype=np.int64)
    eps = DTYPE(params.epsilon)
    low = np.broadcast_to(np.asarray(bounds[0], dtype=DTYPE), x.shape[1:])
    high = np.broadcast_to(np.asarray(bounds[1], dtype=DTYPE), x.shape[1:])
    ball_lo = np.maximum(x - eps, low)
    ball_hi = np.minimum(x + eps, high)
    if params.epsilon == 0:
        return x.copy()
    direction = -1.0 if params.targeted else 1.0
    if params.kind == "fgsm":
        g = _loss_gradient(model, x, labels)
        return np.clip(x + direction * eps * np.sign(g), ball_lo, ball_hi).astype(DTYPE)
    adv = x.copy()
    if params.kind == "pgd":
        rng = np.random.default_rng(params.seed)
        adv = np.clip(x + rng.uniform(-eps, eps, size=x.shape).astype(DTYPE), ball_lo, ball_hi)
    step = DTYPE(params.effective_step)
    for _ in range(params.effective_iterations):
        g = _loss_gradient(model, adv, labels)
        adv = np.clip(adv + direction * step * np.sign(g), ball_lo, ball_hi).astype(DTYPE)
    return adv


@dataclass
class ASRResult:
    attack: str
    targeted: bool
    epsilon: float
    rate: float | None
    n_evaluated: int
    n_success: int

    @property
    def empty_denominator(self) -> bool:
        return self.n_evaluated == 0


def _eligible_and_targets(target, x, y, targeted: bool, k: int, seed: int):
    y = np.asarray(y, dtype=np.int64)
    eligible = np.flatnonzero(predict_labels(target, x) == y)
    goal = y[eligible]
    if targeted:
        rng = np.random.default_rng(seed)
        goal = (goal + rng.integers(1, k, size=goal.shape[0])) % k
    return eligible, goal


def _judge(target, x_adv, y_true, goal, targeted: bool) -> int:
    pred = predict_labels(target, x_adv)
    hits = pred == goal if targeted else pred != y_true
    return int(hits.sum())


def attack_success_rate(substitute, target, x, y, params: AttackParams, bounds=(0.0, 1.0), num_classes=None) -> ASRResult:
    """Transfer ASR: craft on the substitute, judge on the target."""
    x = np.asarray(x, dtype=DTYPE)
    k = num_classes or getattr(target, "num_classes", None) or int(np.max(y)) + 1
    eligible, goal = _eligible_and_targets(target, x, y, params.targeted, k, params.seed)
    if eligible.size == 0:
        return ASRResult(params.kind, params.targeted, params.epsilon, None, 0, 0)
    x_adv = craft_adversarial(substitute, x[eligible], goal, params, bounds)
    wins = _judge(target, x_adv, np.asarray(y)[eligible], goal, params.targeted)
    return ASRResult(params.kind, params.targeted, params.epsilon, wins / eligible.size, int(eligible.size), wins)


def random_noise_asr(target, x, y, epsilon: float, bounds=(0.0, 1.0), seed: int = 0, targeted: bool = False, num_classes=None) -> ASRResult:
    """Baseline: random corner of the epsilon ball instead of a crafted step."""
    x = np.asarray(x, dtype=DTYPE)
    k = num_classes or getattr(target, "num_classes", None) or int(np.max(y)) + 1
    eligible, goal = _eligible_and_targets(target, x, y, targeted, k, seed)
    if eligible.size == 0:
        return ASRResult("noise", targeted, epsilon, None, 0, 0)
    rng = np.random.default_rng(seed + 1)
    xe = x[eligible]
    signs = rng.choice(np.array([-1.0, 1.0], dtype=DTYPE), size=xe.shape)
    low = np.asarray(bounds[0], dtype=DTYPE)
    high = np.asarray(bounds[1], dtype=DTYPE)
    x_adv = np.clip(xe + DTYPE(epsilon) * signs, low, high).astype(DTYPE)
    wins = _judge(target, x_adv, np.asarray(y)[eligible], goal, targeted)
    return ASRResult("noise", targeted, epsilon, wins / eligible.size, int(eligible.size), wins)


@dataclass
class MetricsReport:
    accuracy: float | None = None
    consistency: float | None = None
    kappa: KappaResult | None = None
    asr_table: list[ASRResult] = field(default_factory=list)
    queries: int | None = None
    n_test: int | None = None
    n_probe: int | None = None

    def to_dict(self) -> dict:
        return {
            "schema": "qedg.metrics/1",
            "accuracy": self.accuracy,
            "consistency": self.consistency,
            "kappa": None if self.kappa is None else asdict(self.kappa),
            "queries": self.queries,
            "n_test": self.n_test,
            "n_probe": self.n_probe,
            "asr": [
                {**asdict(c), "empty_denominator": c.empty_denominator}
                for c in self.asr_table
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        kappa = KappaResult(**d["kappa"]) if d.get("kappa") else None
        cells = [ASRResult(**{k: v for k, v in c.items() if k != "empty_denominator"}) for c in d.get("asr", [])]
        return cls(d.get("accuracy"), d.get("consistency"), kappa, cells, d.get("queries"), d.get("n_test"), d.get("n_probe"))


def build_report(substitute, probe=None, test=None, queries=None, target=None) -> MetricsReport:
    """Accuracy on ``test`` (x, y); consistency and kappa against ``probe``
    target labels (or ``target`` predictions on ``test``)."""
    rep = MetricsReport(queries=queries)
    k = substitute.num_classes
    if test is not None and len(test[1]):
        rep.accuracy = accuracy(substitute, test[0], test[1])
        rep.n_test = int(len(test[1]))
    probe_x = probe_y = None
    if probe is not None:
        probe_x, probe_y = probe.x, probe.target_labels
    elif target is not None and test is not None:
        probe_x, probe_y = test[0], predict_labels(target, test[0])
    if probe_x is not None and len(probe_x):
        sub_y = predict_labels(substitute, probe_x)
        rep.consistency = float((sub_y == probe_y).mean())
        rep.kappa = cohens_kappa(probe_y, sub_y, k)
        rep.n_probe = int(len(probe_x))
    return rep
