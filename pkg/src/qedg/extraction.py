"""QEDG attack loop: synthesize, query, bank, augment, train.

Each outer epoch draws a class-balanced batch of pseudo labels and fresh
noise, runs ``inner_steps`` generator updates against the frozen
substitute, sends the final synthetic batch to the oracle once, appends the
(feature, oracle label) pairs to the memory bank and then trains the
substitute on the bank.  Banked samples the substitute already agrees with
are trained on an augmented copy under their stored label; disputed ones
are trained on as stored with weight ``gamma``.  Only the query step touches
the oracle.
"""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import kernels
from . import tensor as T
from .losses import LossWeights, generator_loss, substitute_loss
from .nets import Network, one_hot, sample_pseudo_labels
from .oracle import BudgetExceeded, Oracle, RemoteError
from .tensor import DTYPE, NonFiniteError, Optimizer

log = logging.getLogger(__name__)

IMAGE_AUGMENTATIONS = ("hflip", "vflip", "rotate")
VECTOR_AUGMENTATIONS = ("jitter",)


@dataclass
class ExtractionConfig:
    alpha: float = 5.0
    beta: float = 0.7
    gamma: float = 5.0
    inner_steps: int = 5
    batch_size: int = 64
    query_budget: int = 2000
    augmentations: tuple[str, ...] = VECTOR_AUGMENTATIONS
    rotate_degrees: float = 15.0
    jitter_sigma: float = 0.01
    jitter_scale: tuple[float, ...] | None = None
    image_shape: tuple[int, int] | None = None
    enable_qa: bool = True
    enable_harm: bool = True
    enable_div: bool = True
    diversity_pairing: str = "same_class"
    dissimilarity: str = "cosine_distance"
    harmony_on: str = "probs"
    generator_lr: float = 1e-3
    substitute_optimizer: str = "sgd_momentum"  # or "adam"
    substitute_lr: float = 0.01
    substitute_momentum: float = 0.9
    substitute_batch_size: int = 256
    substitute_passes: int = 1
    replay_cap: int = 8192
    seed: int = 0

    def __post_init__(self):
        self.augmentations = tuple(self.augmentations)
        if self.image_shape is not None:
            self.image_shape = tuple(int(v) for v in self.image_shape)
        if self.jitter_scale is not None:
            self.jitter_scale = tuple(float(v) for v in self.jitter_scale)
        if self.inner_steps < 1:
            raise ValueError("inner_steps (E) must be >= 1")
        if self.batch_size < 1 or self.substitute_batch_size < 1 or self.substitute_passes < 1:
            raise ValueError("batch sizes and substitute_passes must be positive")
        if self.query_budget < 0:
            raise ValueError("query_budget must be nonnegative")
        if self.replay_cap < 1:
            raise ValueError("replay_cap must be positive")
        unknown = set(self.augmentations) - set(IMAGE_AUGMENTATIONS) - set(VECTOR_AUGMENTATIONS)
        if unknown:
            raise ValueError(f"unknown augmentations {sorted(unknown)}")
        if self.enable_qa and not self.augmentations:
            raise ValueError("query-free augmentation enabled with an empty augmentation set")
        if self.image_shape is None and set(self.augmentations) & set(IMAGE_AUGMENTATIONS):
            raise ValueError("flip/rotate augmentations need image_shape")
        if self.substitute_optimizer not in ("sgd_momentum", "adam"):
            raise ValueError(f"unknown substitute optimizer '{self.substitute_optimizer}'")
        LossWeights(self.alpha, self.beta, self.gamma)

    @property
    def weights(self) -> LossWeights:
        return LossWeights(
            self.alpha if self.enable_harm else 0.0,
            self.beta if self.enable_div else 0.0,
            self.gamma,
        )

    def to_dict(self) -> dict:
        d = asdict(self)
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = list(v)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ExtractionConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise KeyError(f"unknown extraction config keys: {sorted(unknown)}")
        return cls(**d)

    def ablate(self, components) -> "ExtractionConfig":
        """Copy with the named components ("qa", "harm", "div") disabled."""
        d = self.to_dict()
        for c in components:
            if c not in ("qa", "harm", "div"):
                raise ValueError(f"unknown ablation component '{c}'")
            d[f"enable_{c}"] = False
        return ExtractionConfig.from_dict(d)


def desk_preset(**overrides) -> ExtractionConfig:
    """Settings tuned for 2-D tasks at a few thousand queries.

    The dataclass defaults follow the large-scale image setting (SGD on
    batches of 256, one pass per epoch, generator lr 1e-3), which leaves a
    small substitute undertrained after ~30 epochs.  This preset trains the
    substitute with Adam on batches of 64 for five passes per epoch and
    speeds up the generator.  Loss weights are unchanged.
    """
    d = dict(
        substitute_optimizer="adam",
        substitute_lr=0.003,
        substitute_batch_size=64,
        substitute_passes=5,
        generator_lr=0.01,
    )
    d.update(overrides)
    return ExtractionConfig(**d)


def baseline_config(cfg: ExtractionConfig) -> ExtractionConfig:
    """Cross-entropy-only generator, no augmentation, unweighted substitute loss."""
    d = cfg.to_dict()
    d.update(alpha=0.0, beta=0.0, gamma=1.0, enable_qa=False)
    return ExtractionConfig.from_dict(d)


@dataclass(frozen=True)
class MemoryBankEntry:
    feature: np.ndarray
    target_label: int
    epoch_added: int


class MemoryBank:
    """Append-only store of (synthetic feature, oracle label) pairs."""

    def __init__(self):
        self._x: list[np.ndarray] = []
        self._y: list[np.ndarray] = []
        self._epoch: list[np.ndarray] = []
        self._cache: tuple[np.ndarray, np.ndarray, np.ndarray] | None = None

    def __len__(self) -> int:
        return sum(len(y) for y in self._y)

    def add(self, x: np.ndarray, y: np.ndarray, epoch: int) -> None:
        x = np.array(x, dtype=DTYPE)
        y = np.array(y, dtype=np.int64)
        if len(x) != len(y):
            raise ValueError("features and labels differ in length")
        x.setflags(write=False)
        y.setflags(write=False)
        self._x.append(x)
        self._y.append(y)
        self._epoch.append(np.full(len(y), epoch, dtype=np.int64))
        self._cache = None

    def _arrays(self):
        if self._cache is None:
            if not self._y:
                return np.zeros((0, 0), dtype=DTYPE), np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64)
            cache = (np.concatenate(self._x), np.concatenate(self._y), np.concatenate(self._epoch))
            for arr in cache:
                arr.setflags(write=False)
            self._cache = cache
        return self._cache

    @property
    def features(self) -> np.ndarray:
        return self._arrays()[0]

    @property
    def labels(self) -> np.ndarray:
        return self._arrays()[1]

    @property
    def epochs(self) -> np.ndarray:
        return self._arrays()[2]

    def entries(self):
        x, y, e = self._arrays()
        for i in range(len(y)):
            yield MemoryBankEntry(x[i], int(y[i]), int(e[i]))


@dataclass
class EpochRecord:
    epoch: int
    q: int
    l_clf: float
    l_harm: float
    l_div: float
    l_g: float
    l_s: float
    disputed_fraction: float
    probe_consistency: float | None = None


TRACE_COLUMNS = (
    "epoch", "q", "L_clf", "L_harm", "L_div", "L_G", "L_S", "disputed_fraction", "probe_consistency",
)


@dataclass
class AttackTrace:
    records: list[EpochRecord] = field(default_factory=list)

    def append(self, rec: EpochRecord) -> None:
        if self.records and rec.q <= self.records[-1].q:
            raise ValueError("trace q must be strictly increasing")
        self.records.append(rec)

    def __len__(self) -> int:
        return len(self.records)

    def rows(self) -> list[tuple]:
        return [
            (r.epoch, r.q, r.l_clf, r.l_harm, r.l_div, r.l_g, r.l_s, r.disputed_fraction, r.probe_consistency)
            for r in self.records
        ]

    def to_dicts(self) -> list[dict]:
        return [asdict(r) for r in self.records]

    @classmethod
    def from_dicts(cls, rows) -> "AttackTrace":
        return cls([EpochRecord(**r) for r in rows])


class SynthesisError(FloatingPointError):
    def __init__(self, step: int, components: dict, cause: Exception):
        super().__init__(f"generator loss became non-finite at inner step {step}: {cause}; last components {components}")
        self.step = step
        self.components = components


@dataclass
class SynthesisResult:
    features: np.ndarray
    l_clf: float
    l_harm: float
    l_div: float
    l_g: float


def synthesize_batch(
    generator: Network,
    gen_opt: Optimizer,
    pseudo_labels: np.ndarray,
    z: np.ndarray,
    substitute: Network,
    config: ExtractionConfig,
) -> SynthesisResult:
    """Run E generator updates against the frozen substitute; no queries."""
    onehot = one_hot(pseudo_labels, generator.num_classes)
    last: dict = {}
    x = parts = None
    for step in range(config.inner_steps):
        try:
            x = generator.generate(z, onehot)
            logits = substitute.forward(x, frozen=True)
            parts = generator_loss(
                logits, pseudo_labels, None, x, config.weights,
                pairing=config.diversity_pairing,
                dissimilarity=config.dissimilarity,
                harmony_on=config.harmony_on,
            )
            parts.total.backward()
            gen_opt.step()
        except NonFiniteError as exc:
            raise SynthesisError(step, last, exc) from exc
        last = {"L_clf": parts.clf, "L_harm": parts.harm, "L_div": parts.div, "L_G": parts.total.item()}
    return SynthesisResult(x.data.copy(), parts.clf, parts.harm, parts.div, parts.total.item())


def query_and_bank(oracle: Oracle, features: np.ndarray, bank: MemoryBank, epoch: int) -> np.ndarray:
    """One hard-label query per feature; the whole batch is banked or none of it."""
    labels = oracle.predict_hard(features)
    bank.add(features, labels, epoch)
    return labels


def augment(
    x: np.ndarray,
    op: str,
    rng: np.random.Generator,
    image_shape: tuple[int, int] | None = None,
    rotate_degrees: float = 15.0,
    jitter_sigma: float = 0.01,
    jitter_scale=1.0,
) -> np.ndarray:
    """Label-preserving transform of one sample or an N x D batch.

    ``hflip``/``vflip``/``rotate`` reshape each row to ``image_shape``;
    rotation is by +/- ``rotate_degrees`` (sign drawn from ``rng``) with
    nearest-neighbour resampling and zero fill.  ``jitter`` adds Gaussian
    noise with standard deviation ``jitter_sigma * jitter_scale``.
    """
    x = np.asarray(x, dtype=DTYPE)
    single = x.ndim == 1
    batch = x[None, :] if single else x
    if op in IMAGE_AUGMENTATIONS:
        if image_shape is None:
            raise ValueError(f"augmentation '{op}' needs an image layout")
        h, w = image_shape
        if batch.shape[1] != h * w:
            raise ValueError(f"sample of {batch.shape[1]} values is not a {h}x{w} image")
        img = batch.reshape(-1, h, w)
        if op == "hflip":
            out = img[:, :, ::-1]
        elif op == "vflip":
            out = img[:, ::-1, :]
        else:
            signs = rng.choice(np.array([-1.0, 1.0]), size=len(img))
            out = kernels.rotate_nearest(img, signs * rotate_degrees)
        out = np.ascontiguousarray(out).reshape(batch.shape)
    elif op == "jitter":
        scale = np.asarray(jitter_scale, dtype=np.float64)
        noise = rng.standard_normal(batch.shape) * (jitter_sigma * scale)
        out = (batch + noise).astype(DTYPE)
    else:
        raise ValueError(f"unknown augmentation '{op}'")
    return out[0] if single else out


def _augment_mixed(x: np.ndarray, config: ExtractionConfig, rng: np.random.Generator, scale) -> np.ndarray:
    """One augmented copy per row, operation drawn uniformly per row."""
    ops = rng.integers(0, len(config.augmentations), size=len(x))
    out = np.empty_like(x)
    for i, op in enumerate(config.augmentations):
        idx = np.flatnonzero(ops == i)
        if idx.size:
            out[idx] = augment(
                x[idx], op, rng, config.image_shape, config.rotate_degrees, config.jitter_sigma, scale
            )
    return out


@dataclass
class SubstituteEpochResult:
    loss: float
    disputed_fraction: float
    n_trained: int


def substitute_epoch(
    bank: MemoryBank,
    substitute: Network,
    sub_opt: Optimizer,
    config: ExtractionConfig,
    rng: np.random.Generator,
    jitter_scale=1.0,
) -> SubstituteEpochResult:
    """Train the substitute on the memory bank; no queries.

    The disputed mask is computed once, against the substitute as it stands
    at the start of the epoch.
    """
    if len(bank) == 0:
        raise ValueError("memory bank is empty")
    x_all, y_all = bank.features, bank.labels
    disputed_all = substitute.predict(x_all) != y_all
    fraction = float(disputed_all.mean())

    idx = np.arange(len(y_all))
    if len(idx) > config.replay_cap:
        disputed_idx = idx[disputed_all]
        agreeing_idx = idx[~disputed_all]
        room = max(config.replay_cap - len(disputed_idx), 0)
        picked = rng.choice(agreeing_idx, size=min(room, len(agreeing_idx)), replace=False)
        idx = np.sort(np.concatenate([disputed_idx, picked]))
    x = x_all[idx]
    y = y_all[idx]
    disputed = disputed_all[idx]
    if config.enable_qa and (~disputed).any():
        x = x.copy()
        agree = np.flatnonzero(~disputed)
        x[agree] = _augment_mixed(x[agree], config, rng, jitter_scale)

    gamma = config.gamma
    total, count = 0.0, 0
    bs = config.substitute_batch_size
    for _ in range(config.substitute_passes):
        order = rng.permutation(len(y))
        for start in range(0, len(y), bs):
            b = order[start : start + bs]
            loss = substitute_loss(substitute(x[b]), y[b], disputed[b], gamma)
            loss.backward()
            sub_opt.step()
            total += loss.item() * len(b)
            count += len(b)
    return SubstituteEpochResult(total / count, fraction, len(y))


@dataclass
class ProbeSet:
    """Inputs with the target's labels, for monitoring only (never ledgered)."""

    x: np.ndarray
    target_labels: np.ndarray


@dataclass
class ExtractionResult:
    substitute: Network
    generator: Network
    bank: MemoryBank
    trace: AttackTrace
    queries: int
    status: str = "completed"  # "completed" | "budget_exhausted" | "remote_failure"
    error: str | None = None
    report: object = None


def _default_jitter_scale(generator: Network, config: ExtractionConfig):
    if config.jitter_scale is not None:
        return np.asarray(config.jitter_scale, dtype=np.float64)
    spec = generator.spec
    if spec.output_activation == "box":
        return np.asarray(spec.output_high, dtype=np.float64) - np.asarray(spec.output_low, dtype=np.float64)
    return 1.0


def run_extraction(
    oracle: Oracle,
    config: ExtractionConfig,
    substitute: Network,
    generator: Network,
    probe: ProbeSet | None = None,
    test: tuple[np.ndarray, np.ndarray] | None = None,
) -> ExtractionResult:
    """Attack loop: run epochs until fewer than ``batch_size`` queries remain.

    ``substitute`` and ``generator`` are trained in place.  A refused batch
    (oracle budget guard) or a remote failure ends the run early with the
    trace so far; see ``ExtractionResult.status``.
    """
    from .evaluation import build_report

    if generator.spec.input_dim != substitute.spec.input_dim:
        raise ValueError("generator output dimension differs from substitute input dimension")
    if generator.num_classes != substitute.num_classes:
        raise ValueError("generator and substitute disagree on the number of classes")
    seeds = np.random.SeedSequence(config.seed).spawn(4)
    label_rng, noise_rng, aug_rng, _spare = (np.random.default_rng(s) for s in seeds)
    gen_opt = Optimizer(generator.params, T.adam(config.generator_lr))
    if config.substitute_optimizer == "adam":
        sub_state = T.adam(config.substitute_lr)
    else:
        sub_state = T.sgd(config.substitute_lr, config.substitute_momentum)
    sub_opt = Optimizer(substitute.params, sub_state)
    jitter_scale = _default_jitter_scale(generator, config)
    k = substitute.num_classes
    bank = MemoryBank()
    trace = AttackTrace()
    start = oracle.ledger.count
    status, error = "completed", None
    epoch = 0
    while config.query_budget - (oracle.ledger.count - start) >= config.batch_size:
        epoch += 1
        labels = sample_pseudo_labels(config.batch_size, k, label_rng)
        z = noise_rng.standard_normal((config.batch_size, generator.spec.latent_dim)).astype(DTYPE)
        synth = synthesize_batch(generator, gen_opt, labels, z, substitute, config)
        try:
            query_and_bank(oracle, synth.features, bank, epoch)
        except BudgetExceeded as exc:
            status, error = "budget_exhausted", str(exc)
            log.warning("epoch %d: %s", epoch, exc)
            break
        except RemoteError as exc:
            status, error = "remote_failure", str(exc)
            log.error("epoch %d: %s", epoch, exc)
            break
        oracle.ledger.record_epoch(epoch)
        sub = substitute_epoch(bank, substitute, sub_opt, config, aug_rng, jitter_scale)
        probe_c = None
        if probe is not None:
            probe_c = float((substitute.predict(probe.x) == probe.target_labels).mean())
        rec = EpochRecord(
            epoch=epoch,
            q=oracle.ledger.count - start,
            l_clf=synth.l_clf,
            l_harm=synth.l_harm,
            l_div=synth.l_div,
            l_g=synth.l_g,
            l_s=sub.loss,
            disputed_fraction=sub.disputed_fraction,
            probe_consistency=probe_c,
        )
        trace.append(rec)
        log.info(
            "epoch %d q=%d L_G=%.4f L_S=%.4f disputed=%.3f consistency=%s",
            epoch, rec.q, rec.l_g, rec.l_s, rec.disputed_fraction,
            "n/a" if probe_c is None else f"{probe_c:.4f}",
        )
    queries = oracle.ledger.count - start
    result = ExtractionResult(substitute, generator, bank, trace, queries, status, error)
    result.report = build_report(substitute, probe=probe, test=test, queries=queries)
    return result


def completed_epochs(result: ExtractionResult) -> int:
    return len(result.trace)


def expected_epochs(config: ExtractionConfig) -> int:
    return math.floor(config.query_budget / config.batch_size)
