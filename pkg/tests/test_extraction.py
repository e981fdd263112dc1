import numpy as np
import pytest

from qedg.extraction import (
    AttackTrace,
    EpochRecord,
    ExtractionConfig,
    MemoryBank,
    augment,
    baseline_config,
    completed_epochs,
    desk_preset,
    expected_epochs,
    run_extraction,
    substitute_epoch,
    synthesize_batch,
)
from qedg import tensor as T
from qedg.nets import NetworkSpec, build_network, sample_pseudo_labels
from qedg.oracle import LocalOracle, QueryLedger
from qedg.tensor import Optimizer


def _nets(seed=0, k=2, d=2):
    sub = build_network(NetworkSpec("substitute", d, k, (16, 16), "tanh", seed=seed + 1))
    gen = build_network(NetworkSpec(
        "generator", d, k, (16,), latent_dim=4, output_activation="box",
        output_low=(-2.0,) * d, output_high=(2.0,) * d, seed=seed + 2,
    ))
    return sub, gen


class CountingOracle(LocalOracle):
    def __init__(self, net, ledger=None):
        super().__init__(net, ledger)
        self.calls = []

    def predict_hard(self, x):
        self.calls.append(len(x))
        return super().predict_hard(x)


@pytest.fixture(scope="module")
def small_target():
    return build_network(NetworkSpec("target", 2, 2, (8,), seed=9))


@pytest.mark.parametrize("budget,batch", [(0, 16), (15, 16), (64, 16), (100, 32), (257, 64)])
def test_query_accounting(small_target, budget, batch):
    cfg = desk_preset(query_budget=budget, batch_size=batch, substitute_passes=1, seed=1)
    oracle = CountingOracle(small_target, QueryLedger())
    res = run_extraction(oracle, cfg, *_nets())
    assert res.queries == completed_epochs(res) * batch == oracle.ledger.count
    assert completed_epochs(res) == expected_epochs(cfg)
    # only the query step reaches the oracle: one call per epoch, one batch each
    assert oracle.calls == [batch] * completed_epochs(res)
    assert [h[1] for h in oracle.ledger.history] == [batch * (i + 1) for i in range(completed_epochs(res))]
    qs = [r.q for r in res.trace.records]
    assert qs == sorted(set(qs))


def test_budget_guard_trips_mid_run(small_target):
    cfg = desk_preset(query_budget=200, batch_size=32, substitute_passes=1)
    res = run_extraction(LocalOracle(small_target, QueryLedger(budget=100)), cfg, *_nets())
    assert res.status == "budget_exhausted"
    assert completed_epochs(res) == 3 and res.queries == 96 and len(res.bank) == 96


def test_run_is_deterministic(small_target):
    cfg = desk_preset(query_budget=96, batch_size=32, seed=4)
    a = run_extraction(LocalOracle(small_target), cfg, *_nets(3))
    b = run_extraction(LocalOracle(small_target), cfg, *_nets(3))
    assert a.trace.rows() == b.trace.rows()
    assert a.bank.features.tobytes() == b.bank.features.tobytes()


def test_memory_bank_append_only():
    bank = MemoryBank()
    bank.add(np.zeros((2, 3)), [0, 1], epoch=1)
    bank.add(np.ones((1, 3)), [1], epoch=2)
    assert len(bank) == 3 and bank.epochs.tolist() == [1, 1, 2]
    with pytest.raises(ValueError):
        bank.features[0, 0] = 5
    with pytest.raises(ValueError):
        bank.add(np.zeros((2, 3)), [0], epoch=3)
    assert [e.target_label for e in bank.entries()] == [0, 1, 1]


def test_synthesis_makes_no_queries_and_updates_generator():
    sub, gen = _nets()
    before = gen.params.arrays()
    labels = sample_pseudo_labels(8, 2, np.random.default_rng(0))
    z = np.random.default_rng(1).normal(size=(8, 4)).astype(np.float32)
    sub_before = sub.params.arrays()
    res = synthesize_batch(gen, Optimizer(gen.params, T.adam(0.01)), labels, z, sub, ExtractionConfig(inner_steps=3))
    assert res.features.shape == (8, 2)
    assert any((before[k] != v).any() for k, v in gen.params.arrays().items())
    assert all((sub_before[k] == v).all() for k, v in sub.params.arrays().items())


def test_substitute_epoch_branches():
    sub, _ = _nets()
    x = np.random.default_rng(0).normal(size=(40, 2)).astype(np.float32)
    bank = MemoryBank()
    bank.add(x, sub.predict(x), 1)  # substitute agrees with every stored label
    cfg = ExtractionConfig(substitute_batch_size=8)
    res = substitute_epoch(bank, sub, Optimizer(sub.params, T.sgd()), cfg, np.random.default_rng(0))
    assert res.disputed_fraction == 0.0 and res.n_trained == 40
    bank2 = MemoryBank()
    bank2.add(x, 1 - sub.predict(x), 1)
    res2 = substitute_epoch(bank2, sub, Optimizer(sub.params, T.sgd()), cfg, np.random.default_rng(0))
    assert res2.disputed_fraction == 1.0


def test_gamma_one_without_qa_is_plain_cross_entropy():
    from qedg.losses import classification_loss

    sub, _ = _nets()
    x = np.random.default_rng(5).normal(size=(16, 2)).astype(np.float32)
    y = np.random.default_rng(6).integers(0, 2, 16)
    bank = MemoryBank()
    bank.add(x, y, 1)
    cfg = ExtractionConfig(gamma=1.0, enable_qa=False, substitute_batch_size=16)
    ref = sub.copy()
    res = substitute_epoch(bank, sub, Optimizer(sub.params, T.sgd(0.1, 0.0)), cfg, np.random.default_rng(0))
    assert res.loss == pytest.approx(classification_loss(ref(x), y).item(), rel=1e-6)


def test_replay_cap_keeps_disputed():
    sub, _ = _nets()
    x = np.random.default_rng(0).normal(size=(50, 2)).astype(np.float32)
    y = sub.predict(x)
    y[:5] = 1 - y[:5]
    bank = MemoryBank()
    bank.add(x, y, 1)
    res = substitute_epoch(bank, sub, Optimizer(sub.params, T.sgd()), ExtractionConfig(replay_cap=20), np.random.default_rng(0))
    assert res.n_trained == 20 and res.disputed_fraction == pytest.approx(0.1)


def test_augment_ops():
    rng = np.random.default_rng(0)
    img = rng.random((3, 16)).astype(np.float32)
    for op in ("hflip", "vflip"):
        once = augment(img, op, rng, (4, 4))
        assert not np.array_equal(once, img)
        np.testing.assert_array_equal(augment(once, op, rng, (4, 4)), img)
    np.testing.assert_array_equal(augment(img[0], "hflip", rng, (4, 4)), img[0].reshape(4, 4)[:, ::-1].ravel())
    assert augment(img, "rotate", rng, (4, 4)).shape == img.shape
    j = augment(np.zeros((1000, 2)), "jitter", rng, jitter_sigma=0.01, jitter_scale=np.array([1.0, 4.0]))
    np.testing.assert_allclose(j.std(axis=0), [0.01, 0.04], rtol=0.1)
    with pytest.raises(ValueError):
        augment(img, "rotate", rng)
    with pytest.raises(ValueError):
        augment(img, "shear", rng, (4, 4))


def test_config_validation_and_ablation():
    with pytest.raises(ValueError):
        ExtractionConfig(inner_steps=0)
    with pytest.raises(ValueError):
        ExtractionConfig(augmentations=("hflip",))
    with pytest.raises(ValueError):
        ExtractionConfig(augmentations=())
    with pytest.raises(KeyError):
        ExtractionConfig.from_dict({"alpah": 1.0})
    cfg = ExtractionConfig().ablate(["harm", "qa"])
    assert cfg.weights.alpha == 0 and cfg.weights.beta == 0.7 and not cfg.enable_qa
    with pytest.raises(ValueError):
        ExtractionConfig().ablate(["nothing"])
    base = baseline_config(ExtractionConfig())
    assert (base.alpha, base.beta, base.gamma, base.enable_qa) == (0.0, 0.0, 1.0, False)
    assert ExtractionConfig.from_dict(desk_preset().to_dict()) == desk_preset()


def test_trace_requires_increasing_q():
    tr = AttackTrace()
    tr.append(EpochRecord(1, 64, 0, 0, 0, 0, 0, 0))
    with pytest.raises(ValueError):
        tr.append(EpochRecord(2, 64, 0, 0, 0, 0, 0, 0))
    assert AttackTrace.from_dicts(tr.to_dicts()).rows() == tr.rows()


def test_dimension_mismatch_rejected(small_target):
    sub, _ = _nets()
    _, gen3 = _nets(d=3)
    with pytest.raises(ValueError):
        run_extraction(LocalOracle(small_target), ExtractionConfig(query_budget=64), sub, gen3)
