import json

import numpy as np
import pytest

from qedg.evaluation import MetricsReport, build_report
from qedg.extraction import AttackTrace, EpochRecord
from qedg.io.checkpoint import CorruptCheckpoint, UnsupportedVersion, load_checkpoint, model_id, save_checkpoint
from qedg.io.config import ConfigError, RunConfig, load_config, parse_config
from qedg.io.datasets import (
    MalformedDataset,
    blobs,
    glyphs,
    load_dataset,
    load_idx_images,
    probe_grid,
    read_idx,
    two_moons,
    write_idx,
)
from qedg.io.report import emit_report, write_json
from qedg.io.server import TargetServer
from qedg.nets import NetworkSpec, build_network

# -- datasets ------------------------------------------------------------------------------


def test_two_moons_deterministic_and_standardised():
    a, b = two_moons(seed=3), two_moons(seed=3)
    assert a.x_train.tobytes() == b.x_train.tobytes() and a.y_test.tobytes() == b.y_test.tobytes()
    np.testing.assert_allclose(a.x_train.mean(axis=0), 0, atol=1e-5)
    np.testing.assert_allclose(a.x_train.std(axis=0), 1, atol=1e-4)
    assert a.x_train.shape == (1000, 2) and a.num_classes == 2


def test_blobs_and_probe_grid():
    ds = blobs(num_classes=4, spread=0.5, n_train=200, n_test=100)
    assert ds.num_classes == 4 and set(np.unique(ds.y_train)) == {0, 1, 2, 3}
    grid = probe_grid(ds, 10)
    assert grid.shape == (100, 2)
    np.testing.assert_allclose(grid.min(axis=0), ds.low)
    np.testing.assert_allclose(grid.max(axis=0), ds.high)


def test_idx_round_trip(tmp_path):
    imgs = np.random.default_rng(0).integers(0, 256, (10, 28, 28)).astype(np.uint8)
    labels = (np.arange(10) % 3).astype(np.uint8)
    write_idx(tmp_path / "img.idx", imgs)
    write_idx(tmp_path / "lab.idx", labels)
    raw = (tmp_path / "img.idx").read_bytes()
    assert raw[:4] == bytes([0, 0, 8, 3])
    np.testing.assert_array_equal(read_idx(tmp_path / "img.idx"), imgs)
    ds = load_idx_images(tmp_path / "img.idx", tmp_path / "lab.idx", test_fraction=0.2)
    assert ds.x_train.shape == (8, 784) and ds.x_test.shape == (2, 784)
    assert ds.x_train.min() >= 0 and ds.x_train.max() <= 1 and ds.image_shape == (28, 28)


def test_idx_malformed(tmp_path):
    imgs = np.zeros((3, 4, 4), dtype=np.uint8)
    write_idx(tmp_path / "ok.idx", imgs)
    raw = (tmp_path / "ok.idx").read_bytes()
    (tmp_path / "short.idx").write_bytes(raw[:-5])
    with pytest.raises(MalformedDataset, match="expected 64 bytes.*found 59"):
        read_idx(tmp_path / "short.idx")
    (tmp_path / "magic.idx").write_bytes(b"\x01\x00" + raw[2:])
    with pytest.raises(MalformedDataset, match="magic"):
        read_idx(tmp_path / "magic.idx")
    with pytest.raises(MalformedDataset, match="missing"):
        read_idx(tmp_path / "nope.idx")


def test_glyphs_surrogate():
    ds = glyphs(n_train=40, n_test=8, size=12, seed=1)
    assert ds.x_train.shape == (40, 144) and ds.num_classes == 4 and ds.image_shape == (12, 12)
    assert ds.x_train.min() >= 0 and ds.x_train.max() <= 1
    assert glyphs(n_train=40, n_test=8, seed=1).x_train.tobytes() == ds.x_train.tobytes()


def test_load_dataset_dispatch():
    ds = load_dataset({"kind": "blobs", "num_classes": 3, "spread": 1.0, "n_train": 50, "n_test": 10, "seed": 1})
    assert ds.name == "blobs"
    with pytest.raises(MalformedDataset):
        load_dataset({"kind": "idx", "images_path": None})


# -- checkpoints ---------------------------------------------------------------------------


@pytest.fixture()
def net():
    return build_network(NetworkSpec("target", 2, 3, (5, 4), seed=8))


def test_checkpoint_round_trip_bit_exact(tmp_path, net):
    save_checkpoint(tmp_path / "t", net, {"acc": 0.5})
    back = load_checkpoint(tmp_path / "t")
    assert back.spec == net.spec
    for (n1, t1), (n2, t2) in zip(net.params, back.params):
        assert n1 == n2 and t1.data.tobytes() == t2.data.tobytes()
    x = np.random.default_rng(0).normal(size=(30, 2))
    assert back.logits(x).tobytes() == net.logits(x).tobytes()
    manifest = json.loads((tmp_path / "t.json").read_text())
    assert manifest["format_version"] == 1 and manifest["metrics"] == {"acc": 0.5}
    offsets = [(e["offset"], e["length"]) for e in manifest["tensors"]]
    assert offsets[0][0] == 0 and all(a + la == b for (a, la), (b, _) in zip(offsets, offsets[1:]))
    assert sum(l for _, l in offsets) == (tmp_path / "t.bin").stat().st_size
    assert model_id(tmp_path / "t").startswith("target-")


def _edit(path, fn):
    m = json.loads(path.read_text())
    fn(m)
    path.write_text(json.dumps(m))


def test_checkpoint_refuses_overlap_version_and_truncation(tmp_path, net):
    save_checkpoint(tmp_path / "t", net)
    _edit(tmp_path / "t.json", lambda m: m["tensors"][1].__setitem__("offset", m["tensors"][1]["offset"] - 4))
    with pytest.raises(CorruptCheckpoint, match="overlap"):
        load_checkpoint(tmp_path / "t")
    save_checkpoint(tmp_path / "t", net)
    _edit(tmp_path / "t.json", lambda m: m.__setitem__("format_version", 2))
    with pytest.raises(UnsupportedVersion, match="format_version 2"):
        load_checkpoint(tmp_path / "t")
    save_checkpoint(tmp_path / "t", net)
    (tmp_path / "t.bin").write_bytes((tmp_path / "t.bin").read_bytes()[:-8])
    with pytest.raises(CorruptCheckpoint):
        load_checkpoint(tmp_path / "t")
    save_checkpoint(tmp_path / "t", net)
    _edit(tmp_path / "t.json", lambda m: m["spec"].__setitem__("hidden", [5, 5]))
    with pytest.raises(CorruptCheckpoint, match="does not match"):
        load_checkpoint(tmp_path / "t")


# -- server ----------------------------------------------------------------------------------


def test_server_answers_counts_and_guards(net):
    srv = TargetServer(net, budget_guard=5)
    x = np.random.default_rng(1).normal(size=(3, 2)).tolist()
    status, body = srv.answer(x)
    assert status == 200 and body["labels"] == net.predict(np.array(x, dtype=np.float32)).tolist()
    assert srv.served == 3
    status, body = srv.answer(x)
    assert status == 429 and srv.served == 3
    for bad in ([], [[1.0]], "x", [[1.0, float("nan")]]):
        assert srv.answer(bad)[0] == 400
    assert srv.sequence == 6
    srv.server_close()


def test_server_http_malformed_requests(net):
    import urllib.error
    import urllib.request

    srv = TargetServer(net).start()
    try:
        for body in (b"{not json", b'{"x": 1}', b'{"instances": [[1, 2, 3]]}'):
            req = urllib.request.Request(srv.url + "/predict", data=body, method="POST")
            with pytest.raises(urllib.error.HTTPError) as err:
                urllib.request.urlopen(req, timeout=5)
            assert err.value.code == 400 and "error" in json.loads(err.value.read())
        with urllib.request.urlopen(srv.url + "/health", timeout=5) as resp:
            assert json.loads(resp.read())["served"] == 0
    finally:
        srv.stop()


# -- reports --------------------------------------------------------------------------------


def _trace(n):
    tr = AttackTrace()
    for i in range(n):
        tr.append(EpochRecord(i + 1, 64 * (i + 1), 0.5, float("nan"), -1.0, 0.1 * i, 0.2, 0.25, 0.9))
    return tr


def test_empty_trace_gives_header_only(tmp_path):
    paths = emit_report(AttackTrace(), None, tmp_path)
    assert paths["trace"].read_text().strip().split(",")[0] == "epoch"
    assert len(paths["trace"].read_text().splitlines()) == 1
    doc = json.loads(paths["metrics"].read_text())
    assert doc["consistency"] is None and doc["schema"] == "qedg.metrics/1"


def test_report_rows_and_reemission_identical(tmp_path, net):
    rep = build_report(net, test=(np.zeros((4, 2)), np.zeros(4, dtype=int)), target=net, queries=640)
    a = emit_report(_trace(10), rep, tmp_path / "a")
    b = emit_report(_trace(10), MetricsReport.from_dict(rep.to_dict()), tmp_path / "b")
    lines = a["trace"].read_text().splitlines()
    assert len(lines) == 11
    qs = [int(l.split(",")[1]) for l in lines[1:]]
    assert qs == sorted(set(qs))
    assert lines[1].split(",")[3] == ""  # NaN harmony cell is empty
    for k in a:
        assert a[k].read_bytes() == b[k].read_bytes()
    assert write_json(tmp_path / "n.json", {"x": float("nan")}).read_text() == '{\n  "x": null\n}\n'


def test_report_unwritable_directory(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("")
    with pytest.raises(OSError, match="cannot create"):
        emit_report(AttackTrace(), None, blocker / "sub")


# -- config ---------------------------------------------------------------------------------


def test_config_defaults_and_strictness(tmp_path):
    cfg = load_config(None)
    assert isinstance(cfg, RunConfig) and cfg.attack.alpha == 5.0 and cfg.substitute.activation == "tanh"
    for bad, key in (
        ({"bogus": 1}, "bogus"),
        ({"dataset": {"nosie": 0.1}}, "dataset.nosie"),
        ({"attack": {"alpah": 1}}, "alpah"),
    ):
        with pytest.raises(ConfigError, match=key):
            parse_config(bad)
    with pytest.raises(ConfigError):
        parse_config({"oracle": {"kind": "remote"}})
    with pytest.raises(ConfigError):
        parse_config({"attack": {"inner_steps": 0}})
    p = tmp_path / "c.json"
    p.write_text("{oops")
    with pytest.raises(ConfigError, match="invalid JSON"):
        load_config(p)


def test_config_attack_overrides_desk_preset():
    cfg = parse_config({"attack": {"alpha": 1.0}, "substitute": {"hidden": [8]}})
    assert cfg.attack.alpha == 1.0 and cfg.attack.substitute_optimizer == "adam"
    assert cfg.substitute.activation == "tanh" and cfg.substitute.hidden == [8]


def test_derived_seeds():
    a, b = RunConfig(seed=1).derived_seeds(), RunConfig(seed=2).derived_seeds()
    assert a == RunConfig(seed=1).derived_seeds() and a != b
    assert len(set(a.values())) == 4
    cfg = parse_config({"seed": 1, "target": {"seed": 7}})
    assert cfg.derived_seeds()["target"] == 7
