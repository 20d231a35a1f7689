import json

import numpy as np
import pytest

from proxprune.errors import EmptyLayerError, ShapeMismatchError
from proxprune.model_engine import Dataset, Model, evaluate, predict, train_model
from proxprune.primal_proximal import HyperParams, init_state, run
from proxprune.pruning_pipeline import (
    CompressionReport,
    SparsityMask,
    apply_mask,
    compact_predict,
    compact_weights,
    compression_report,
    dead_channel_diagnostics,
    direct_baseline,
    extract_mask,
    group_subgradient,
    mask_from_groups,
    match_epsilon,
    retrain,
)
from proxprune.tensor_core import WeightCollection

CNN = ["conv2d:1:4:3:3:1:1", "relu", "conv2d:4:5:3:3:2:0", "relu", "flatten", "dense:20:3",
       "softmax-xent-loss"]


def _data(n=60, seed=0):
    rng = np.random.default_rng(seed)
    return Dataset(rng.normal(size=(n, 6)), rng.integers(0, 3, n), n_classes=3)


def _mlp(seed=0):
    return Model(["dense:6:5", "relu", "dense:5:3", "softmax-xent-loss"], (6,), seed=seed)


def _mask(model, drops):
    m = SparsityMask.all_keep(model.weights)
    for lid, (rows, cols) in drops.items():
        m.row_keep[lid][rows] = False
        m.col_keep[lid][cols] = False
    return m


def test_element_mask_is_row_and_col():
    m = SparsityMask({"a": [True, False, True]}, {"a": [False, True]})
    np.testing.assert_array_equal(m.element("a"), [[False, True], [False, False], [False, True]])
    assert m.remaining("a") == 2


def test_extract_mask_uses_exact_prox_zeros():
    st = init_state(_mlp(), HyperParams())
    st.x["dense0"][1] = 0.0
    st.y["dense1"][:, 2] = 0.0
    mask = extract_mask(st, 0.0)
    assert mask.row_keep["dense0"].tolist() == [True, False, True, True, True]
    assert mask.col_keep["dense1"].tolist() == [True, True, False, True, True]
    assert mask.row_keep["dense1"].all() and mask.col_keep["dense0"].all()


def test_huge_epsilon_drops_everything_and_apply_refuses():
    st = init_state(_mlp(), HyperParams())
    mask = extract_mask(st, 1e6)
    assert not any(v.any() for v in mask.row_keep.values())
    with pytest.raises(EmptyLayerError) as info:
        apply_mask(st.w, mask)
    assert info.value.layer_id == "dense0"


def test_epsilon_monotonicity():
    st = init_state(_mlp(3), HyperParams())
    eps = [0.0, 0.05, 0.1, 0.2, 0.4]
    masks = [extract_mask(st, e) for e in eps]
    for lo, hi in zip(masks, masks[1:]):
        assert hi.drops_superset_of(lo)


def test_apply_all_keep_is_identity():
    m = _mlp()
    pm = apply_mask(m, SparsityMask.all_keep(m.weights))
    for k, v in m.parameters().items():
        assert pm.parameters()[k].tobytes() == v.tobytes()
    x = _data().inputs
    np.testing.assert_array_equal(predict(pm, x), predict(m, x))


def test_apply_mask_zeroes_and_preserves():
    m = _mlp(1)
    for k in m.biases:
        m.biases[k] += 0.3
    mask = _mask(m, {"dense0": ([1, 3], [0]), "dense1": ([], [2])})
    pm = apply_mask(m, mask)
    for lid in m.weights:
        e = mask.element(lid)
        assert np.all(pm.weights[lid][~e] == 0.0)
        assert pm.weights[lid][e].tobytes() == m.weights[lid][e].tobytes()
    assert pm.biases["dense0"][[1, 3]].tolist() == [0.0, 0.0]
    assert pm.biases["dense0"][0] == m.biases["dense0"][0]
    assert pm.mask is mask and m.mask is None


def test_apply_mask_shape_errors():
    m = _mlp()
    bad = SparsityMask({"dense0": np.ones(4, bool), "dense1": np.ones(3, bool)},
                       {"dense0": np.ones(6, bool), "dense1": np.ones(5, bool)})
    with pytest.raises(ShapeMismatchError):
        apply_mask(m, bad)


def test_counting_example_64x576():
    w = WeightCollection([("conv", np.ones((64, 576)))])
    mask = SparsityMask({"conv": np.arange(64) < 32}, {"conv": np.arange(576) % 2 == 0})
    model = Model(["conv2d:64:64:3:3:1:1", "relu", "flatten", "dense:256:2", "softmax-xent-loss"],
                  (64, 2, 2))
    full = SparsityMask.all_keep(model.weights)
    full.row_keep["conv0"] = mask.row_keep["conv"]
    full.col_keep["conv0"] = mask.col_keep["conv"]
    rep = compression_report(model, full)
    layer = rep.layers[0]
    assert (layer.total, layer.remaining, layer.rate) == (36864, 9216, 4.0)
    # dense head untouched: 2 * 256 = 512 parameters
    assert rep.total == 36864 + 512 and rep.remaining == 9216 + 512
    assert rep.compression_rate == (36864 + 512) / (9216 + 512)


def test_no_pruning_rate_one():
    m = _mlp()
    rep = compression_report(m, SparsityMask.all_keep(m.weights), _data())
    assert rep.compression_rate == 1.0
    assert rep.pruned_accuracy == evaluate(m, _data())["accuracy"]


def test_report_json_roundtrip():
    m = _mlp()
    rep = compression_report(m, _mask(m, {"dense0": ([0], [1, 2])}), _data(), base_accuracy=0.5,
                             masked_accuracy=0.25, pruning_epochs=3, retrain_epochs=4)
    back = CompressionReport.from_json(rep.to_json())
    assert back == rep
    d = json.loads(rep.to_json())
    assert d["remaining"] == sum(l["remaining"] for l in d["layers"])
    assert d["epochs_used"] == 7


def test_compact_forward_equals_masked_forward():
    rng = np.random.default_rng(0)
    m = Model(CNN, (1, 6, 6), seed=2)
    for k in m.biases:
        m.biases[k] = rng.normal(size=m.biases[k].shape)
    mask = _mask(m, {"conv0": ([1], [0, 4]), "conv1": ([0, 3], [2, 7, 30]), "dense0": ([], [1, 10])})
    pm = apply_mask(m, mask)
    x = rng.normal(size=(7, 1, 6, 6))
    np.testing.assert_allclose(compact_predict(pm, mask, x), predict(pm, x), atol=1e-12, rtol=0)
    packed = compact_weights(pm, mask)
    assert packed["conv1"][2].shape == (3, 33)


def test_retrain_keeps_masked_entries_zero():
    m = _mlp(2)
    data = _data()
    mask = _mask(m, {"dense0": ([0, 2], [5]), "dense1": ([1], [3])})
    pm = apply_mask(m, mask)
    seen = []

    def check(epoch, loss, model):
        for lid in model.weights:
            assert np.all(model.weights[lid][~mask.element(lid)] == 0.0)
        assert np.all(model.biases["dense0"][[0, 2]] == 0.0)
        seen.append(epoch)

    retrain(pm, data, HyperParams(lr=1e-2, retrain_epochs=4, batch_size=16), on_epoch=check)
    assert seen == [1, 2, 3, 4]


def test_retrain_all_keep_equals_plain_training():
    data = _data()
    hp = HyperParams(lr=1e-2, retrain_epochs=3, batch_size=16, seed=5)
    a = apply_mask(_mlp(4), SparsityMask.all_keep(_mlp(4).weights))
    retrain(a, data, hp)
    b = train_model(_mlp(4), data, 3, 1e-2, 16, 5)
    for k, v in a.parameters().items():
        assert v.tobytes() == b.parameters()[k].tobytes()


def test_retrain_requires_mask():
    with pytest.raises(ValueError):
        retrain(_mlp(), _data(), HyperParams())


def test_group_subgradient():
    w = np.array([[3.0, 4.0], [0.0, 0.0]])
    # rows: [0.6, 0.8] and zero; cols: norms 3 and 4 -> [1, 1] on row 0
    np.testing.assert_allclose(group_subgradient(w), [[0.6 + 1.0, 0.8 + 1.0], [0.0, 0.0]])
    assert not group_subgradient(np.zeros((2, 3))).any()


def test_match_epsilon_hits_target():
    rng = np.random.default_rng(0)
    w = WeightCollection([("a", rng.normal(size=(8, 10)) * rng.uniform(0, 1, size=(1, 10)))])
    eps = match_epsilon(w, 2.0)
    mask = mask_from_groups(w, w, eps)
    assert 80 / mask.remaining("a") == pytest.approx(2.0, rel=0.25)


def test_direct_baseline_lam_zero_gives_rate_one():
    hp = HyperParams(lam=0.0, rho=1.0, lr=1e-2, T=3, retrain_epochs=2, batch_size=20)
    model, mask, rep = direct_baseline(_mlp(), _data(), hp, _data(seed=1))
    assert rep.compression_rate == 1.0
    assert rep.method == "direct"


def test_direct_and_main_reports_share_schema():
    hp = HyperParams(lam=1e-2, rho=1e-1, lr=1e-2, T=4, retrain_epochs=2, batch_size=20)
    data, test = _data(), _data(seed=1)
    st, _ = run(_mlp(), data, hp)
    mask = extract_mask(st)
    from proxprune.pruning_pipeline import finish
    _, rep = finish(st.w, mask, data, hp, test, "primal-proximal", 0.5)
    _, _, drep = direct_baseline(_mlp(), data, hp, test)
    assert set(rep.to_dict()) == set(drep.to_dict())
    assert rep.epochs_used == drep.epochs_used == 4 + 2


def test_dead_channel_diagnostics():
    m = _mlp()
    mask = _mask(m, {"dense0": ([1, 2], []), "dense1": ([], [2, 4])})
    d = dead_channel_diagnostics(m, mask)["dense1"]
    # dense1 keeps columns 0,1,3; column 1 reads dropped row 1
    assert d["kept_cols_reading_dead_rows"] == 1
    # dense0 keeps rows 0,3,4; row 4 feeds dropped column 4
    assert d["upstream_kept_rows_unused"] == 1
