import numpy as np
import pytest

from ptqflow import pipeline
from ptqflow.calibration import Method, ScaleMethod
from ptqflow.engine import (
    Mode,
    Trace,
    conv2d,
    forward,
    fully_connected,
    load_dataset,
    max_pool,
    predict,
    run_calibration,
    save_dataset,
)
from ptqflow.graph import GraphError, QuantPlan, insert_quant_nodes
from ptqflow.tensor import load_tensors

from oracles import naive_conv2d, naive_fc, naive_forward


@pytest.mark.parametrize("stride,padding,k", [(1, 0, 3), (1, 1, 3), (2, 1, 3), (2, 0, 1), (1, 2, 5)])
def test_conv_matches_direct_loops(rng, stride, padding, k):
    x = rng.normal(size=(2, 3, 7, 6))
    w = rng.normal(size=(4, 3, k, k))
    b = rng.normal(size=4)
    assert np.allclose(conv2d(x, w, b, stride, padding), naive_conv2d(x, w, b, stride, padding), rtol=1e-12, atol=1e-12)


def test_fc_matches_direct_loops(rng):
    x = rng.normal(size=(3, 5))
    w = rng.normal(size=(4, 5))
    b = rng.normal(size=4)
    assert np.allclose(fully_connected(x, w, b), naive_fc(x, w, b), rtol=1e-12, atol=1e-12)


def test_max_pool():
    x = np.arange(16, dtype=float).reshape(1, 1, 4, 4)
    assert max_pool(x, 2, 2).ravel().tolist() == [5, 7, 13, 15]


def test_golden_logits(std_fixture, std_model):
    golden = load_tensors(std_fixture["golden"])
    out = forward(std_model, golden["input"]).astype(np.float32)
    assert out.tobytes() == golden["logits"].tobytes()


def test_fixture_matches_direct_oracle(std_fixture, std_model):
    golden = load_tensors(std_fixture["golden"])
    ref = naive_forward(std_model, golden["input"][:1])
    out = forward(std_model, golden["input"][:1])
    assert np.allclose(out, ref, rtol=1e-9, atol=1e-9)


def test_batch_size_invariance(std_folded, std_data):
    x = std_data[0][:60]
    a = predict(std_folded, x, batch_size=60)
    b = predict(std_folded, x, batch_size=7)
    assert np.allclose(a, b, rtol=1e-12, atol=1e-12)


def test_calibrate_mode_is_float_mode(std_folded, std_data):
    x = std_data[0][:20]
    q = insert_quant_nodes(std_folded, pipeline._SITE_PLAN)
    stats = {}
    assert np.array_equal(forward(q, x, Mode.CALIBRATE, stats=stats), forward(std_folded, x))
    assert len(stats) == len(q.quant_sites())


def test_every_site_sees_positive_values(std_calib):
    for sid, site in std_calib.sites.items():
        assert site.layer.abs_max[0] > 0, sid


def test_relu_sites_never_clamp_low(std_folded, std_calib, std_data):
    plan = QuantPlan(8, 8, ScaleMethod(Method.ABSP), ScaleMethod(Method.ABSP), "channel", "qres")
    w, s = pipeline.plan_params(std_folded, plan, std_calib)
    g = pipeline.quantize_graph(std_folded, plan, w, s)
    trace = Trace()
    predict(g, std_data[0][:100], Mode.FAKEQUANT, trace=trace)
    tags = {q.inputs[0]: q.tag for q in g.quant_sites()}
    # residual sites clip negatives to 0, which the ReLU after them discards anyway
    assert all(v == 0 for k, v in trace.low_clamps.items() if tags[k] == "activation")
    assert any(v > 0 for k, v in trace.low_clamps.items() if tags[k] == "residual")
    assert set(trace.mse()) == {q.inputs[0] for q in g.quant_sites()}


def test_sixteen_bit_absmax_is_close_to_float(std_folded, std_calib, std_data):
    m = ScaleMethod(Method.ABSMAX)
    plan = QuantPlan(16, 16, m, m, "layer", "fpres")
    w, s = pipeline.plan_params(std_folded, plan, std_calib)
    g = pipeline.quantize_graph(std_folded, plan, w, s)
    x = std_data[0][:50]
    assert np.max(np.abs(predict(g, x, Mode.FAKEQUANT) - predict(std_folded, x))) < 1e-2


def test_fakequant_needs_params(std_folded, std_data):
    g = insert_quant_nodes(std_folded, pipeline._SITE_PLAN)
    with pytest.raises(GraphError, match="unresolved"):
        forward(g, std_data[0][:2], Mode.FAKEQUANT)


def test_input_shape_checked(std_folded):
    with pytest.raises(ValueError, match="does not match"):
        forward(std_folded, np.zeros((1, 3, 8, 8)))


def test_calibration_is_seeded(std_folded, std_data):
    q = insert_quant_nodes(std_folded, pipeline._SITE_PLAN)
    a = run_calibration(q, std_data[0], 50, seed=3)
    b = run_calibration(q, std_data[0], 50, seed=3)
    c = run_calibration(q, std_data[0], 50, seed=4)
    key = "stem.relu"
    assert np.array_equal(a[key].layer.reservoir[0], b[key].layer.reservoir[0])
    assert a[key].layer.count.tolist() == c[key].layer.count.tolist()
    assert not np.array_equal(np.sort(a[key].layer.reservoir[0]), np.sort(c[key].layer.reservoir[0]))


def test_calibration_sample_checks(std_folded, std_data):
    q = insert_quant_nodes(std_folded, pipeline._SITE_PLAN)
    with pytest.raises(ValueError, match="exceeds"):
        run_calibration(q, std_data[0][:10], 11)
    with pytest.raises(ValueError, match="empty"):
        run_calibration(q, std_data[0][:0], 1)


def test_dataset_round_trip(tmp_path, rng):
    x = rng.uniform(size=(5, 3, 4, 4)).astype(np.float32)
    y = np.array([0, 3, 1, 1, 9])
    save_dataset(tmp_path / "d.bin", x, y)
    xb, yb = load_dataset(tmp_path / "d.bin")
    assert xb.tobytes() == x.tobytes() and yb.tolist() == y.tolist()
    (tmp_path / "d.labels").write_bytes(b"\x00" * 8)
    with pytest.raises(ValueError, match="labels"):
        load_dataset(tmp_path / "d.bin")
