import json

import numpy as np
import pytest

from ptqflow.calibration import Method, ScaleMethod
from ptqflow.engine import Mode, predict
from ptqflow.fixtures import FixtureSpec, build_model
from ptqflow.graph import (
    GraphError,
    ModelGraph,
    Node,
    QuantPlan,
    check_graph,
    fold_batchnorm,
    insert_quant_nodes,
    load_model,
    passthrough,
    save_model,
    validate_graph,
)

ABSP = ScaleMethod(Method.ABSP)


def plan(residual="fpres"):
    return QuantPlan(8, 8, ABSP, ABSP, "channel", residual)


def conv_bn(w=2.0, gamma=3.0, var=4.0, eps=0.0):
    t = {
        "c.w": np.full((1, 1, 1, 1), w, np.float32),
        "bn.gamma": np.array([gamma], np.float32),
        "bn.beta": np.array([0.0], np.float32),
        "bn.mean": np.array([0.0], np.float32),
        "bn.var": np.array([var], np.float32),
    }
    nodes = [
        Node("in", "Input", attrs={"shape": [1, 2, 2]}),
        Node("c", "Conv2D", ["in"], {"in_channels": 1, "out_channels": 1, "kernel": 1}, weight="c.w"),
        Node("bn", "BatchNorm", ["c"], {"channels": 1, "eps": eps},
             params={p: f"bn.{p}" for p in ("gamma", "beta", "mean", "var")}),
        Node("out", "Output", ["bn"]),
    ]
    return ModelGraph(nodes, t)


def test_fold_example():
    g = fold_batchnorm(conv_bn())
    assert g.tensors["c.w"].ravel().tolist() == [3.0]
    assert not g.by_kind("BatchNorm")
    assert g.node("out").inputs == ["c"]
    assert "bn.gamma" not in g.tensors


def test_fold_without_bn_is_identity():
    g = fold_batchnorm(conv_bn())
    again = fold_batchnorm(g)
    assert [n.id for n in again.nodes] == [n.id for n in g.nodes]
    assert again.tensors["c.w"].tobytes() == g.tensors["c.w"].tobytes()


def test_fold_preserves_outputs():
    g = build_model(FixtureSpec(blocks=1))
    x = np.random.default_rng(0).uniform(size=(8, 3, 16, 16))
    a = predict(g, x)
    b = predict(fold_batchnorm(g), x)
    assert np.max(np.abs(a - b) / np.maximum(np.abs(a), 1e-6)) < 1e-4


def test_bn_after_non_conv_rejected():
    g = conv_bn()
    g.nodes[2].inputs = ["in"]
    g.nodes[1], g.nodes[2] = g.nodes[2], g.nodes[1]
    g.nodes[2].inputs = ["bn"]
    g.nodes[3].inputs = ["c"]
    with pytest.raises(GraphError, match="cannot fold"):
        fold_batchnorm(g)


def test_validation_reports_all_errors():
    g = conv_bn()
    g.nodes.append(Node("x", "Softmax", []))
    g.nodes[1].weight = "missing"
    errs = validate_graph(g)
    assert any("unknown kind" in e for e in errs)
    assert any("missing" in e for e in errs)


def test_cycle_detected():
    g = conv_bn()
    g.nodes[1].inputs = ["bn"]
    assert validate_graph(g)


def test_shape_mismatch_detected():
    g = conv_bn()
    g.tensors["c.w"] = np.ones((1, 2, 1, 1), np.float32)
    with pytest.raises(GraphError, match="weight shape"):
        check_graph(g)


def test_quant_node_counts():
    g = fold_batchnorm(build_model(FixtureSpec()))
    relus, adds = len(g.by_kind("ReLU")), len(g.by_kind("Add"))
    fp = insert_quant_nodes(g, plan("fpres"))
    q = insert_quant_nodes(g, plan("qres"))
    assert len(fp.quant_sites()) == 1 + relus
    assert len(q.quant_sites()) - len(fp.quant_sites()) == adds
    # every conv reads a quantized tensor
    for n in fp.by_kind("Conv2D"):
        assert fp.node(n.inputs[0]).kind == "Quant"


def test_split_point_shares_one_quant_node():
    g = insert_quant_nodes(fold_batchnorm(build_model(FixtureSpec(blocks=2, widths=(8, 8)))), plan())
    q = g.node("block0.relu2.q")
    consumers = {c.id for c in g.consumers(q.id)}
    assert {"block1.conv1", "block1.add"} <= consumers
    assert not g.consumers("block0.relu2")[1:]


def test_quantize_twice_is_an_error():
    g = insert_quant_nodes(fold_batchnorm(conv_bn()), plan())
    with pytest.raises(GraphError, match="already"):
        insert_quant_nodes(g, plan())


def test_insert_requires_folded_graph():
    with pytest.raises(GraphError, match="fold"):
        insert_quant_nodes(conv_bn(), plan())


def test_passthrough_restores_topology():
    g = fold_batchnorm(build_model(FixtureSpec(blocks=1)))
    back = passthrough(insert_quant_nodes(g, plan("qres")))
    assert [(n.id, n.inputs) for n in back.nodes] == [(n.id, n.inputs) for n in g.nodes]


def test_invalid_plans():
    with pytest.raises(ValueError):
        QuantPlan(8, 8, ScaleMethod(Method.BATCHQUANT), ABSP)
    with pytest.raises(ValueError):
        QuantPlan(8, 8, ABSP, ScaleMethod(Method.LSQ_PLUS))
    with pytest.raises(ValueError):
        QuantPlan(0, 8, ABSP, ABSP)
    with pytest.raises(ValueError):
        QuantPlan(8, 8, ABSP, ABSP, "row")


def test_plan_dict_round_trip():
    p = QuantPlan(5, 7, ScaleMethod(Method.LSQ_PLUS), ScaleMethod(Method.ABSP, 99.9), "layer", "qres")
    assert QuantPlan.from_dict(p.to_dict()) == p


def test_save_load_round_trip(tmp_path):
    g = build_model(FixtureSpec(blocks=1))
    save_model(g, tmp_path / "m.json")
    back = load_model(tmp_path / "m.json")
    assert [n.id for n in back.nodes] == [n.id for n in g.nodes]
    for k, v in g.tensors.items():
        assert back.tensors[k].tobytes() == v.tobytes()
    x = np.random.default_rng(0).uniform(size=(2, 3, 16, 16))
    assert np.array_equal(predict(g, x), predict(back, x))


def test_dangling_tensor_reference(tmp_path):
    g = fold_batchnorm(conv_bn())
    save_model(g, tmp_path / "m.json")
    data = json.loads((tmp_path / "m.json").read_text())
    data["nodes"][1]["weight"] = "nope"
    (tmp_path / "m.json").write_text(json.dumps(data))
    with pytest.raises(GraphError, match="dangling"):
        load_model(tmp_path / "m.json")


def test_manifest_version_checked(tmp_path):
    save_model(fold_batchnorm(conv_bn()), tmp_path / "m.json")
    data = json.loads((tmp_path / "m.json").read_text())
    data["version"] = 7
    (tmp_path / "m.json").write_text(json.dumps(data))
    with pytest.raises(ValueError, match="version"):
        load_model(tmp_path / "m.json")


def test_float_mode_ignores_quant_nodes():
    g = fold_batchnorm(build_model(FixtureSpec(blocks=1)))
    x = np.random.default_rng(1).uniform(size=(3, 3, 16, 16))
    q = insert_quant_nodes(g, plan())
    assert np.array_equal(predict(g, x, Mode.FLOAT), predict(q, x, Mode.FLOAT))
