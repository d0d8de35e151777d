import numpy as np
import pytest

import qtz


def test_affine_params_examples():
    qp = qtz.affine_params(0.0, 6.0, 8)
    assert qp.scale == pytest.approx(6.0 / 255.0, rel=1e-12)
    assert qp.zero_point == 0

    qp = qtz.affine_params(-1.0, 1.0, 8)
    assert qp.zero_point == 128

    lo, hi = qtz.relax_range(2.1, 3.5)
    assert (lo, hi) == (0.0, 3.5)


def test_quantize_round_trip():
    qp = qtz.affine_params(-2.0, 2.0, 8)
    xs = np.linspace(-2.0, 2.0, 101)
    for x in xs:
        code = qtz.quantize(float(x), qp)
        back = qtz.dequantize(code, qp)
        assert abs(back - x) <= qp.scale / 2 + 1e-12
    # exact zero
    assert qtz.dequantize(qtz.quantize(0.0, qp), qp) == 0.0


def test_sim_quant_array_idempotent():
    qp = qtz.affine_params(-1.0, 1.0, 8)
    rng = np.random.default_rng(3)
    x = rng.uniform(-1.5, 1.5, size=(4, 5))
    once = qtz.sim_quant_array(x, qp)
    twice = qtz.sim_quant_array(once, qp)
    np.testing.assert_array_equal(once, twice)


def test_per_channel_quantization():
    rng = np.random.default_rng(5)
    w = np.stack([rng.uniform(-1, 1, 16), rng.uniform(-100, 100, 16)], axis=-1)
    codes, params = qtz.quantize_tensor(w, per_channel=True, axis=1)
    assert len(params) == 2
    assert params[1].scale == pytest.approx(100 * params[0].scale, rel=0.1)


def test_sqnr_per_channel_dominates():
    rng = np.random.default_rng(7)
    w = rng.uniform(-1, 1, size=(3, 3, 4, 6))
    w[..., 0] *= 0.01
    pc = qtz.sqnr(w, channel_axis=3, per_channel=True)
    pl = qtz.sqnr(w, channel_axis=3, per_channel=False)
    assert all(c >= l - 1e-9 for c, l in zip(pc, pl))
    assert pc[0] - pl[0] > 10.0


def test_graph_fold_and_run():
    g = qtz.build_reference_model(seed=3, conv1_ch=4, conv2_ch=6)
    folded = qtz.fold_bn_eval(g)
    x = np.random.default_rng(9).uniform(0, 1, size=(2, 28, 28, 1))
    y0 = qtz.run_float_graph(g, x)
    y1 = qtz.run_float_graph(folded, x)
    assert y0.shape == (2, 10)
    np.testing.assert_allclose(y0, y1, rtol=1e-6, atol=1e-9)


def test_fake_quant_insertion_boundaries():
    g = qtz.fold_bn_eval(qtz.build_reference_model(seed=4, conv1_ch=4, conv2_ch=6))
    boundaries = qtz.activation_boundaries(g)
    assert "x" in boundaries
    assert "relu1" in boundaries
    q = qtz.insert_fake_quant(g, weight_bits=8, act_bits=8)
    assert q.num_nodes() > g.num_nodes()


def test_ptq_pipeline_and_integer_runtime():
    data = qtz.synthesize_dataset(64, seed=11)
    g = qtz.fold_bn_eval(qtz.build_reference_model(seed=5, conv1_ch=4, conv2_ch=6))
    ranges = qtz.calibrate(g, data, batches=4, batch_size=8)
    qm = qtz.convert(g, ranges)
    rt = qtz.QModelRuntime(qm)
    x = data.images[:8]
    y_int = rt.run(x)
    y_float = qtz.run_float_graph(g, x)
    assert y_int.shape == y_float.shape
    # integer logits track the float logits closely enough to agree on argmax
    agree = (y_int.argmax(axis=1) == y_float.argmax(axis=1)).mean()
    assert agree >= 0.75


def test_artifact_round_trip(tmp_path):
    g = qtz.build_reference_model(seed=6, conv1_ch=4, conv2_ch=6)
    path = str(tmp_path / "model.qtzg")
    qtz.save_float_model(path, g)
    back = qtz.load_float_model(path)
    np.testing.assert_allclose(back.param("conv1_w"), g.param("conv1_w").astype(np.float32))


def test_short_training_descends():
    train = qtz.synthesize_dataset(128, seed=21)
    test = qtz.synthesize_dataset(64, seed=22)
    model = qtz.build_reference_model(seed=7, conv1_ch=4, conv2_ch=6)
    trained, acc, ranges = qtz.train_reference(
        model, train, test, total_steps=30, batch_size=16, learning_rate=0.05, quant_delay=10**9
    )
    assert acc > 0.15  # better than chance on 10 classes
    assert len(ranges) > 0
