import warnings

import numpy as np
import pytest

from lrrnet import model as M
from lrrnet.diffcore import Tensor, grad_check
from lrrnet.losses import LossWeights, total_loss
from lrrnet.model import ModelConfig, build, param_count


def closed_form_count(channels, n_res=2, attn=1, dense=True, n_sub=1):
    """Scalar parameter count derived from the layer layout alone."""

    def conv(cout, cin, k):
        return cout * cin * k * k + cout

    def resblock(c):
        return 2 * conv(c, c, 3) + 4 * c + 2 * c

    c0 = channels[0]
    total = conv(c0, 1, 3)
    n_skips = n_res if dense else 1
    for c in channels:
        total += n_res * resblock(c) + conv(2 * c, c, 3)
        total += conv(c, 2 * c, 3) + conv(c, c * (1 + n_skips), 1) + (n_res + 1) * resblock(c)
    total += attn * 4 * (2 * channels[-1]) ** 2
    total += n_sub * resblock(c0)
    total += 2 * conv(1, c0, 3)
    return total


@pytest.fixture(scope="module")
def micro():
    return build(ModelConfig.preset("micro"))


def test_config_validation():
    with pytest.raises(ValueError):
        ModelConfig(stages=3, channels=(8, 16))
    with pytest.raises(ValueError):
        ModelConfig(stages=2, channels=(8, 24))
    with pytest.raises(ValueError):
        ModelConfig(attention_blocks=3)
    with pytest.raises(ValueError):
        ModelConfig.preset("huge")


def test_config_dict_round_trip():
    cfg = ModelConfig.preset("tiny", attention_blocks=2)
    assert ModelConfig.from_dict(cfg.to_dict()) == cfg


def test_default_param_count_band():
    n = param_count(build(ModelConfig()))
    assert 2_400_000 <= n <= 4_500_000
    assert n == closed_form_count((16, 32, 64, 128))


@pytest.mark.parametrize("preset", ["tiny", "micro"])
def test_param_count_closed_form(preset):
    cfg = ModelConfig.preset(preset)
    assert param_count(build(cfg)) == closed_form_count(cfg.channels)


def test_param_count_ablation_variants():
    for kw in ({"attention_blocks": 0}, {"attention_blocks": 2}, {"dense_skips": False}):
        cfg = ModelConfig.preset("tiny", **kw)
        expect = closed_form_count(cfg.channels, attn=cfg.attention_blocks, dense=cfg.dense_skips)
        assert param_count(build(cfg)) == expect


def test_channel_doubling_roughly_quadruples():
    small = param_count(build(ModelConfig.preset("tiny")))
    big = param_count(build(ModelConfig()))
    assert 3.6 < big / small < 4.1


def test_build_is_deterministic():
    a = build(ModelConfig.preset("micro", seed=3))
    b = build(ModelConfig.preset("micro", seed=3))
    assert M.checkpoint_bytes(a) == M.checkpoint_bytes(b)
    c = build(ModelConfig.preset("micro", seed=4))
    assert M.checkpoint_bytes(a) != M.checkpoint_bytes(c)


def test_parameter_names_unique_and_initialised():
    m = build(ModelConfig.preset("tiny"))
    params = m.parameters()
    assert len(params) == len({id(t) for t in params.values()})
    for name, t in params.items():
        if (name.endswith(".bias") or name.endswith("beta")) and name != "seg_head.bias":
            assert np.all(t.data == 0), name
        if "lambda" in name:
            assert np.all(t.data == 0.1), name
    # the segmentation head starts at a 1% confidence prior
    assert np.isclose(1 / (1 + np.exp(-params["seg_head.bias"].data[0])), M.SEG_PRIOR)


def test_crm_shapes_and_bottleneck():
    m = build(ModelConfig())
    f_i = Tensor(np.random.default_rng(0).standard_normal((1, 16, 64, 64)))
    f_b, bott = M.crm_forward(m, f_i, return_bottleneck=True)
    assert f_b.shape == f_i.shape
    assert bott.shape[2:] == (4, 4)
    assert bott.shape[2] * bott.shape[3] == 16


def test_crm_indivisible_rejected(micro):
    with pytest.raises(ValueError, match="divisible by 4"):
        M.crm_forward(micro, Tensor(np.zeros((1, 8, 10, 12))))


def test_forward_without_attention_runs():
    m = build(ModelConfig.preset("micro", attention_blocks=0))
    conf, rec = M.forward(m, np.random.default_rng(0).uniform(size=(1, 1, 8, 8)))
    assert conf.shape == rec.shape == (1, 1, 8, 8)


def test_forward_shapes_and_range():
    m = build(ModelConfig.preset("tiny"))
    x = np.random.default_rng(0).uniform(size=(2, 1, 64, 64))
    conf, rec = M.forward(m, x)
    assert conf.shape == rec.shape == (2, 1, 64, 64)
    assert conf.data.min() > 0 and conf.data.max() < 1


def test_forward_out_of_range_warns(micro):
    with pytest.warns(UserWarning, match="255"):
        M.forward(micro, np.full((1, 1, 8, 8), 200.0))


def test_forward_is_deterministic(micro):
    x = np.random.default_rng(5).uniform(size=(1, 1, 8, 8))
    a = M.forward(micro, x)[0].data
    b = M.forward(micro, x)[0].data
    assert a.tobytes() == b.tobytes()


def test_subtraction_exact_background(micro):
    rng = np.random.default_rng(0)
    f = Tensor(rng.standard_normal((1, 8, 8, 8)))
    p = micro.subtraction[0]
    f_t, f_hat = M.subtraction_forward(f, f, p)  # biases are zero at init
    assert np.all(f_t.data == 0)
    np.testing.assert_array_equal(f_hat.data, f.data)


def test_subtraction_identity_resblock_recovers_input(micro):
    rng = np.random.default_rng(1)
    p = M.ResBlockParams.init(rng, 8, "s")
    p.lambda1.data[...] = 0
    p.lambda2.data[...] = 0
    f_i = Tensor(rng.standard_normal((1, 8, 4, 4)))
    f_b = Tensor(rng.standard_normal((1, 8, 4, 4)))
    _, f_hat = M.subtraction_forward(f_i, f_b, p)
    np.testing.assert_allclose(f_hat.data, f_i.data, rtol=0, atol=1e-15)


def test_subtraction_shape_mismatch(micro):
    with pytest.raises(ValueError):
        M.subtraction_forward(Tensor(np.zeros((1, 8, 4, 4))), Tensor(np.zeros((1, 8, 2, 2))), micro.subtraction)


def test_subtraction_bitwise_on_random_inputs(micro):
    rng = np.random.default_rng(2)
    for _ in range(20):
        f_i = Tensor(rng.standard_normal((1, 8, 4, 4)) * 10)
        f_b = Tensor(rng.standard_normal((1, 8, 4, 4)) * 10)
        f_t, f_hat = M.subtraction_forward(f_i, f_b, micro.subtraction)
        assert np.all((f_hat.data - f_b.data) - f_t.data == 0)


def test_degenerate_identity_head():
    """All LayerScales zero and zero head bias: confidence = sigmoid(conv(F_I - F_B))."""
    from lrrnet.diffcore import conv2d, sigmoid

    m = build(ModelConfig.preset("micro"))
    for name, t in m.parameters().items():
        if "lambda" in name:
            t.data[...] = 0
    x = np.random.default_rng(0).uniform(size=(1, 1, 8, 8))
    feats = M.forward_features(m, x)
    diff = feats["F_I"] - feats["F_B"]
    expect = sigmoid(conv2d(diff, m.seg_w, m.seg_b, 1, 1)).data
    np.testing.assert_allclose(feats["confidence"].data, expect, rtol=1e-14, atol=0)


def test_checkpoint_round_trip(tmp_path):
    m = build(ModelConfig.preset("micro", seed=9), np.float32)
    path = tmp_path / "m.ckpt"
    M.save_checkpoint(m, path, {"note": "x"})
    m2 = M.load_checkpoint(path)
    assert m2.config == m.config and m2.dtype == np.float32
    assert M.checkpoint_bytes(m2, m2.meta) == path.read_bytes()
    x = np.random.default_rng(0).uniform(size=(1, 1, 8, 8))
    assert M.forward(m, x)[0].data.tobytes() == M.forward(m2, x)[0].data.tobytes()


def test_checkpoint_bad_magic(tmp_path):
    p = tmp_path / "bad.ckpt"
    p.write_bytes(b"NOPE" + b"\0" * 20)
    with pytest.raises(ValueError):
        M.load_checkpoint(p)


def test_full_network_gradcheck_tiny():
    m = M.build_for_gradcheck(ModelConfig.preset("tiny"))
    rng = np.random.default_rng(0)
    x = rng.uniform(size=(1, 1, 16, 16))
    y = (rng.uniform(size=x.shape) > 0.9).astype(float)

    def f(*_):
        conf, rec = M.forward(m, x)
        return total_loss(conf, y, rec, x, LossWeights())[0]

    with warnings.catch_warnings():
        warnings.simplefilter("error")
        rep = grad_check(f, list(m.parameters().values()), tol=1e-4, max_coords=200)
    assert rep.passed, rep
