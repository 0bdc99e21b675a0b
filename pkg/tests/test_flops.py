import numpy as np
import pytest

from advmoe.config import (
    BackboneConfig,
    ChannelMask,
    ConvSpec,
    MoEConfig,
    mini_resnet8,
    round_half_even,
    tiny_convnet,
)
from advmoe.flops import count_forward_flops, flops_estimate
from advmoe.model import build_model, expert_partition, forward
from advmoe.rng import RngStream


def rand_mask(cfg, ratio, seed=0):
    g = RngStream(seed, "mask").generator()
    layers = []
    for u in cfg.units:
        k = round_half_even(ratio * u.out_channels)
        layers.append(tuple(sorted(g.choice(u.out_channels, size=k, replace=False).tolist())))
    return ChannelMask(ratio, tuple(layers))


def test_single_conv_hand_formula():
    # one 3x3 conv, 8 -> 8 channels, 8x8 output: 2 * 64 * 9 * 8 * 8 = 73,728
    cfg = BackboneConfig("one", (8, 8, 8), 2, (ConvSpec(8, 3, 1, 1),))
    total = flops_estimate(cfg, "dense")
    head = 2.0 * 8 * 2
    assert total - head == 73728.0


@pytest.mark.parametrize("cfg_fn", [tiny_convnet, mini_resnet8])
def test_sdense_dense_ratio_window(cfg_fn):
    cfg = cfg_fn()
    dense = flops_estimate(cfg, "dense")
    sdense = flops_estimate(cfg, "sdense", moe=MoEConfig(2, 0.5))
    assert 0.24 <= sdense / dense <= 0.32, sdense / dense


@pytest.mark.parametrize("cfg_fn", [tiny_convnet, mini_resnet8])
def test_moe_gap_is_exactly_router_cost(cfg_fn):
    cfg = cfg_fn()
    moe_cfg = MoEConfig(2, 0.5)
    moe = flops_estimate(cfg, "moe", moe=moe_cfg)
    sdense = flops_estimate(cfg, "sdense", moe=moe_cfg)
    # router cost per group: pooling over active input + 2 * active_in * N
    c_in, h, w = cfg.input_shape
    expect = 0.0
    for u in cfg.units:
        expect += c_in * h * w + 2.0 * c_in * 2
        stride = u.stride
        h, w = (h + 2 - 3) // stride + 1, (w + 2 - 3) // stride + 1
        c_in = round_half_even(0.5 * u.out_channels)
    assert moe - sdense == expect
    assert moe >= sdense


def test_ordering_dense_moe_sdense():
    cfg = mini_resnet8()
    moe_cfg = MoEConfig(2, 0.5)
    d = flops_estimate(cfg, "dense")
    m = flops_estimate(cfg, "moe", moe=moe_cfg)
    s = flops_estimate(cfg, "sdense", moe=moe_cfg)
    assert d >= m >= s


def test_random_mask_flops_equal_sdense():
    cfg = tiny_convnet()
    sp = flops_estimate(cfg, "sparse", mask=rand_mask(cfg, 0.5))
    sd = flops_estimate(cfg, "sdense", moe=MoEConfig(2, 0.5))
    assert sp == sd


@pytest.mark.parametrize("cfg_fn", [tiny_convnet, mini_resnet8])
@pytest.mark.parametrize("variant", ["dense", "sdense", "sparse", "moe"])
def test_instrumented_matches_analytic_exactly(cfg_fn, variant):
    cfg = cfg_fn()
    moe_cfg = MoEConfig(2, 0.5)
    mask = rand_mask(cfg, 0.5, seed=3) if variant == "sparse" else None
    model = build_model(cfg, variant, moe=moe_cfg if variant in ("sdense", "moe") else None,
                        mask=mask, seed=1)
    x = RngStream(2, "flops").generator().random((5, 3, 16, 16)).astype(np.float32)
    counted, logits = count_forward_flops(model, x)
    analytic = flops_estimate(cfg, variant,
                              moe=moe_cfg if variant in ("sdense", "moe") else None, mask=mask)
    assert counted == analytic
    # the instrumented pass also reproduces the real logits
    ref, _ = forward(model, x)
    np.testing.assert_array_equal(logits, ref.data)


def test_instrumented_moe_value_independent_of_expert_mix():
    cfg = tiny_convnet()
    model = build_model(cfg, "moe", moe=MoEConfig(4, 0.25), seed=4)
    x = RngStream(7, "flops2").generator().random((8, 3, 16, 16)).astype(np.float32)
    counted, _ = count_forward_flops(model, x)
    assert counted == flops_estimate(cfg, "moe", moe=MoEConfig(4, 0.25))
