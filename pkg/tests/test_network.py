"""Network assembly: validation, determinism, shapes, fusion wiring,
and head/anchor ordering."""

import numpy as np
import pytest

from deskface.errors import DimensionError, ValidationError
from deskface.geometry import AnchorParams, match_anchors
from deskface.loss import total_loss
from deskface.network import (
    LayerSpec,
    NetworkSpec,
    build_network,
    conv_stage,
    desk_spec,
    flatten_hierarchies,
    forward_detect,
    forward_encoder,
    forward_upto,
    predict,
    toy_spec,
    vgg16_spec,
)
from deskface.tensor import Tape, Tensor, backward


def tiny_spec():
    """3 stages, 2 taps, deliberately small for hand counting."""
    return NetworkSpec(
        input_size=32,
        in_channels=1,
        stages=(conv_stage([2]), conv_stage([3]), conv_stage([4])),
        taps=(1, 2),
        fusion_mode="B",
        fuse_channels=4,
        anchor_params=AnchorParams(rf_sizes=(6.0, 12.0), d_min=32.0),
    )


def test_build_parameter_count_matches_hand_sum():
    model = build_network(tiny_spec(), seed=0)
    # encoder convs feed batch norm, so they carry no bias:
    # conv(2,1,3,3) + bn(2+2) ; conv(3,2,3,3) + bn(3+3) ; conv(4,3,3,3) + bn(4+4)
    enc = (18 + 4) + (54 + 6) + (108 + 8)
    top = 4 + 4                      # top.bn gamma/beta on 4 channels
    # fusion: deconv + biasless channel-adjust conv + two branch bns
    fuse = (4 * 4 * 2 * 2) + (4 * 3 * 3 * 3) + (4 + 4) + (4 + 4)
    heads_deep = (12 * 4 * 3 * 3 + 12) + (24 * 4 * 3 * 3 + 24)
    heads_shallow = (12 * 4 * 3 * 3 + 12) + (24 * 4 * 3 * 3 + 24)
    want = enc + top + fuse + heads_deep + heads_shallow
    got = sum(p.value.data.size for p in model.parameters())
    assert got == want


def test_build_same_seed_bit_identical():
    a = build_network(tiny_spec(), seed=123)
    b = build_network(tiny_spec(), seed=123)
    assert a.params.keys() == b.params.keys()
    for name in a.params:
        assert np.array_equal(a.params[name].value.data, b.params[name].value.data)
    c = build_network(tiny_spec(), seed=124)
    assert any(
        not np.array_equal(c.params[n].value.data, a.params[n].value.data)
        for n in a.params
    )


def test_build_single_tap_is_validation_error():
    spec = NetworkSpec(
        input_size=32,
        in_channels=1,
        stages=(conv_stage([2]), conv_stage([3])),
        taps=(1,),
        fusion_mode="B",
        fuse_channels=4,
        anchor_params=AnchorParams(rf_sizes=(6.0, 12.0), d_min=32.0),
    )
    with pytest.raises(ValidationError) as err:
        build_network(spec, seed=0)
    assert any("tap" in p for p in err.value.problems)


def test_validation_lists_every_problem():
    spec = NetworkSpec(
        input_size=32,
        in_channels=1,
        stages=(conv_stage([2]), (LayerSpec("conv", k=0, s=1, p=0, cout=3),
                                  LayerSpec("maxpool", k=2, s=2))),
        taps=(1,),
        fusion_mode="C",
        fuse_channels=0,
        anchor_params=AnchorParams(rf_sizes=(6.0, 12.0), d_min=32.0),
    )
    problems = spec.validate()
    assert len(problems) >= 4  # bad mode, bad fuse width, bad layer, bad taps


def test_vgg_shaped_spec_tap_resolutions():
    spec = vgg16_spec(512)
    assert [s for _, s in spec.tap_dims()] == [64, 32, 16]
    assert spec.stage_channels() == [64, 128, 256, 512, 512]


def test_forward_encoder_tap_shapes_and_zero_input():
    spec = tiny_spec()
    model = build_network(spec, seed=1)
    taps = forward_encoder(model, Tensor(np.zeros((1, 1, 32, 32))))
    assert [t.data.shape for t in taps] == [(1, 3, 8, 8), (1, 4, 4, 4)]
    assert all(np.isfinite(t.data).all() for t in taps)


def test_forward_encoder_rejects_wrong_dims():
    model = build_network(tiny_spec(), seed=1)
    with pytest.raises(DimensionError):
        forward_encoder(model, Tensor(np.zeros((1, 1, 16, 32))))
    with pytest.raises(DimensionError):
        forward_encoder(model, Tensor(np.zeros((1, 3, 32, 32))))


def test_forward_batch_equals_concatenated_singles_in_infer_mode():
    rng = np.random.default_rng(2)
    model = build_network(tiny_spec(), seed=3)
    model.training = False
    a = rng.standard_normal((1, 1, 32, 32))
    b = rng.standard_normal((1, 1, 32, 32))
    both = forward_detect(model, Tensor(np.concatenate([a, b], axis=0)))
    one_a = forward_detect(model, Tensor(a))
    one_b = forward_detect(model, Tensor(b))
    for k in range(len(both)):
        np.testing.assert_array_equal(both[k].conf.data[0], one_a[k].conf.data[0])
        np.testing.assert_array_equal(both[k].conf.data[1], one_b[k].conf.data[0])
        np.testing.assert_array_equal(both[k].loc.data[1], one_b[k].loc.data[0])


def test_context_fuse_zero_deep_leaves_normalized_shallow():
    rng = np.random.default_rng(4)
    spec = tiny_spec()
    model = build_network(spec, seed=5)
    model.training = False
    x = Tensor(rng.standard_normal((2, 1, 32, 32)))
    collect = {}
    forward_detect(model, x, collect=collect)
    # re-run fusion with a zeroed deep branch: sum must equal shallow branch
    from deskface.network import context_fuse

    taps = forward_encoder(model, x)
    deep_zero = Tensor(np.zeros((2, 4, 4, 4)))
    fused = context_fuse(deep_zero, taps[0], "B", model._fuse_blocks[0], model,
                         collect=collect, k=0)
    np.testing.assert_allclose(fused.data, collect["fuse0.shallow_branch"],
                               atol=1e-12)
    assert fused.data.shape[2:] == taps[0].data.shape[2:]


def test_context_fuse_mode_a_has_three_adjust_convs():
    model_a = build_network(toy_spec("A"), seed=0)
    model_b = build_network(toy_spec("B"), seed=0)
    a_adj = sorted(n for n in model_a.params if n.startswith("fuse0.adj"))
    b_adj = [n for n in model_b.params if n.startswith("fuse0.adj")]
    # mode A: conv-BN-ReLU, conv-BN-ReLU, conv; mode B: one biasless conv
    assert a_adj == ["fuse0.adj1.bn.beta", "fuse0.adj1.bn.gamma", "fuse0.adj1.w",
                     "fuse0.adj2.bn.beta", "fuse0.adj2.bn.gamma", "fuse0.adj2.w",
                     "fuse0.adj3.w"]
    assert b_adj == ["fuse0.adj1.w"]


def test_predict_head_channels_and_anchor_count():
    spec = tiny_spec()
    model = build_network(spec, seed=6)
    model.training = False
    outs = forward_detect(model, Tensor(np.zeros((1, 1, 32, 32))))
    for out, (_, side) in zip(outs, spec.tap_dims()):
        assert out.conf.data.shape[1] == 12  # (5 ratios + 1) * 2
        assert out.loc.data.shape[1] == 24
        assert len(out.anchors) == side * side * 6
    assert [o.k for o in outs] == [0, 1]


def test_deepest_hierarchy_predicts_on_normalized_tap_alone():
    rng = np.random.default_rng(7)
    spec = tiny_spec()
    model = build_network(spec, seed=8)
    model.training = False
    collect = {}
    outs = forward_detect(model, Tensor(rng.standard_normal((1, 1, 32, 32))),
                          collect=collect)
    deepest = predict(Tensor(collect["top.bn"]), len(outs) - 1,
                      model._heads[-1], spec.anchor_params,
                      (float(spec.input_size), float(spec.input_size)))
    np.testing.assert_array_equal(outs[-1].conf.data, deepest.conf.data)
    np.testing.assert_array_equal(outs[-1].loc.data, deepest.loc.data)


def test_flatten_order_round_trips_to_anchor_order():
    spec = tiny_spec()
    model = build_network(spec, seed=9)
    model.training = False
    outs = forward_detect(model, Tensor(np.zeros((1, 1, 32, 32))))
    # overwrite each head output with its anchor index encoded in channel 0
    offset = 0
    fakes = []
    for out in outs:
        n, c2, h, w = out.conf.data.shape
        a = c2 // 2
        fake = np.zeros((n, c2, h, w))
        for y in range(h):
            for x in range(w):
                for slot in range(a):
                    idx = offset + (y * w + x) * a + slot
                    fake[0, slot * 2, y, x] = idx
        offset += h * w * a
        fakes.append(out.__class__(k=out.k, conf=Tensor(fake), loc=out.loc,
                                   anchors=out.anchors))
    conf_all, _ = flatten_hierarchies(fakes)
    np.testing.assert_array_equal(conf_all.data[0, :, 0], np.arange(offset))
    # and the anchor concatenation uses the same total count
    total = sum(len(o.anchors) for o in outs)
    assert conf_all.data.shape == (1, total, 2)


def test_branch_normalization_before_fusion_in_train_mode():
    rng = np.random.default_rng(10)
    model = build_network(desk_spec("B"), seed=11)
    model.training = True
    collect = {}
    forward_detect(model, Tensor(rng.standard_normal((2, 1, 128, 128))),
                   collect=collect)
    for k in (0, 1):
        for tag in (f"fuse{k}.deep_branch", f"fuse{k}.shallow_branch"):
            act = collect[tag]
            mean = act.mean(axis=(0, 2, 3))
            var = act.var(axis=(0, 2, 3))
            assert np.abs(mean).max() < 1e-10, tag
            assert np.abs(var - 1.0).max() < 1e-5, tag


def test_every_parameter_gets_gradient_with_positives_at_each_hierarchy():
    from deskface.geometry import Box

    spec = toy_spec("B")
    model = build_network(spec, seed=12)
    model.training = True
    rng = np.random.default_rng(13)
    image = Tensor(rng.uniform(0, 1, (2, 1, 64, 64)))
    # one face sized for each hierarchy's anchors (8 px and 16 px)
    gts = [
        [Box.from_center(20, 20, 8, 8), Box.from_center(44, 44, 16, 16)],
        [Box.from_center(32, 32, 8, 8), Box.from_center(12, 48, 16, 16)],
    ]
    model.zero_grads()
    with Tape() as tape:
        outs = forward_detect(model, image)
        conf_all, loc_all = flatten_hierarchies(outs)
        anchor_sets = [o.anchors for o in outs]
        from deskface.tensor import eltwise_add, scale, take_item

        loss_sum = None
        for i in range(2):
            match = match_anchors(anchor_sets, gts[i], 0.5)
            positive_ks = set()
            bounds = np.cumsum([0] + [len(a) for a in anchor_sets])
            for idx in match.positive_indices:
                positive_ks.add(int(np.searchsorted(bounds, idx, side="right")) - 1)
            assert positive_ks == {0, 1}, "fixture must hit every hierarchy"
            _, loss_i = total_loss(take_item(conf_all, i), take_item(loc_all, i),
                                   anchor_sets, gts[i], match)
            loss_sum = loss_i if loss_sum is None else eltwise_add(loss_sum, loss_i)
        backward(scale(loss_sum, 0.5), tape)
    for name, param in model.params.items():
        assert param.value.grad is not None and np.any(param.value.grad != 0.0), name


def test_forward_upto_returns_intermediate():
    model = build_network(tiny_spec(), seed=14)
    out = forward_upto(model, Tensor(np.zeros((1, 1, 32, 32))), "enc2.conv1")
    assert out.data.shape == (1, 3, 16, 16)
    with pytest.raises(KeyError):
        forward_upto(model, Tensor(np.zeros((1, 1, 32, 32))), "enc9.conv1")


def test_total_anchor_count_matches_head_sum():
    spec = desk_spec("B")
    model = build_network(spec, seed=15)
    sets = model.anchor_sets()
    assert [len(s) for s in sets] == [32 * 32 * 6, 16 * 16 * 6, 8 * 8 * 6]
