import copy

import numpy as np
import pytest

import checks
from sgcnet.errors import DataError
from sgcnet.model import (HEAD_ABSTRACT, HEAD_FINAL, Config, LayerGraph, NetworkConfig, build,
                          forward, packaged_config, parse_config)
from sgcnet.sparse_tensor import empty, from_dense


def small_config(**kw):
    base = dict(input_resolution=32, channels=(3, 4), blocks=(1, 1), class_count=4,
                sgc_min_resolution=4)
    base.update(kw)
    return NetworkConfig(**base)


def random_input(rng, r=32, density=0.15, batch=1):
    grid = np.where(rng.random((batch, r, r, r, 1)) < density,
                    rng.uniform(-1, 1, (batch, r, r, r, 1)), 0)
    return from_dense(grid)


def test_single_group_has_no_partition_nodes():
    g = build(small_config(sgc_groups=1))
    assert "partition" not in g.kinds() and "gather" not in g.kinds()
    g2 = build(small_config(sgc_groups=2))
    assert g2.kinds().count("partition") == g2.kinds().count("gather") > 0


def test_parameter_count_independent_of_groups():
    counts = {build(small_config(sgc_groups=g)).registry.count() for g in (1, 2, 4)}
    assert len(counts) == 1


def test_covered_scales_follow_min_resolution():
    g = build(small_config(sgc_groups=2, sgc_min_resolution=8))
    covered = {n.scale for n in g.nodes if n.covered}
    assert covered == {0}
    assert all(n.resolution >= 8 for n in g.nodes if n.covered)


def test_full_config_scale_resolutions():
    cfg = packaged_config("suncg_full.cfg").network
    assert cfg.output_resolution == 64
    assert cfg.scale_resolutions() == [64, 32, 16, 8, 4, 2]


def test_desk32_output_shape_and_finite_logits():
    cfg = packaged_config("desk32.cfg").network
    g = build(cfg)
    r = forward(g, random_input(np.random.default_rng(0), cfg.input_resolution))
    lg = r.heads[HEAD_ABSTRACT]
    assert lg.extents == (8, 8, 8) and lg.channels == cfg.class_count
    assert np.isfinite(lg.features).all()
    assert (lg.coords[:, 1:] >= 0).all() and (lg.coords[:, 1:] < 8).all()
    assert r.prediction().shape == (1, 8, 8, 8)


def test_config_round_trip():
    cfg = packaged_config("desk32.cfg")
    again = parse_config(cfg.to_text())
    assert again == cfg


def test_config_rejects_unknown_key_and_bad_values():
    with pytest.raises(DataError, match="unknown"):
        parse_config("input_resolution = 32\nwidth = 3\n")
    with pytest.raises(DataError):
        parse_config("input_resolution = 30\n")
    with pytest.raises(DataError):
        parse_config("channels = 4,8\nblocks = 1\n")
    with pytest.raises(DataError):
        parse_config("sgc_groups = 2\nsgc_pattern = 0,0,0\n")


def test_config_file_missing():
    from sgcnet.model import load_config
    with pytest.raises(DataError):
        load_config("/nonexistent/x.cfg")


def test_empty_input_rejected():
    g = build(small_config())
    with pytest.raises(DataError):
        forward(g, empty(1, (32, 32, 32), 1))


def test_wrong_extent_rejected():
    g = build(small_config())
    with pytest.raises(DataError):
        forward(g, random_input(np.random.default_rng(1), r=16))


def test_inference_does_not_touch_buffers():
    g = build(small_config(sgc_groups=2))
    before = copy.deepcopy(g.registry.values)
    forward(g, random_input(np.random.default_rng(2)), "infer")
    assert all(np.array_equal(before[k], g.registry[k]) for k in before)
    forward(g, random_input(np.random.default_rng(2)), "train")
    assert any(not np.array_equal(before[k], g.registry[k]) for k in g.registry.buffers)


@pytest.mark.parametrize("groups, resolution", [(1, 32), (2, 32), (2, 8)])
def test_end_to_end_gradients(groups, resolution):
    rng = np.random.default_rng(groups)
    assert checks.network_gradient_error(rng, groups=groups, resolution=resolution) < 1e-4


def test_single_group_partition_is_bitwise_identity():
    """A graph that still contains partition/gather nodes but runs with G=1 matches the plain graph."""
    rng = np.random.default_rng(3)
    x = random_input(rng, batch=2)
    plain = build(small_config(sgc_groups=1))
    wrapped = build(small_config(sgc_groups=2))
    nodes = copy.deepcopy(wrapped.nodes)
    for n in nodes:
        if n.kind == "gather":
            n.attrs["groups"] = 1
    hybrid = LayerGraph(plain.config, nodes, wrapped.heads, plain.registry)
    assert "partition" in hybrid.kinds()
    for mode in ("infer", "train"):
        a = forward(plain, x, mode)
        b = forward(hybrid, x, mode)
        for h in (HEAD_ABSTRACT, HEAD_FINAL):
            assert np.array_equal(a.heads[h].coords, b.heads[h].coords)
            assert np.array_equal(a.heads[h].features, b.heads[h].features)


def test_random_partition_seed_override_changes_grouping_only():
    cfg = small_config(sgc_groups=2, sgc_strategy="random", sgc_seed=5)
    g = build(cfg)
    x = random_input(np.random.default_rng(4))
    a = forward(g, x, partition_seed=5)
    b = forward(g, x)
    assert np.array_equal(a.logits.features, b.logits.features)


def test_build_is_deterministic():
    a = build(small_config(init_seed=9)).registry
    b = build(small_config(init_seed=9)).registry
    assert all(np.array_equal(a[k], b[k]) for k in a.values)


def test_default_config_validates():
    Config().network.validate()
