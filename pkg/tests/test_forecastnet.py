import numpy as np
import pytest

from mosabench import diffcore as dc
from mosabench.diffcore import ShapeError, grad_check
from mosabench.forecastnet import (ForecastModel, ModelConfig, decode, encode_motion, encode_motion_batch,
                                   encode_scene,
                                   forward, forward_batch, fuse, fuse_batch, layer_table, make_batch,
                                   past_offsets, scene_onehot)
from mosabench.synthworld import build_scene, build_spec_dataset, scenario_preset
from mosabench.trainkit import variety_loss

SMALL = ModelConfig(d_model=8, k_modes=3, t_obs=4, t_pred=5, seed=3)


@pytest.fixture(scope="module")
def data():
    src, _ = scenario_preset("agent_shift")
    return build_spec_dataset(src, 6, 5, t_obs=4, t_pred=5)


def test_parameter_shapes_follow_layer_table():
    m = ForecastModel.init(ModelConfig())
    for name, tag, d_in, d_out, bias in layer_table(m.config):
        assert m.params[name + ".weight"].shape == (d_out, d_in)
        assert m.tags[name + ".weight"] == tag
        assert (name + ".bias" in m.params) == bias
    assert m.params["scene.fc1.weight"].shape == (64, 1024)
    assert m.params["decoder.fc2.weight"].shape == (5 * 12 * 2, 128)


def test_init_is_deterministic():
    a, b = ForecastModel.init(SMALL), ForecastModel.init(SMALL)
    assert all(np.array_equal(a.params[k].data, b.params[k].data) for k in a.params)


def test_config_validation():
    with pytest.raises(ValueError):
        ModelConfig(t_obs=1)
    with pytest.raises(ValueError):
        ModelConfig(d_model=7)
    with pytest.raises(ValueError):
        ModelConfig(k_modes=0)


def test_output_shape_and_anchor(data):
    m = ForecastModel.init(SMALL)
    s = data.samples[0]
    out = forward(m, s, data.scenes[s.scene_id])
    assert out.shape == (3, 5, 2)
    # a zero output layer predicts standing still at the last observed point
    m.params["decoder.fc2.weight"].data[...] = 0.0
    m.params["decoder.fc2.bias"].data[...] = 0.0
    still = forward(m, s, data.scenes[s.scene_id]).data
    assert np.array_equal(still, np.broadcast_to(s.past[-1], (3, 5, 2)))
    # a constant per-step bias is integrated over the horizon
    m.params["decoder.fc2.bias"].data[...] = 0.25
    ramp = forward(m, s, data.scenes[s.scene_id]).data
    assert np.allclose(ramp[0, :, 0] - s.past[-1][0], 0.25 * np.arange(1, 6))


def test_batch_matches_single_sample(data):
    m = ForecastModel.init(SMALL)
    b = make_batch(data.samples, data.scenes, SMALL)
    batched = forward_batch(m, b).data
    for i, s in enumerate(data.samples):
        single = forward(m, s, data.scenes[s.scene_id]).data
        assert np.allclose(batched[i], single, atol=1e-12)


def test_module_stages(data):
    m = ForecastModel.init(SMALL)
    s = data.samples[0]
    se = encode_scene(m, data.scenes[s.scene_id])
    me = encode_motion(m, s.past)
    assert se.shape == me.shape == (1, 8)
    fused = fuse(m, se, me)
    assert fused.shape == (1, 16)
    assert decode(m, fused, s.past[-1]).shape == (3, 5, 2)
    _, attn = fuse_batch(m, se, me, return_attention=True)
    assert np.allclose(attn.data.sum(-1), 1.0)
    with pytest.raises(ShapeError):
        fuse(m, se, dc.Tensor(np.zeros((1, 7))))


def test_input_validation():
    cfg = ModelConfig()
    with pytest.raises(ValueError):
        past_offsets(np.zeros((5, 2)), cfg)
    bad = np.zeros((8, 2))
    bad[3, 0] = np.nan
    with pytest.raises(ValueError, match="non-finite"):
        past_offsets(bad, cfg)
    with pytest.raises(ValueError):
        scene_onehot(build_scene("layout1"), ModelConfig(grid_h=8))


def test_scene_onehot_layout():
    g = build_scene("layout2")
    oh = scene_onehot(g, ModelConfig()).reshape(16, 16, 4)
    assert np.array_equal(oh.argmax(-1), g.cells)
    assert np.all(oh.sum(-1) == 1)


def test_end_to_end_gradient_small_model(data):
    m = ForecastModel.init(SMALL)
    b = make_batch(data.samples[:2], data.scenes, SMALL)
    f = lambda: variety_loss(forward_batch(m, b), b.future)
    rep = grad_check(f, m.params.values(), 1e-5)
    assert max(e.max_rel_err for e in rep.values()) < 1e-4


def _zeroed(model, prefix):
    for name, p in model.params.items():
        if name.startswith(prefix) and name.endswith((".weight", ".bias")):
            p.data[...] = 0.0


def test_zero_scene_weights_give_final_beta():
    m = ForecastModel.init(SMALL)
    _zeroed(m, "scene.")
    beta = np.random.default_rng(0).normal(size=8)
    m.params["scene.ln2.beta"].data[...] = beta
    g = build_scene("layout1")
    g.cells[...] = 0
    out = encode_scene(m, g).data[0]
    assert np.allclose(out, np.maximum(beta, 0.0), atol=1e-12)


def test_different_grids_embed_differently():
    m = ForecastModel.init(ModelConfig())
    a, b = encode_scene(m, build_scene("layout1")).data, encode_scene(m, build_scene("layout4")).data
    assert not np.allclose(a, b)


def test_motion_embedding_translation_invariant(data):
    m = ForecastModel.init(SMALL)
    past = data.samples[0].past
    shifted = past + np.array([3.0, -2.0])
    # offsets of shifted points may differ in the last ulp
    assert np.allclose(encode_motion(m, past).data, encode_motion(m, shifted).data, atol=1e-12)
    still = np.repeat(past[:1], 4, axis=0)
    assert np.array_equal(encode_motion(m, still).data, encode_motion_batch(m, np.zeros((1, 6))).data)


def test_zero_query_key_gives_uniform_attention():
    m = ForecastModel.init(SMALL)
    m.params["fusion.attn.wq.weight"].data[...] = 0.0
    m.params["fusion.attn.wk.weight"].data[...] = 0.0
    rng = np.random.default_rng(1)
    s, a = dc.Tensor(rng.normal(size=(1, 8))), dc.Tensor(rng.normal(size=(1, 8)))
    _, attn = fuse_batch(m, s, a, return_attention=True)
    assert np.allclose(attn.data, 0.5)


def test_zero_value_map_passes_tokens_through():
    m = ForecastModel.init(SMALL)
    m.params["fusion.attn.wv.weight"].data[...] = 0.0
    m.params["fusion.fc.weight"].data[...] = np.eye(16)
    m.params["fusion.fc.bias"].data[...] = 0.0
    rng = np.random.default_rng(2)
    s, a = np.abs(rng.normal(size=(1, 8))), np.abs(rng.normal(size=(1, 8)))
    out = fuse(m, dc.Tensor(s), dc.Tensor(a)).data
    assert np.allclose(out, np.concatenate([s, a], axis=1), atol=1e-12)


def test_unit_offsets_walk_along_x():
    m = ForecastModel.init(SMALL)
    m.params["decoder.fc2.weight"].data[...] = 0.0
    bias = np.zeros((3, 5, 2))
    bias[1, :, 0] = 1.0
    m.params["decoder.fc2.bias"].data[...] = bias.reshape(-1)
    last = np.array([2.0, 7.0])
    out = decode(m, dc.Tensor(np.ones((1, 16))), last).data
    assert np.array_equal(out[1], last + np.stack([np.arange(1, 6), np.zeros(5)], axis=1))
    assert np.array_equal(out[0], np.broadcast_to(last, (5, 2)))
