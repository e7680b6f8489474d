"""Toy transformer: parameter set, forward passes, LoRA, checkpoints, counting."""

import json
import math

import numpy as np
import pytest

from elasticlab import backbone as bb
from elasticlab import numerics as nx
from elasticlab.checkpoint import CheckpointFormatError, load_checkpoint, save_checkpoint
from elasticlab.config import ConfigError, ElasticConfig, ModelConfig
from elasticlab.routing import ElasticModel, init_routers

from conftest import tiny_config


def test_default_param_count_matches_enumeration():
    cfg = ModelConfig()
    params = bb.build_model(cfg)
    enumerated = sum(int(np.prod(t.shape)) for t in params.tensors.values())
    assert enumerated == bb.closed_form_param_count(cfg) == bb.count_params(params)
    # tok_emb + pos + L*(2 LN + 4 DxD + MLP) + final LN, tied head
    D, F, V, T, L = 64, 256, 128, 128, 4
    assert enumerated == V * D + T * D + L * (4 * D + 4 * D * D + 2 * F * D + F + D) + 2 * D


def test_encoder_param_count_matches_enumeration():
    cfg = ModelConfig(mode="encoder")
    params = bb.build_model(cfg)
    assert bb.count_params(params) == bb.closed_form_param_count(cfg)
    assert "tok_emb" not in params.tensors and params["pos_emb"].shape == (64, 64)


def test_same_seed_is_bit_identical():
    a, b = bb.build_model(tiny_config()), bb.build_model(tiny_config())
    assert a.digest() == b.digest()
    assert bb.build_model(tiny_config(seed=1)).digest() != a.digest()


def test_indivisible_heads_rejected():
    with pytest.raises(ConfigError):
        bb.build_model(ModelConfig(hidden=65, heads=4))


def test_single_layer_rejected():
    with pytest.raises(ConfigError):
        bb.build_model(tiny_config(layers=1))


def test_lm_output_shape(fresh_model, rng):
    tokens = rng.integers(0, 128, size=(3, 7))
    assert bb.forward_lm(fresh_model, tokens).shape == (3, 7, 128)


def test_lm_rejects_bad_tokens(fresh_model):
    with pytest.raises(bb.DataError):
        bb.forward_lm(fresh_model, np.array([[1, 200]]))
    with pytest.raises(bb.DataError):
        bb.forward_lm(fresh_model, np.zeros((1, 17), dtype=int))


@pytest.mark.parametrize("layers", [2, 3])
def test_causality(rng, layers):
    params = bb.build_model(tiny_config(layers=layers, init_std=0.2))
    tokens = rng.integers(0, 128, size=(2, 10))
    base = bb.forward_lm(params, tokens).data
    for t in (0, 4, 9):
        changed = tokens.copy()
        changed[:, t] = (changed[:, t] + 1) % 128
        out = bb.forward_lm(params, changed).data
        assert np.array_equal(out[:, :t], base[:, :t])
        assert not np.array_equal(out[:, t:], base[:, t:])


def test_untrained_loss_near_uniform(rng):
    params = bb.build_model(ModelConfig())
    tokens = rng.integers(0, 128, size=(4, 65))
    loss = float(bb.lm_loss(params, tokens).data)
    assert abs(loss - math.log(128)) / math.log(128) < 0.05


def test_encoder_shape_and_permutation(rng):
    cfg = tiny_config(mode="encoder", image_grid=3, init_std=0.2)
    params = bb.build_model(cfg)
    patches = rng.standard_normal((2, 9, 12)).astype(np.float32)
    out = bb.forward_encoder(params, patches).data
    assert out.shape == (2, 9, 16)
    perm = rng.permutation(9)
    permuted = bb.TransformerParams(cfg, dict(params.tensors))
    permuted.tensors["pos_emb"] = nx.Tensor(params["pos_emb"].data[perm])
    out_p = bb.forward_encoder(permuted, patches[:, perm]).data
    np.testing.assert_allclose(out_p, out[:, perm], atol=1e-5)


def test_encoder_zero_image_depends_only_on_position(rng):
    cfg = tiny_config(mode="encoder", image_grid=3, init_std=0.2)
    params = bb.build_model(cfg)
    out = bb.forward_encoder(params, np.zeros((2, 9, 12), np.float32)).data
    assert np.array_equal(out[0], out[1])
    assert not np.allclose(out[0, 0], out[0, 1])


def test_fresh_lora_is_exact_noop(fresh_model, rng):
    tokens = rng.integers(0, 128, size=(2, 8))
    base = bb.forward_lm(fresh_model, tokens).data
    adapted = bb.attach_lora(fresh_model, rank=2)
    assert np.array_equal(bb.forward_lm(adapted, tokens).data, base)


def test_zeroing_up_matrix_restores_output(fresh_model, rng):
    tokens = rng.integers(0, 128, size=(2, 8))
    base = bb.forward_lm(fresh_model, tokens).data
    adapted = bb.attach_lora(fresh_model, rank=1)
    for ad in adapted.lora.values():
        ad.up.data[...] = rng.standard_normal(ad.up.shape)
    assert not np.array_equal(bb.forward_lm(adapted, tokens).data, base)
    for ad in adapted.lora.values():
        ad.up.data[...] = 0.0
    assert np.array_equal(bb.forward_lm(adapted, tokens).data, base)


@pytest.mark.parametrize("targets", [("q_proj",), ("q_proj", "v_proj")])
def test_rank1_lora_parameter_count(fresh_model, targets):
    cfg = fresh_model.config
    adapted = bb.attach_lora(fresh_model, targets, rank=1)
    assert bb.count_params(adapted, trainable_only=True) == 2 * cfg.hidden * cfg.layers * len(targets)
    assert bb.count_params(adapted) == bb.count_params(fresh_model) + 2 * cfg.hidden * cfg.layers * len(targets)


def test_lora_gradients_reach_adapters_only(fresh_model, rng):
    adapted = bb.attach_lora(fresh_model, rank=1)
    for ad in adapted.lora.values():
        ad.up.data[...] = 0.1
    bb.lm_loss(adapted, rng.integers(0, 128, size=(2, 9))).backward()
    assert all(t.grad is None for t in adapted.tensors.values())
    for ad in adapted.lora.values():
        assert np.abs(ad.down.grad).sum() > 0 and np.abs(ad.up.grad).sum() > 0


def test_lora_unknown_target(fresh_model):
    with pytest.raises(ConfigError):
        bb.attach_lora(fresh_model, ("k_proj",), rank=1)


def test_lora_scale_is_alpha_over_rank(fresh_model):
    ad = next(iter(bb.attach_lora(fresh_model, rank=3).lora.values()))
    assert ad.alpha == 6.0 and ad.scale == 2.0


def test_input_router_count():
    cfg = ModelConfig()
    model = ElasticModel(bb.build_model(cfg), ElasticConfig(input_mlp=0.5))
    assert bb.count_params(model, trainable_only=True) == cfg.layers * (cfg.hidden + 1)


def test_partition_identity():
    params = bb.build_model(tiny_config())
    model = ElasticModel(params, ElasticConfig(param_mlp=2, input_mha=0.5, lora_rank=1))
    total = bb.count_params(model)
    trainable = bb.count_params(model, trainable_only=True)
    frozen = bb.count_params(model.params) - bb.count_params(model.params, trainable_only=True)
    assert total == trainable + frozen
    assert frozen == bb.count_params(params)
    names = set(model.trainable())
    assert names.isdisjoint(params.tensors)


# ---------------------------------------------------------------- checkpoints

def test_checkpoint_round_trip(tmp_path):
    params = bb.attach_lora(bb.build_model(tiny_config()), rank=2)
    elastic = ElasticConfig(param_mlp=2, input_mha=0.5)
    routers = init_routers(params.config, elastic)
    routers["router.0.param_mlp.w"].data[...] = np.arange(4 * 16).reshape(4, 16)
    path = save_checkpoint(params, routers, tmp_path / "ck", elastic=elastic)
    ck = load_checkpoint(path)
    assert ck.params.frozen and ck.elastic == elastic
    for name, t in params.tensors.items():
        assert np.array_equal(ck.params[name].data, t.data) and ck.params[name].dtype == t.dtype
    for name, t in params.lora_tensors().items():
        assert np.array_equal(ck.params.lora_tensors()[name].data, t.data)
    for name, t in routers.items():
        assert np.array_equal(ck.routers[name].data, t.data)


def test_manifest_lists_every_tensor(tmp_path):
    params = bb.build_model(tiny_config())
    save_checkpoint(params, None, tmp_path / "ck")
    manifest = json.loads((tmp_path / "ck" / "manifest.json").read_text())
    listed = {e["name"]: e for e in manifest["tensors"]}
    assert set(listed) == {f"backbone/{n}" for n in params.tensors}
    for name, t in params.tensors.items():
        e = listed[f"backbone/{name}"]
        assert tuple(e["shape"]) == t.shape and e["dtype"] == "<f4"
        assert e["byte_length"] == t.size * 4
        assert (tmp_path / "ck" / e["file"]).stat().st_size == e["byte_length"]


def test_blob_is_little_endian_row_major(tmp_path):
    params = bb.build_model(tiny_config())
    save_checkpoint(params, None, tmp_path / "ck")
    manifest = json.loads((tmp_path / "ck" / "manifest.json").read_text())
    e = next(e for e in manifest["tensors"] if e["name"] == "backbone/layers.0.mlp.w1")
    raw = np.frombuffer((tmp_path / "ck" / e["file"]).read_bytes(), dtype="<f4").reshape(e["shape"])
    assert np.array_equal(raw, params["layers.0.mlp.w1"].data)


def test_truncated_blob_is_format_error(tmp_path):
    save_checkpoint(bb.build_model(tiny_config()), None, tmp_path / "ck")
    blob = tmp_path / "ck" / "0003.bin"
    blob.write_bytes(blob.read_bytes()[:-4])
    with pytest.raises(CheckpointFormatError):
        load_checkpoint(tmp_path / "ck")


def test_corrupt_manifest_is_format_error(tmp_path):
    save_checkpoint(bb.build_model(tiny_config()), None, tmp_path / "ck")
    (tmp_path / "ck" / "manifest.json").write_text("{not json")
    with pytest.raises(CheckpointFormatError):
        load_checkpoint(tmp_path / "ck")


def test_manifest_size_mismatch_is_format_error(tmp_path):
    save_checkpoint(bb.build_model(tiny_config()), None, tmp_path / "ck")
    path = tmp_path / "ck" / "manifest.json"
    manifest = json.loads(path.read_text())
    manifest["tensors"][0]["shape"][0] += 1
    path.write_text(json.dumps(manifest))
    with pytest.raises(CheckpointFormatError):
        load_checkpoint(tmp_path / "ck")


def test_overwrite_is_clean(tmp_path):
    a, b = bb.build_model(tiny_config()), bb.build_model(tiny_config(seed=5))
    save_checkpoint(a, None, tmp_path / "ck")
    save_checkpoint(b, None, tmp_path / "ck")
    assert load_checkpoint(tmp_path / "ck").params.digest() == b.digest()
    assert sorted(p.name for p in tmp_path.iterdir()) == ["ck"]


def test_float64_round_trip(tmp_path):
    params = bb.build_model(tiny_config()).astype(np.float64)
    save_checkpoint(params, None, tmp_path / "ck")
    ck = load_checkpoint(tmp_path / "ck")
    assert ck.params.dtype == np.float64 and ck.params.digest() == params.digest()
