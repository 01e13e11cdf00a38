import struct

import numpy as np
import pytest

import gradcases
from das_forge import dataset
from das_forge.fileio import FormatError
from das_forge.model import (
    FeatureExtractorSpec,
    ModelConfig,
    ModelError,
    TwoStageClassifier,
    decode_weights,
    encode_weights,
)


def images(n, size=8, seed=0):
    rng = np.random.default_rng(seed)
    return rng.random((n, size, size, 3)), rng.random((n, size, size, 3))


def test_desk_extractor_shape():
    cfg = ModelConfig()
    assert cfg.extractor.output_shape() == (8, 8, 16)
    assert cfg.branch_features() == 64 * 16
    assert cfg.steps == 8
    model = TwoStageClassifier(cfg, seed=0)
    x = np.random.default_rng(1).random((2, 64, 64, 3))
    maps = model.extract_spatial(x, "amp")
    assert maps.shape == (2, 8, 8, 16)
    assert np.array_equal(model.extract_spatial(x[:1], "amp"), maps[:1])


def test_zero_image_gives_zero_features():
    model = TwoStageClassifier(ModelConfig(), seed=3)
    assert np.all(model.extract_spatial(np.zeros((1, 64, 64, 3)), "phase") == 0)


def test_extractor_rejects_wrong_dims():
    model = gradcases.toy_model(0)
    with pytest.raises(ModelError):
        model.extract_spatial(np.zeros((1, 9, 8, 3)), "amp")


@pytest.mark.parametrize("variant", ["vgg_s", "plain_s", "depthwise_s"])
def test_forward_is_probability_vector(variant):
    model = gradcases.toy_model(1, variant, channels=(2, 3))
    amp, phase = images(4)
    probs = model.predict_proba(amp, phase)
    assert probs.shape == (4, 15)
    assert np.allclose(probs.sum(axis=1), 1.0, atol=1e-12)
    single = model.predict_proba(amp[0], phase[0])
    assert single.shape == (15,)
    assert np.allclose(single, probs[0], atol=1e-12)


def test_zero_head_gives_uniform_probabilities():
    model = gradcases.toy_model(2)
    for k in model.params:
        if k.startswith(("lstm", "head")):
            model.params[k][...] = 0.0
    probs = model.predict_proba(*images(3))
    assert np.allclose(probs, 1 / 15, atol=1e-15)


@pytest.mark.parametrize("variant,channels", [("vgg_s", (2,)), ("vgg_s", (2, 2)), ("depthwise_s", (2, 2))])
def test_full_model_gradient(variant, channels):
    assert gradcases.full_model_case(5, variant, channels) < 1e-4


def test_variant_layouts_differ():
    names = {}
    for v in ("vgg_s", "plain_s", "depthwise_s"):
        m = gradcases.toy_model(0, v, channels=(2, 3))
        names[v] = {k for k in m.params if k.startswith("ext.amp")}
    assert "ext.amp.block2.conv2.W" in names["vgg_s"]
    assert "ext.amp.block2.conv2.W" not in names["plain_s"]
    assert "ext.amp.block2.conv1.dw.W" in names["depthwise_s"]
    with pytest.raises(ModelError):
        FeatureExtractorSpec(variant="resnet").blocks()


def test_config_validation():
    with pytest.raises(ModelError):
        ModelConfig(seq_steps=7).validate()
    with pytest.raises(ModelError):
        ModelConfig(concat_order=("amp", "amp")).validate()
    with pytest.raises(ModelError):
        ModelConfig(extractor=FeatureExtractorSpec(input_height=8, input_width=8, channels=(2, 2, 2, 2))).validate()
    with pytest.raises(ModelError):
        ModelConfig.from_dict({"lstm_width": 3})


def test_config_json_round_trip(tmp_path):
    cfg = ModelConfig(extractor=FeatureExtractorSpec(variant="plain_s", channels=(4, 8)), lstm_hidden=7)
    cfg.save(tmp_path / "m.json")
    assert ModelConfig.load(tmp_path / "m.json") == cfg


def test_mask_partitions_parameters():
    model = gradcases.toy_model(0)
    for freeze in (False, True):
        mask = model.set_trainable(freeze)
        assert set(mask) == set(model.params)
        trainable = {k for k, v in mask.items() if v}
        frozen = set(model.params) - trainable
        assert not trainable & frozen
        ext = set(model.extractor_names())
        assert (ext <= frozen) == freeze
        assert "bn_amp.gamma" in trainable and "bn_amp.running_mean" in frozen


def _train_steps(model, steps, seed=0):
    from das_forge import nncore as nn

    amp, phase = images(4, seed=seed)
    labels = np.arange(4)
    opt = nn.Adam()
    for _ in range(steps):
        _, grads, _ = model.loss_and_grads(amp, phase, labels)
        opt.step(model.params, grads, model.trainable_names())


def test_frozen_extractor_bitwise_unchanged():
    model = gradcases.toy_model(4, freeze=True)
    before = {k: model.params[k].copy() for k in model.extractor_names()}
    head_before = model.params["head.W"].copy()
    _train_steps(model, 10)
    for k, v in before.items():
        assert model.params[k].tobytes() == v.tobytes()
    assert not np.array_equal(model.params["head.W"], head_before)


def test_unfrozen_extractor_moves():
    model = gradcases.toy_model(4)
    before = {k: model.params[k].copy() for k in model.extractor_names()}
    _train_steps(model, 1)
    assert any(not np.array_equal(model.params[k], v) for k, v in before.items())


def test_cached_maps_match_live_extractor():
    model = gradcases.toy_model(6, freeze=True)
    amp, phase = images(5)
    maps = model.extractor_maps(amp, phase)
    a = model.predict_proba(amp, phase)
    b = model.predict_proba(amp, phase, ext_maps=maps)
    assert np.array_equal(a, b)


def test_weights_round_trip(tmp_path):
    model = gradcases.toy_model(7)
    _train_steps(model, 2)
    model.save_weights(tmp_path / "w.wgt")
    other = gradcases.toy_model(99)
    loaded = other.load_weights(tmp_path / "w.wgt", strict=True)
    assert set(loaded) == set(model.params)
    for k in model.params:
        assert other.params[k].tobytes() == model.params[k].tobytes()
    amp, phase = images(3)
    assert np.array_equal(model.predict_proba(amp, phase), other.predict_proba(amp, phase))


def test_wgt_layout_by_hand():
    blob = encode_weights({"ab": np.array([[1.0, 2.0, 3.0]])})
    want = b"WGT1" + struct.pack("<I", 1) + struct.pack("<I", 2) + b"ab" + struct.pack("<III", 2, 1, 3)
    want += struct.pack("<3d", 1.0, 2.0, 3.0)
    assert blob == want


def test_tampered_rank_names_tensor():
    model = gradcases.toy_model(0)
    blob = bytearray(encode_weights({"head.b": model.params["head.b"]}))
    rank_at = 4 + 4 + 4 + len("head.b")
    assert struct.unpack_from("<I", blob, rank_at)[0] == 1
    struct.pack_into("<I", blob, rank_at, 2)
    with pytest.raises((ModelError, FormatError), match="head.b"):
        decode_weights(bytes(blob), expected={k: v.shape for k, v in model.params.items()})


def test_weight_file_errors(tmp_path):
    model = gradcases.toy_model(0)
    good = encode_weights({"head.b": model.params["head.b"]})
    exp = {k: v.shape for k, v in model.params.items()}
    with pytest.raises(FormatError):
        decode_weights(b"WGT2" + good[4:], exp)
    with pytest.raises(FormatError):
        decode_weights(good[:-3], exp)
    with pytest.raises(FormatError):
        decode_weights(good + b"\0", exp)
    with pytest.raises(ModelError, match="bogus"):
        decode_weights(encode_weights({"bogus": np.zeros(2)}), exp)
    with pytest.raises(ModelError, match="head.b"):
        decode_weights(encode_weights({"head.b": np.zeros(3)}), exp)
    (tmp_path / "part.wgt").write_bytes(good)
    with pytest.raises(ModelError):
        model.load_weights(tmp_path / "part.wgt", strict=True)


def test_extractor_only_import_leaves_rest_untouched(tmp_path):
    donor = gradcases.toy_model(1)
    donor.save_weights(tmp_path / "ext.wgt", donor.extractor_names())
    fresh = gradcases.toy_model(2)
    rest = {k: v.copy() for k, v in fresh.params.items() if not k.startswith("ext.")}
    loaded = fresh.load_weights(tmp_path / "ext.wgt")
    assert set(loaded) == set(donor.extractor_names())
    for k in loaded:
        assert np.array_equal(fresh.params[k], donor.params[k])
    for k, v in rest.items():
        assert np.array_equal(fresh.params[k], v)


def test_concat_order_permutation_equivariance():
    a = gradcases.toy_model(3)
    spec = a.config.extractor
    b = TwoStageClassifier(ModelConfig(extractor=spec, lstm_hidden=3, concat_order=("phase", "amp")), seed=0)
    b.params = {k: v.copy() for k, v in a.params.items()}
    width = a.config.branch_features() // a.config.steps
    for d in ("fwd", "bwd"):
        W = a.params[f"lstm1.{d}.W"]
        b.params[f"lstm1.{d}.W"] = np.concatenate([W[width:], W[:width]])
    amp, phase = images(3)
    assert np.allclose(a.predict_proba(amp, phase), b.predict_proba(amp, phase), atol=1e-14)


def test_argmax_stable_under_affine_rescale():
    rng = np.random.default_rng(8)
    spec = dataset.RenderSpec(8, 8)
    model = gradcases.toy_model(9)
    A, P = rng.standard_normal((40, 100)), rng.standard_normal((40, 100))

    def predict(a, p):
        ia = dataset.render_image(a, spec)[None] / 255.0
        ip = dataset.render_image(p, spec)[None] / 255.0
        return model.predict_proba(ia, ip).argmax()

    base = predict(A, P)
    for s, o in ((3.0, 1.0), (0.01, -50.0)):
        assert predict(s * A + o, s * P + o) == base


def test_recalibration_uses_population_statistics():
    model = gradcases.toy_model(10)
    amp, phase = images(6)
    model.recalibrate_batchnorm(amp, phase)
    flat = model.extract_spatial(amp, "amp").reshape(6, -1)
    assert np.allclose(model.params["bn_amp.running_mean"], flat.mean(axis=0))
    assert np.allclose(model.params["bn_amp.running_var"], flat.var(axis=0))


def test_features_shapes():
    model = gradcases.toy_model(11)
    amp, phase = images(5)
    f1 = model.features(amp, phase, 1)
    f2 = model.features(amp, phase, 2)
    assert f1.shape == (5, 2 * model.config.branch_features())
    assert f2.shape == (5, 2 * model.config.lstm_hidden)
    with pytest.raises(ModelError):
        model.features(amp, phase, 3)
