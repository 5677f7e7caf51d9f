import json

import pytest
import torch

import models.roster as roster_mod
from models import (
    FAMILIES,
    EncoderSpec,
    ModelSpec,
    build_encoder,
    build_model,
    count_params,
    encoder_forward,
    freeze,
    get_registry,
    load_checkpoint,
    register_decoder,
    roster_spec,
    save_checkpoint,
)
from models.unet import build_unet

from tests.conftest import TILE, tiny_spec


def _images(n=2, side=TILE, seed=0):
    g = torch.Generator().manual_seed(seed)
    return torch.rand(n, 3, side, side, generator=g)


@pytest.mark.parametrize("family", FAMILIES)
def test_pyramid_shape_law(family):
    spec = tiny_spec(family)
    model = build_model(spec).eval()
    with torch.no_grad():
        pyramid = encoder_forward(model.encoder, _images())
    assert len(pyramid) == 5
    for i, level in enumerate(pyramid):
        assert tuple(level.shape) == (2, model.encoder.out_channels[i], TILE // 2 ** (i + 1), TILE // 2 ** (i + 1))


def test_encoder_rejects_other_tile_sizes():
    model = build_model(tiny_spec()).eval()
    with pytest.raises(ValueError, match="tile size"):
        encoder_forward(model.encoder, _images(side=2 * TILE))
    with pytest.raises(ValueError, match="tile size"):
        model.encoder(_images(side=TILE // 2))

    free = build_encoder(EncoderSpec("inverted_residual", width_multiplier=0.5)).eval()
    with torch.no_grad():
        assert len(encoder_forward(free, _images(side=TILE // 2))) == 5


@pytest.mark.parametrize("family", FAMILIES)
def test_output_is_probability_map(family):
    model = build_model(tiny_spec(family)).eval()
    with torch.no_grad():
        probs = model(_images())
    assert tuple(probs.shape) == (2, 1, TILE, TILE)
    assert float(probs.min()) >= 0.0 and float(probs.max()) <= 1.0


def test_forward_features_matches_forward():
    model = build_model(tiny_spec("mbconv")).eval()
    x = _images()
    with torch.no_grad():
        probs, pyramid = model.forward_features(x)
        assert torch.equal(probs, model(x))
        assert len(pyramid) == 5


def test_construction_is_pure_in_seed():
    spec = tiny_spec("mbconv")
    torch.manual_seed(5)
    expected = torch.rand(3)
    torch.manual_seed(5)
    a = build_model(spec, seed=7)
    after = torch.rand(3)
    assert torch.equal(expected, after)

    b = build_model(spec, seed=7)
    c = build_model(spec, seed=8)
    sa, sb, sc = a.state_dict(), b.state_dict(), c.state_dict()
    assert all(torch.equal(sa[k], sb[k]) for k in sa)
    assert any(not torch.equal(sa[k], sc[k]) for k in sa if sa[k].is_floating_point())


def test_teacher_is_much_larger_than_students():
    teacher = count_params(build_model(roster_spec("teacher_vgg", TILE)))
    for name in ("student_mbconv", "student_ir", "student_mvit"):
        student = count_params(build_model(roster_spec(name, TILE)))
        assert teacher > 3 * student


def test_width_multiplier_shrinks_model():
    wide = count_params(build_model(roster_spec("student_ir", TILE)))
    narrow = count_params(build_model(roster_spec("student_ir_w050", TILE)))
    assert narrow < wide


def test_attention_gates_add_parameters():
    with_gates = count_params(build_model(tiny_spec("inverted_residual", use_attention=True)))
    without = count_params(build_model(tiny_spec("inverted_residual", use_attention=False)))
    assert with_gates > without


def test_freeze_counts_trainable_only():
    model = build_model(tiny_spec())
    assert count_params(freeze(model)) == 0
    assert count_params(freeze(model, frozen=False)) > 0


@pytest.mark.parametrize("shape", [(1, 3, 65, 65), (1, 3, 64, 32), (1, 1, 64, 64), (3, 64, 64)])
def test_bad_inputs_rejected(shape):
    model = build_model(tiny_spec())
    with pytest.raises(ValueError):
        model(torch.zeros(shape))


def test_input_must_match_tile_size():
    model = build_model(tiny_spec())
    with pytest.raises(ValueError, match="tile size"):
        model(torch.zeros(1, 3, 96, 96))


def test_spec_validation():
    with pytest.raises(ValueError):
        ModelSpec(EncoderSpec("mbconv"), decoder_channels=(16, 16, 16, 16))
    with pytest.raises(ValueError):
        ModelSpec(EncoderSpec("mbconv"), tile_size=100)
    with pytest.raises(ValueError):
        EncoderSpec("mbconv", stage_channels=(8, 8, 8))
    with pytest.raises(ValueError):
        EncoderSpec("mbconv", width_multiplier=0)


def test_spec_dict_form_is_stable():
    spec = roster_spec("student_mvit", 128)
    assert ModelSpec.from_dict(spec.to_dict()) == spec
    assert spec.with_tile_size(64).tile_size == 64


def test_unknown_family_and_decoder():
    with pytest.raises(ValueError, match="unknown encoder family"):
        build_encoder(EncoderSpec("resnet", stage_channels=(8, 8, 8, 8, 8)))
    spec = ModelSpec(EncoderSpec("mbconv", width_multiplier=0.5), decoder="fpn", tile_size=TILE)
    with pytest.raises(ValueError, match="unknown decoder"):
        build_model(spec)


def test_external_decoder_registration():
    calls = []

    def builder(spec, seed=0):
        calls.append(spec.decoder)
        return build_unet(spec, seed)

    register_decoder("unet_alias", builder)
    try:
        spec = ModelSpec(EncoderSpec("mbconv", width_multiplier=0.5), decoder="unet_alias", tile_size=TILE)
        build_model(spec)
        assert calls == ["unet_alias"]
    finally:
        get_registry().decoders.pop("unet_alias")


def test_checkpoint_round_trip(tmp_path):
    model = build_model(tiny_spec("mobilevit_like"), seed=3).eval()
    path = save_checkpoint(tmp_path / "m.pt", model, seed=3, config_hash="abc")
    loaded, meta = load_checkpoint(path, "cpu")
    loaded.eval()
    assert meta["config_hash"] == "abc" and meta["seed"] == 3
    assert loaded.spec == model.spec
    x = _images(1)
    with torch.no_grad():
        assert torch.equal(model(x), loaded(x))


def test_user_roster_overrides(tmp_path, monkeypatch):
    monkeypatch.setattr(roster_mod, "ROSTER", dict(roster_mod.DEFAULT_ROSTER))
    path = tmp_path / "roster.json"
    path.write_text(json.dumps({
        "tiny_mbconv": {"family": "mbconv", "width_multiplier": 0.25},
        "broken": {"family": "mbconv", "decoder_channels": [1, 2]},
    }))
    roster_mod._load_user_overrides(path)
    assert "tiny_mbconv" in roster_mod.ROSTER
    assert "broken" not in roster_mod.ROSTER
    assert roster_mod.roster_spec("tiny_mbconv", TILE).encoder.width_multiplier == 0.25

    with pytest.raises(ValueError):
        roster_mod.roster_spec("nope")
