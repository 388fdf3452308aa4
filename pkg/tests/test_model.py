import numpy as np
import pytest

from lasan.errors import ConfigurationError, DimensionError, NumericError
from lasan.model import (
    LASAN,
    LasanSpec,
    LeadImportance,
    add_position_encoding,
    aggregate,
    parameter_count,
)
from lasan.numerics.gradcheck import gradcheck
from lasan.numerics.nn import Linear
from lasan.numerics.tensor import Tensor
from lasan.trainer import focal_loss

SMALL = LasanSpec(conv_channels=(4, 8, 16, 32), embed_dim=32, ffn_dim=64, head_hidden=32, transformer_layers=1)

# conv blocks (weights, bias, batchnorm affine) for 1->32->64->128->256 at kernel 15
_CONV = sum(ci * co * 15 + 3 * co for ci, co in [(1, 32), (32, 64), (64, 128), (128, 256)])
_POS = 8 * 256 + 3 * 256
_LAYER = 2 * 512 + 4 * (256 * 256 + 256) + (256 * 512 + 512) + (512 * 256 + 256)
_AGG = 256 + 2 * (256 * 256 + 256)
_HEAD = 256 * 128 + 128 + 128 * 3 + 3
DEFAULT_PARAMS = _CONV + _POS + 3 * _LAYER + 512 + _AGG + _HEAD


def test_default_parameter_count_is_pinned():
    assert DEFAULT_PARAMS == 2_396_803
    assert parameter_count(LasanSpec()) == DEFAULT_PARAMS
    assert LASAN(LasanSpec()).num_parameters() == DEFAULT_PARAMS


@pytest.mark.parametrize(
    "spec",
    [SMALL, LasanSpec(**{**SMALL.__dict__, "shared_encoder": False}), LasanSpec(**{**SMALL.__dict__, "n_classes": 2})],
)
def test_closed_form_count_matches_module(spec):
    assert LASAN(spec).num_parameters() == parameter_count(spec)


def test_full_spec_shapes_and_outputs():
    m = LASAN(LasanSpec(), seed=0).eval()
    x = np.random.default_rng(0).normal(size=(2, 8, 2500)).astype(np.float32)
    feats = m.per_lead_encode(Tensor(x))
    assert feats.shape == (2, 8, 256)
    probs, weights = m(x)
    assert probs.shape == (2, 3)
    np.testing.assert_allclose(probs.data.sum(axis=1), 1, atol=1e-5)
    for w in weights.data:
        LeadImportance(w)


def test_binary_head_and_eval_determinism():
    m = LASAN(LasanSpec(**{**SMALL.__dict__, "n_classes": 2}), seed=1).eval()
    x = np.random.default_rng(1).normal(size=(3, 8, 2500)).astype(np.float32)
    p1, _ = m(x)
    p2, _ = m(x)
    assert p1.shape == (3,)
    assert np.all((p1.data > 0) & (p1.data < 1))
    assert p1.data.tobytes() == p2.data.tobytes()


def test_identical_leads_give_identical_features():
    m = LASAN(SMALL, seed=2).eval()
    lead = np.random.default_rng(2).normal(size=2500).astype(np.float32)
    feats = m.per_lead_encode(Tensor(np.tile(lead, (1, 8, 1)))).data[0]
    np.testing.assert_array_equal(feats, np.tile(feats[0], (8, 1)))
    zero = m.per_lead_encode(Tensor(np.zeros((1, 8, 2500), np.float32))).data[0]
    np.testing.assert_array_equal(zero, np.tile(zero[0], (8, 1)))


def test_symmetric_inputs_give_uniform_importance():
    m = LASAN(SMALL, seed=3).eval()
    m.lead_embed.data[:] = 0.1
    m.group_embed.data[:] = -0.05
    lead = np.random.default_rng(3).normal(size=2500).astype(np.float32)
    _, w = m(np.tile(lead, (1, 8, 1)))
    np.testing.assert_allclose(w.data[0], np.full(8, 0.125), atol=1e-4)


def test_position_encoding_examples():
    rng = np.random.default_rng(4)
    feats = rng.normal(size=(8, 6)).astype(np.float32)
    lead_e = rng.normal(size=(8, 6)).astype(np.float32)
    group_e = rng.normal(size=(3, 6)).astype(np.float32)
    groups = (0, 0, 1, 1, 1, 2, 2, 2)
    zeros = np.zeros_like(feats)
    out = add_position_encoding(Tensor(feats), Tensor(zeros), Tensor(np.zeros_like(group_e)), groups)
    np.testing.assert_array_equal(out.data, feats)
    out = add_position_encoding(Tensor(zeros), Tensor(lead_e), Tensor(group_e), groups)
    np.testing.assert_allclose(out.data, lead_e + group_e[list(groups)], atol=1e-6)
    # swap V1 and V2 (same group) together with their lead embeddings
    base = add_position_encoding(Tensor(feats), Tensor(lead_e), Tensor(group_e), groups).data
    perm = [0, 1, 3, 2, 4, 5, 6, 7]
    swapped = add_position_encoding(Tensor(feats[perm]), Tensor(lead_e[perm]), Tensor(group_e), groups).data
    np.testing.assert_array_equal(swapped, base[perm])
    with pytest.raises(ConfigurationError):
        add_position_encoding(Tensor(feats), Tensor(lead_e), Tensor(group_e), (0, 0, 1, 1, 1, 2, 2, 3))


def test_aggregate_examples():
    rng = np.random.default_rng(5)
    d = 16
    key = Linear(d, d, rng)
    value = Linear(d, d, rng)
    row = rng.normal(size=d).astype(np.float32)
    w, _ = aggregate(Tensor(np.tile(row, (8, 1))), Tensor(rng.normal(size=d).astype(np.float32)), key, value)
    np.testing.assert_allclose(w.data, np.full(8, 0.125), atol=1e-6)
    # identity key, query along e0, one token with a +20 margin after scaling
    key.weight.data[:] = np.eye(d)
    key.bias.data[:] = 0
    q = np.zeros(d, np.float32)
    q[0] = 1.0
    tokens = np.zeros((8, d), np.float32)
    tokens[5, 0] = 20 * np.sqrt(d)
    w, _ = aggregate(Tensor(tokens), Tensor(q), key, value)
    assert w.data[5] > 0.999
    w, _ = aggregate(Tensor(rng.normal(size=(8, d)).astype(np.float32)), Tensor(q), key, value)
    assert abs(w.data.sum() - 1) < 1e-5


def test_lead_importance_invariants():
    with pytest.raises(NumericError):
        LeadImportance(np.full(8, 0.2))
    with pytest.raises(NumericError):
        LeadImportance(np.array([1.5, -0.5, 0, 0, 0, 0, 0, 0]))
    with pytest.raises(NumericError):
        LeadImportance(np.full(7, 1 / 7))


def test_spec_errors_and_shape_errors():
    with pytest.raises(ConfigurationError):
        LasanSpec(embed_dim=30, conv_channels=(4, 8, 16, 30))
    with pytest.raises(ConfigurationError):
        LasanSpec(conv_channels=(8, 4, 16, 256))
    with pytest.raises(ConfigurationError):
        LasanSpec(kernel=14)
    with pytest.raises(ConfigurationError):
        LasanSpec(n_classes=4)
    with pytest.raises(ConfigurationError):
        LasanSpec(lead_groups=(0, 0, 1))
    with pytest.raises(DimensionError):
        LASAN(SMALL).per_lead_encode(Tensor(np.zeros((1, 7, 2500), np.float32)))


def test_spec_dict_round_trip():
    spec = LasanSpec(**{**SMALL.__dict__, "shared_encoder": False, "head_dropout": 0.3})
    assert LasanSpec.from_dict(spec.to_dict()) == spec
    with pytest.raises(ConfigurationError):
        LasanSpec.from_dict({"depth": "3"})


def test_per_lead_encoder_variant_differs_from_shared():
    spec = LasanSpec(**{**SMALL.__dict__, "shared_encoder": False})
    m = LASAN(spec, seed=0).eval()
    lead = np.random.default_rng(6).normal(size=2500).astype(np.float32)
    feats = m.per_lead_encode(Tensor(np.tile(lead, (1, 8, 1)))).data[0]
    assert not np.allclose(feats[0], feats[1])


def test_nan_input_reports_stage():
    x = np.zeros((1, 8, 2500), np.float32)
    x[0, 0, 0] = np.nan
    with pytest.raises(NumericError, match="stage per_lead_encode"):
        LASAN(SMALL).eval()(x)


@pytest.mark.parametrize("precision", ["float32", "float64"])
def test_reduced_end_to_end_gradient(precision):
    spec = LasanSpec(conv_channels=(4, 8), embed_dim=8, heads=2, ffn_dim=16, head_hidden=8, transformer_layers=1, kernel=5)
    m = LASAN(spec, seed=7)
    m.train()
    rng = np.random.default_rng(7)
    x = Tensor(rng.normal(size=(3, 8, 64)).astype(np.float32))
    y = np.array([0, 1, 2])

    def loss():
        # dropout off: finite differences need a deterministic graph
        probs, _ = m(x, rng=None)
        return focal_loss(probs, y)

    for mod in m.modules():
        if hasattr(mod, "dropout") and isinstance(mod.dropout, float):
            mod.dropout = 0.0
    # the conv stack has many relu/maxpool kinks; a small step keeps the
    # float64 differences from straddling them
    res = gradcheck(loss, [], [m], constants=[x], precision=precision, samples_per_tensor=4, seed=3, rel_step=1e-5)
    assert res.passed, str(res)
