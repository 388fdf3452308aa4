import numpy as np
import pytest

from lasan.dataio import N_SAMPLES, Dataset, EcgRecord, Label, SubLabel
from lasan.errors import ConfigurationError, ContractError
from lasan.foundation import (
    EncoderKind,
    HybridModel,
    IntegrationKind,
    LinearProbeModel,
    StrategyConfig,
    StrategyKind,
    apply_strategy,
    build_integration,
    encoder_from_registry,
    gated_fuse,
    model_checkpoint,
    model_from_checkpoint,
    stub_encoder,
)
from lasan.model import LASAN, LasanSpec
from lasan.numerics.nn import Linear
from lasan.numerics.tensor import Tensor
from lasan.trainer import Adam, predict

SPEC = LasanSpec(conv_channels=(4, 8, 16), embed_dim=16, ffn_dim=32, head_hidden=16, transformer_layers=1)


def small_dataset(n_per_class=3, seed=0):
    rng = np.random.default_rng(seed)
    recs = []
    for label in Label:
        for i in range(n_per_class):
            sub = SubLabel.LQT2 if label == Label.LQTS else None
            recs.append(EcgRecord(f"{label.name}-{i}", label, rng.normal(size=(8, N_SAMPLES)).astype(np.float32), sub))
    return Dataset(recs)


def snapshot(module):
    return {k: v.copy() for k, v in module.state_dict().items()}


def test_encoder_seed_determinism_and_shape():
    x = np.random.default_rng(0).normal(size=(3, 8, 5000)).astype(np.float32)
    for kind in EncoderKind:
        a = stub_encoder(kind, seed=4, dim=32)
        b = stub_encoder(kind, seed=4, dim=32)
        ea, eb = a.embed(x), b.embed(x)
        assert ea.shape == (3, 32)
        assert ea.data.tobytes() == eb.data.tobytes()
        assert a.embed(x[0]).shape == (32,)
    c = stub_encoder(EncoderKind.RANDOM_FROZEN, seed=5, dim=32)
    assert c.embed(x).data.tobytes() != stub_encoder(EncoderKind.RANDOM_FROZEN, seed=4, dim=32).embed(x).data.tobytes()


def test_registry_and_enum_errors():
    h = encoder_from_registry("random_frozen", seed=1, dim=16)
    assert h.dim == 16 and not h.trainable
    with pytest.raises(ConfigurationError):
        encoder_from_registry("hubert", seed=1)
    with pytest.raises(ConfigurationError):
        stub_encoder(EncoderKind.RANDOM_FROZEN, dim=8)
    with pytest.raises(ConfigurationError):
        StrategyConfig(kind="warm_start")


def test_integration_contracts():
    h = stub_encoder(EncoderKind.RANDOM_FROZEN, seed=0, dim=32)
    assert isinstance(build_integration(IntegrationKind.STANDALONE, spec=SPEC), LASAN)
    with pytest.raises(ConfigurationError):
        build_integration(IntegrationKind.STANDALONE, h, SPEC)
    with pytest.raises(ConfigurationError):
        build_integration(IntegrationKind.HYBRID, None, SPEC)
    with pytest.raises(ConfigurationError):
        build_integration(IntegrationKind.LASAN_HEAD, stub_encoder(EncoderKind.RANDOM_FROZEN, dim=20), SPEC)


def test_hybrid_parameters_are_disjoint_union():
    h = stub_encoder(EncoderKind.RANDOM_FROZEN, seed=0, dim=32)
    hybrid = build_integration(IntegrationKind.HYBRID, h, SPEC)
    names = [n for n, _ in hybrid.named_parameters()]
    assert len(names) == len(set(names))
    lasan = {n for n in names if n.startswith("lasan.")}
    fm = {n for n in names if n.startswith("fm.")}
    fusion = {n for n in names if n.startswith("fusion.")}
    assert lasan | fm | fusion == set(names)
    assert len(lasan) == len(list(LASAN(SPEC).named_parameters()))
    assert len(fm) == len(list(h.module.named_parameters()))
    assert fusion == {"fusion.proj.weight", "fusion.proj.bias", "fusion.gate.weight", "fusion.gate.bias"}


def test_gate_saturation_and_range():
    rng = np.random.default_rng(1)
    d, e = 6, 10
    proj = Linear(e, d, rng)
    gate = Linear(2 * d, d, rng)
    h_l = Tensor(rng.normal(size=(4, d)).astype(np.float32))
    h_f = Tensor(rng.normal(size=(4, e)).astype(np.float32))
    fused, g = gated_fuse(h_l, h_f, proj, gate)
    assert np.all((g.data > 0) & (g.data < 1))
    gate.weight.data[:] = 0
    gate.bias.data[:] = 20
    fused, _ = gated_fuse(h_l, h_f, proj, gate)
    np.testing.assert_allclose(fused.data, h_l.data, atol=1e-4 * max(1, np.abs(proj(h_f).data).max()))
    gate.bias.data[:] = -20
    fused, _ = gated_fuse(h_l, h_f, proj, gate)
    np.testing.assert_allclose(fused.data, proj(h_f).data, atol=1e-4 * max(1, np.abs(h_l.data).max()))


def test_hybrid_reduces_to_standalone():
    h = stub_encoder(EncoderKind.RANDOM_FROZEN, seed=0, dim=32)
    hybrid = HybridModel(h, SPEC, seed=3).eval()
    hybrid.fusion.proj.weight.data[:] = 0
    hybrid.fusion.proj.bias.data[:] = 0
    hybrid.fusion.gate.weight.data[:] = 0
    hybrid.fusion.gate.bias.data[:] = 20
    solo = LASAN(SPEC, seed=3).eval()
    ds = small_dataset()
    p_h, w_h = hybrid(ds.x, ds.x_fm)
    p_s, w_s = solo(ds.x)
    # sigmoid(20) rounds to 1 in float32, so the reduction is exact
    assert p_h.data.tobytes() == p_s.data.tobytes()
    assert w_h.data.tobytes() == w_s.data.tobytes()


def test_linear_probe_leaves_encoder_untouched():
    ds = small_dataset()
    h = stub_encoder(EncoderKind.RANDOM_FROZEN, seed=2, dim=16)
    model = LinearProbeModel(h, seed=0)
    before = snapshot(h.module)
    probe_before = snapshot(model.probe)
    cfg = StrategyConfig(kind=StrategyKind.LINEAR_PROBE, probe_epochs=3, warmup_epochs=1)
    res = apply_strategy(h, model, cfg, ds, ds)
    for k, v in h.module.state_dict().items():
        assert v.tobytes() == before[k].tobytes(), k
    assert any(v.tobytes() != probe_before[k].tobytes() for k, v in model.probe.state_dict().items())
    assert res.steps == 3 * 1
    assert not h.trainable


def test_fine_tune_moves_encoder_and_step_arithmetic():
    ds = small_dataset(n_per_class=4)
    h = stub_encoder(EncoderKind.RANDOM_FROZEN, seed=2, dim=16)
    model = LinearProbeModel(h, seed=0)
    before = snapshot(h.module)
    cfg = StrategyConfig(kind=StrategyKind.PROBE_THEN_FINE_TUNE, probe_epochs=2, ft_epochs=3, batch_size=5, warmup_epochs=1)
    res = apply_strategy(h, model, cfg, ds, ds)
    batches = -(-len(ds) // 5)
    assert [s.steps for s in res.stages] == [2 * batches, 3 * batches]
    assert res.steps == 5 * batches
    assert any(v.tobytes() != before[k].tobytes() for k, v in h.module.state_dict().items())


def test_frozen_encoder_refuses_optimizer_update():
    h = stub_encoder(EncoderKind.RANDOM_FROZEN, seed=0, dim=16)
    opt = Adam(list(h.module.parameters()))
    h.trainable = False
    with pytest.raises(ContractError):
        opt.step(1e-3)


@pytest.mark.parametrize("kind", ["standalone", "linear_head", "lasan_head", "hybrid"])
def test_checkpoint_round_trip_every_model(kind):
    h = stub_encoder(EncoderKind.RANDOM_FROZEN, seed=1, dim=32)
    if kind == "standalone":
        model = LASAN(SPEC, seed=1)
    elif kind == "linear_head":
        model = LinearProbeModel(h, n_classes=2, seed=1)
    else:
        model = build_integration(kind, h, SPEC, seed=1)
    meta, state = model_checkpoint(model)
    back = model_from_checkpoint(meta, state)
    meta2, state2 = model_checkpoint(back)
    assert meta2 == meta
    assert list(state2) == list(state)
    for k in state:
        assert state2[k].tobytes() == state[k].tobytes(), k
    ds = small_dataset()
    np.testing.assert_array_equal(predict(back, ds), predict(model.eval(), ds))
