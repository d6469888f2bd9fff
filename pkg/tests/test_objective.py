import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from bsa.adaptation import wrap_generator
from bsa.errors import ArgumentError, ConfigurationError, NumericError, ShapeError
from bsa.objective import (
    LossConfig,
    latent_reg,
    perceptual,
    pixel_l1,
    stats_reg,
    total_loss,
)
from bsa.sampling import LatentBank
from oracles import latent_reg_oracle, pixel_l1_oracle, stats_reg_oracle


# -- pixel_l1 -------------------------------------------------------------------


def test_pixel_l1_identical_is_zero(rng):
    x = torch.from_numpy(rng.random((3, 3, 5, 5)))
    assert pixel_l1(x, x.clone()).item() == 0.0


def test_pixel_l1_constant_offset():
    x = torch.zeros(2, 3, 4, 4, dtype=torch.float64)
    assert pixel_l1(x, x + 0.5).item() == pytest.approx(1.0, abs=1e-15)


def test_pixel_l1_matches_oracle(rng):
    x = rng.standard_normal((4, 3, 6, 5))
    g = rng.standard_normal((4, 3, 6, 5))
    got = pixel_l1(torch.from_numpy(x), torch.from_numpy(g)).item()
    assert got == pytest.approx(pixel_l1_oracle(x, g), rel=1e-12, abs=1e-8)


def test_pixel_l1_shape_mismatch():
    with pytest.raises(ShapeError):
        pixel_l1(torch.zeros(1, 3, 4, 4), torch.zeros(1, 3, 4, 5))


# -- latent_reg -------------------------------------------------------------------


def test_latent_reg_hand_value():
    z = torch.tensor([[0.0, 0.0]], dtype=torch.float64)
    r = torch.tensor([[1.0, 0.0]], dtype=torch.float64)
    assert latent_reg(z, r).item() == 1.0


def test_latent_reg_zero_when_sets_equal(rng):
    a = rng.standard_normal((6, 4))
    z = torch.from_numpy(a)
    r = torch.from_numpy(a[::-1].copy())
    assert latent_reg(z, r).item() == 0.0


def test_latent_reg_matches_oracle(rng):
    z = rng.standard_normal((5, 3))
    r = rng.standard_normal((17, 3))
    got = latent_reg(torch.from_numpy(z), torch.from_numpy(r)).item()
    assert got == pytest.approx(latent_reg_oracle(z, r), rel=1e-12, abs=1e-8)


def test_latent_reg_empty_anchors():
    with pytest.raises(ArgumentError):
        latent_reg(torch.zeros(2, 3), torch.zeros(0, 3))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 5), st.integers(1, 8), st.integers(1, 4))
def test_extra_anchor_never_increases_latent_to_anchor_term(seed, b, k, d):
    rng = np.random.default_rng(seed)
    z = torch.from_numpy(rng.standard_normal((b, d)))
    r = torch.from_numpy(rng.standard_normal((k, d)))
    extra = torch.from_numpy(rng.standard_normal((1, d)))

    def second(anchors):
        return ((z[:, None] - anchors[None]) ** 2).sum(-1).min(1).values.sum().item()

    assert second(torch.cat([r, extra])) <= second(r)
    assert latent_reg(z, r).item() >= 0


# -- stats_reg ---------------------------------------------------------------------


def test_stats_reg_identity_zero():
    params = {"a": (torch.ones(4), torch.zeros(4)), "b": (torch.ones(2), torch.zeros(2))}
    assert stats_reg(params).item() == 0.0


def test_stats_reg_hand_value():
    params = {"a": (torch.full((8,), 1.1, dtype=torch.float64), torch.zeros(8, dtype=torch.float64))}
    assert stats_reg(params).item() == pytest.approx(0.01, rel=1e-12)


def test_stats_reg_matches_oracle(rng):
    params = {
        f"l{i}": (torch.from_numpy(rng.normal(1, 0.3, c)), torch.from_numpy(rng.normal(0, 0.3, c)))
        for i, c in enumerate([3, 7, 5])
    }
    oracle = stats_reg_oracle({k: (g.numpy(), b.numpy()) for k, (g, b) in params.items()})
    assert stats_reg(params).item() == pytest.approx(oracle, rel=1e-12, abs=1e-8)


# -- perceptual ---------------------------------------------------------------------


def test_perceptual_identical_zero(small_extractor, rng):
    x = torch.from_numpy(rng.uniform(-1, 1, (2, 3, 16, 16)).astype(np.float32))
    assert perceptual(x, x.clone(), small_extractor, LossConfig()).item() == 0.0


def test_perceptual_single_tap_matches_oracle(small_extractor, rng):
    x = torch.from_numpy(rng.uniform(-1, 1, (3, 3, 16, 16)).astype(np.float32))
    g = torch.from_numpy(rng.uniform(-1, 1, (3, 3, 16, 16)).astype(np.float32))
    cfg = LossConfig(lambda_c={"conv2": 0.001})
    got = perceptual(x, g, small_extractor, cfg).item()
    with torch.no_grad():
        fx = small_extractor.taps(x)["conv2"].double().numpy()
        fg = small_extractor.taps(g)["conv2"].double().numpy()
    c, h, w = small_extractor.tap_shapes["conv2"]
    oracle = sum(0.001 / (c * h * w) * np.abs(fx[i] - fg[i]).sum() for i in range(3))
    assert got == pytest.approx(oracle, rel=1e-5)


def test_perceptual_l2_norm(small_extractor, rng):
    x = torch.from_numpy(rng.uniform(-1, 1, (2, 3, 16, 16)).astype(np.float32))
    g = torch.from_numpy(rng.uniform(-1, 1, (2, 3, 16, 16)).astype(np.float32))
    cfg = LossConfig(lambda_c={"conv1": 1.0}, perceptual_norm="l2")
    got = perceptual(x, g, small_extractor, cfg).item()
    with torch.no_grad():
        d = (small_extractor.taps(x)["conv1"] - small_extractor.taps(g)["conv1"]).double().numpy()
    c, h, w = small_extractor.tap_shapes["conv1"]
    oracle = sum(np.sqrt((d[i] ** 2).sum()) / (c * h * w) for i in range(2))
    assert got == pytest.approx(oracle, rel=1e-5)


@pytest.mark.parametrize("norm", ["l1", "l2"])
def test_adaptive_weights_pin_each_tap_to_point_one(small_extractor, rng, norm):
    x = torch.from_numpy(rng.uniform(-1, 1, (2, 3, 16, 16)).astype(np.float32))
    g = torch.from_numpy(rng.uniform(-1, 1, (2, 3, 16, 16)).astype(np.float32))
    details = {}
    cfg = LossConfig(adaptive_lambda_c=True, perceptual_norm=norm)
    total = perceptual(x, g, small_extractor, cfg, details=details).item()
    assert set(details) == set(small_extractor.tap_names)
    for t, d in details.items():
        assert d["term"] == pytest.approx(0.1, rel=1e-6)
    assert total == pytest.approx(0.1 * len(details), rel=1e-6)


def test_unknown_tap_rejected(small_extractor):
    x = torch.zeros(1, 3, 16, 16)
    with pytest.raises(ConfigurationError):
        perceptual(x, x, small_extractor, LossConfig(lambda_c={"fc7": 1.0}))


def test_loss_config_validation():
    with pytest.raises(ConfigurationError):
        LossConfig(lambda_z=-1).validate()
    with pytest.raises(ConfigurationError):
        LossConfig(anchor_count=4).validate(batch_size=8)
    with pytest.raises(ConfigurationError):
        LossConfig(perceptual_norm="l3").validate()
    assert LossConfig().anchors_for(25) == 256
    assert LossConfig().anchors_for(100) == 400


# -- total_loss ---------------------------------------------------------------------


def _fixture(small_generator, small_extractor, rng, n=4):
    adapted = wrap_generator(small_generator, "bsa")
    bank = LatentBank(n, small_generator.spec.latent_dim)
    targets = torch.from_numpy(rng.uniform(-1, 1, (n, 3, 16, 16)).astype(np.float32))
    return adapted, bank, targets


def test_total_is_zero_at_perfect_fit(small_generator, small_extractor, rng):
    adapted = wrap_generator(small_generator, "bsa")
    bank = LatentBank(3, 8)
    anchors = torch.from_numpy(rng.standard_normal((3, 8)).astype(np.float32))
    with torch.no_grad():
        bank.z.copy_(anchors)
        targets = adapted(anchors)
    cfg = LossConfig(noise_sigma=0.0, anchor_count=3)
    loss, report = total_loss([0, 1, 2], adapted, bank, targets, small_extractor, cfg, np.random.default_rng(0), anchors=anchors)
    assert loss.item() == 0.0
    assert report.total == 0.0


def test_report_decomposes(small_generator, small_extractor, rng):
    adapted, bank, targets = _fixture(small_generator, small_extractor, rng)
    with torch.no_grad():
        adapted.gamma["block0_bn1"].mul_(1.3)
    loss, r = total_loss([0, 1, 2], adapted, bank, targets, small_extractor, LossConfig(), np.random.default_rng(1))
    parts = r.pixel_l1 + r.perceptual + r.latent_reg + r.stats_reg
    assert r.total == pytest.approx(parts, rel=1e-6)
    assert min(r.pixel_l1, r.perceptual, r.latent_reg, r.stats_reg) >= 0
    assert r.stats_reg > 0


def test_zero_regularizer_weights_leave_reconstruction_terms(small_generator, small_extractor, rng):
    adapted, bank, targets = _fixture(small_generator, small_extractor, rng)
    cfg = LossConfig(lambda_z=0.0, lambda_gb=0.0)
    loss, r = total_loss([0, 1, 2, 3], adapted, bank, targets, small_extractor, cfg, np.random.default_rng(2))
    assert r.latent_reg == 0.0 and r.stats_reg == 0.0
    assert r.total == pytest.approx(r.pixel_l1 + r.perceptual, rel=1e-6)


def test_deterministic_with_fixed_rng(small_generator, small_extractor, rng):
    adapted, bank, targets = _fixture(small_generator, small_extractor, rng)
    cfg = LossConfig(noise_sigma=0.0)
    a = total_loss([0, 1], adapted, bank, targets, small_extractor, cfg, np.random.default_rng(5))[0]
    b = total_loss([0, 1], adapted, bank, targets, small_extractor, cfg, np.random.default_rng(5))[0]
    assert a.item() == b.item()


def test_nan_is_reported_by_term(small_generator, small_extractor, rng):
    adapted, bank, targets = _fixture(small_generator, small_extractor, rng)
    targets[0, 0, 0, 0] = float("nan")
    with pytest.raises(NumericError, match="pixel_l1"):
        total_loss([0], adapted, bank, targets, small_extractor, LossConfig(), np.random.default_rng(0))


def test_gradients_reach_only_trainable_set(small_generator, small_extractor, rng):
    adapted, bank, targets = _fixture(small_generator, small_extractor, rng)
    loss, _ = total_loss([0, 2], adapted, bank, targets, small_extractor, LossConfig(), np.random.default_rng(3))
    loss.backward()
    for name, p in adapted.named_registry().items():
        if name.startswith("adapt."):
            assert p.grad is not None and torch.any(p.grad != 0), name
        else:
            assert p.grad is None, name
    rows = bank.z.grad.abs().sum(1)
    assert rows[0] > 0 and rows[2] > 0
    assert rows[1] == 0 and rows[3] == 0
