import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from bsa.adaptation import wrap_generator
from bsa.analysis import (
    activation_correlation,
    activation_rates,
    effective_affine,
    embed_class_stats,
    export_class_stats,
    import_class_stats,
    nearest_neighbor_purity,
    stack_class_stats,
    verify_filter_identity,
)
from bsa.errors import ShapeError


@settings(max_examples=100, deadline=None)
@given(
    st.integers(0, 2**32 - 1),
    st.integers(1, 6),
    st.integers(1, 6),
    st.sampled_from([1, 3]),
    st.integers(3, 9),
)
def test_filter_identity_random_fixtures(seed, c_in, c_out, k, hw):
    rng = np.random.default_rng(seed)
    w = torch.from_numpy(rng.standard_normal((c_out, c_in, k, k)).astype(np.float32))
    x = torch.from_numpy(rng.standard_normal((2, c_in, hw, hw)).astype(np.float32))
    g = torch.from_numpy(rng.uniform(-2, 2, c_out).astype(np.float32))
    b = torch.from_numpy(rng.uniform(-1, 1, c_out).astype(np.float32))
    assert verify_filter_identity(w, x, g, b, padding=k // 2) <= 1e-5


def test_filter_identity_trivial_and_doubling(rng):
    w = torch.from_numpy(rng.standard_normal((4, 3, 3, 3)).astype(np.float32))
    x = torch.from_numpy(rng.standard_normal((1, 3, 8, 8)).astype(np.float32))
    assert verify_filter_identity(w, x, torch.ones(4), torch.zeros(4)) == 0.0
    assert verify_filter_identity(w, x, torch.full((4,), 2.0), torch.zeros(4)) <= 1e-5


def test_filter_identity_shape_errors():
    with pytest.raises(ShapeError):
        verify_filter_identity(torch.zeros(4, 3, 3, 3), torch.zeros(1, 2, 5, 5), torch.ones(4), torch.zeros(4))
    with pytest.raises(ShapeError):
        verify_filter_identity(torch.zeros(4, 3, 3, 3), torch.zeros(1, 3, 5, 5), torch.ones(3), torch.zeros(4))


def test_rates_all_negative_layer(small_generator, rng):
    adapted = wrap_generator(small_generator)
    with torch.no_grad():
        adapted.gamma["block0_bn2"].zero_()
        adapted.beta["block0_bn2"].fill_(-1.0)
    z = rng.standard_normal((64, 8)).astype(np.float32)
    report = activation_correlation(adapted, z, 0)
    layer = report["block0.bn2"]
    assert layer["rate"] == [0.0] * len(layer["rate"])
    assert layer["corr_rate_gamma"] is None and layer["corr_rate_beta"] is None
    for rec in report.values():
        assert all(0.0 <= r <= 1.0 for r in rec["rate"])


class _EngineeredBase:
    """A single adaptable layer whose channel i is positive in exactly (i + 1) of 8 positions."""

    adaptable_layers = {"layer": 4}

    def norm_layers(self):
        return {}


class _EngineeredGenerator:
    def __init__(self):
        self.base = _EngineeredBase()
        self.gamma = torch.tensor([0.5, 1.0, 1.5, 2.0])

    def stat_tensors(self):
        return {"layer": (self.gamma, torch.zeros(4))}

    def __call__(self, z, y=None, trace=None):
        out = -torch.ones(1, 4, 2, 4)
        for i in range(4):
            out[0, i].view(-1)[: i + 1] = 1.0
        trace["layer"] = (out, out)
        return out


def test_correlation_on_monotone_fixture():
    report = activation_correlation(_EngineeredGenerator(), np.zeros((64, 2)), 0)
    layer = report["layer"]
    assert layer["rate"] == [1 / 8, 2 / 8, 3 / 8, 4 / 8]
    assert layer["corr_rate_gamma"] == pytest.approx(1.0, abs=1e-12)
    assert layer["corr_rate_beta"] is None


def test_activation_rates_counts_strictly_positive():
    t = torch.tensor([[[[0.0, 1.0]], [[2.0, 3.0]]]])
    assert activation_rates(t).tolist() == [0.5, 1.0]


def test_effective_affine_combines_class_row(small_generator):
    adapted = wrap_generator(small_generator)
    with torch.no_grad():
        adapted.gamma["block1_bn1"].fill_(2.0)
        adapted.beta["block1_bn1"].fill_(0.5)
    g, b = effective_affine(adapted, "block1.bn1", 1)
    bn = small_generator.blocks[1].bn1
    np.testing.assert_array_equal(g, bn.gamma[1].detach().numpy() * 2)
    np.testing.assert_array_equal(b, bn.beta[1].detach().numpy() * 2 + 0.5)


def test_class_stats_roundtrip(small_generator):
    stats = export_class_stats(small_generator)
    for name, m in stats.items():
        assert m.shape[0] == 3
    other = wrap_generator(small_generator).base
    with torch.no_grad():
        for bn in other.norm_layers().values():
            bn.gamma.zero_()
    import_class_stats(other, stats)
    again = export_class_stats(other)
    assert all(np.array_equal(stats[k], again[k]) for k in stats)
    bad = {k: v[:, :-1] for k, v in stats.items()}
    with pytest.raises(ShapeError):
        import_class_stats(other, bad)


def test_embedding_duplicates_and_determinism(rng):
    m = rng.standard_normal((6, 10))
    m[4] = m[1]
    coords = embed_class_stats(m)
    assert coords.shape == (6, 2)
    assert np.array_equal(coords[4], coords[1])
    assert np.array_equal(coords, embed_class_stats(m))


def test_embedding_sign_and_rotation_invariance(rng):
    m = rng.standard_normal((8, 5))
    q, _ = np.linalg.qr(rng.standard_normal((5, 5)))
    a, b = embed_class_stats(m), embed_class_stats(m @ q)
    # orthogonal change of basis only permutes signs of the principal coordinates
    np.testing.assert_allclose(np.abs(a), np.abs(b), atol=1e-9)


def test_purity_oracle_and_undefined(rng):
    m = np.array([[0.0, 0.0], [0.1, 0.0], [5.0, 5.0], [5.0, 5.2], [10.0, 0.0]])
    cats = np.array([0, 0, 1, 1, 1])
    # nearest neighbors: 1, 0, 3, 2, 3 (distance to row 3 is ~7.07)
    assert nearest_neighbor_purity(m, cats) == pytest.approx(1.0)
    assert nearest_neighbor_purity(m, np.array([0, 1, 0, 1, 0])) == pytest.approx(1 / 5)
    assert nearest_neighbor_purity(m[:1], cats[:1]) is None
    perm = rng.permutation(5)
    assert nearest_neighbor_purity(m[perm], cats[perm]) == nearest_neighbor_purity(m, cats)


def test_stack_preserves_rows(small_generator):
    stats = export_class_stats(small_generator)
    stacked = stack_class_stats(stats)
    assert stacked.shape == (3, sum(v.shape[1] for v in stats.values()))
