import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cifield.core import GaussianSet, effective_identities, pack_parameters
from cifield.deform import DeformationField
from cifield.errors import UsageError
from cifield.resample import (
    build_plan,
    instance_response,
    instance_responses,
    resample_round,
    sampling_distributions,
    volume_adjust,
)

from conftest import random_gaussians


def responses_set(gamma):
    """Set whose instance-1 responses equal ``gamma`` (occupancy carries the value)."""
    gamma = np.asarray(gamma, dtype=np.float64)
    n = gamma.size
    occ = np.clip(gamma, 1e-12, 1 - 1e-12)
    g = GaussianSet.create(np.zeros((n, 3)), 2, occupancy=occ, base_identity=np.tile([1.0, 0.0], (n, 1)))
    return g


class TestResponse:
    def test_product(self):
        g = GaussianSet.create(np.zeros((1, 3)), 2, occupancy=0.5, base_identity=[[0.4, 0.6]])
        assert instance_response(g, 0, 1) == pytest.approx(0.2, abs=1e-15)

    def test_zero_identity(self):
        g = GaussianSet.create(np.zeros((1, 3)), 2, occupancy=0.9, base_identity=[[0.0, 1.0]])
        assert instance_response(g, 0, 1) == 0.0

    def test_full(self):
        g = GaussianSet.create(np.zeros((1, 3)), 1, occupancy=0.5, base_identity=[[1.0]])
        g.occupancy_logits[:] = 40.0
        assert instance_response(g, 0, 1) == 1.0

    def test_vectorised_matches(self, rng):
        g = random_gaussians(rng, n=10, k=3)
        r = instance_responses(g)
        assert r[4, 2] == pytest.approx(instance_response(g, 4, 3), abs=1e-15)


class TestPlan:
    def test_hand_example(self):
        weak, strong = sampling_distributions([0.1, 0.2, 0.2], eps=0.01)
        np.testing.assert_allclose(strong, [0.2, 0.4, 0.4], atol=1e-15)
        np.testing.assert_allclose(weak, [0.5, 0.25, 0.25], atol=1e-15)

    def test_plan_from_set(self):
        plan = build_plan(responses_set([0.1, 0.2, 0.2]), 1, eps=0.01, rate=0.5)
        np.testing.assert_allclose(plan.strong, [0.2, 0.4, 0.4], atol=1e-12)
        np.testing.assert_allclose(plan.weak, [0.5, 0.25, 0.25], atol=1e-12)
        assert plan.budget == 2

    def test_equal_uniform(self):
        weak, strong = sampling_distributions([0.3] * 4)
        np.testing.assert_allclose(weak, 0.25)
        np.testing.assert_allclose(strong, 0.25)

    def test_zero_clamped(self):
        weak, _ = sampling_distributions([0.0, 0.5], eps=1e-4)
        assert np.all(np.isfinite(weak))
        assert weak[0] == pytest.approx(0.5 / (0.5 + 1e-4))

    def test_empty(self):
        with pytest.raises(UsageError):
            build_plan(GaussianSet.create(np.zeros((0, 3)), 2), 1)

    @given(st.lists(st.floats(0.0, 1.0), min_size=2, max_size=40))
    @settings(max_examples=150, deadline=None)
    def test_distribution_properties(self, gamma):
        weak, strong = sampling_distributions(gamma, 1e-4)
        assert abs(weak.sum() - 1) < 1e-9 and abs(strong.sum() - 1) < 1e-9
        clamped = np.clip(gamma, 1e-4, 1.0)
        if len(set(clamped.tolist())) == len(clamped):
            assert np.argmax(strong) == np.argmax(clamped)
            assert np.argmin(strong) == np.argmax(weak)


class TestVolumeAdjust:
    @pytest.mark.parametrize("n", range(5))
    @pytest.mark.parametrize("value", [0.1, 0.5, 0.75, 0.875, 0.99])
    def test_exact(self, n, value):
        new = volume_adjust(value, n)
        assert abs(1 - (1 - new) ** (n + 1) - value) < 1e-12

    def test_examples(self):
        assert volume_adjust(0.75, 1) == pytest.approx(0.5, abs=1e-15)
        assert volume_adjust(0.875, 2) == pytest.approx(0.5, abs=1e-15)
        assert volume_adjust(0.3, 0) == pytest.approx(0.3, abs=1e-16)


def resample_set(seed, n=60, k=3):
    rng = np.random.default_rng(seed)
    return random_gaussians(rng, n=n, k=k), np.random.default_rng(seed + 1)


class TestRound:
    def test_too_small(self):
        with pytest.raises(UsageError):
            resample_round(GaussianSet.create(np.zeros((1, 3)), 1), 1e-4, 0.5, np.random.default_rng(0))

    @pytest.mark.parametrize("seed", range(4))
    def test_round_invariants(self, seed):
        g, rng = resample_set(seed)
        out, rep = resample_round(g, 1e-4, 0.2, rng)
        assert out.n == g.n
        assert len(rep.pairs) + rep.skipped == int(np.ceil(0.2 * g.n))
        assert not out.replicas.any()
        ws = [w for w, _, _ in rep.pairs]
        assert len(set(ws)) == len(ws)
        sources = {s for _, s, _ in rep.pairs}
        assert not sources & set(ws)
        for s, cnt in rep.replica_counts.items():
            members = [s] + [w for w, src, _ in rep.pairs if src == s]
            assert cnt == len(members) - 1
            for m in members:
                assert 1 - (1 - out.opacity[m]) ** (cnt + 1) == pytest.approx(g.opacity[s], abs=1e-12)
                assert 1 - (1 - out.occupancy[m]) ** (cnt + 1) == pytest.approx(g.occupancy[s], abs=1e-12)
            for w in members[1:]:
                np.testing.assert_array_equal(out.colors[w], g.colors[s])
                np.testing.assert_array_equal(out.base_identity[w], g.base_identity[s])
                np.testing.assert_array_equal(out.calib_log[w], g.calib_log[s])
                np.testing.assert_array_equal(out.log_scales[w], g.log_scales[s])
        untouched = np.setdiff1d(np.arange(g.n), list(sources) + ws)
        np.testing.assert_array_equal(out.positions[untouched], g.positions[untouched])
        np.testing.assert_array_equal(out.opacity_logits[untouched], g.opacity_logits[untouched])
        np.testing.assert_allclose(effective_identities(out).sum(1), 1.0, atol=1e-9)

    def test_round_robin_instances(self):
        g, rng = resample_set(9, n=100, k=3)
        _, rep = resample_round(g, 1e-4, 0.06, rng)
        ks = [k for _, _, k in rep.pairs]
        assert ks[:3] == [1, 2, 3]

    def test_deterministic(self):
        g, _ = resample_set(3)
        a, ra = resample_round(g, 1e-4, 0.2, np.random.default_rng(5))
        b, rb = resample_round(g, 1e-4, 0.2, np.random.default_rng(5))
        assert ra.pairs == rb.pairs
        d = DeformationField.create(hidden=(2,), n_freq_pos=0, n_freq_time=0)
        assert np.array_equal(pack_parameters(a, d), pack_parameters(b, d))

    def test_input_untouched(self):
        g, rng = resample_set(2)
        before = g.copy()
        resample_round(g, 1e-4, 0.3, rng)
        d = DeformationField.create(hidden=(2,), n_freq_pos=0, n_freq_time=0)
        assert np.array_equal(pack_parameters(g, d), pack_parameters(before, d))

    def test_log_lines(self):
        g, rng = resample_set(4)
        _, rep = resample_round(g, 1e-4, 0.1, rng)
        lines = rep.to_lines(2, 700)
        assert lines[0].startswith("round=2 iter=700 pairs=")
        assert len(lines) == len(rep.pairs) + 1

    def test_replica_near_source(self):
        g, rng = resample_set(11, n=200)
        out, rep = resample_round(g, 1e-4, 0.2, rng)
        for w, s, _ in rep.pairs:
            # offset is 0.5 * scale * N(0, 1) per local axis; 5 sigma is ample
            offset = out.positions[w] - g.positions[s]
            assert np.linalg.norm(offset) <= 5 * 0.5 * g.scales[s].max() * np.sqrt(3)
