import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cifield.core import (
    GaussianSet,
    ModelState,
    ParameterLayout,
    checkpoint_bytes,
    effective_identities,
    effective_identity,
    field_query,
    load_checkpoint,
    pack_parameters,
    save_checkpoint,
    unpack_parameters,
)
from cifield.deform import DeformationField
from cifield.errors import (
    CheckpointError,
    DegenerateDistributionError,
    NotACheckpointError,
    StructuralError,
    TruncatedCheckpointError,
    UnsupportedVersionError,
)

from conftest import random_gaussians, small_field


def one(base, calib_log):
    base = np.atleast_2d(base)
    g = GaussianSet.create(np.zeros((1, 3)), base.shape[1], base_identity=base)
    g.calib_log = np.log(np.atleast_2d(calib_log))
    return g


class TestEffectiveIdentity:
    def test_uniform_calibration_is_identity(self):
        np.testing.assert_allclose(effective_identity(one([0.5, 0.5], [1, 1]), 0), [0.5, 0.5])

    def test_calibration_rebalances(self):
        np.testing.assert_allclose(effective_identity(one([0.8, 0.2], [1, 4]), 0), [0.5, 0.5], atol=1e-15)

    def test_global_scale_cancels(self):
        np.testing.assert_allclose(effective_identity(one([0.8, 0.2], [2, 8]), 0), [0.5, 0.5], atol=1e-15)

    def test_degenerate_mass(self):
        g = one([1.0, 0.0], [1, 1])
        g.calib_log[0, 0] = -np.inf
        with pytest.raises(DegenerateDistributionError):
            effective_identity(g, 0)
        with pytest.raises(DegenerateDistributionError):
            effective_identities(g)

    @given(st.integers(0, 2**31), st.floats(-5, 5))
    @settings(max_examples=50, deadline=None)
    def test_normalised_and_scale_invariant(self, seed, shift):
        g = random_gaussians(np.random.default_rng(seed), n=12, k=4)
        p = effective_identities(g)
        np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-9)
        # multiplying every factor by exp(shift) leaves identities unchanged
        h = g.copy()
        h.calib_log = h.calib_log + shift
        np.testing.assert_allclose(effective_identities(h), p, rtol=0, atol=1e-15)


class TestFieldQuery:
    def test_empty_set(self):
        g = GaussianSet.create(np.zeros((0, 3)), 2)
        d = DeformationField.create(hidden=(4,), n_freq_pos=0, n_freq_time=0)
        s = field_query(g, d, np.zeros(3), 0.5, 1)
        assert s.occupancy == 0.0
        assert not s.defined

    def test_single_gaussian_at_centre(self):
        g = GaussianSet.create(np.array([[0.1, 0.2, 0.3]]), 2, occupancy=0.7, base_identity=[[1.0, 0.0]])
        d = DeformationField.create(hidden=(4,), n_freq_pos=2, n_freq_time=2)
        s = field_query(g, d, np.array([0.1, 0.2, 0.3]), 0.4, 1)
        assert s.occupancy == pytest.approx(0.7, abs=1e-15)
        assert s.joint[0] == pytest.approx(0.7, abs=1e-15)

    def test_two_coincident(self):
        g = GaussianSet.create(np.zeros((2, 3)), 1, occupancy=0.5)
        d = DeformationField.create(hidden=(4,), n_freq_pos=0, n_freq_time=0)
        assert field_query(g, d, np.zeros(3), 0.0, 1).occupancy == pytest.approx(0.75, abs=1e-15)

    @given(st.integers(0, 2**31))
    @settings(max_examples=40, deadline=None)
    def test_union_bounds(self, seed):
        rng = np.random.default_rng(seed)
        g = random_gaussians(rng, n=8, k=3)
        d = small_field(rng)
        x, t = rng.uniform(-0.6, 0.6, 3), float(rng.uniform())
        s = field_query(g, d, x, t, 1)
        # independent oracle for the kernel values
        state = d.forward(g, t)
        kern = []
        for i in range(g.n):
            w, a, b, c = state.rotations[i]
            rot = np.array([[1 - 2 * (b * b + c * c), 2 * (a * b - w * c), 2 * (a * c + w * b)],
                            [2 * (a * b + w * c), 1 - 2 * (a * a + c * c), 2 * (b * c - w * a)],
                            [2 * (a * c - w * b), 2 * (b * c + w * a), 1 - 2 * (a * a + b * b)]])
            cov = rot @ np.diag(state.scales[i] ** 2) @ rot.T
            diff = x - state.means[i]
            kern.append(np.exp(-0.5 * diff @ np.linalg.solve(cov, diff)))
        terms = g.occupancy * np.array(kern)
        assert s.occupancy <= terms.sum() + 1e-12
        assert s.occupancy >= terms.max() - 1e-12
        assert np.all(s.joint <= s.occupancy + 1e-15)
        if s.occupancy > 0:
            assert s.identity.sum() == pytest.approx(1.0, abs=1e-9)


def random_model(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(0, 10))
    k = int(rng.integers(1, 5))
    g = random_gaussians(rng, n=n, k=k) if n else GaussianSet.create(np.zeros((0, 3)), k)
    hidden = tuple(int(h) for h in rng.integers(1, 6, size=int(rng.integers(1, 3))))
    d = small_field(rng, hidden=hidden, n_freq_pos=int(rng.integers(0, 3)), n_freq_time=int(rng.integers(0, 3)))
    return g, d


class TestPacking:
    @given(st.integers(0, 2**31))
    @settings(max_examples=120, deadline=None)
    def test_round_trip_bit_exact(self, seed):
        g, d = random_model(seed)
        layout = ParameterLayout.of(g, d)
        vec = pack_parameters(g, d)
        assert vec.size == layout.size
        g2, d2 = unpack_parameters(vec, layout)
        assert np.array_equal(pack_parameters(g2, d2), vec)
        for name in ("positions", "rotations", "log_scales", "colors", "opacity_logits",
                     "occupancy_logits", "base_identity", "calib_log"):
            assert np.array_equal(getattr(g, name), getattr(g2, name))

    @given(st.integers(0, 2**31), st.data())
    @settings(max_examples=60, deadline=None)
    def test_single_slot_perturbation(self, seed, data):
        g, d = random_model(seed)
        layout = ParameterLayout.of(g, d)
        vec = pack_parameters(g, d)
        j = data.draw(st.integers(0, vec.size - 1))
        bumped = vec.copy()
        bumped[j] += 1.0
        assert np.count_nonzero(pack_parameters(*unpack_parameters(bumped, layout)) != vec) == 1

    def test_length_formula(self):
        rng = np.random.default_rng(0)
        g = random_gaussians(rng, n=7, k=3)
        d = DeformationField.create(hidden=(5, 6), n_freq_pos=2, n_freq_time=1, rng=rng)
        enc = 4 + 2 * (3 * 2 + 1)
        n_deform = enc * 5 + 5 + 5 * 6 + 6 + 6 * 10 + 10
        assert pack_parameters(g, d).size == 7 * (3 + 4 + 3 + 3 + 1 + 1 + 3 + 3) + n_deform

    def test_length_mismatch(self):
        g, d = random_model(3)
        layout = ParameterLayout.of(g, d)
        with pytest.raises(StructuralError):
            unpack_parameters(np.zeros(layout.size + 1), layout)

    def test_gaussian_slots_cover_rows(self):
        g, d = random_model(5)
        if g.n < 2:
            g, d = random_model(6)
        layout = ParameterLayout.of(g, d)
        vec = pack_parameters(g, d)
        slots = layout.gaussian_slots([1])
        bumped = vec.copy()
        bumped[slots] += 1.0
        g2, _ = unpack_parameters(bumped, layout)
        assert np.array_equal(g2.positions[0], g.positions[0])
        assert np.all(g2.positions[1] != g.positions[1])
        assert np.all(g2.calib_log[1] != g.calib_log[1])


class TestCheckpoint:
    def state(self, seed=0):
        rng = np.random.default_rng(seed)
        g = random_gaussians(rng, n=9, k=3)
        d = small_field(rng, hidden=(6, 5), n_freq_pos=2, n_freq_time=3)
        gen = np.random.Generator(np.random.PCG64(seed))
        gen.random(7)
        return ModelState(g, d, 1234, gen)

    def test_round_trip(self, tmp_path):
        st_ = self.state()
        save_checkpoint(tmp_path / "a.ckpt", st_)
        back = load_checkpoint(tmp_path / "a.ckpt")
        assert np.array_equal(pack_parameters(back.gaussians, back.deform),
                              pack_parameters(st_.gaussians, st_.deform))
        assert back.iteration == 1234
        assert back.deform.layer_dims == st_.deform.layer_dims
        assert np.array_equal(back.rng.random(5), st_.rng.random(5))

    def test_save_load_save_identical(self, tmp_path):
        save_checkpoint(tmp_path / "a.ckpt", self.state())
        save_checkpoint(tmp_path / "b.ckpt", load_checkpoint(tmp_path / "a.ckpt"))
        assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()

    def test_header_layout(self):
        raw = checkpoint_bytes(self.state())
        assert raw[:4] == b"CIF1"
        version, n, k, layers = struct.unpack_from("<IQQQ", raw, 4)
        assert (version, n, k, layers) == (1, 9, 3, 3)

    def test_bad_magic(self, tmp_path):
        raw = bytearray(checkpoint_bytes(self.state()))
        raw[:4] = b"NOPE"
        (tmp_path / "x").write_bytes(bytes(raw))
        with pytest.raises(NotACheckpointError):
            load_checkpoint(tmp_path / "x")

    def test_bad_version(self, tmp_path):
        raw = bytearray(checkpoint_bytes(self.state()))
        raw[4:8] = struct.pack("<I", 999)
        (tmp_path / "x").write_bytes(bytes(raw))
        with pytest.raises(UnsupportedVersionError):
            load_checkpoint(tmp_path / "x")

    def test_truncated(self, tmp_path):
        raw = checkpoint_bytes(self.state())
        for cut in (2, 20, len(raw) // 2, len(raw) - 1):
            (tmp_path / "x").write_bytes(raw[:cut])
            with pytest.raises(TruncatedCheckpointError):
                load_checkpoint(tmp_path / "x")

    def test_trailing_bytes(self, tmp_path):
        (tmp_path / "x").write_bytes(checkpoint_bytes(self.state()) + b"\0")
        with pytest.raises(CheckpointError):
            load_checkpoint(tmp_path / "x")

    def test_error_classes_distinct(self):
        assert len({NotACheckpointError, UnsupportedVersionError, TruncatedCheckpointError}) == 3
