import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from crystalsst import spectrum as sp
from crystalsst import synchrosqueeze as sq
from crystalsst import wavepacket as wp


def plane_waves(L, ks):
    x = np.arange(L) / L
    X = np.stack(np.meshgrid(x, x, x, indexing="ij"), axis=-1)
    return sum(np.exp(2j * np.pi * (X @ np.asarray(k, dtype=float))) for k in ks)


def test_fold_antipodal_convention():
    v = np.array([[1, -2, 3], [1, 0, -1], [-1, 0, 0], [0, 3, 0]], dtype=float)
    f = sq.fold_antipodal(v)
    np.testing.assert_array_equal(f, [[-1, 2, -3], [-1, 0, 1], [1, 0, 0], [0, 3, 0]])


@settings(max_examples=200, deadline=None)
@given(st.tuples(*[st.floats(-50, 50, allow_nan=False)] * 3).filter(lambda t: np.linalg.norm(t) > 1e-3))
def test_spherical_round_trip_and_half_domain(v):
    f = sq.fold_antipodal(np.array(v))
    r, psi, theta = sq.to_spherical(f)
    assert 0 <= psi <= math.pi and 0 <= theta <= math.pi
    np.testing.assert_allclose(sq.to_cartesian(r, psi, theta), f, atol=1e-9 * max(1.0, r))


def test_plane_wave_v_exact():
    L = 64
    spec = sp.forward_fourier(plane_waves(L, [(20, 20, 20)]))
    atlas = wp.build_atlas(L, (33.0, 36.0))
    field = sq.local_wavevectors(wp.gradient_transform(spec, atlas), eps_rel=0.1)
    assert field.v.shape[0] > 0
    np.testing.assert_allclose(field.v, 20.0, rtol=1e-6)
    grid = sq.SphericalGrid((33.0, 36.0))
    T = sq.squeeze(field, grid)
    # one cell per voxel
    assert np.all(np.bincount(T.b, minlength=atlas.lb**3) == 1)


def test_zero_volume_raises():
    spec = sp.forward_fourier(np.zeros((16, 16, 16)))
    atlas = wp.build_atlas(16, (3.0, 6.0))
    with pytest.raises(sq.AnalysisError):
        sq.local_wavevectors(wp.gradient_transform(spec, atlas))
    with pytest.raises(sq.AnalysisError):
        sq.streaming_wavevectors(spec, atlas)


def test_two_components_cluster():
    L = 32
    k1, k2 = np.array([12.0, 0, 0]), np.array([0, 0, 12.0])
    spec = sp.forward_fourier(plane_waves(L, [k1, k2]))
    atlas = wp.build_atlas(L, (10.0, 14.0))
    field = sq.local_wavevectors(wp.gradient_transform(spec, atlas), eps_rel=0.1)
    v = sq.fold_antipodal(field.v)
    d1 = np.linalg.norm(v - k1, axis=1)
    d2 = np.linalg.norm(v - k2, axis=1)
    assert np.all(np.minimum(d1, d2) <= 0.5)
    assert np.any(d1 <= 0.5) and np.any(d2 <= 0.5)


def test_streaming_matches_dense(rng):
    L = 16
    spec = sp.forward_fourier(rng.normal(size=(L, L, L)))
    atlas = wp.build_atlas(L, (3.0, 6.5))
    dense = sq.local_wavevectors(wp.gradient_transform(spec, atlas), eps_rel=0.2)
    stream = sq.streaming_wavevectors(spec, atlas, eps_rel=0.2, batch=5)
    order_d = np.lexsort((dense.b, dense.atom))
    order_s = np.lexsort((stream.b, stream.atom))
    np.testing.assert_array_equal(dense.atom[order_d], stream.atom[order_s])
    np.testing.assert_array_equal(dense.b[order_d], stream.b[order_s])
    np.testing.assert_allclose(dense.v[order_d], stream.v[order_s], rtol=1e-12)
    assert stream.threshold == dense.threshold


def test_noise_levels_match_simulation(rng):
    L = 16
    atlas = wp.build_atlas(L, (3.0, 6.5))
    level = sq.atom_noise_levels(atlas, 1.0)
    samples = []
    for _ in range(20):
        W = wp.forward_transform(sp.forward_fourier(rng.normal(size=(L, L, L))), atlas).W
        samples.append(np.mean(np.abs(W.reshape(len(atlas), -1)) ** 2, axis=1))
    rms = np.sqrt(np.mean(samples, axis=0))
    # real noise doubles the energy of atoms whose window meets its own mirror image; allow that
    ratio = rms / level
    assert np.all((ratio > 0.85) & (ratio < 1.6))


def test_retention_monotone(rng):
    L = 16
    coeffs = wp.gradient_transform(sp.forward_fourier(rng.normal(size=(L, L, L))),
                                   wp.build_atlas(L, (3.0, 6.5)))
    prev = None
    for eps in (0.5, 0.3, 0.2, 0.1, 0.05):
        m = sq.local_wavevectors(coeffs, eps).mask()
        if prev is not None:
            assert np.all(m[prev])
        prev = m


def test_eps_range():
    with pytest.raises(ValueError):
        sq.SphericalGrid((2.0, 1.0))
    coeffs = wp.CoefficientField(atlas=None, W=np.ones((1, 2, 2, 2)), grad=np.ones((1, 3, 2, 2, 2)))
    with pytest.raises(ValueError):
        sq.local_wavevectors(coeffs, 1.5)


def test_singleton_squeeze():
    f = sq.WavevectorField(atom=np.array([0]), b=np.array([5]), v=np.array([[0.0, 3.0, 4.0]]),
                           weight=np.array([2.5]), lb=4, n_atoms=1, threshold=0.0)
    grid = sq.SphericalGrid((4.0, 6.0))
    T = sq.squeeze(f, grid)
    assert T.energy.tolist() == [2.5] and T.b.tolist() == [5]
    np.testing.assert_allclose(T.moment[0], 2.5 * np.array([0.0, 3.0, 4.0]))
    m = T.energy_map(5)
    assert m.sum() == 2.5 and np.count_nonzero(m) == 1


def test_squeeze_matches_brute_force(rng):
    n, lb = 400, 4
    v = rng.normal(size=(n, 3)) * 6
    f = sq.WavevectorField(atom=rng.integers(0, 5, n), b=rng.integers(0, lb**3, n), v=v,
                           weight=rng.random(n), lb=lb, n_atoms=5, threshold=0.0)
    grid = sq.SphericalGrid((3.0, 9.0), dv=1.0, dpsi=math.pi / 12, dtheta=math.pi / 10)
    T = sq.squeeze(f, grid)
    ref = {}
    nv, npsi, nth = grid.shape
    for i in range(n):
        x = sq.fold_antipodal(v[i])
        r, psi, theta = sq.to_spherical(x)
        if not 3.0 <= r <= 9.0:
            continue
        iv = int(math.floor(r + 0.5)) - 3
        ip = min(int(math.floor(psi / grid.dpsi + 0.5)), npsi - 1)
        it = min(int(math.floor(theta / grid.dtheta + 0.5)), nth - 1)
        key = (int(f.b[i]), (iv * npsi + ip) * nth + it)
        ref[key] = ref.get(key, 0.0) + f.weight[i]
    got = {(int(b), int(c)): e for b, c, e in zip(T.b, T.cell, T.energy)}
    assert set(got) == set(ref)
    for k in ref:
        assert got[k] == pytest.approx(ref[k], rel=1e-12)


def test_fubini_identity(rng):
    L = 16
    spec = sp.forward_fourier(rng.normal(size=(L, L, L)))
    atlas = wp.build_atlas(L, (3.0, 6.5))
    field = sq.streaming_wavevectors(spec, atlas, eps_rel=0.1)
    grid = sq.SphericalGrid((3.0, 6.5))
    T = sq.squeeze(field, grid)
    r = np.linalg.norm(field.v, axis=1)
    in_range = (r >= 3.0) & (r <= 6.5)
    want = np.sum(field.weight[in_range])
    assert np.all(T.energy >= 0)
    assert abs(T.total_energy() - want) <= 1e-12 * want
    np.testing.assert_allclose(T.energy_per_b().sum(), want, rtol=1e-12)


def test_cell_round_trip():
    grid = sq.SphericalGrid((10.0, 20.0))
    cells = np.arange(grid.n_cells)
    v, psi, theta = grid.cell_spherical(cells)
    np.testing.assert_array_equal(grid.cell_index(v, psi, theta), cells)
