import itertools

import numba
import numpy as np
import pytest

from dvk_forge.dosimetry import (DEFAULT_CLASSES, MC_MEDIUM_DENSITY, TISSUES, TissueClass, convolve3d_direct,
                                 convolve3d_fft, energy_to_dose, generate_dataset, load_dataset, make_dataset,
                                 path_mean_density, read_manifest, region_mean_dose, synth_dvk_oracle, synth_energy)
from dvk_forge.errors import DegenerateInputError, ShapeError


@numba.njit(cache=True)
def six_loop_conv(a, s):
    """D[v] = sum_k A[v + c - k] S[k], zero outside the map, kernel visited row-major."""
    n0, n1, n2 = a.shape
    k0, k1, k2 = s.shape
    c0, c1, c2 = k0 // 2, k1 // 2, k2 // 2
    out = np.zeros(a.shape)
    for v0 in range(n0):
        for v1 in range(n1):
            for v2 in range(n2):
                acc = 0.0
                for i in range(k0):
                    for j in range(k1):
                        for k in range(k2):
                            u0, u1, u2 = v0 + c0 - i, v1 + c1 - j, v2 + c2 - k
                            if 0 <= u0 < n0 and 0 <= u1 < n1 and 0 <= u2 < n2:
                                prod = a[u0, u1, u2] * s[i, j, k]
                                acc = acc + prod
                out[v0, v1, v2] = acc
    return out


def test_direct_matches_six_loop_oracle_bitwise():
    rng = np.random.default_rng(0)
    for _ in range(100):
        a = rng.uniform(0, 10, size=(16, 16, 16))
        s = rng.uniform(0, 1, size=(9, 9, 9))
        assert convolve3d_direct(a, s).tobytes() == six_loop_conv(a, s).tobytes()


def test_fft_matches_direct():
    rng = np.random.default_rng(1)
    worst = 0.0
    for _ in range(100):
        a = rng.uniform(0, 10, size=(16, 16, 16))
        s = rng.uniform(0, 1, size=(9, 9, 9))
        d, f = convolve3d_direct(a, s), convolve3d_fft(a, s)
        m = np.abs(d) > 1e-300
        worst = max(worst, float(np.max(np.abs(f[m] - d[m]) / np.abs(d[m]))))
    assert worst <= 1e-10


def test_delta_map_reproduces_kernel():
    s = np.random.default_rng(2).uniform(size=(9, 9, 9))
    a = np.zeros((17, 17, 17))
    a[8, 8, 8] = 1.0
    for conv in (convolve3d_direct, convolve3d_fft):
        d = conv(a, s)
        np.testing.assert_allclose(d[4:13, 4:13, 4:13], s, rtol=1e-12, atol=1e-15)
        mask = np.ones(a.shape, bool)
        mask[4:13, 4:13, 4:13] = False
        assert np.max(np.abs(d[mask])) <= 1e-14


def test_uniform_map_interior_sum():
    s = np.random.default_rng(3).uniform(size=(9, 9, 9))
    d = convolve3d_direct(np.full((12, 12, 12), 2.5), s)
    assert d[4:8, 4:8, 4:8] == pytest.approx(np.full((4, 4, 4), 2.5 * s.sum()), rel=1e-13)


def test_zero_map_and_delta_kernel():
    rng = np.random.default_rng(4)
    assert not np.any(convolve3d_fft(np.zeros((8, 8, 8)), rng.uniform(size=(9, 9, 9))))
    k = np.zeros((9, 9, 9))
    k[4, 4, 4] = 1.0
    a = rng.uniform(size=(10, 11, 12))
    assert np.array_equal(convolve3d_direct(a, k), a)


def test_linearity_and_nonnegativity():
    rng = np.random.default_rng(5)
    a, b = rng.uniform(size=(12, 12, 12)), rng.uniform(size=(12, 12, 12))
    s = rng.uniform(size=(9, 9, 9))
    lhs = convolve3d_direct(2.0 * a + 3.5 * b, s)
    rhs = 2.0 * convolve3d_direct(a, s) + 3.5 * convolve3d_direct(b, s)
    assert np.max(np.abs(lhs - rhs) / np.abs(rhs)) <= 1e-12
    assert np.all(lhs >= 0)


def test_conv_errors():
    with pytest.raises(ShapeError):
        convolve3d_direct(np.zeros((4, 4, 4)), np.zeros((4, 3, 3)))
    with pytest.raises(ShapeError):
        convolve3d_fft(np.zeros((4, 4)), np.zeros((3, 3, 3)))


def test_energy_to_dose_units():
    # 1 J = 1/1.602176634e-13 MeV into 1 kg: 1000 cm^3 of unit density, edge 100 mm
    assert energy_to_dose(1 / 1.602176634e-13, 1.0, edge_mm=100.0) == pytest.approx(1.0, rel=1e-15)
    d = energy_to_dose(1.0, MC_MEDIUM_DENSITY, 5.0)
    # mass 1.04 g/cm^3 * 0.125 cm^3 = 0.13 g = 1.3e-4 kg
    assert d == pytest.approx(1.602176634e-13 / 1.3e-4, rel=1e-14)
    assert d == pytest.approx(1.23244e-9, rel=1e-5)
    assert energy_to_dose(1.0, 2 * MC_MEDIUM_DENSITY) == d / 2
    with pytest.raises(DegenerateInputError):
        energy_to_dose(1.0, 0.0)


def test_region_mean_dose():
    d = np.full((3, 3, 3), 4.5)
    assert region_mean_dose(d, np.ones_like(d, bool)) == 4.5
    r = np.random.default_rng(6).uniform(size=(4, 4, 4))
    single = np.zeros_like(r, bool)
    single[1, 2, 3] = True
    assert region_mean_dose(r, single) == r[1, 2, 3]
    checker = (np.indices(r.shape).sum(axis=0) % 2).astype(bool)
    n1, n2 = checker.sum(), (~checker).sum()
    combined = (n1 * region_mean_dose(r, checker) + n2 * region_mean_dose(r, ~checker)) / r.size
    assert combined == pytest.approx(r.mean(), rel=1e-14)
    with pytest.raises(DegenerateInputError):
        region_mean_dose(r, np.zeros_like(r, bool))
    with pytest.raises(ShapeError):
        region_mean_dose(r, np.ones((2, 2, 2), bool))


# -- synthetic oracle -------------------------------------------------------------------


def cube_symmetries():
    for perm in itertools.permutations(range(3)):
        for flips in itertools.product([False, True], repeat=3):
            yield perm, flips


def apply_symmetry(x, perm, flips):
    y = np.transpose(x, perm)
    for ax, f in enumerate(flips):
        if f:
            y = np.flip(y, ax)
    return y


def test_center_fraction_exact():
    rng = np.random.default_rng(7)
    for fc in (0.6, 0.3, 0.85):
        rho = rng.uniform(0.3, 1.9, size=(9, 9, 9))
        e = synth_energy(rho, e_total=2.0, center_fraction=fc)
        assert abs(e[4, 4, 4] / e.sum() - fc) <= 1e-12
        assert abs(e.sum() - 2.0) <= 1e-9 * 2.0


def test_uniform_density_symmetry_and_monotonicity():
    rho = np.full((9, 9, 9), 1.04)
    d = synth_dvk_oracle(rho)
    syms = list(cube_symmetries())
    assert len(syms) == 48
    for perm, flips in syms:
        assert np.max(np.abs(apply_symmetry(d, perm, flips) - d)) <= 1e-12 * d.max()
    idx = np.indices(d.shape).reshape(3, -1).T - 4
    dist = np.sqrt((idx ** 2).sum(axis=1))
    vals = d.ravel()
    order = np.argsort(dist, kind="stable")
    # non-increasing with distance over all 729 voxels
    for a, b in zip(order, order[1:]):
        if dist[b] > dist[a] + 1e-12:
            assert vals[b] <= vals[a] * (1 + 1e-12)
    assert np.argmax(vals) == 364


def test_path_mean_density_uniform():
    rho = np.full((9, 9, 9), 1.3)
    p = path_mean_density(rho)
    assert p[4, 4, 4] == 0.0
    m = np.ones(rho.shape, bool)
    m[4, 4, 4] = False
    np.testing.assert_allclose(p[m], 1.3, rtol=1e-15)


def test_denser_path_attenuates():
    rho = np.full((9, 9, 9), 1.0)
    dense = rho.copy()
    dense[4, 5:, 4] = 1.9
    e1, e2 = synth_energy(rho), synth_energy(dense)
    assert e2[4, 8, 4] / e2[4, 0, 4] < e1[4, 8, 4] / e1[4, 0, 4]


def test_oracle_determinism_and_errors():
    rho = np.random.default_rng(8).uniform(1.0, 1.1, size=(9, 9, 9))
    a = synth_dvk_oracle(rho, rel_noise=0.05, seed=3)
    b = synth_dvk_oracle(rho, rel_noise=0.05, seed=3)
    assert a.tobytes() == b.tobytes()
    for kw in ({"center_fraction": 1.0}, {"center_fraction": 0.0}, {"attenuation": 0.0}):
        with pytest.raises(DegenerateInputError):
            synth_dvk_oracle(rho, **kw)
    with pytest.raises(DegenerateInputError):
        synth_dvk_oracle(-rho)
    with pytest.raises(ShapeError):
        synth_dvk_oracle(np.ones((8, 9, 9)))


def test_tissue_class_validation():
    with pytest.raises(DegenerateInputError):
        TissueClass("x", (1.0, 1.0))
    for t in TISSUES.values():
        assert 0 < t.density_range[0] < t.density_range[1]


# -- datasets --------------------------------------------------------------------------


def test_dataset_counts_and_ranges():
    ds = make_dataset(10, seed=1)
    assert len(ds) == 50 and ds.density.shape == (50, 9, 9, 9)
    assert len(ds.indices("train")) == 35 and len(ds.indices("val")) == 15
    for i, lab in enumerate(ds.labels):
        lo, hi = TISSUES[lab].density_range
        assert lo <= ds.density[i].min() and ds.density[i].max() <= hi
        assert np.argmax(ds.dose[i]) == 364
    x, y, labels = ds.normalized("train")
    assert x.min() == pytest.approx(0.1) and y.max() == pytest.approx(0.9)
    assert len(labels) == 35


def test_full_scale_split_counts():
    from dvk_forge.dosimetry import split_tags
    tags = split_tags(10_000, 0.7, np.random.default_rng(0))
    assert tags.count("train") == 7000 and tags.count("val") == 3000


def test_mixed_tissue_inclusions_stay_in_some_range():
    ds = make_dataset(6, seed=2, mix_prob=1.0)
    lo = min(t.density_range[0] for t in TISSUES.values())
    hi = max(t.density_range[1] for t in TISSUES.values())
    assert lo <= ds.density.min() and ds.density.max() <= hi


def test_generate_dataset_deterministic_bitwise(tmp_path):
    a = generate_dataset(2, seed=7, out_dir=tmp_path / "a")
    b = generate_dataset(2, seed=7, out_dir=tmp_path / "b")
    assert a.read_bytes() == b.read_bytes()
    for sub in ("density", "dose"):
        for f in sorted((tmp_path / "a" / sub).iterdir()):
            assert f.read_bytes() == (tmp_path / "b" / sub / f.name).read_bytes()
    header, rows = read_manifest(a)
    assert header["seed"] == "7" and len(rows) == 2 * len(DEFAULT_CLASSES)
    ds = load_dataset(tmp_path / "a")
    ref = make_dataset(2, seed=7)
    assert ds.dose.tobytes() == ref.dose.tobytes()
    assert ds.norm == ref.norm and ds.labels == ref.labels and ds.splits == ref.splits
