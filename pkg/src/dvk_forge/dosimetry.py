"""Classical dose pipeline: decay map convolved with a dose-voxel kernel.

Also hosts the deterministic stand-in for Monte-Carlo kernel generation and
the synthetic dataset writer used to train the U-Net.

Units: densities in g/cm^3, energies in MeV, doses in Gy, voxel edges in mm.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np

from .errors import DegenerateInputError, FormatError, ShapeError
from .tensor import NormalizationParams, apply_normalization, fit_normalization, read_tensor, write_tensor

MEV_TO_J = 1.602176634e-13
SOFT_TISSUE_DENSITY = 1.004  # g/cm^3, soft-tissue class
MC_MEDIUM_DENSITY = 1.04  # g/cm^3, medium of the reference kernel simulation
DEFAULT_EDGE_MM = 5.0
KERNEL_SHAPE = (9, 9, 9)


@dataclass(frozen=True)
class TissueClass:
    name: str
    density_range: tuple[float, float]
    attenuation: float = 0.6  # lambda, per (g/cm^3 * voxel)

    def __post_init__(self):
        lo, hi = self.density_range
        if not 0 < lo < hi:
            raise DegenerateInputError(f"{self.name}: density range must be positive and non-degenerate")


# Implementer-chosen ranges; only the soft-tissue density is a literature value.
TISSUES = {
    "bone": TissueClass("bone", (1.40, 1.90), 0.55),
    "lung": TissueClass("lung", (0.20, 0.50), 0.70),
    "kidney": TissueClass("kidney", (1.03, 1.06), 0.60),
    "liver": TissueClass("liver", (1.04, 1.07), 0.62),
    "spleen": TissueClass("spleen", (1.04, 1.07), 0.58),
    "soft": TissueClass("soft", (1.00, 1.01), 0.60),
}
DEFAULT_CLASSES = ("bone", "lung", "kidney", "liver", "spleen")


# -- convolution ---------------------------------------------------------------


def _check_conv_args(decays, kernel):
    a = np.asarray(decays, dtype=np.float64)
    s = np.asarray(kernel, dtype=np.float64)
    if a.ndim != 3 or s.ndim != 3:
        raise ShapeError("decay map and kernel must both be 3D")
    if any(k % 2 == 0 for k in s.shape):
        raise ShapeError(f"kernel dims must be odd, got {s.shape}")
    if not (np.all(np.isfinite(a)) and np.all(np.isfinite(s))):
        raise DegenerateInputError("decay map and kernel must be finite")
    return a, s


def convolve3d_direct(decays, kernel) -> np.ndarray:
    """D[v] = sum_u A[u] S[v - u + c] with zero padding outside the map.

    Terms are accumulated per output voxel in row-major kernel order, so the
    result is reproducible bit for bit.
    """
    a, s = _check_conv_args(decays, kernel)
    n = a.shape
    center = tuple(k // 2 for k in s.shape)
    out = np.zeros(n)
    for k0 in range(s.shape[0]):
        for k1 in range(s.shape[1]):
            for k2 in range(s.shape[2]):
                off = (center[0] - k0, center[1] - k1, center[2] - k2)  # u - v
                dst, src = [], []
                for ax in range(3):
                    lo, hi = max(0, -off[ax]), min(n[ax], n[ax] - off[ax])
                    if lo >= hi:
                        break
                    dst.append(slice(lo, hi))
                    src.append(slice(lo + off[ax], hi + off[ax]))
                else:
                    out[tuple(dst)] += a[tuple(src)] * s[k0, k1, k2]
    return out


def convolve3d_fft(decays, kernel) -> np.ndarray:
    """Frequency-domain version of :func:`convolve3d_direct` (same boundary rule)."""
    a, s = _check_conv_args(decays, kernel)
    full = tuple(na + ns - 1 for na, ns in zip(a.shape, s.shape))
    axes = (0, 1, 2)
    spec = np.fft.rfftn(a, full, axes) * np.fft.rfftn(s, full, axes)
    conv = np.fft.irfftn(spec, full, axes)
    c = tuple(k // 2 for k in s.shape)
    return np.array(conv[c[0]:c[0] + a.shape[0], c[1]:c[1] + a.shape[1], c[2]:c[2] + a.shape[2]])


def energy_to_dose(energy_mev, density, edge_mm: float = DEFAULT_EDGE_MM) -> np.ndarray:
    """Absorbed dose [Gy] = deposited energy [J] / voxel mass [kg]."""
    rho = np.asarray(density, dtype=np.float64)
    if np.any(rho <= 0):
        raise DegenerateInputError("densities must be positive")
    if edge_mm <= 0:
        raise DegenerateInputError("voxel edge must be positive")
    volume_cm3 = (edge_mm / 10.0) ** 3
    mass_kg = rho * volume_cm3 / 1000.0
    return np.asarray(energy_mev, dtype=np.float64) * MEV_TO_J / mass_kg


def region_mean_dose(dose, mask) -> float:
    dose = np.asarray(dose, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != dose.shape:
        raise ShapeError(f"mask shape {mask.shape} differs from dose shape {dose.shape}")
    if not mask.any():
        raise DegenerateInputError("mask selects no voxels")
    return float(dose[mask].mean())


# -- synthetic kernel oracle -----------------------------------------------------


@lru_cache(maxsize=8)
def _path_geometry(shape):
    """For every voxel: Euclidean distance to the center and the flat indices of
    the voxels sampled at unit-step midpoints along the center->voxel segment."""
    c = np.array([k // 2 for k in shape], dtype=np.float64)
    idx = np.indices(shape).reshape(3, -1).T.astype(np.float64)
    delta = idx - c
    dist = np.sqrt((delta * delta).sum(axis=1))
    samples, owners = [], []
    for v, (dv, d) in enumerate(zip(delta, dist)):
        if d == 0:
            continue
        ns = math.ceil(d)
        t = (np.arange(ns) + 0.5) / ns
        pts = np.floor(c + t[:, None] * dv + 0.5).astype(np.int64)
        samples.append(np.ravel_multi_index(pts.T, shape))
        owners.append(np.full(ns, v))
    samples = np.concatenate(samples)
    owners = np.concatenate(owners)
    counts = np.bincount(owners, minlength=int(np.prod(shape)))
    center_flat = int(np.ravel_multi_index(tuple(int(x) for x in c), shape))
    return dist, samples, owners, counts, center_flat


def path_mean_density(density) -> np.ndarray:
    """Mean density along each center->voxel segment (0 at the center)."""
    rho = np.asarray(density, dtype=np.float64)
    dist, samples, owners, counts, center = _path_geometry(rho.shape)
    sums = np.bincount(owners, weights=rho.ravel()[samples], minlength=rho.size)
    out = np.zeros(rho.size)
    nz = counts > 0
    out[nz] = sums[nz] / counts[nz]
    return out.reshape(rho.shape)


def synth_energy(density, e_total: float = 1.0, center_fraction: float = 0.6,
                 attenuation: float = 0.6, rel_noise: float = 0.0, seed: int | None = None) -> np.ndarray:
    """Deposited energy per voxel [MeV] for one decay-equivalent source at the center.

    The center voxel receives ``center_fraction * e_total``; every other voxel a
    share proportional to ``exp(-attenuation * mean_path_density * d) / d^2``,
    scaled so the shares sum to the rest. ``rel_noise`` > 0 perturbs the
    peripheral shares (seeded) before rescaling, mimicking counting noise.
    """
    rho = np.asarray(density, dtype=np.float64)
    if rho.ndim != 3 or any(k % 2 == 0 for k in rho.shape):
        raise ShapeError(f"density kernel must be 3D with odd dims, got {rho.shape}")
    if np.any(rho <= 0) or not np.all(np.isfinite(rho)):
        raise DegenerateInputError("densities must be positive and finite")
    if not 0.0 < center_fraction < 1.0:
        raise DegenerateInputError("center_fraction must lie in (0, 1)")
    if not attenuation > 0 or not e_total > 0:
        raise DegenerateInputError("attenuation and e_total must be positive")
    dist, _, _, _, center = _path_geometry(rho.shape)
    dist = dist.reshape(rho.shape)
    rho_path = path_mean_density(rho)
    w = np.zeros(rho.shape)
    per = dist > 0
    w[per] = np.exp(-attenuation * rho_path[per] * dist[per]) / (dist[per] * dist[per])
    if rel_noise > 0:
        rng = np.random.default_rng(seed)
        w[per] *= np.clip(1.0 + rel_noise * rng.standard_normal(int(per.sum())), 0.0, None)
    energy = w * ((1.0 - center_fraction) * e_total / w.sum())
    energy.flat[center] = center_fraction * e_total
    return energy


def synth_dvk_oracle(density, e_total: float = 1.0, center_fraction: float = 0.6,
                     attenuation: float = 0.6, edge_mm: float = DEFAULT_EDGE_MM,
                     rel_noise: float = 0.0, seed: int | None = None) -> np.ndarray:
    """Synthetic dose-voxel kernel [Gy per decay] for a density kernel."""
    e = synth_energy(density, e_total, center_fraction, attenuation, rel_noise, seed)
    return energy_to_dose(e, density, edge_mm)


# -- dataset generation ------------------------------------------------------------


def sample_density(tissue: TissueClass, rng: np.random.Generator, shape=KERNEL_SHAPE,
                   mix_prob: float = 0.0, classes=DEFAULT_CLASSES) -> tuple[np.ndarray, str | None]:
    """Draw a density kernel: class base density + spatial noise, optionally
    with a box of a second tissue. Returns (density, inclusion class or None)."""
    lo, hi = tissue.density_range
    base = rng.uniform(lo, hi)
    rho = np.clip(base + 0.25 * (hi - lo) * rng.standard_normal(shape), lo, hi)
    other = None
    if mix_prob > 0 and rng.random() < mix_prob:
        other = str(rng.choice([c for c in classes if c != tissue.name]))
        olo, ohi = TISSUES[other].density_range
        size = rng.integers(2, 5, size=3)
        start = [int(rng.integers(0, n - s + 1)) for n, s in zip(shape, size)]
        box = tuple(slice(a, a + s) for a, s in zip(start, size))
        obase = rng.uniform(olo, ohi)
        rho[box] = np.clip(obase + 0.25 * (ohi - olo) * rng.standard_normal(rho[box].shape), olo, ohi)
    return rho, other


@dataclass
class Dataset:
    """Paired density and dose kernels in physical units, with labels and split tags."""

    density: np.ndarray  # (N, 9, 9, 9)
    dose: np.ndarray  # (N, 9, 9, 9)
    labels: list[str]
    splits: list[str]
    seed: int = 0
    norm: dict[str, dict[str, NormalizationParams]] = field(default_factory=dict)

    def __len__(self):
        return len(self.labels)

    def indices(self, split: str) -> np.ndarray:
        return np.array([i for i, s in enumerate(self.splits) if s == split], dtype=np.int64)

    def fit_norms(self, a: float = 0.1, b: float = 0.9):
        """Min-max statistics over each whole split (not per sample)."""
        self.norm = {}
        for split in sorted(set(self.splits)):
            idx = self.indices(split)
            self.norm[split] = {
                "density": fit_normalization(self.density[idx], a, b),
                "dose": fit_normalization(self.dose[idx], a, b),
            }
        return self

    def normalized(self, split: str) -> tuple[np.ndarray, np.ndarray, list[str]]:
        if split not in self.norm:
            raise DegenerateInputError(f"no normalisation statistics for split {split!r}")
        idx = self.indices(split)
        p = self.norm[split]
        x = apply_normalization(self.density[idx], p["density"])
        y = apply_normalization(self.dose[idx], p["dose"])
        return x, y, [self.labels[i] for i in idx]


def split_tags(n: int, ratio: float, rng: np.random.Generator) -> list[str]:
    """Shuffle, then tag the first ``round(ratio * n)`` samples as train."""
    if not 0 < ratio < 1:
        raise ValueError("split ratio must lie in (0, 1)")
    order = rng.permutation(n)
    n_train = int(round(ratio * n))
    tags = ["val"] * n
    for i in order[:n_train]:
        tags[i] = "train"
    return tags


def make_dataset(n_per_class: int, classes=DEFAULT_CLASSES, seed: int = 0, split: float = 0.7,
                 mix_prob: float = 0.0, center_fraction: float = 0.6, rel_noise: float = 0.0,
                 a: float = 0.1, b: float = 0.9) -> Dataset:
    """Generate paired kernels in memory; each sample gets its own derived seed."""
    classes = tuple(classes)
    if not classes:
        raise ValueError("at least one tissue class is required")
    labels = [c for c in classes for _ in range(n_per_class)]
    children = np.random.SeedSequence(seed).spawn(len(labels) + 1)
    dens, doses = [], []
    for label, ss in zip(labels, children[1:]):
        rng = np.random.default_rng(ss)
        tissue = TISSUES[label]
        rho, _ = sample_density(tissue, rng, mix_prob=mix_prob, classes=classes)
        noise_seed = int(rng.integers(2**63))
        dens.append(rho)
        doses.append(synth_dvk_oracle(rho, center_fraction=center_fraction, attenuation=tissue.attenuation,
                                      rel_noise=rel_noise, seed=noise_seed))
    tags = split_tags(len(labels), split, np.random.default_rng(children[0]))
    ds = Dataset(np.stack(dens), np.stack(doses), labels, tags, seed)
    return ds.fit_norms(a, b)


MANIFEST = "manifest.txt"


def write_dataset(ds: Dataset, out_dir) -> Path:
    out = Path(out_dir)
    (out / "density").mkdir(parents=True, exist_ok=True)
    (out / "dose").mkdir(parents=True, exist_ok=True)
    lines = ["# dvk-forge dataset manifest v1", f"seed = {ds.seed}"]
    for split in sorted(ds.norm):
        for what, p in sorted(ds.norm[split].items()):
            lines.append(f"norm.{split}.{what} = {p.data_min!r} {p.data_max!r} {p.low!r} {p.high!r}")
    lines.append("# index,class,split,density,dose")
    for i, (label, tag) in enumerate(zip(ds.labels, ds.splits)):
        dpath, spath = f"density/{i:05d}.dvkt", f"dose/{i:05d}.dvkt"
        write_tensor(out / dpath, ds.density[i])
        write_tensor(out / spath, ds.dose[i])
        lines.append(f"{i:05d},{label},{tag},{dpath},{spath}")
    path = out / MANIFEST
    path.write_text("\n".join(lines) + "\n")
    return path


def generate_dataset(n_per_class: int, classes=DEFAULT_CLASSES, seed: int = 0, out_dir=".", **kw) -> Path:
    return write_dataset(make_dataset(n_per_class, classes, seed, **kw), out_dir)


def read_manifest(path) -> tuple[dict, list[tuple[int, str, str, str, str]]]:
    header: dict = {}
    rows = []
    for ln, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" in line:
            key, _, val = (s.strip() for s in line.partition("="))
            header[key] = val
            continue
        parts = line.split(",")
        if len(parts) != 5:
            raise FormatError(f"{path}:{ln}: expected 5 comma-separated fields")
        rows.append((int(parts[0]), parts[1], parts[2], parts[3], parts[4]))
    return header, rows


def load_dataset(data_dir) -> Dataset:
    root = Path(data_dir)
    header, rows = read_manifest(root / MANIFEST)
    if not rows:
        raise FormatError(f"{root / MANIFEST} lists no samples")
    dens = np.stack([read_tensor(root / r[3]) for r in rows])
    dose = np.stack([read_tensor(root / r[4]) for r in rows])
    norm: dict = {}
    for key, val in header.items():
        if key.startswith("norm."):
            _, split, what = key.split(".")
            lo, hi, a, b = (float(v) for v in val.split())
            norm.setdefault(split, {})[what] = NormalizationParams(lo, hi, a, b)
    return Dataset(dens, dose, [r[1] for r in rows], [r[2] for r in rows],
                   int(header.get("seed", 0)), norm)
