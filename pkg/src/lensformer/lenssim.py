"""Parametric mock-lens image generator.

Scenes are a Sersic bulge+disc foreground galaxy, optionally a background
source lensed by a singular isothermal sphere (constant deflection of one
Einstein radius), rendered per band, blurred with a Gaussian PSF, and
finished with per-band Gaussian pixel noise. Non-lens stamps can carry an
unlensed companion galaxy so "two objects present" is not a usable label
shortcut.

Stamp files are raw little-endian float32 cubes behind an 8-value uint32
header; the dataset manifest is JSON lines with one row per stamp.
Everything is reproducible: the master seed derives one integer seed per
stamp, and a stamp is a pure function of (scene, seed).
"""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np
from scipy.ndimage import gaussian_filter

from .errors import ContractError

STAMP_MAGIC = 0x4C454E53  # "LENS"
STAMP_VERSION = 1

FWHM_TO_SIGMA = 1.0 / (2.0 * math.sqrt(2.0 * math.log(2.0)))


# ---------------------------------------------------------------------------
# profiles
# ---------------------------------------------------------------------------

def sersic_index(bulge_fraction: float, x: float) -> float:
    """Bulge Sersic index: log10(n) = 0.4 log10(max(B/T, 0.03)) + 0.1 x."""
    if not 0.0 <= bulge_fraction <= 1.0:
        raise ContractError(f"bulge fraction must be in [0, 1], got {bulge_fraction}")
    if not -1.0 <= x <= 1.0:
        raise ContractError(f"x must be in [-1, 1], got {x}")
    return 10.0 ** (0.4 * math.log10(max(bulge_fraction, 0.03)) + 0.1 * x)


def sersic_k(n_s: float, r_eff: float) -> float:
    """Scale constant so that half the profile flux falls inside r_eff.

    Uses the standard b_n series approximation; good to a fraction of a
    percent for the index range sampled here.
    """
    b = 2.0 * n_s - 1.0 / 3.0 + 4.0 / (405.0 * n_s) + 46.0 / (25515.0 * n_s ** 2)
    return b / r_eff ** (1.0 / n_s)


def sersic_profile_flux(i0: float, n_s: float, k: float, axis_ratio: float) -> float:
    """Closed-form total flux of I(R) = I0 exp(-k R^(1/n)) over the plane."""
    return axis_ratio * 2.0 * math.pi * n_s * math.gamma(2.0 * n_s) * i0 * k ** (-2.0 * n_s)


@dataclass(frozen=True)
class SersicParams:
    """One foreground galaxy: Sersic bulge plus exponential disc.

    ``i0`` is the central intensity of the composite; ``bulge_fraction``
    (B/T) fixes the flux split between the two components. ``k`` and
    ``n_s`` describe the bulge; the disc is n = 1 with scale radius
    ``r_disc`` and apparent axis ratio cos(inclination).
    """

    i0: float
    n_s: float
    k: float
    r_eff: float
    r_disc: float
    axis_ratio: float
    inclination: float
    orientation: float
    bulge_fraction: float

    def __post_init__(self):
        if self.n_s <= 0:
            raise ContractError(f"Sersic index must be positive, got {self.n_s}")
        if not 0.5 <= self.axis_ratio <= 1.0:
            raise ContractError(f"axis ratio must be in [0.5, 1], got {self.axis_ratio}")
        if not 0.0 <= self.inclination <= 80.0:
            raise ContractError(f"inclination must be in [0, 80] degrees, got {self.inclination}")
        if not 0.0 <= self.bulge_fraction <= 1.0:
            raise ContractError(f"bulge fraction must be in [0, 1], got {self.bulge_fraction}")

    def disc_axis_ratio(self) -> float:
        return math.cos(math.radians(self.inclination))

    def component_amplitudes(self) -> tuple[float, float]:
        """Central intensities (bulge, disc) that sum to i0 with the B/T split."""
        bt = self.bulge_fraction
        if bt >= 1.0:
            return self.i0, 0.0
        if bt <= 0.0:
            return 0.0, self.i0
        f_bulge = sersic_profile_flux(1.0, self.n_s, self.k, self.axis_ratio)
        f_disc = sersic_profile_flux(1.0, 1.0, 1.0 / self.r_disc, self.disc_axis_ratio())
        ratio = bt * f_disc / ((1.0 - bt) * f_bulge)
        a_disc = self.i0 / (1.0 + ratio)
        return self.i0 - a_disc, a_disc

    def analytic_flux(self) -> float:
        a_b, a_d = self.component_amplitudes()
        return (sersic_profile_flux(a_b, self.n_s, self.k, self.axis_ratio)
                + sersic_profile_flux(a_d, 1.0, 1.0 / self.r_disc, self.disc_axis_ratio()))


def pixel_grid(size: int, pixel_scale: float) -> tuple[np.ndarray, np.ndarray]:
    """Pixel-center coordinates in arcsec, origin at the stamp center."""
    offs = (np.arange(size, dtype=np.float64) - (size - 1) / 2.0) * pixel_scale
    return np.meshgrid(offs, offs, indexing="xy")


def _elliptical_radius(x, y, cx, cy, axis_ratio, orientation):
    dx = x - cx
    dy = y - cy
    cos_o, sin_o = math.cos(orientation), math.sin(orientation)
    u = cos_o * dx + sin_o * dy
    v = -sin_o * dx + cos_o * dy
    return np.sqrt(u * u + (v / axis_ratio) ** 2)


def _profile(grid, center, amp, n_s, k, axis_ratio, orientation) -> np.ndarray:
    if amp == 0.0:
        return np.zeros_like(grid[0])
    r = _elliptical_radius(grid[0], grid[1], center[0], center[1], axis_ratio, orientation)
    return amp * np.exp(-k * r ** (1.0 / n_s))


def render_sersic(params: SersicParams, grid, center=(0.0, 0.0)) -> np.ndarray:
    """Evaluate I(R) = I0 exp(-k R^(1/n_s)) at pixel centers, with the
    elliptical radius set by axis_ratio and orientation."""
    return _profile(grid, center, params.i0, params.n_s, params.k,
                    params.axis_ratio, params.orientation)


def render_galaxy(params: SersicParams, grid, center=(0.0, 0.0)) -> np.ndarray:
    """Bulge + disc composite with central intensity i0 and flux split B/T."""
    a_bulge, a_disc = params.component_amplitudes()
    img = _profile(grid, center, a_bulge, params.n_s, params.k,
                   params.axis_ratio, params.orientation)
    img += _profile(grid, center, a_disc, 1.0, 1.0 / params.r_disc,
                    params.disc_axis_ratio(), params.orientation)
    return img


# ---------------------------------------------------------------------------
# scenes
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Companion:
    galaxy: SersicParams
    dx: float
    dy: float


@dataclass(frozen=True)
class MockSceneParams:
    """Everything that determines one stamp, noise seed aside."""

    lens: SersicParams
    einstein_radius: float
    source_dx: float
    source_dy: float
    source_amp: float
    source_sigma: float
    source_axis_ratio: float
    source_angle: float
    source_redshift: float
    lens_band_flux: tuple[float, ...]
    source_band_flux: tuple[float, ...]
    psf_fwhm: tuple[float, ...]
    noise_sigma: tuple[float, ...]
    pixel_scale: float
    stamp_size: int
    is_lens: bool
    companion: Optional[Companion] = None

    @property
    def bands(self) -> int:
        return len(self.lens_band_flux)


def _source_surface_brightness(scene: MockSceneParams, bx: np.ndarray, by: np.ndarray) -> np.ndarray:
    r = _elliptical_radius(bx, by, scene.source_dx, scene.source_dy,
                           scene.source_axis_ratio, scene.source_angle)
    return scene.source_amp * np.exp(-0.5 * (r / scene.source_sigma) ** 2)


def render_unlensed_source(scene: MockSceneParams, grid) -> np.ndarray:
    return _source_surface_brightness(scene, grid[0], grid[1])


def render_lensed_source(scene: MockSceneParams, grid) -> np.ndarray:
    """Inverse ray shooting through a singular isothermal sphere.

    Deflection has constant magnitude theta_E pointing at the lens
    center, so a ray at theta lands at beta = theta - theta_E * theta_hat
    in the source plane. Surface brightness is conserved along rays;
    a source behind the center maps to a ring at the Einstein radius.
    """
    if scene.einstein_radius <= 0:
        raise ContractError(f"einstein radius must be positive, got {scene.einstein_radius}")
    x, y = grid
    r = np.hypot(x, y)
    safe = np.where(r > 0, r, 1.0)
    scale = np.where(r > 0, 1.0 - scene.einstein_radius / safe, 1.0)
    return _source_surface_brightness(scene, x * scale, y * scale)


def synthesize(scene: MockSceneParams, seed: int) -> "ImageStamp":
    """Render one labelled multi-band stamp, deterministic under seed.

    Per band: (foreground + optional companion) and, for lenses, the
    SIS-lensed source, each scaled by the band flux, PSF-blurred, then
    zero-mean Gaussian noise. The realized flux ratio (lensed flux over
    total flux, noiseless) lands in the metadata.
    """
    rng = np.random.default_rng(seed)
    grid = pixel_grid(scene.stamp_size, scene.pixel_scale)
    fg = render_galaxy(scene.lens, grid)
    if scene.companion is not None:
        fg = fg + render_galaxy(scene.companion.galaxy, grid,
                                center=(scene.companion.dx, scene.companion.dy))
    src = render_lensed_source(scene, grid) if scene.is_lens else np.zeros_like(fg)

    nb = scene.bands
    shape = (scene.stamp_size, scene.stamp_size)
    pixels = np.empty((nb,) + shape, dtype=np.float32)
    fg_total = 0.0
    src_total = 0.0
    for b in range(nb):
        sigma_px = scene.psf_fwhm[b] * FWHM_TO_SIGMA / scene.pixel_scale
        fg_b = gaussian_filter(fg * scene.lens_band_flux[b], sigma_px, mode="constant")
        src_b = gaussian_filter(src * scene.source_band_flux[b], sigma_px, mode="constant")
        clean = fg_b + src_b
        fg_total += float(fg_b.sum())
        src_total += float(src_b.sum())
        noise = rng.normal(0.0, scene.noise_sigma[b], size=shape) if scene.noise_sigma[b] > 0 \
            else np.zeros(shape)
        pixels[b] = (clean + noise).astype(np.float32)

    total = fg_total + src_total
    flux_ratio = src_total / total if total > 0 else 0.0
    metadata = {
        "theta_e": scene.einstein_radius if scene.is_lens else 0.0,
        "flux_ratio": flux_ratio,
        "z_s": scene.source_redshift,
        "seed": int(seed),
    }
    return ImageStamp(pixels=pixels, label=int(scene.is_lens), metadata=metadata)


# ---------------------------------------------------------------------------
# stamps and datasets
# ---------------------------------------------------------------------------

@dataclass
class ImageStamp:
    """One labelled cutout: [bands, S, S] float32 pixels plus metadata."""

    pixels: np.ndarray
    label: int
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.pixels.ndim != 3 or self.pixels.shape[1] != self.pixels.shape[2]:
            raise ContractError(f"stamp pixels must be [bands, S, S], got {self.pixels.shape}")

    @property
    def bands(self) -> int:
        return self.pixels.shape[0]

    @property
    def size(self) -> int:
        return self.pixels.shape[1]


@dataclass
class Dataset:
    """In-memory dataset: stacked pixels, integer labels, per-stamp metadata."""

    pixels: np.ndarray  # [N, bands, S, S] float32
    labels: np.ndarray  # [N] int64
    meta: list[dict]

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def bands(self) -> int:
        return self.pixels.shape[1]

    @property
    def size(self) -> int:
        return self.pixels.shape[2]

    @classmethod
    def from_stamps(cls, stamps: Sequence[ImageStamp]) -> "Dataset":
        pixels = np.stack([s.pixels for s in stamps]).astype(np.float32)
        labels = np.array([s.label for s in stamps], dtype=np.int64)
        meta = [dict(s.metadata, label=s.label) for s in stamps]
        return cls(pixels=pixels, labels=labels, meta=meta)


def write_stamp(path: Union[str, Path], pixels: np.ndarray) -> None:
    bands, s, s2 = pixels.shape
    header = np.array([STAMP_MAGIC, STAMP_VERSION, bands, s, s2, 0, 0, 0], dtype="<u4")
    with open(path, "wb") as fh:
        fh.write(header.tobytes())
        fh.write(np.ascontiguousarray(pixels, dtype="<f4").tobytes())


def read_stamp(path: Union[str, Path]) -> np.ndarray:
    raw = Path(path).read_bytes()
    header = np.frombuffer(raw[:32], dtype="<u4")
    if header[0] != STAMP_MAGIC:
        raise ContractError(f"{path}: not a stamp file")
    if header[1] != STAMP_VERSION:
        raise ContractError(f"{path}: unsupported stamp version {header[1]}")
    bands, s, s2 = int(header[2]), int(header[3]), int(header[4])
    return np.frombuffer(raw[32:], dtype="<f4").reshape(bands, s, s2).copy()


# ---------------------------------------------------------------------------
# sampling
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SimConfig:
    """Sampling ranges for dataset generation. Defaults describe the
    101x101 four-band ground-survey-like setup; tests shrink them."""

    bands: int = 4
    size: int = 101
    pixel_scale: float = 0.2
    theta_e_range: tuple[float, float] = (0.3, 10.08)
    theta_e_law: str = "loguniform"
    lens_i0_range: tuple[float, float] = (0.8, 1.6)
    lens_r_eff_range: tuple[float, float] = (0.3, 1.2)
    lens_r_disc_range: tuple[float, float] = (0.4, 1.6)
    bulge_fraction_range: tuple[float, float] = (0.05, 0.95)
    axis_ratio_range: tuple[float, float] = (0.5, 1.0)
    inclination_range: tuple[float, float] = (0.0, 80.0)
    source_amp_range: tuple[float, float] = (0.08, 0.9)
    source_amp_law: str = "loguniform"
    source_sigma_range: tuple[float, float] = (0.15, 0.45)
    source_axis_ratio_range: tuple[float, float] = (0.5, 1.0)
    source_offset_frac: tuple[float, float] = (0.0, 0.7)
    lens_band_flux: tuple[float, ...] = (0.5, 0.8, 1.0, 1.1)
    source_band_flux: tuple[float, ...] = (1.2, 1.0, 0.8, 0.6)
    band_flux_jitter: float = 0.2
    psf_fwhm: tuple[float, ...] = (1.0, 0.8, 0.7, 0.8)
    noise_sigma_range: tuple[float, float] = (0.008, 0.02)
    z_s_median: float = 1.81
    z_s_spread: float = 0.35
    hard_negative_fraction: float = 0.4
    companion_i0_frac: tuple[float, float] = (0.15, 0.5)
    companion_offset_range: tuple[float, float] = (0.8, 2.2)

    def __post_init__(self):
        if self.bands != len(self.lens_band_flux) or self.bands != len(self.source_band_flux) \
                or self.bands != len(self.psf_fwhm):
            raise ContractError("per-band tuples must match the band count")
        if self.theta_e_law not in ("uniform", "loguniform"):
            raise ContractError(f"unknown theta_e law {self.theta_e_law!r}")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SimConfig":
        clean = {}
        for f in dataclasses.fields(cls):
            if f.name in d:
                v = d[f.name]
                clean[f.name] = tuple(v) if isinstance(v, list) else v
        unknown = set(d) - {f.name for f in dataclasses.fields(cls)}
        if unknown:
            raise ContractError(f"unknown simulator keys: {sorted(unknown)}")
        return cls(**clean)


def desk_sim_config(bands: int = 4, **overrides) -> SimConfig:
    """32x32 variant sized for CPU-speed experiments, tuned so a small
    encoder reaches high AUROC in a 30-epoch run while the faintest
    arcs stay genuinely hard."""
    base = dict(
        bands=bands, size=32, pixel_scale=0.2,
        theta_e_range=(0.6, 2.2),
        lens_i0_range=(0.9, 1.5),
        lens_r_eff_range=(0.25, 0.6),
        lens_r_disc_range=(0.35, 0.8),
        source_amp_range=(0.12, 1.0),
        source_sigma_range=(0.14, 0.3),
        noise_sigma_range=(0.007, 0.016),
        psf_fwhm=tuple([0.7] * bands) if bands != 4 else (0.8, 0.7, 0.65, 0.7),
        lens_band_flux=tuple([1.0] * bands) if bands != 4 else (0.5, 0.8, 1.0, 1.1),
        source_band_flux=tuple([1.0] * bands) if bands != 4 else (1.2, 1.0, 0.8, 0.6),
    )
    base.update(overrides)
    return SimConfig(**base)


def _draw(rng, lo, hi, law="uniform"):
    if law == "loguniform":
        return float(np.exp(rng.uniform(np.log(lo), np.log(hi))))
    return float(rng.uniform(lo, hi))


def _jitter_bands(rng, base: tuple[float, ...], jitter: float) -> tuple[float, ...]:
    if jitter <= 0:
        return tuple(base)
    return tuple(float(b * rng.uniform(1.0 - jitter, 1.0 + jitter)) for b in base)


def _sample_galaxy(rng, cfg: SimConfig, i0: float) -> SersicParams:
    bt = _draw(rng, *cfg.bulge_fraction_range)
    n_s = sersic_index(bt, float(rng.uniform(-1.0, 1.0)))
    r_eff = _draw(rng, *cfg.lens_r_eff_range)
    return SersicParams(
        i0=i0, n_s=n_s, k=sersic_k(n_s, r_eff), r_eff=r_eff,
        r_disc=_draw(rng, *cfg.lens_r_disc_range),
        axis_ratio=_draw(rng, *cfg.axis_ratio_range),
        inclination=_draw(rng, *cfg.inclination_range),
        orientation=float(rng.uniform(0.0, math.pi)),
        bulge_fraction=bt)


def sample_scene(rng: np.random.Generator, cfg: SimConfig, is_lens: bool) -> MockSceneParams:
    """Draw one scene's physical parameters from the configured ranges."""
    lens = _sample_galaxy(rng, cfg, i0=_draw(rng, *cfg.lens_i0_range))
    theta_e = _draw(rng, *cfg.theta_e_range, law=cfg.theta_e_law)
    offset_r = theta_e * _draw(rng, *cfg.source_offset_frac)
    offset_phi = float(rng.uniform(0.0, 2.0 * math.pi))
    noise = _draw(rng, *cfg.noise_sigma_range)
    companion = None
    if not is_lens and rng.random() < cfg.hard_negative_fraction:
        comp = _sample_galaxy(rng, cfg, i0=lens.i0 * _draw(rng, *cfg.companion_i0_frac))
        comp_r = _draw(rng, *cfg.companion_offset_range)
        comp_phi = float(rng.uniform(0.0, 2.0 * math.pi))
        companion = Companion(galaxy=comp, dx=comp_r * math.cos(comp_phi),
                              dy=comp_r * math.sin(comp_phi))
    return MockSceneParams(
        lens=lens,
        einstein_radius=theta_e,
        source_dx=offset_r * math.cos(offset_phi),
        source_dy=offset_r * math.sin(offset_phi),
        source_amp=_draw(rng, *cfg.source_amp_range, law=cfg.source_amp_law),
        source_sigma=_draw(rng, *cfg.source_sigma_range),
        source_axis_ratio=_draw(rng, *cfg.source_axis_ratio_range),
        source_angle=float(rng.uniform(0.0, math.pi)),
        source_redshift=float(rng.lognormal(math.log(cfg.z_s_median), cfg.z_s_spread)),
        lens_band_flux=_jitter_bands(rng, cfg.lens_band_flux, cfg.band_flux_jitter),
        source_band_flux=_jitter_bands(rng, cfg.source_band_flux, cfg.band_flux_jitter),
        psf_fwhm=tuple(cfg.psf_fwhm),
        noise_sigma=tuple([noise] * cfg.bands),
        pixel_scale=cfg.pixel_scale,
        stamp_size=cfg.size,
        is_lens=is_lens)


def sample_stamps(n: int, lens_fraction: float, cfg: SimConfig, seed: int) -> list[ImageStamp]:
    """Generate n stamps in memory with exactly round(n * lens_fraction) lenses."""
    if n < 2:
        raise ContractError(f"need at least 2 stamps, got {n}")
    if not 0.0 < lens_fraction < 1.0:
        raise ContractError(f"lens fraction must be in (0, 1), got {lens_fraction}")
    n_lens = round(n * lens_fraction)
    master = np.random.default_rng(seed)
    labels = np.zeros(n, dtype=bool)
    labels[:n_lens] = True
    labels = labels[master.permutation(n)]
    stamp_seeds = master.integers(0, 2 ** 62, size=n)
    stamps = []
    for i in range(n):
        rng = np.random.default_rng(int(stamp_seeds[i]))
        scene = sample_scene(rng, cfg, is_lens=bool(labels[i]))
        stamps.append(synthesize(scene, seed=int(stamp_seeds[i]) + 1))
    return stamps


def generate_dataset(out_dir: Union[str, Path], n: int, lens_fraction: float,
                     cfg: SimConfig, seed: int) -> Path:
    """Write stamps plus a JSONL manifest; returns the manifest path."""
    out = Path(out_dir)
    stamp_dir = out / "stamps"
    stamp_dir.mkdir(parents=True, exist_ok=True)
    stamps = sample_stamps(n, lens_fraction, cfg, seed)
    manifest = out / "manifest.jsonl"
    with open(manifest, "w") as fh:
        for i, stamp in enumerate(stamps):
            rel = f"stamps/{i:06d}.stamp"
            write_stamp(out / rel, stamp.pixels)
            row = {
                "id": i,
                "path": rel,
                "label": stamp.label,
                "theta_e": stamp.metadata["theta_e"],
                "flux_ratio": stamp.metadata["flux_ratio"],
                "z_s": stamp.metadata["z_s"],
                "seed": stamp.metadata["seed"],
            }
            fh.write(json.dumps(row, sort_keys=True) + "\n")
    return manifest


def load_dataset(manifest_path: Union[str, Path]) -> Dataset:
    manifest_path = Path(manifest_path)
    base = manifest_path.parent
    pixels = []
    labels = []
    meta = []
    with open(manifest_path) as fh:
        for line in fh:
            row = json.loads(line)
            pixels.append(read_stamp(base / row["path"]))
            labels.append(int(row["label"]))
            meta.append(row)
    if not pixels:
        raise ContractError(f"{manifest_path}: empty manifest")
    return Dataset(pixels=np.stack(pixels), labels=np.array(labels, dtype=np.int64), meta=meta)
