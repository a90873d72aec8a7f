"""Sample construction, dataset splits, manifests, and the synthetic generator.

A :class:`Sample` pairs a 3-channel LR input stack (fire, temp_dev, burnable)
with the HR fire target it was derived from. Raw channels are normalized
before pairing (fire counts to [0, 1] by a saturation cap, temperature
deviations to [-1, 1] by a half-range), and the LR side is produced from the
normalized HR channels by block averaging so fire density is conserved.

Splits are temporal: years up to 2016 go to train/val (validation is the
chronological tail), years from 2017 on are held out as test. Manifests are
JSON-lines files with one record per sample plus a ``dataset.json`` sidecar
carrying the normalization spec, scale, and creation seed.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataError, GridMismatchError
from .raster import (
    INPUT_ROLES,
    ROLE_BURNABLE,
    ROLE_FIRE,
    ROLE_TEMP_DEV,
    ChannelStack,
    Raster,
    bilinear_resample,
    block_average_downsample,
    read_raster,
    write_raster,
)

log = logging.getLogger(__name__)

SUPPORTED_SCALES = (2, 4, 8)
SPLITS = ("train", "val", "test")
TEST_FROM_YEAR = 2017
YEAR_RANGE = (2000, 2020)

# Simplified land-cover class table (editable; see default_burnable_mapping).
LANDCOVER_CLASSES = {
    10: "broadleaf_forest",
    20: "needleleaf_forest",
    30: "mixed_forest",
    40: "shrubland",
    50: "grassland",
    60: "wetland",
    70: "urban",
    80: "bare",
    90: "water",
}


def default_burnable_mapping(grassland_burnable: bool = False) -> dict[int, int]:
    """Binary burnable/non-burnable table over :data:`LANDCOVER_CLASSES`.

    Forest and shrub classes are burnable; water, urban, bare, and wetland are
    not. Grassland is the regionally configurable class: pass ``True`` for
    regions whose grass fires matter.
    """
    mapping = {10: 1, 20: 1, 30: 1, 40: 1, 60: 0, 70: 0, 80: 0, 90: 0}
    mapping[50] = 1 if grassland_burnable else 0
    return mapping


@dataclass
class NormalizationSpec:
    """Channel normalization constants.

    fire: clip(count, 0, fire_cap) / fire_cap        -> [0, 1]
    temp: clip(dev, -halfrange, +halfrange) / halfrange -> [-1, 1]
    burnable is already [0, 1] by construction.
    """

    fire_cap: float = 254.0
    temp_halfrange: float = 10.0

    def __post_init__(self):
        if not (self.fire_cap > 0 and self.temp_halfrange > 0):
            raise DataError("normalization constants must be positive")

    def normalize_fire(self, counts: np.ndarray) -> np.ndarray:
        return np.clip(counts, 0.0, self.fire_cap) / self.fire_cap

    def denormalize_fire(self, values: np.ndarray) -> np.ndarray:
        return np.asarray(values) * self.fire_cap

    def normalize_temp(self, dev: np.ndarray) -> np.ndarray:
        return np.clip(dev, -self.temp_halfrange, self.temp_halfrange) / self.temp_halfrange

    def to_json(self) -> dict:
        return {"fire_cap": self.fire_cap, "temp_halfrange": self.temp_halfrange}

    @classmethod
    def from_json(cls, d: dict) -> "NormalizationSpec":
        return cls(fire_cap=float(d["fire_cap"]), temp_halfrange=float(d["temp_halfrange"]))


@dataclass
class Sample:
    """One training/evaluation instance: normalized LR stack + HR fire target."""

    lr_input: ChannelStack
    hr_target: Raster
    year: int
    month: int
    region: str
    scale: int

    def __post_init__(self):
        if self.scale not in SUPPORTED_SCALES:
            raise DataError(f"scale must be one of {SUPPORTED_SCALES}, got {self.scale}")
        if not 1 <= self.month <= 12:
            raise DataError(f"month must be 1-12, got {self.month}")
        if self.lr_input.roles != INPUT_ROLES:
            raise DataError(f"LR roles must be {INPUT_ROLES}, got {self.lr_input.roles}")
        lw, lh = self.lr_input.width, self.lr_input.height
        if (self.hr_target.width, self.hr_target.height) != (lw * self.scale, lh * self.scale):
            raise DataError(
                f"HR dims {self.hr_target.width}x{self.hr_target.height} != "
                f"LR {lw}x{lh} times scale {self.scale}"
            )
        ranges = {ROLE_FIRE: (0.0, 1.0), ROLE_TEMP_DEV: (-1.0, 1.0), ROLE_BURNABLE: (0.0, 1.0)}
        for role, ch in zip(self.lr_input.roles, self.lr_input.channels):
            lo, hi = ranges[role]
            if ch.values.min() < lo or ch.values.max() > hi:
                raise DataError(f"{role} channel outside normalized range [{lo}, {hi}]")
        if self.hr_target.values.min() < 0.0 or self.hr_target.values.max() > 1.0:
            raise DataError("hr_target outside normalized range [0, 1]")

    @property
    def sample_id(self) -> str:
        return f"{self.region}_{self.year:04d}-{self.month:02d}"


def temp_deviation(
    monthly_series: list[tuple[int, int, Raster]],
    climatology_years: tuple[int, int] | None = None,
    per_calendar_month: bool = True,
) -> list[tuple[int, int, Raster]]:
    """Turn monthly temperature grids into per-pixel deviations.

    Each output pixel is the input minus that pixel's climatological mean over
    ``climatology_years`` (default: the full span of the series). The default
    climatology is per calendar month, which removes the seasonal cycle;
    ``per_calendar_month=False`` subtracts a single all-month mean instead.
    Every calendar month appearing in the series must be present in every
    climatology year; gaps are reported.
    """
    if not monthly_series:
        raise DataError("temp_deviation: empty series")
    ref = monthly_series[0][2]
    for _, _, r in monthly_series[1:]:
        if not r.same_grid(ref):
            raise GridMismatchError(
                f"temperature grids differ: {ref.geotransform()} vs {r.geotransform()}"
            )
    years = [y for y, _, _ in monthly_series]
    y0, y1 = climatology_years if climatology_years else (min(years), max(years))
    window = {
        (y, m): r.values for y, m, r in monthly_series if y0 <= y <= y1
    }
    months_present = sorted({m for _, m, _ in monthly_series})
    gaps = [
        (y, m)
        for m in months_present
        for y in range(y0, y1 + 1)
        if (y, m) not in window
    ]
    if gaps:
        listing = ", ".join(f"{y}-{m:02d}" for y, m in gaps)
        raise DataError(f"temp_deviation: climatology window {y0}-{y1} has gaps: {listing}")

    if per_calendar_month:
        clim = {
            m: np.mean([window[(y, m)] for y in range(y0, y1 + 1)], axis=0)
            for m in months_present
        }
    else:
        all_mean = np.mean(list(window.values()), axis=0)
        clim = {m: all_mean for m in months_present}

    out = []
    for y, m, r in monthly_series:
        dev = Raster(
            values=r.values - clim[m],
            origin_lon=r.origin_lon,
            origin_lat=r.origin_lat,
            pixel_size=r.pixel_size,
        )
        out.append((y, m, dev))
    return out


def burnable_index(
    landcover: Raster, mapping: dict[int, int], target_dims: tuple[int, int]
) -> Raster:
    """Binary-bin land-cover classes, then resample to the working grid.

    ``mapping`` sends every class id occurring in ``landcover`` to 0
    (non-burnable) or 1 (burnable); the bilinear downsample then yields a
    continuous burnability index in [0, 1] at ``target_dims`` (width, height).
    """
    ids = landcover.values
    rounded = np.rint(ids)
    if not np.allclose(ids, rounded, atol=1e-9):
        raise DataError("landcover raster does not contain integer class ids")
    present = {int(v) for v in np.unique(rounded)}
    unmapped = sorted(present - set(mapping))
    if unmapped:
        raise DataError(f"landcover class id(s) missing from mapping: {unmapped}")
    for cid, flag in mapping.items():
        if flag not in (0, 1):
            raise DataError(f"mapping for class {cid} must be 0 or 1, got {flag}")
    lut = {cid: float(flag) for cid, flag in mapping.items()}
    binary = np.vectorize(lut.__getitem__, otypes=[np.float64])(rounded.astype(np.int64))
    binary_raster = Raster(
        values=binary,
        origin_lon=landcover.origin_lon,
        origin_lat=landcover.origin_lat,
        pixel_size=landcover.pixel_size,
    )
    out_w, out_h = target_dims
    if (out_w, out_h) == (landcover.width, landcover.height):
        return binary_raster
    return bilinear_resample(binary_raster, out_w, out_h)


def build_sample(
    fire_hr: Raster,
    temp_dev: Raster,
    burnable: Raster,
    scale: int,
    norm: NormalizationSpec,
    year: int,
    month: int,
    region: str,
) -> Sample:
    """Normalize aligned HR channels and derive the LR stack by block averaging."""
    for name, r in (("temp_dev", temp_dev), ("burnable", burnable)):
        if not r.same_grid(fire_hr):
            raise GridMismatchError(
                f"{name} grid {r.geotransform()} does not match fire grid "
                f"{fire_hr.geotransform()}"
            )
    if fire_hr.width % scale or fire_hr.height % scale:
        raise DataError(
            f"HR dims {fire_hr.width}x{fire_hr.height} not divisible by scale {scale}"
        )

    def hr(values: np.ndarray) -> Raster:
        return Raster(
            values=values,
            origin_lon=fire_hr.origin_lon,
            origin_lat=fire_hr.origin_lat,
            pixel_size=fire_hr.pixel_size,
        )

    fire_n = hr(norm.normalize_fire(fire_hr.values))
    temp_n = hr(norm.normalize_temp(temp_dev.values))
    burn_n = hr(np.clip(burnable.values, 0.0, 1.0))
    lr = [block_average_downsample(ch, scale) for ch in (fire_n, temp_n, burn_n)]
    return Sample(
        lr_input=ChannelStack(lr, INPUT_ROLES),
        hr_target=fire_n,
        year=year,
        month=month,
        region=region,
        scale=scale,
    )


# ---------------------------------------------------------------------------
# Manifests

@dataclass
class ManifestEntry:
    sample_id: str
    split: str
    year: int
    month: int
    region: str
    lr_paths: dict[str, str] | None = None
    hr_path: str | None = None


@dataclass
class DatasetManifest:
    """Split assignment plus everything needed to reload samples from disk."""

    scale: int
    norm: NormalizationSpec
    entries: list[ManifestEntry]
    seed: int | None = None
    generator: dict | None = None
    root: Path | None = None
    samples: dict[str, Sample] = field(default_factory=dict, repr=False)

    def __post_init__(self):
        ids = [e.sample_id for e in self.entries]
        if len(set(ids)) != len(ids):
            dupes = sorted({i for i in ids if ids.count(i) > 1})
            raise DataError(f"duplicate sample ids in manifest: {dupes}")
        for e in self.entries:
            if e.split not in SPLITS:
                raise DataError(f"unknown split {e.split!r} for sample {e.sample_id}")
            if e.split == "test" and e.year < TEST_FROM_YEAR:
                raise DataError(f"test sample {e.sample_id} predates {TEST_FROM_YEAR}")
            if e.split in ("train", "val") and e.year >= TEST_FROM_YEAR:
                raise DataError(f"{e.split} sample {e.sample_id} is in the test years")

    def entries_for(self, split: str, region: str | None = None) -> list[ManifestEntry]:
        return [
            e
            for e in self.entries
            if e.split == split and (region is None or e.region == region)
        ]

    def load_sample(self, entry: ManifestEntry) -> Sample:
        if entry.sample_id in self.samples:
            return self.samples[entry.sample_id]
        if self.root is None or entry.hr_path is None:
            raise DataError(f"sample {entry.sample_id} has no in-memory data and no paths")
        channels = [read_raster(self.root / entry.lr_paths[role]) for role in INPUT_ROLES]
        hr = read_raster(self.root / entry.hr_path)
        return Sample(
            lr_input=ChannelStack(channels, INPUT_ROLES),
            hr_target=hr,
            year=entry.year,
            month=entry.month,
            region=entry.region,
            scale=self.scale,
        )

    def save(self, out_dir: str | Path) -> "DatasetManifest":
        """Write rasters, ``manifest.jsonl``, and ``dataset.json`` under out_dir."""
        out_dir = Path(out_dir)
        (out_dir / "rasters").mkdir(parents=True, exist_ok=True)
        entries = []
        for entry in self.entries:
            sample = self.load_sample(entry)
            lr_paths = {}
            for role, ch in zip(sample.lr_input.roles, sample.lr_input.channels):
                rel = f"rasters/{entry.sample_id}_lr_{role}.fsr"
                write_raster(ch, out_dir / rel)
                lr_paths[role] = rel
            hr_rel = f"rasters/{entry.sample_id}_hr_fire.fsr"
            write_raster(sample.hr_target, out_dir / hr_rel)
            entries.append(
                ManifestEntry(
                    sample_id=entry.sample_id,
                    split=entry.split,
                    year=entry.year,
                    month=entry.month,
                    region=entry.region,
                    lr_paths=lr_paths,
                    hr_path=hr_rel,
                )
            )
        with open(out_dir / "manifest.jsonl", "w") as f:
            for e in entries:
                rec = {
                    "id": e.sample_id,
                    "split": e.split,
                    "year": e.year,
                    "month": e.month,
                    "region": e.region,
                    "lr": e.lr_paths,
                    "hr": e.hr_path,
                }
                f.write(json.dumps(rec, sort_keys=True, separators=(",", ":")) + "\n")
        sidecar = {
            "format_version": 1,
            "scale": self.scale,
            "norm": self.norm.to_json(),
            "seed": self.seed,
            "generator": self.generator,
            "n_samples": len(entries),
        }
        with open(out_dir / "dataset.json", "w") as f:
            f.write(json.dumps(sidecar, sort_keys=True, separators=(",", ":")) + "\n")
        return DatasetManifest(
            scale=self.scale,
            norm=self.norm,
            entries=entries,
            seed=self.seed,
            generator=self.generator,
            root=out_dir,
        )


def load_manifest(path: str | Path) -> DatasetManifest:
    """Load a dataset directory (or a path to its ``manifest.jsonl``)."""
    path = Path(path)
    root = path.parent if path.is_file() else path
    manifest_path = path if path.is_file() else root / "manifest.jsonl"
    if not manifest_path.exists():
        raise DataError(f"no manifest found at {manifest_path}")
    sidecar_path = root / "dataset.json"
    if not sidecar_path.exists():
        raise DataError(f"missing dataset sidecar {sidecar_path}")
    with open(sidecar_path) as f:
        sidecar = json.load(f)
    entries = []
    with open(manifest_path) as f:
        for line in f:
            if not line.strip():
                continue
            rec = json.loads(line)
            entries.append(
                ManifestEntry(
                    sample_id=rec["id"],
                    split=rec["split"],
                    year=int(rec["year"]),
                    month=int(rec["month"]),
                    region=rec["region"],
                    lr_paths=rec["lr"],
                    hr_path=rec["hr"],
                )
            )
    return DatasetManifest(
        scale=int(sidecar["scale"]),
        norm=NormalizationSpec.from_json(sidecar["norm"]),
        entries=entries,
        seed=sidecar.get("seed"),
        generator=sidecar.get("generator"),
        root=root,
    )


def split_manifest(
    samples: list[Sample],
    val_fraction: float,
    norm: NormalizationSpec | None = None,
    seed: int | None = None,
    region: str | None = None,
    exclude_months: list[tuple[str | None, int, int]] | None = None,
) -> DatasetManifest:
    """Assign samples to temporal splits and assemble an in-memory manifest.

    Years up to 2016 become train/val with the validation set taken as the
    chronologically last ``val_fraction`` of distinct months; years from 2017
    are test. ``region`` keeps only that region's samples (the region-subset
    retraining experiments); ``exclude_months`` drops (region-or-None, year,
    month) triples, expressing data-quality masks.
    """
    if not 0.0 <= val_fraction < 1.0:
        raise DataError(f"val_fraction must be in [0, 1), got {val_fraction}")
    kept = [s for s in samples if region is None or s.region == region]
    if exclude_months:
        masks = {(r, y, m) for r, y, m in exclude_months}

        def excluded(s: Sample) -> bool:
            return (s.region, s.year, s.month) in masks or (None, s.year, s.month) in masks

        kept = [s for s in kept if not excluded(s)]
    if not kept:
        raise DataError("no samples left after region/month filtering")
    scales = {s.scale for s in kept}
    if len(scales) != 1:
        raise DataError(f"samples mix scales {sorted(scales)}")
    for s in kept:
        if not YEAR_RANGE[0] <= s.year <= YEAR_RANGE[1]:
            raise DataError(
                f"sample {s.sample_id} outside supported years {YEAR_RANGE}"
            )
    kept.sort(key=lambda s: (s.year, s.month, s.region))

    pre = [s for s in kept if s.year < TEST_FROM_YEAR]
    test = [s for s in kept if s.year >= TEST_FROM_YEAR]
    months = sorted({(s.year, s.month) for s in pre})
    n_val_months = int(round(val_fraction * len(months)))
    if val_fraction > 0 and n_val_months == 0:
        raise DataError(
            f"val_fraction {val_fraction} selects 0 of {len(months)} months; "
            "increase the fraction or add months"
        )
    val_months = set(months[len(months) - n_val_months :])

    entries = []
    sample_map = {}
    for s in kept:
        if s.year >= TEST_FROM_YEAR:
            split = "test"
        elif (s.year, s.month) in val_months:
            split = "val"
        else:
            split = "train"
        entries.append(
            ManifestEntry(
                sample_id=s.sample_id,
                split=split,
                year=s.year,
                month=s.month,
                region=s.region,
            )
        )
        sample_map[s.sample_id] = s
    n_train = sum(1 for e in entries if e.split == "train")
    if n_train == 0:
        raise DataError("train split is empty (no months before 2017 outside the val tail)")
    if not test:
        raise DataError("test split is empty (no months in 2017 or later)")
    return DatasetManifest(
        scale=kept[0].scale,
        norm=norm or NormalizationSpec(),
        entries=entries,
        seed=seed,
        samples=sample_map,
    )


# ---------------------------------------------------------------------------
# Synthetic data

def _smooth_noise(
    rng: np.random.Generator, height: int, width: int, coarseness: int = 8
) -> np.ndarray:
    """Spatially coherent noise in [0, 1]: coarse uniform grid, bilinearly blown up."""
    ch = max(2, height // coarseness)
    cw = max(2, width // coarseness)
    coarse = Raster(values=rng.uniform(0.0, 1.0, size=(ch, cw)))
    return bilinear_resample(coarse, width, height).values


def _smoothstep(x: np.ndarray) -> np.ndarray:
    x = np.clip(x, 0.0, 1.0)
    return x * x * (3.0 - 2.0 * x)


def synth_generate(
    seed: int,
    n_months: int,
    hr_width: int,
    hr_height: int,
    scale: int,
    regions: tuple[str, ...] = ("SYN",),
    start_year: int = 2005,
    start_month: int = 1,
    norm: NormalizationSpec | None = None,
) -> list[Sample]:
    """Deterministic synthetic stand-in for the satellite-derived channels.

    Per region: a time-invariant burnable map (smoothed noise, softly
    thresholded to [0, 1] with genuine zero areas), monthly temperature
    deviations (smooth noise plus a sinusoidal seasonal term), and fire counts
    as spatially coherent blobs placed where burnability and warm deviations
    coincide, with intensity proportional to burnable * max(0, temp_dev),
    quantized to counts in [0, 254].
    """
    if hr_width % scale or hr_height % scale:
        raise DataError(
            f"HR dims {hr_width}x{hr_height} not divisible by scale {scale}"
        )
    if n_months < 1:
        raise DataError("n_months must be >= 1")
    end_index = start_month - 1 + n_months - 1
    end_year = start_year + end_index // 12
    if start_year < YEAR_RANGE[0] or end_year > YEAR_RANGE[1]:
        raise DataError(
            f"months {start_year}-{start_month:02d} plus {n_months} run past "
            f"supported years {YEAR_RANGE}"
        )
    norm = norm or NormalizationSpec()

    samples = []
    region_fields = {}
    for r_idx, region in enumerate(regions):
        rng = np.random.default_rng([seed, r_idx])
        raw = _smooth_noise(rng, hr_height, hr_width)
        burn = _smoothstep((raw - 0.40) / 0.35)
        base_temp = _smooth_noise(rng, hr_height, hr_width) * 2.0 - 1.0
        # southern-hemisphere-style regions peak half a year later
        phase = 6.0 * (r_idx % 2)
        region_fields[region] = (burn, base_temp, phase)

    for i in range(n_months):
        year = start_year + (start_month - 1 + i) // 12
        month = (start_month - 1 + i) % 12 + 1
        for r_idx, region in enumerate(regions):
            burn, base_temp, phase = region_fields[region]
            rng = np.random.default_rng([seed, r_idx, i])
            seasonal = 4.0 * np.sin(2.0 * np.pi * (month - 4 - phase) / 12.0)
            noise = (_smooth_noise(rng, hr_height, hr_width) * 2.0 - 1.0) * 2.5
            temp_dev = seasonal + noise + base_temp

            warm = np.maximum(temp_dev, 0.0) / norm.temp_halfrange
            suitability = burn * warm
            counts = np.zeros((hr_height, hr_width))
            weight = suitability.ravel() ** 2
            total = weight.sum()
            if total > 0:
                n_blobs = int(rng.poisson(40.0 * suitability.mean() / 0.05))
                if n_blobs > 0:
                    centers = rng.choice(
                        hr_height * hr_width, size=n_blobs, p=weight / total
                    )
                    yy, xx = np.mgrid[0:hr_height, 0:hr_width]
                    intensity = np.zeros((hr_height, hr_width))
                    for c in centers:
                        cy, cx = divmod(int(c), hr_width)
                        sigma = rng.uniform(1.2, 3.5)
                        amp = rng.uniform(0.4, 1.6)
                        d2 = (yy - cy) ** 2 + (xx - cx) ** 2
                        intensity += amp * np.exp(-d2 / (2.0 * sigma * sigma))
                    intensity *= suitability / max(suitability.max(), 1e-12)
                    counts = np.rint(np.clip(intensity, 0.0, 1.0) * norm.fire_cap)

            geo = {"origin_lon": -125.0 + 40.0 * r_idx, "origin_lat": 50.0, "pixel_size": 0.1}
            fire = Raster(values=counts, **geo)
            temp = Raster(values=temp_dev, **geo)
            burn_r = Raster(values=burn, **geo)
            samples.append(
                build_sample(fire, temp, burn_r, scale, norm, year, month, region)
            )
    return samples
