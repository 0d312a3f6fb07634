"""Procedural rain-streak synthesis and labeled dataset construction.

Rainy images follow the additive observation model: a rainy image equals the
clean background plus a nonnegative rain layer. The rain layer is achromatic
(one channel, replicated over RGB) and is produced by thresholding seeded
uniform noise at the label's pixel-coverage level, motion-blurring it along a
streak orientation, scaling by a brightness, and softening with a small
Gaussian blur.

Array conventions: color images are float arrays of shape (H, W, 3) with
values in [0, 1]; rain layers are (H, W). On disk everything is 8-bit PNG
(3-channel for clean/rainy, single-channel for the rain layer), composed in
integer arithmetic so the additive identity holds exactly as stored.
"""

from __future__ import annotations

import dataclasses
import json
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

from .density import ALL_LABELS, COVERAGE_BANDS, DensityLabel
from .errors import EmptyCleanDir, ShapeMismatch, ShapeTooSmall, WriteFailure

MANIFEST_SCHEMA_VERSION = 1

# Ancillary synthesis ranges: orientation from vertical, streak length in px,
# additive brightness, and post-blur sigma. Tuned for 64-128 px images.
ORIENTATION_RANGE_DEG = (-45.0, 45.0)
STREAK_LENGTH_RANGE = (8, 24)
INTENSITY_RANGE = (0.4, 1.0)
BLUR_SIGMA_RANGE = (0.0, 0.5)


@dataclasses.dataclass(frozen=True)
class RainParams:
    """Full recipe for one rain layer; identical params give identical layers."""

    coverage: float
    streak_length: int
    orientation_deg: float
    intensity: float
    blur_sigma: float
    seed: int

    def __post_init__(self):
        if not 0.0 <= self.coverage <= 1.0:
            raise ValueError(f"coverage must be in [0,1], got {self.coverage}")
        if self.streak_length < 1:
            raise ValueError(f"streak_length must be >= 1, got {self.streak_length}")
        if self.intensity <= 0.0:
            raise ValueError(f"intensity must be > 0, got {self.intensity}")
        if self.blur_sigma < 0.0:
            raise ValueError(f"blur_sigma must be >= 0, got {self.blur_sigma}")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RainParams":
        return cls(
            coverage=float(d["coverage"]),
            streak_length=int(d["streak_length"]),
            orientation_deg=float(d["orientation_deg"]),
            intensity=float(d["intensity"]),
            blur_sigma=float(d["blur_sigma"]),
            seed=int(d["seed"]),
        )


@dataclasses.dataclass
class SamplePair:
    """One dataset record: clean image, rain layer, composed rainy image."""

    clean: np.ndarray  # (H, W, 3) in [0, 1]
    rain: np.ndarray  # (H, W) in [0, 1]
    rainy: np.ndarray  # (H, W, 3) in [0, 1]
    label: DensityLabel
    params: RainParams


def density_to_params(label: DensityLabel, rng: np.random.Generator) -> RainParams:
    """Draw a full rain recipe for a density label.

    Coverage comes from the label's band; the remaining knobs come from the
    module-level ranges. All draws consume `rng` in a fixed order.
    """
    label = DensityLabel(label)
    lo, hi = COVERAGE_BANDS[label]
    coverage = float(rng.uniform(lo, hi))
    orientation = float(rng.uniform(*ORIENTATION_RANGE_DEG))
    length = int(rng.integers(STREAK_LENGTH_RANGE[0], STREAK_LENGTH_RANGE[1] + 1))
    intensity = float(rng.uniform(*INTENSITY_RANGE))
    blur_sigma = float(rng.uniform(*BLUR_SIGMA_RANGE))
    seed = int(rng.integers(0, 2**63 - 1))
    return RainParams(
        coverage=coverage,
        streak_length=length,
        orientation_deg=orientation,
        intensity=intensity,
        blur_sigma=blur_sigma,
        seed=seed,
    )


def _motion_blur_kernel(length: int, angle_deg: float) -> np.ndarray:
    """Normalized line kernel of `length` px, `angle_deg` away from vertical."""
    n = int(length)
    if n == 1:
        return np.ones((1, 1))
    size = n if n % 2 == 1 else n + 1
    kernel = np.zeros((size, size))
    center = (size - 1) / 2.0
    theta = np.deg2rad(angle_deg)
    dy, dx = np.cos(theta), np.sin(theta)
    for t in np.linspace(-(n - 1) / 2.0, (n - 1) / 2.0, n):
        y, x = center + t * dy, center + t * dx
        y0, x0 = int(np.floor(y)), int(np.floor(x))
        fy, fx = y - y0, x - x0
        for yy, xx, w in (
            (y0, x0, (1 - fy) * (1 - fx)),
            (y0 + 1, x0, fy * (1 - fx)),
            (y0, x0 + 1, (1 - fy) * fx),
            (y0 + 1, x0 + 1, fy * fx),
        ):
            if 0 <= yy < size and 0 <= xx < size and w > 0:
                kernel[yy, xx] += w
    return kernel / kernel.sum()


def render_streaks(params: RainParams, shape: tuple[int, int]) -> np.ndarray:
    """Render a single-channel rain layer of the given (H, W) shape.

    Pipeline: seed uniform noise at `coverage`, threshold, motion-blur along
    `orientation_deg` with a kernel of `streak_length` px, scale by
    `intensity`, Gaussian-blur by `blur_sigma`, clip to [0, 1].
    """
    h, w = int(shape[0]), int(shape[1])
    if h < params.streak_length or w < params.streak_length:
        raise ShapeTooSmall(
            f"shape {(h, w)} smaller than streak_length {params.streak_length}"
        )
    rng = np.random.default_rng(params.seed)
    noise = rng.random((h, w))
    mask = (noise < params.coverage).astype(np.float64)
    kernel = _motion_blur_kernel(params.streak_length, params.orientation_deg)
    streaks = ndimage.convolve(mask, kernel, mode="constant", cval=0.0)
    layer = params.intensity * streaks
    if params.blur_sigma > 0:
        layer = ndimage.gaussian_filter(layer, params.blur_sigma)
    return np.clip(layer, 0.0, 1.0)


def compose(clean: np.ndarray, rain: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Add a rain layer to a clean image; returns (rainy, rain_stored).

    rainy = clip(clean + rain, 0, 1) and rain_stored = rainy - clean, so the
    returned triple satisfies the additive identity exactly even where the
    sum clipped. A single-channel rain layer broadcasts over color channels.
    """
    clean = np.asarray(clean, dtype=np.float64)
    rain = np.asarray(rain, dtype=np.float64)
    if np.any(rain < 0):
        raise ValueError("rain layer must be nonnegative")
    if rain.shape != clean.shape:
        if clean.ndim == 3 and rain.shape == clean.shape[:2]:
            rain = rain[..., None]
        else:
            raise ShapeMismatch(
                f"clean shape {clean.shape} incompatible with rain shape {rain.shape}"
            )
    rainy = np.clip(clean + rain, 0.0, 1.0)
    rain_stored = rainy - clean
    return rainy, rain_stored


def compose_u8(clean_u8: np.ndarray, rain_layer: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Integer-domain composition used for on-disk samples.

    The rain layer is quantized to 8 bits and clamped per pixel to the
    headroom left by the brightest color channel, so the stored rainy image
    equals clean + rain exactly in uint8 arithmetic while the rain layer
    stays a single channel.
    """
    r_u8 = np.rint(np.clip(rain_layer, 0.0, 1.0) * 255.0).astype(np.uint16)
    headroom = 255 - clean_u8.astype(np.uint16).max(axis=2)
    r_eff = np.minimum(r_u8, headroom).astype(np.uint8)
    rainy_u8 = (clean_u8.astype(np.uint16) + r_eff[..., None].astype(np.uint16)).astype(
        np.uint8
    )
    return rainy_u8, r_eff


@dataclasses.dataclass
class ManifestRecord:
    clean_path: str
    rainy_path: str
    rain_path: str
    label: DensityLabel
    shape: tuple[int, int]
    params: RainParams

    def to_dict(self) -> dict:
        return {
            "clean_path": self.clean_path,
            "rainy_path": self.rainy_path,
            "rain_path": self.rain_path,
            "label": self.label.name.lower(),
            "shape": list(self.shape),
            "params": self.params.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ManifestRecord":
        return cls(
            clean_path=d["clean_path"],
            rainy_path=d["rainy_path"],
            rain_path=d["rain_path"],
            label=DensityLabel.from_name(d["label"]),
            shape=tuple(d["shape"]),
            params=RainParams.from_dict(d["params"]),
        )


@dataclasses.dataclass
class DatasetManifest:
    """Index of a generated dataset; paths are relative to the manifest file."""

    records: list[ManifestRecord]
    counts_per_label: dict[DensityLabel, int]
    global_seed: int
    schema_version: int = MANIFEST_SCHEMA_VERSION
    root: Path | None = None  # directory containing the manifest; not serialized

    def __len__(self) -> int:
        return len(self.records)

    def resolve(self, rel_path: str) -> Path:
        if self.root is None:
            raise ValueError("manifest has no root directory set")
        return self.root / rel_path

    def save(self, path: Path) -> None:
        path = Path(path)
        payload = {
            "schema_version": self.schema_version,
            "global_seed": self.global_seed,
            "counts_per_label": {
                label.name.lower(): self.counts_per_label.get(label, 0)
                for label in ALL_LABELS
            },
            "records": [r.to_dict() for r in self.records],
        }
        path.write_text(json.dumps(payload, indent=2) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: Path) -> "DatasetManifest":
        path = Path(path)
        payload = json.loads(path.read_text(encoding="utf-8"))
        records = [ManifestRecord.from_dict(d) for d in payload["records"]]
        counts = {
            DensityLabel.from_name(name): int(n)
            for name, n in payload["counts_per_label"].items()
        }
        return cls(
            records=records,
            counts_per_label=counts,
            global_seed=int(payload["global_seed"]),
            schema_version=int(payload["schema_version"]),
            root=path.parent,
        )

    def load_pair_u8(self, record: ManifestRecord) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Return (clean, rainy, rain) as stored, in uint8."""
        clean = load_image_u8(self.resolve(record.clean_path))
        rainy = load_image_u8(self.resolve(record.rainy_path))
        rain = load_image_u8(self.resolve(record.rain_path))
        return clean, rainy, rain

    def load_pair(self, record: ManifestRecord) -> SamplePair:
        """Return the record as float arrays in [0, 1]."""
        clean_u8, rainy_u8, rain_u8 = self.load_pair_u8(record)
        return SamplePair(
            clean=clean_u8.astype(np.float32) / 255.0,
            rain=rain_u8.astype(np.float32) / 255.0,
            rainy=rainy_u8.astype(np.float32) / 255.0,
            label=record.label,
            params=record.params,
        )


def load_image_u8(path: Path) -> np.ndarray:
    """Decode an image file to uint8; (H, W, 3) for color, (H, W) for gray."""
    with Image.open(path) as img:
        if img.mode == "L":
            return np.asarray(img, dtype=np.uint8)
        return np.asarray(img.convert("RGB"), dtype=np.uint8)


def save_image_u8(arr: np.ndarray, path: Path) -> None:
    path = Path(path)
    try:
        if arr.ndim == 2:
            Image.fromarray(arr, mode="L").save(path, format="PNG")
        else:
            Image.fromarray(arr, mode="RGB").save(path, format="PNG")
    except OSError as exc:
        raise WriteFailure(f"could not write {path}: {exc}") from exc


def _list_clean_images(clean_dir: Path) -> list[Path]:
    exts = {".png", ".jpg", ".jpeg", ".bmp"}
    files = sorted(p for p in Path(clean_dir).iterdir() if p.suffix.lower() in exts)
    usable = []
    for p in files:
        try:
            with Image.open(p) as img:
                img.verify()
            usable.append(p)
        except Exception:
            continue
    return usable


def build_dataset(
    clean_dir: Path,
    per_label_count: int,
    seed: int,
    out_dir: Path,
) -> DatasetManifest:
    """Synthesize a balanced labeled dataset under `out_dir`.

    Writes 3 * per_label_count sample triples (clean/rainy/rain PNGs) plus
    manifest.json. Fully reproducible from (clean_dir contents, seed): clean
    images are cycled in sorted filename order and all random draws come from
    one seeded generator.
    """
    if per_label_count < 1:
        raise ValueError("per_label_count must be >= 1")
    clean_dir = Path(clean_dir)
    if not clean_dir.is_dir():
        raise EmptyCleanDir(f"clean image directory not found: {clean_dir}")
    clean_files = _list_clean_images(clean_dir)
    if not clean_files:
        raise EmptyCleanDir(f"no decodable images in {clean_dir}")

    out_dir = Path(out_dir)
    images_dir = out_dir / "images"
    try:
        images_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise WriteFailure(f"could not create {images_dir}: {exc}") from exc

    rng = np.random.default_rng(seed)
    records: list[ManifestRecord] = []
    counts = {label: 0 for label in ALL_LABELS}
    index = 0
    for i in range(per_label_count):
        for label in ALL_LABELS:
            clean_u8 = load_image_u8(clean_files[index % len(clean_files)])
            if clean_u8.ndim == 2:
                clean_u8 = np.stack([clean_u8] * 3, axis=-1)
            h, w = clean_u8.shape[:2]
            params = density_to_params(label, rng)
            if params.streak_length > min(h, w):
                params = dataclasses.replace(params, streak_length=min(h, w))
            layer = render_streaks(params, (h, w))
            rainy_u8, rain_u8 = compose_u8(clean_u8, layer)

            stem = f"{index:05d}_{label.name.lower()}"
            rec = ManifestRecord(
                clean_path=f"images/{stem}_clean.png",
                rainy_path=f"images/{stem}_rainy.png",
                rain_path=f"images/{stem}_rain.png",
                label=label,
                shape=(h, w),
                params=params,
            )
            save_image_u8(clean_u8, out_dir / rec.clean_path)
            save_image_u8(rainy_u8, out_dir / rec.rainy_path)
            save_image_u8(rain_u8, out_dir / rec.rain_path)
            records.append(rec)
            counts[label] += 1
            index += 1

    manifest = DatasetManifest(
        records=records,
        counts_per_label=counts,
        global_seed=int(seed),
        root=out_dir,
    )
    manifest.save(out_dir / "manifest.json")
    return manifest


def generate_clean_images(
    out_dir: Path,
    count: int,
    size: tuple[int, int] = (80, 80),
    seed: int = 0,
) -> list[Path]:
    """Write `count` procedural clean test images (smooth fields + shapes)."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    h, w = size
    paths = []
    for i in range(count):
        base = rng.random((8, 8, 3))
        img = ndimage.zoom(base, (h / 8.0, w / 8.0, 1.0), order=1)
        img = img[:h, :w, :]
        # a few flat shapes so the field has edges to preserve
        yy, xx = np.mgrid[0:h, 0:w]
        for _ in range(int(rng.integers(2, 6))):
            color = rng.random(3)
            if rng.random() < 0.5:
                y0, x0 = rng.integers(0, h - 8), rng.integers(0, w - 8)
                dy, dx = rng.integers(6, h // 2), rng.integers(6, w // 2)
                img[y0 : y0 + dy, x0 : x0 + dx, :] = color
            else:
                cy, cx = rng.integers(0, h), rng.integers(0, w)
                r = rng.integers(4, min(h, w) // 3)
                mask = (yy - cy) ** 2 + (xx - cx) ** 2 < r**2
                img[mask] = color
        img = ndimage.gaussian_filter(img, sigma=(1.0, 1.0, 0.0))
        # keep some headroom so rain stays visible on bright regions
        img = 0.1 + 0.75 * np.clip(img, 0.0, 1.0)
        arr = np.rint(img * 255.0).astype(np.uint8)
        path = out_dir / f"clean_{i:04d}.png"
        save_image_u8(arr, path)
        paths.append(path)
    return paths
