"""Synthetic color-confounded identity data plus PPM ingestion.

Each synthetic identity is a distinct stripe texture; each camera renders it
through a strongly colored tint whose BT.601 luminance is normalized across
cameras. Raw pixel statistics therefore group by camera (the color
confound), while grayscale versions group by identity (the texture signal).

Images on disk are binary P6 PPM files named ``<id>_c<cam>_<seq>.ppm``.
"""

from __future__ import annotations

import json
import logging
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .augment import to_grayscale

log = logging.getLogger(__name__)

FILENAME_RE = re.compile(r"^(\d+)_c(\d+)_(\d+)\.ppm$")


@dataclass
class ImageSample:
    image: np.ndarray  # (H, W, 3) float64 in [0, 1]
    identity: int
    camera: int


@dataclass
class ReidDataset:
    samples: list[ImageSample]
    train_indices: list[int] = field(default_factory=list)
    query_indices: list[int] = field(default_factory=list)
    gallery_indices: list[int] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.samples)

    def images(self, indices) -> np.ndarray:
        return np.stack([self.samples[i].image for i in indices])

    def identities(self, indices) -> np.ndarray:
        return np.array([self.samples[i].identity for i in indices], dtype=np.int64)

    def cameras(self, indices) -> np.ndarray:
        return np.array([self.samples[i].camera for i in indices], dtype=np.int64)


@dataclass
class SyntheticSpec:
    n_identities: int = 20
    images_per_identity: int = 10
    n_cameras: int = 3
    height: int = 32
    width: int = 16
    stripe_freq_range: tuple[float, float] = (1.5, 5.0)
    stripe_amplitude: float = 0.28
    tint_strength: float = 0.14
    illumination_range: tuple[float, float] = (0.95, 1.05)
    noise_sigma: float = 0.02
    seed: int = 0

    def validate(self) -> None:
        if self.n_cameras < 2:
            raise ValueError("cross-camera evaluation needs n_cameras >= 2")
        if self.n_identities < 2 or self.images_per_identity < 1:
            raise ValueError("need at least 2 identities and 1 image per identity")
        if not 0.0 <= self.tint_strength <= 0.2:
            raise ValueError("tint_strength must stay in [0, 0.2] to avoid clipping")


def _sample_textures(spec: SyntheticSpec, rng: np.random.Generator) -> list[tuple[float, float, float]]:
    """Per-identity (orientation, frequency, phase); clashes are resampled."""
    textures: list[tuple[float, float, float]] = []
    while len(textures) < spec.n_identities:
        theta = float(rng.uniform(0.0, np.pi))
        freq = float(rng.uniform(*spec.stripe_freq_range))
        phase = float(rng.uniform(0.0, 2.0 * np.pi))
        too_close = any(
            abs(theta - t) < 0.08 and abs(freq - f) < 0.25 for t, f, _ in textures
        )
        if not too_close:
            textures.append((theta, freq, phase))
    return textures


def _camera_tints(spec: SyntheticSpec, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Per-camera additive chroma casts with exactly zero BT.601 luminance.

    Zero-luminance casts shift the RGB channels without touching the
    grayscale image, so color statistics separate cameras while the
    grayscale view is camera-free by construction.
    """
    weights = np.array([0.299, 0.587, 0.114])
    u1 = np.array([weights[1], -weights[0], 0.0])
    u1 /= np.linalg.norm(u1)
    u2 = np.cross(weights, u1)
    u2 /= np.linalg.norm(u2)
    offset = rng.uniform(0.0, 2.0 * np.pi)
    casts = []
    for c in range(spec.n_cameras):
        angle = offset + 2.0 * np.pi * c / spec.n_cameras
        cast = spec.tint_strength * (np.cos(angle) * u1 + np.sin(angle) * u2)
        casts.append(cast)
    gains = rng.uniform(*spec.illumination_range, size=spec.n_cameras)
    return np.stack(casts), gains


def _stripe_pattern(spec: SyntheticSpec, theta: float, freq: float, phase: float) -> np.ndarray:
    v, u = np.meshgrid(
        np.linspace(0.0, 1.0, spec.width), np.linspace(0.0, 1.0, spec.height)
    )
    wave = np.sin(2.0 * np.pi * freq * (u * np.cos(theta) + v * np.sin(theta)) + phase)
    return 0.5 + spec.stripe_amplitude * wave  # in [0.05, 0.95] at default amplitude


def generate(spec: SyntheticSpec) -> ReidDataset:
    """Render every (identity, camera, sequence) image; deterministic per seed."""
    spec.validate()
    rng = np.random.default_rng(np.random.SeedSequence(spec.seed))
    textures = _sample_textures(spec, rng)
    casts, gains = _camera_tints(spec, rng)
    samples: list[ImageSample] = []
    for identity in range(spec.n_identities):
        pattern = _stripe_pattern(spec, *textures[identity])
        for k in range(spec.images_per_identity):
            cam = k % spec.n_cameras
            base = gains[cam] * pattern[..., None] + casts[cam][None, None, :]
            noise = rng.normal(0.0, spec.noise_sigma, size=base.shape) if spec.noise_sigma > 0 else 0.0
            img = np.clip(base + noise, 0.0, 1.0)
            samples.append(ImageSample(image=img, identity=identity, camera=cam))
    return ReidDataset(samples=samples)


def split(dataset: ReidDataset, rng: np.random.Generator, train_fraction: float = 0.5) -> ReidDataset:
    """Tag samples: disjoint train/eval identities, per-camera queries.

    Eval identities contribute one query image per camera whenever a
    cross-camera gallery match would remain; identities seen by a single
    camera are excluded from the eval pool with a warning.
    """
    ids = sorted({s.identity for s in dataset.samples})
    perm = rng.permutation(len(ids))
    n_train = int(round(len(ids) * train_fraction))
    train_ids = {ids[i] for i in perm[:n_train]}

    by_identity: dict[int, dict[int, list[int]]] = {}
    for idx, s in enumerate(dataset.samples):
        by_identity.setdefault(s.identity, {}).setdefault(s.camera, []).append(idx)

    train_idx: list[int] = []
    query_idx: list[int] = []
    gallery_idx: list[int] = []
    for identity in ids:
        cams = by_identity[identity]
        indices = sorted(i for lst in cams.values() for i in lst)
        if identity in train_ids:
            train_idx.extend(indices)
            continue
        if len(cams) < 2:
            log.warning("identity %d seen by a single camera; excluded from eval", identity)
            continue
        chosen: dict[int, int] = {}
        for cam in sorted(cams):
            pool = cams[cam]
            pick = pool[int(rng.integers(0, len(pool)))]
            remaining = {
                c: [i for i in lst if i != pick and i not in chosen.values()]
                for c, lst in cams.items()
            }
            if any(len(lst) > 0 for c, lst in remaining.items() if c != cam):
                chosen[cam] = pick
        query_idx.extend(sorted(chosen.values()))
        gallery_idx.extend(i for i in indices if i not in set(chosen.values()))

    return ReidDataset(
        samples=dataset.samples,
        train_indices=train_idx,
        query_indices=query_idx,
        gallery_indices=gallery_idx,
    )


# -- PPM io ------------------------------------------------------------------------


def write_ppm(path: str | Path, image: np.ndarray) -> None:
    """Binary P6 with maxval 255; pixels are rounded to the nearest byte."""
    h, w, _ = image.shape
    data = np.clip(np.rint(image * 255.0), 0, 255).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(data.tobytes())


def read_ppm(path: str | Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if raw[:2] != b"P6":
        raise ValueError(f"{path}: not a binary P6 PPM file")
    fields: list[int] = []
    pos = 2
    while len(fields) < 3:
        while pos < len(raw) and raw[pos : pos + 1].isspace():
            pos += 1
        if raw[pos : pos + 1] == b"#":  # comment to end of line
            while pos < len(raw) and raw[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos : pos + 1].isspace():
            pos += 1
        fields.append(int(raw[start:pos]))
    pos += 1  # single whitespace after maxval
    w, h, maxval = fields
    if maxval != 255:
        raise ValueError(f"{path}: unsupported maxval {maxval}")
    pixels = np.frombuffer(raw, dtype=np.uint8, count=h * w * 3, offset=pos)
    return pixels.reshape(h, w, 3).astype(np.float64) / 255.0


def save_ppm_dir(dataset: ReidDataset, out_dir: str | Path) -> list[str]:
    """Write every sample as <id>_c<cam>_<seq>.ppm; returns relative paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    counters: dict[tuple[int, int], int] = {}
    paths = []
    for s in dataset.samples:
        key = (s.identity, s.camera)
        seq = counters.get(key, 0)
        counters[key] = seq + 1
        name = f"{s.identity:04d}_c{s.camera}_{seq:03d}.ppm"
        write_ppm(out / name, s.image)
        paths.append(name)
    return paths


def load_ppm_dir(path: str | Path) -> ReidDataset:
    """Read every well-named PPM in a directory; malformed names are skipped."""
    root = Path(path)
    if not root.is_dir():
        raise FileNotFoundError(f"{path}: not a directory")
    samples = []
    for p in sorted(root.iterdir()):
        if p.suffix != ".ppm":
            continue
        m = FILENAME_RE.match(p.name)
        if m is None:
            log.warning("skipping %s: name does not match <id>_c<cam>_<seq>.ppm", p.name)
            continue
        samples.append(
            ImageSample(image=read_ppm(p), identity=int(m.group(1)), camera=int(m.group(2)))
        )
    return ReidDataset(samples=samples)


def write_manifest(path: str | Path, dataset: ReidDataset, image_paths: list[str], spec: SyntheticSpec | None = None) -> None:
    tags = {}
    for name, idxs in (
        ("train", dataset.train_indices),
        ("query", dataset.query_indices),
        ("gallery", dataset.gallery_indices),
    ):
        for i in idxs:
            tags[i] = name
    doc = {
        "images": [
            {
                "path": image_paths[i],
                "identity": s.identity,
                "camera": s.camera,
                "split": tags.get(i, "unassigned"),
            }
            for i, s in enumerate(dataset.samples)
        ],
    }
    if spec is not None:
        doc["spec"] = {k: (list(v) if isinstance(v, tuple) else v) for k, v in vars(spec).items()}
    Path(path).write_text(json.dumps(doc, indent=1))


def load_manifest(manifest_path: str | Path) -> ReidDataset:
    """Rebuild a tagged dataset from a manifest plus its sibling PPM files."""
    mpath = Path(manifest_path)
    doc = json.loads(mpath.read_text())
    samples, train_idx, query_idx, gallery_idx = [], [], [], []
    for i, entry in enumerate(doc["images"]):
        img = read_ppm(mpath.parent / entry["path"])
        samples.append(ImageSample(image=img, identity=entry["identity"], camera=entry["camera"]))
        if entry["split"] == "train":
            train_idx.append(i)
        elif entry["split"] == "query":
            query_idx.append(i)
        elif entry["split"] == "gallery":
            gallery_idx.append(i)
    return ReidDataset(samples, train_idx, query_idx, gallery_idx)


def grayscale_distance_contrast(dataset: ReidDataset) -> float:
    """Mean inter-identity over mean intra-identity grayscale pixel distance."""
    gray = [to_grayscale(s.image).ravel() for s in dataset.samples]
    ids = [s.identity for s in dataset.samples]
    intra, inter = [], []
    n = len(gray)
    for i in range(n):
        for j in range(i + 1, n):
            d = float(np.linalg.norm(gray[i] - gray[j]))
            (intra if ids[i] == ids[j] else inter).append(d)
    return float(np.mean(inter) / np.mean(intra))
