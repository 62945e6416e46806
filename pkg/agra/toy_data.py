"""
Procedural two-domain face fixture.

Each "face" is a grey oval with five Gaussian blobs at jittered landmark
positions. The expression class sets the blob intensities, a global tint and
the mouth geometry; the target domain applies a colour cast, a contrast
change, a small geometric offset and heavier noise, so a source-only model
transfers imperfectly.
"""

from pathlib import Path

import numpy as np
from PIL import Image

from schemas import IMAGE_SIZE, NUM_CLASSES, ManifestRecord
from agra.data import write_manifest

# (x, y) of le, re, no, lm, rm on an aligned 112x112 face
BASE_LANDMARKS = np.array([[38.0, 44.0], [74.0, 44.0], [56.0, 64.0], [42.0, 84.0], [70.0, 84.0]])

# vertical mouth-corner offset per class (negative = raised)
MOUTH_SHIFT = np.array([0.0, 2.0, 3.0, -5.0, 5.0, 1.0, 0.0])
# horizontal eye spread per class
EYE_SPREAD = np.array([3.0, 2.0, -2.0, 0.0, -1.0, -3.0, 0.0])

TARGET_GAIN = np.array([1.15, 0.85, 0.75])
TARGET_BIAS = np.array([0.04, 0.0, -0.06])
TARGET_OFFSET = np.array([2.0, 1.5])


def class_signatures(num_classes: int = NUM_CLASSES, seed: int = 1234) -> tuple[np.ndarray, np.ndarray]:
    """Blob amplitudes [C, 5] and global tints [C, 3], fixed per fixture seed."""
    rng = np.random.default_rng(seed)
    amplitudes = rng.uniform(-0.4, 0.4, size=(num_classes, 5))
    tints = rng.uniform(-0.12, 0.12, size=(num_classes, 3))
    return amplitudes, tints


def _landmarks_for(label: int, domain: int, rng: np.random.Generator, shift: float) -> np.ndarray:
    points = BASE_LANDMARKS.copy()
    spread = EYE_SPREAD[label % len(EYE_SPREAD)]
    points[0, 0] -= spread
    points[1, 0] += spread
    points[3:, 1] += MOUTH_SHIFT[label % len(MOUTH_SHIFT)]
    if domain == 1:
        points += shift * TARGET_OFFSET
    points += rng.normal(0.0, 1.5, size=points.shape)
    return np.clip(points, 0.0, IMAGE_SIZE - 1)


def render_face(label: int, domain: int, rng: np.random.Generator, signatures, shift: float = 1.0):
    """Returns (uint8 image [112, 112, 3], landmarks [5, 2])."""
    amplitudes, tints = signatures
    yy, xx = np.mgrid[0:IMAGE_SIZE, 0:IMAGE_SIZE].astype(np.float64)
    centre = (IMAGE_SIZE - 1) / 2
    face = (((xx - centre) / 42.0) ** 2 + ((yy - centre - 4) / 52.0) ** 2) <= 1.0

    image = np.full((IMAGE_SIZE, IMAGE_SIZE, 3), 0.35)
    image[face] = 0.6 + tints[label]
    landmarks = _landmarks_for(label, domain, rng, shift)
    for (x, y), amp in zip(landmarks, amplitudes[label]):
        blob = np.exp(-((xx - x) ** 2 + (yy - y) ** 2) / (2 * 5.0 ** 2))
        image += amp * blob[..., None]

    noise = 0.03
    if domain == 1:
        image = image * (1 + shift * (TARGET_GAIN - 1)) + shift * TARGET_BIAS
        image = 0.5 + (image - 0.5) * (1 - 0.2 * shift)
        noise = 0.03 + 0.03 * shift
    image += rng.normal(0.0, noise, size=image.shape)
    image = np.clip(image, 0.0, 1.0)
    return (image * 255).round().astype(np.uint8), landmarks


def _splits(n: int, fractions: dict[str, float], rng: np.random.Generator) -> list[str]:
    names: list[str] = []
    for split, frac in fractions.items():
        names += [split] * int(round(frac * n))
    names = (names + [list(fractions)[0]] * n)[:n]
    return [str(s) for s in rng.permutation(names)]


def make_domain(out_dir: Path, name: str, domain: int, n: int, seed: int, fractions: dict[str, float],
                num_classes: int = NUM_CLASSES, shift: float = 1.0, signature_seed: int = 1234) -> Path:
    """Render n faces of one domain and write `<name>.jsonl` beside an images/ folder."""
    rng = np.random.default_rng(seed)
    signatures = class_signatures(num_classes, signature_seed)
    image_dir = out_dir / name / "images"
    image_dir.mkdir(parents=True, exist_ok=True)
    labels = np.arange(n) % num_classes
    rng.shuffle(labels)
    records = []
    for i, (label, split) in enumerate(zip(labels, _splits(n, fractions, rng))):
        image, landmarks = render_face(int(label), domain, rng, signatures, shift)
        rel = Path(name) / "images" / f"{i:05d}.png"
        Image.fromarray(image).save(out_dir / rel)
        records.append(ManifestRecord(
            path=rel.as_posix(), label=int(label), split=split, id=f"{name}-{i:05d}",
            landmarks=[(float(x), float(y)) for x, y in landmarks],
        ))
    return write_manifest(records, out_dir / f"{name}.jsonl")


def make_toy_dataset(out_dir: str | Path, n_source: int = 2000, n_target: int = 2000, seed: int = 0,
                     num_classes: int = NUM_CLASSES, shift: float = 1.0) -> dict[str, str]:
    """Write the toy source/target pair; returns {dataset name: manifest path}."""
    out_dir = Path(out_dir)
    source = make_domain(out_dir, "toy_source", 0, n_source, seed, {"train": 0.7, "val": 0.1, "test": 0.2},
                         num_classes, shift)
    target = make_domain(out_dir, "toy_target", 1, n_target, seed + 1, {"train": 0.7, "test": 0.3},
                         num_classes, shift)
    print(f"[TOY] Wrote {n_source} source and {n_target} target faces under {out_dir}")
    return {"toy_source": str(source), "toy_target": str(target)}
