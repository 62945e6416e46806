"""
Dataset manifests (JSON lines) and the torch Dataset that decodes them.
"""

import hashlib
import json
import warnings
from pathlib import Path

import numpy as np
import pydantic
import torch
from PIL import Image
from torch.utils.data import DataLoader, Dataset

from schemas import IMAGE_SIZE, DatasetManifest, Domain, ExpressionLabel, ManifestRecord
from agra.errors import ManifestParseError, ValidationError
from agra.features import FaceSample, LandmarkSet

# pydantic error types that mean the line is malformed rather than out of range
_PARSE_ERRORS = {
    "missing", "extra_forbidden", "model_type", "dict_type", "list_type", "tuple_type",
    "int_parsing", "int_type", "float_parsing", "float_type", "string_type", "too_short", "too_long",
}

# left/right swap applied to (le, re, no, lm, rm) under a horizontal flip
FLIP_ORDER = [1, 0, 2, 4, 3]


def load_manifest(path: str | Path, name: str | None = None) -> DatasetManifest:
    """Parse a manifest; one JSON object per line, paths relative to the manifest file."""
    path = Path(path)
    if not path.exists():
        raise ValidationError(f"manifest not found: {path}")

    records: list[ManifestRecord] = []
    with open(path) as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as e:
                raise ManifestParseError(lineno, f"invalid JSON ({e.msg})") from e
            if not isinstance(obj, dict):
                raise ManifestParseError(lineno, "record must be a JSON object")
            try:
                records.append(ManifestRecord.model_validate(obj))
            except pydantic.ValidationError as e:
                kinds = {err["type"] for err in e.errors()}
                if kinds & _PARSE_ERRORS:
                    raise ManifestParseError(lineno, str(e)) from e
                raise ValidationError(f"line {lineno}: {e}") from e

    if not records:
        warnings.warn(f"manifest {path} contains no records", UserWarning, stacklevel=2)
    return DatasetManifest(name=name or path.stem, root=str(path.parent), records=records)


def manifest_fingerprint(manifest: DatasetManifest) -> str:
    """Digest of the records plus the size and modification time of every image they name."""
    digest = hashlib.sha256(manifest.model_dump_json().encode())
    root = Path(manifest.root)
    for record in manifest.records:
        path = root / record.path
        if path.exists():
            stat = path.stat()
            digest.update(f"{record.path}:{stat.st_size}:{stat.st_mtime_ns}\n".encode())
        else:
            digest.update(f"{record.path}:missing\n".encode())
    return digest.hexdigest()[:12]


def write_manifest(records: list[ManifestRecord], path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        for record in records:
            f.write(record.model_dump_json(exclude_none=True) + "\n")
    return path


def load_image_array(path: str | Path) -> np.ndarray:
    """Decode an RGB image into uint8 [112, 112, 3]."""
    path = Path(path)
    if not path.exists():
        raise ValidationError(f"image not found: {path}")
    with Image.open(path) as img:
        array = np.asarray(img.convert("RGB"), dtype=np.uint8)
    if array.shape[:2] != (IMAGE_SIZE, IMAGE_SIZE):
        raise ValidationError(f"{path}: expected an aligned {IMAGE_SIZE}x{IMAGE_SIZE} face, got {array.shape[:2]}")
    return array


def to_image_tensor(array: np.ndarray) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(array)).permute(2, 0, 1).float().div_(255.0)


def flip_face(image: torch.Tensor, landmarks: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Mirror an image [3, H, W] and its landmarks [5, 2]; left/right points trade places."""
    flipped = landmarks[FLIP_ORDER].clone()
    flipped[:, 0] = (IMAGE_SIZE - 1) - flipped[:, 0]
    return image.flip(-1), flipped


class FaceDataset(Dataset):
    """Records of one manifest split, decoded to dicts of tensors.

    Target-domain training sets are built with hide_labels=True so that
    every item carries label -1 no matter what the manifest holds. Flips are
    drawn from (seed, epoch, index) so they do not depend on worker processes.
    """

    def __init__(self, manifest: DatasetManifest, split: str | None, domain: Domain,
                 hide_labels: bool = False, flip: bool = False, seed: int = 0, cache: bool = True):
        self.manifest = manifest
        self.records = manifest.split(split) if split else list(manifest.records)
        self.root = Path(manifest.root)
        self.domain = Domain(domain)
        self.hide_labels = hide_labels
        self.flip = flip
        self.seed = seed
        self.epoch = 0
        self._cache: dict[int, np.ndarray] | None = {} if cache else None

    def __len__(self) -> int:
        return len(self.records)

    def image_array(self, idx: int) -> np.ndarray:
        if self._cache is not None and idx in self._cache:
            return self._cache[idx]
        array = load_image_array(self.root / self.records[idx].path)
        if self._cache is not None:
            self._cache[idx] = array
        return array

    def set_epoch(self, epoch: int) -> None:
        self.epoch = epoch

    def flips(self, idx: int) -> bool:
        if not self.flip:
            return False
        g = torch.Generator().manual_seed((self.seed * 1_000_003 + self.epoch) * 1_000_003 + idx)
        return torch.rand(1, generator=g).item() < 0.5

    def labels(self) -> list[int | None]:
        return [r.label for r in self.records]

    def has_all_labels(self) -> bool:
        return all(r.label is not None for r in self.records)

    def __getitem__(self, idx: int) -> dict:
        record = self.records[idx]
        image = to_image_tensor(self.image_array(idx))
        landmarks = torch.tensor(record.landmarks, dtype=torch.float32)
        if self.flips(idx):
            image, landmarks = flip_face(image, landmarks)
        label = -1 if self.hide_labels or record.label is None else record.label
        return {
            "image": image,
            "landmarks": landmarks,
            "label": torch.tensor(label, dtype=torch.long),
            "domain": torch.tensor(int(self.domain), dtype=torch.long),
            "index": torch.tensor(idx, dtype=torch.long),
        }

    def sample(self, idx: int) -> FaceSample:
        record = self.records[idx]
        label = None if self.hide_labels or record.label is None else ExpressionLabel(record.label)
        return FaceSample(
            image=to_image_tensor(self.image_array(idx)),
            landmarks=LandmarkSet.from_points(record.landmarks),
            domain=self.domain,
            label=label,
            id=record.id or record.path,
        )


def make_loader(dataset: FaceDataset, batch_size: int, shuffle: bool = False,
                generator: torch.Generator | None = None, num_workers: int = 0) -> DataLoader:
    return DataLoader(dataset, batch_size=batch_size, shuffle=shuffle,
                      generator=generator, num_workers=num_workers)
