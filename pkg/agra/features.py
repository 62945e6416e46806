"""
Feature extraction: backbone registry, holistic/local heads and landmark cropping.

Maps are channel-first. A backbone turns a [B, 3, 112, 112] batch into a
stage-2 map [B, 128, 28, 28] and a stage-4 map [B, 512, 7, 7]; the heads
reduce those to one 64-dim vector per region in the order h, le, re, no, lm, rm.
"""

from dataclasses import dataclass
from typing import Callable

import torch
import torch.nn as nn
import torchvision

from schemas import (
    IMAGE_SIZE,
    LANDMARK_REGIONS,
    REGIONS,
    BackboneConfig,
    Domain,
    ExpressionLabel,
)
from agra.errors import ConfigError, ValidationError

FEATURE_DIM = 64
STAGE2_SHAPE = (128, 28, 28)
STAGE4_SHAPE = (512, 7, 7)
CROP_SIZE = 7
MAP_SCALE = STAGE2_SHAPE[1] / IMAGE_SIZE  # 0.25
FUSION_MODES = ("BH", "BL", "BHL")


# ---------------------------
# Domain types
# ---------------------------
@dataclass(frozen=True)
class LandmarkSet:
    """Five facial landmarks as (x, y) pixel coordinates."""
    le: tuple[float, float]
    re: tuple[float, float]
    no: tuple[float, float]
    lm: tuple[float, float]
    rm: tuple[float, float]

    def __post_init__(self):
        for name in LANDMARK_REGIONS:
            point = getattr(self, name)
            if len(point) != 2:
                raise ValidationError(f"landmark {name} must be a 2-D point, got {point}")
            _check_landmark(point)

    @classmethod
    def from_points(cls, points) -> "LandmarkSet":
        points = [tuple(float(v) for v in p) for p in points]
        if len(points) != 5:
            raise ValidationError(f"expected 5 landmarks, got {len(points)}")
        return cls(*points)

    def as_tensor(self) -> torch.Tensor:
        return torch.tensor([getattr(self, name) for name in LANDMARK_REGIONS], dtype=torch.float32)


@dataclass(frozen=True)
class FaceSample:
    """One face image ([3, 112, 112], values in [0, 1]) with its landmarks."""
    image: torch.Tensor
    landmarks: LandmarkSet
    domain: Domain
    label: ExpressionLabel | None = None
    id: str = ""

    def __post_init__(self):
        if tuple(self.image.shape) != (3, IMAGE_SIZE, IMAGE_SIZE):
            raise ValidationError(
                f"image must have shape (3, {IMAGE_SIZE}, {IMAGE_SIZE}), got {tuple(self.image.shape)}"
            )
        if self.image.numel() and (self.image.min() < 0 or self.image.max() > 1):
            raise ValidationError("image values must lie in [0, 1]")


@dataclass(frozen=True)
class RegionFeatureStack:
    """Six 64-dim region vectors of one sample, rows ordered as REGIONS."""
    features: torch.Tensor
    domain: Domain

    def __post_init__(self):
        if tuple(self.features.shape) != (len(REGIONS), FEATURE_DIM):
            raise ValidationError(f"stack must be (6, 64), got {tuple(self.features.shape)}")
        if not torch.isfinite(self.features).all():
            raise ValidationError("stack contains non-finite values")

    def __getitem__(self, region: str) -> torch.Tensor:
        return self.features[REGIONS.index(region)]

    def as_dict(self) -> dict[str, torch.Tensor]:
        return {name: self.features[i] for i, name in enumerate(REGIONS)}

    def concat(self) -> torch.Tensor:
        return self.features.reshape(-1)


@dataclass(frozen=True)
class BackboneOutput:
    stage2_map: torch.Tensor
    stage4_map: torch.Tensor


def _check_landmark(point) -> None:
    x, y = float(point[0]), float(point[1])
    if not (0 <= x <= IMAGE_SIZE - 1 and 0 <= y <= IMAGE_SIZE - 1):
        raise ValidationError(f"landmark ({x}, {y}) outside [0, {IMAGE_SIZE - 1}]")


def _check_shape(tensor: torch.Tensor, shape: tuple[int, ...], what: str) -> bool:
    """Returns True when the tensor carries a leading batch axis."""
    if tuple(tensor.shape) == shape:
        return False
    if tensor.dim() == len(shape) + 1 and tuple(tensor.shape[1:]) == shape:
        return True
    raise ValidationError(f"{what} must have shape {shape} (optionally batched), got {tuple(tensor.shape)}")


# ---------------------------
# Backbones
# ---------------------------
BACKBONES: dict[str, Callable[[BackboneConfig], nn.Module]] = {}


def register_backbone(name: str):
    def decorator(factory):
        BACKBONES[name] = factory
        return factory
    return decorator


class ToyBackbone(nn.Module):
    """Four strided stages emitting the canonical stage-2 / stage-4 shapes (~43k parameters)."""

    def __init__(self):
        super().__init__()
        self.stage1 = nn.Sequential(nn.Conv2d(3, 8, 3, stride=2, padding=1), nn.ReLU())      # 56
        self.stage2 = nn.Sequential(nn.Conv2d(8, 128, 3, stride=2, padding=1), nn.ReLU())    # 28
        self.stage3 = nn.Sequential(nn.Conv2d(128, 32, 2, stride=2), nn.ReLU())              # 14
        self.stage4 = nn.Sequential(nn.AvgPool2d(2), nn.Conv2d(32, 512, 1), nn.ReLU())       # 7

    def forward(self, x: torch.Tensor) -> BackboneOutput:
        s2 = self.stage2(self.stage1(x))
        s4 = self.stage4(self.stage3(s2))
        return BackboneOutput(stage2_map=s2, stage4_map=s4)


class ResNetBackbone(nn.Module):
    """torchvision ResNet without the stem max-pool so a 112 input yields 28x28 / 7x7 maps."""

    def __init__(self, arch: str):
        super().__init__()
        net = getattr(torchvision.models, arch)(weights=None)
        self.stem = nn.Sequential(net.conv1, net.bn1, net.relu)
        self.layer1, self.layer2, self.layer3, self.layer4 = net.layer1, net.layer2, net.layer3, net.layer4
        c4 = net.fc.in_features
        c2 = c4 // 4
        self.proj2 = nn.Identity() if c2 == STAGE2_SHAPE[0] else nn.Conv2d(c2, STAGE2_SHAPE[0], 1)
        self.proj4 = nn.Identity() if c4 == STAGE4_SHAPE[0] else nn.Conv2d(c4, STAGE4_SHAPE[0], 1)

    def forward(self, x: torch.Tensor) -> BackboneOutput:
        s2 = self.layer2(self.layer1(self.stem(x)))
        s4 = self.layer4(self.layer3(s2))
        return BackboneOutput(stage2_map=self.proj2(s2), stage4_map=self.proj4(s4))


class MobileNetV2Backbone(nn.Module):
    def __init__(self):
        super().__init__()
        features = torchvision.models.mobilenet_v2(weights=None).features
        self.low = features[:4]     # stride 4, 24 channels
        self.high = features[4:14]  # stride 16, 96 channels
        self.proj2 = nn.Conv2d(24, STAGE2_SHAPE[0], 1)
        self.proj4 = nn.Conv2d(96, STAGE4_SHAPE[0], 1)

    def forward(self, x: torch.Tensor) -> BackboneOutput:
        s2 = self.low(x)
        s4 = self.high(s2)
        return BackboneOutput(stage2_map=self.proj2(s2), stage4_map=self.proj4(s4))


register_backbone("toy")(lambda cfg: ToyBackbone())
register_backbone("resnet18")(lambda cfg: ResNetBackbone("resnet18"))
register_backbone("resnet50")(lambda cfg: ResNetBackbone("resnet50"))
register_backbone("mobilenetv2")(lambda cfg: MobileNetV2Backbone())


class BackboneHandle(nn.Module):
    """A registered backbone plus the input checks and optional mean/std normalization."""

    def __init__(self, name: str, net: nn.Module, mean=None, std=None):
        super().__init__()
        self.name = name
        self.net = net
        if (mean is None) != (std is None):
            raise ConfigError("backbone.mean and backbone.std must be set together")
        self.normalize = mean is not None
        self.register_buffer("mean", torch.tensor(mean or (0.0, 0.0, 0.0)).view(1, 3, 1, 1))
        self.register_buffer("std", torch.tensor(std or (1.0, 1.0, 1.0)).view(1, 3, 1, 1))

    def forward(self, images: torch.Tensor) -> BackboneOutput:
        if images.dim() != 4 or tuple(images.shape[1:]) != (3, IMAGE_SIZE, IMAGE_SIZE):
            raise ValidationError(
                f"images must have shape (B, 3, {IMAGE_SIZE}, {IMAGE_SIZE}), got {tuple(images.shape)}"
            )
        if self.normalize:
            images = (images - self.mean) / self.std
        out = self.net(images)
        if tuple(out.stage2_map.shape[1:]) != STAGE2_SHAPE or tuple(out.stage4_map.shape[1:]) != STAGE4_SHAPE:
            raise ValidationError(f"backbone '{self.name}' produced unexpected map shapes")
        return out


def build_backbone(cfg: BackboneConfig) -> BackboneHandle:
    if cfg.name not in BACKBONES:
        raise ConfigError(f"Unknown backbone '{cfg.name}'. Known: {sorted(BACKBONES)}")
    net = BACKBONES[cfg.name](cfg)
    if cfg.pretrained_path:
        state = torch.load(cfg.pretrained_path, map_location="cpu")
        missing, unexpected = net.load_state_dict(state, strict=False)
        print(f"[BACKBONE] Loaded {cfg.pretrained_path} (missing={len(missing)}, unexpected={len(unexpected)})")
    return BackboneHandle(cfg.name, net, cfg.mean, cfg.std)


def run_backbone(sample: FaceSample, backbone: BackboneHandle) -> BackboneOutput:
    """Run one sample through the backbone; returns unbatched maps."""
    out = backbone(sample.image.unsqueeze(0))
    return BackboneOutput(stage2_map=out.stage2_map[0], stage4_map=out.stage4_map[0])


# ---------------------------
# Heads
# ---------------------------
class RegionHead(nn.Module):
    """Convolution to 64 channels, rectifier, global average pooling."""

    def __init__(self, in_channels: int, kernel_size: int = 1):
        super().__init__()
        self.proj = nn.Conv2d(in_channels, FEATURE_DIM, kernel_size, padding=kernel_size // 2)
        self.in_channels = in_channels

    def project(self, fmap: torch.Tensor) -> torch.Tensor:
        return torch.relu(self.proj(fmap))

    def forward(self, fmap: torch.Tensor) -> torch.Tensor:
        return self.project(fmap).mean(dim=(-2, -1))


def extract_holistic(stage4_map: torch.Tensor, head: RegionHead) -> torch.Tensor:
    batched = _check_shape(stage4_map, STAGE4_SHAPE, "stage4_map")
    out = head(stage4_map if batched else stage4_map.unsqueeze(0))
    return out if batched else out[0]


def extract_local(crop: torch.Tensor, head: RegionHead) -> torch.Tensor:
    batched = _check_shape(crop, (STAGE2_SHAPE[0], CROP_SIZE, CROP_SIZE), "crop")
    out = head(crop if batched else crop.unsqueeze(0))
    return out if batched else out[0]


# ---------------------------
# Landmark cropping
# ---------------------------
def window_origin(landmarks: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Top-left (row, col) of the 7x7 window for landmarks given as [..., 2] (x, y)."""
    grid = STAGE2_SHAPE[1]
    centers = torch.floor(landmarks.to(torch.float64) * MAP_SCALE + 0.5).long()
    origin = (centers - CROP_SIZE // 2).clamp(0, grid - CROP_SIZE)
    return origin[..., 1], origin[..., 0]


def crop_local_maps(stage2_maps: torch.Tensor, landmarks: torch.Tensor) -> torch.Tensor:
    """Batched crop: maps [B, C, 28, 28], landmarks [B, 2] -> [B, C, 7, 7]."""
    if landmarks.numel() and (landmarks.min() < 0 or landmarks.max() > IMAGE_SIZE - 1):
        raise ValidationError(f"landmarks outside [0, {IMAGE_SIZE - 1}]")
    rows0, cols0 = window_origin(landmarks)
    offsets = torch.arange(CROP_SIZE, device=stage2_maps.device)
    rows = rows0.to(stage2_maps.device)[:, None] + offsets
    cols = cols0.to(stage2_maps.device)[:, None] + offsets
    batch = torch.arange(stage2_maps.shape[0], device=stage2_maps.device)[:, None, None]
    patches = stage2_maps[batch, :, rows[:, :, None], cols[:, None, :]]  # [B, 7, 7, C]
    return patches.permute(0, 3, 1, 2)


def crop_local_map(stage2_map: torch.Tensor, landmark) -> torch.Tensor:
    """Crop the 7x7 window around one landmark from an unbatched [128, 28, 28] map."""
    _check_shape(stage2_map, STAGE2_SHAPE, "stage2_map")
    _check_landmark(landmark)
    point = torch.as_tensor(landmark, dtype=torch.float64).view(1, 2)
    return crop_local_maps(stage2_map.unsqueeze(0), point)[0]


# ---------------------------
# Region feature extractor
# ---------------------------
class RegionFeatureExtractor(nn.Module):
    """Backbone + holistic head + five local heads + BL/BHL fusion layers."""

    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        self.backbone = build_backbone(cfg)
        self.holistic_head = RegionHead(STAGE4_SHAPE[0], cfg.holistic_kernel)
        if cfg.share_local_heads:
            shared = RegionHead(STAGE2_SHAPE[0], cfg.local_kernel)
            self.local_heads = nn.ModuleList([shared] * len(LANDMARK_REGIONS))
        else:
            self.local_heads = nn.ModuleList(
                [RegionHead(STAGE2_SHAPE[0], cfg.local_kernel) for _ in LANDMARK_REGIONS]
            )
        self.fuse_local = nn.Sequential(nn.Linear(5 * FEATURE_DIM, FEATURE_DIM), nn.ReLU())
        self.fuse_all = nn.Sequential(nn.Linear(6 * FEATURE_DIM, FEATURE_DIM), nn.ReLU())

    def heads(self) -> list[nn.Module]:
        return [self.holistic_head, self.local_heads, self.fuse_local, self.fuse_all]

    def forward(self, images: torch.Tensor, landmarks: torch.Tensor) -> torch.Tensor:
        """images [B, 3, 112, 112], landmarks [B, 5, 2] -> stacks [B, 6, 64]."""
        out = self.backbone(images)
        vectors = [self.holistic_head(out.stage4_map)]
        for i, head in enumerate(self.local_heads):
            vectors.append(head(crop_local_maps(out.stage2_map, landmarks[:, i])))
        return torch.stack(vectors, dim=1)

    def fuse(self, stacks: torch.Tensor, mode: str) -> torch.Tensor:
        """BH / BL / BHL features for batched stacks [B, 6, 64] -> [B, 64]."""
        if mode == "BH":
            return stacks[:, 0]
        if mode == "BL":
            return self.fuse_local(stacks[:, 1:].flatten(1))
        if mode == "BHL":
            return self.fuse_all(stacks.flatten(1))
        raise ConfigError(f"Unknown fusion mode '{mode}'. Known: {FUSION_MODES}")


def extract_region_stack(sample: FaceSample, extractor: RegionFeatureExtractor) -> RegionFeatureStack:
    out = run_backbone(sample, extractor.backbone)
    vectors = [extract_holistic(out.stage4_map, extractor.holistic_head)]
    for name, head in zip(LANDMARK_REGIONS, extractor.local_heads):
        crop = crop_local_map(out.stage2_map, getattr(sample.landmarks, name))
        vectors.append(extract_local(crop, head))
    return RegionFeatureStack(features=torch.stack(vectors), domain=sample.domain)


def fused_feature(stack: RegionFeatureStack, mode: str, extractor: RegionFeatureExtractor) -> torch.Tensor:
    return extractor.fuse(stack.features.unsqueeze(0), mode)[0]


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


def xavier_init_(module: nn.Module) -> None:
    """Xavier-uniform weights and zero biases for newly added layers."""
    for m in module.modules():
        if isinstance(m, (nn.Linear, nn.Conv2d)):
            nn.init.xavier_uniform_(m.weight)
            if m.bias is not None:
                nn.init.zeros_(m.bias)


