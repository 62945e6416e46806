"""
Tests for backbones, region heads, landmark cropping and BH/BL/BHL fusion.
"""

import pytest
import torch
import torch.nn as nn

from schemas import BackboneConfig, Domain, REGIONS
from agra.errors import ConfigError, ValidationError
from agra.features import (
    BACKBONES,
    FaceSample,
    LandmarkSet,
    RegionFeatureExtractor,
    RegionHead,
    build_backbone,
    count_parameters,
    crop_local_map,
    crop_local_maps,
    extract_holistic,
    extract_local,
    extract_region_stack,
    fused_feature,
    run_backbone,
    window_origin,
)

POINTS = [(38.0, 44.0), (74.0, 44.0), (56.0, 64.0), (42.0, 84.0), (70.0, 84.0)]


def _zero_(module: nn.Module) -> None:
    with torch.no_grad():
        for p in module.parameters():
            p.zero_()


def _sample(image=None, points=POINTS) -> FaceSample:
    if image is None:
        image = torch.rand(3, 112, 112, generator=torch.Generator().manual_seed(1))
    return FaceSample(image=image, landmarks=LandmarkSet.from_points(points), domain=Domain.SOURCE)


class TestBackbone:
    def test_toy_backbone_is_small(self):
        assert count_parameters(build_backbone(BackboneConfig(name="toy")).net) <= 50_000

    def test_map_shapes(self):
        out = run_backbone(_sample(), build_backbone(BackboneConfig(name="toy")))
        assert tuple(out.stage2_map.shape) == (128, 28, 28)
        assert tuple(out.stage4_map.shape) == (512, 7, 7)

    def test_zero_weights_give_zero_maps(self):
        backbone = build_backbone(BackboneConfig(name="toy"))
        _zero_(backbone)
        out = run_backbone(_sample(torch.zeros(3, 112, 112)), backbone)
        assert torch.count_nonzero(out.stage2_map) == 0
        assert torch.count_nonzero(out.stage4_map) == 0

    def test_deterministic(self):
        torch.manual_seed(0)
        backbone = build_backbone(BackboneConfig(name="toy"))
        sample = _sample()
        a, b = run_backbone(sample, backbone), run_backbone(sample, backbone)
        assert torch.equal(a.stage2_map, b.stage2_map)
        assert torch.equal(a.stage4_map, b.stage4_map)

    def test_unknown_backbone(self):
        with pytest.raises(ConfigError):
            build_backbone(BackboneConfig(name="vgg16"))

    def test_wrong_input_shape(self):
        backbone = build_backbone(BackboneConfig(name="toy"))
        with pytest.raises(ValidationError):
            backbone(torch.zeros(1, 3, 64, 64))

    def test_registry_names(self):
        assert {"toy", "resnet18", "resnet50", "mobilenetv2"} <= set(BACKBONES)

    @pytest.mark.parametrize("name", ["resnet18", "mobilenetv2"])
    def test_torchvision_backbones_emit_canonical_shapes(self, name):
        backbone = build_backbone(BackboneConfig(name=name)).eval()
        with torch.no_grad():
            out = backbone(torch.rand(1, 3, 112, 112))
        assert tuple(out.stage2_map.shape) == (1, 128, 28, 28)
        assert tuple(out.stage4_map.shape) == (1, 512, 7, 7)


class TestSampleValidation:
    def test_image_shape(self):
        with pytest.raises(ValidationError):
            _sample(torch.zeros(3, 100, 112))

    def test_image_range(self):
        with pytest.raises(ValidationError):
            _sample(torch.full((3, 112, 112), 2.0))

    def test_landmark_bounds(self):
        with pytest.raises(ValidationError):
            LandmarkSet.from_points([(0, 0)] * 4 + [(112.0, 5.0)])

    def test_landmark_count(self):
        with pytest.raises(ValidationError):
            LandmarkSet.from_points([(0, 0)] * 4)


class TestHeads:
    def test_zero_projection_gives_zero_vector(self):
        head = RegionHead(512)
        _zero_(head)
        assert torch.count_nonzero(extract_holistic(torch.rand(512, 7, 7), head)) == 0

    def test_constant_projection_gives_constant(self):
        head = RegionHead(128)
        with torch.no_grad():
            head.proj.weight.zero_()
            head.proj.bias.fill_(0.75)
        out = extract_local(torch.rand(128, 7, 7), head)
        assert torch.allclose(out, torch.full((64,), 0.75))

    def test_pooling_matches_loop(self):
        g = torch.Generator().manual_seed(3)
        head = RegionHead(512)
        for _ in range(100):
            fmap = torch.randn(512, 7, 7, generator=g)
            projected = head.project(fmap.unsqueeze(0))[0]
            expected = torch.zeros(64)
            for r in range(7):
                for c in range(7):
                    expected += projected[:, r, c]
            expected /= 49
            assert torch.allclose(extract_holistic(fmap, head), expected, atol=1e-6)

    def test_shape_mismatch(self):
        with pytest.raises(ValidationError):
            extract_holistic(torch.rand(512, 8, 8), RegionHead(512))
        with pytest.raises(ValidationError):
            extract_local(torch.rand(64, 7, 7), RegionHead(128))

    def test_head_gradients_match_finite_differences(self):
        torch.manual_seed(0)
        head = RegionHead(128).double()
        crop = torch.rand(2, 128, 7, 7, dtype=torch.float64)
        weight = head.proj.weight.detach().clone().requires_grad_(True)
        # a large bias keeps every pre-activation away from the rectifier kink
        bias = torch.full_like(head.proj.bias, 5.0).requires_grad_(True)

        def loss_fn(w, b):
            out = torch.func.functional_call(head, {"proj.weight": w, "proj.bias": b}, (crop,))
            return (out ** 2).sum()

        assert torch.autograd.gradcheck(loss_fn, (weight, bias), eps=1e-4, atol=1e-6, rtol=1e-4)


class TestCropping:
    @pytest.mark.parametrize("point, origin", [
        ((56.0, 56.0), (11, 11)),
        ((0.0, 0.0), (0, 0)),
        ((111.0, 111.0), (21, 21)),
        ((56.0, 40.0), (7, 11)),
    ])
    def test_window_origin(self, point, origin):
        row0, col0 = window_origin(torch.tensor(point))
        assert (int(row0), int(col0)) == origin

    def test_crop_equals_slice(self):
        fmap = torch.randn(128, 28, 28)
        crop = crop_local_map(fmap, (56.0, 40.0))
        assert torch.equal(crop, fmap[:, 7:14, 11:18])

    def test_batched_crop_matches_single(self):
        maps = torch.randn(3, 128, 28, 28)
        points = torch.tensor([[56.0, 56.0], [0.0, 111.0], [100.0, 3.0]])
        batched = crop_local_maps(maps, points)
        for i in range(3):
            assert torch.equal(batched[i], crop_local_map(maps[i], tuple(points[i].tolist())))

    def test_out_of_bounds_landmark(self):
        with pytest.raises(ValidationError):
            crop_local_map(torch.zeros(128, 28, 28), (-1.0, 10.0))

    def test_changes_outside_window_do_not_matter(self):
        head = RegionHead(128)
        fmap = torch.randn(128, 28, 28)
        before = extract_local(crop_local_map(fmap, (56.0, 56.0)), head)
        fmap[:, :11, :] = 100.0
        fmap[:, 18:, :] = -100.0
        after = extract_local(crop_local_map(fmap, (56.0, 56.0)), head)
        assert torch.equal(before, after)


class TestRegionStack:
    def test_six_finite_regions(self):
        torch.manual_seed(0)
        stack = extract_region_stack(_sample(), RegionFeatureExtractor(BackboneConfig()))
        assert tuple(stack.features.shape) == (6, 64)
        assert set(stack.as_dict()) == set(REGIONS)
        assert torch.isfinite(stack.features).all()
        assert stack.domain == Domain.SOURCE

    def test_zero_weights_give_zero_stack(self):
        extractor = RegionFeatureExtractor(BackboneConfig())
        _zero_(extractor)
        stack = extract_region_stack(_sample(), extractor)
        assert torch.count_nonzero(stack.features) == 0

    def test_landmarks_move_only_local_vectors(self):
        torch.manual_seed(0)
        extractor = RegionFeatureExtractor(BackboneConfig())
        image = torch.rand(3, 112, 112, generator=torch.Generator().manual_seed(5))
        moved = [(10.0, 10.0), (100.0, 10.0), (56.0, 100.0), (10.0, 100.0), (100.0, 100.0)]
        a = extract_region_stack(_sample(image), extractor)
        b = extract_region_stack(_sample(image, moved), extractor)
        assert torch.equal(a["h"], b["h"])
        assert not torch.equal(a.features[1:], b.features[1:])

    def test_batched_forward_matches_single_sample(self, images, landmarks):
        torch.manual_seed(0)
        extractor = RegionFeatureExtractor(BackboneConfig())
        batched = extractor(images, landmarks)
        for i in range(len(images)):
            sample = FaceSample(image=images[i], landmarks=LandmarkSet.from_points(landmarks[i].tolist()),
                                domain=Domain.TARGET)
            assert torch.allclose(batched[i], extract_region_stack(sample, extractor).features, atol=1e-5)

    def test_shared_local_heads(self):
        extractor = RegionFeatureExtractor(BackboneConfig(share_local_heads=True))
        assert all(head is extractor.local_heads[0] for head in extractor.local_heads)
        assert len({id(h) for h in RegionFeatureExtractor(BackboneConfig()).local_heads}) == 5


class TestFusion:
    def test_bh_is_passthrough(self):
        extractor = RegionFeatureExtractor(BackboneConfig())
        stack = extract_region_stack(_sample(), extractor)
        assert torch.equal(fused_feature(stack, "BH", extractor), stack["h"])

    @pytest.mark.parametrize("mode", ["BL", "BHL"])
    def test_fused_dimension(self, mode):
        extractor = RegionFeatureExtractor(BackboneConfig())
        stack = extract_region_stack(_sample(), extractor)
        assert fused_feature(stack, mode, extractor).shape == (64,)

    def test_bhl_zero_weights(self):
        extractor = RegionFeatureExtractor(BackboneConfig())
        _zero_(extractor.fuse_all)
        stack = extract_region_stack(_sample(), extractor)
        assert torch.count_nonzero(fused_feature(stack, "BHL", extractor)) == 0

    def test_unknown_mode(self):
        extractor = RegionFeatureExtractor(BackboneConfig())
        with pytest.raises(ConfigError):
            extractor.fuse(torch.zeros(1, 6, 64), "HLF")
