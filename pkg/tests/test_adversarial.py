"""
Tests for the classifier, discriminator, adversarial losses, gradient reversal and inference.
"""

import math

import pytest
import torch
import torch.nn.functional as F

from schemas import Domain, RunConfig, TrainConfig
from agra.adversarial import (
    LOGIT_CLAMP,
    AGRAModel,
    DomainDiscriminator,
    ExpressionClassifier,
    classification_loss,
    classify,
    discriminate,
    domain_adversarial_loss,
    grad_reverse,
    predict,
    predict_batch,
)
from agra.distribution_bank import ClassDistributionBank, initialize_bank
from agra.errors import AuditError, StateError, ValidationError
from agra.features import FaceSample, LandmarkSet
from agra.training import stage2_step

POINTS = [(38.0, 44.0), (74.0, 44.0), (56.0, 64.0), (42.0, 84.0), (70.0, 84.0)]


def _zero_(module):
    with torch.no_grad():
        for p in module.parameters():
            p.zero_()


def _random_bank(seed: int = 0) -> ClassDistributionBank:
    g = torch.Generator().manual_seed(seed)
    return initialize_bank(torch.rand(8, 6, 64, generator=g), torch.rand(8, 6, 64, generator=g), C=2, seed=seed)


class TestClassifier:
    def test_zero_weights_give_zero_logits(self):
        head = ExpressionClassifier()
        _zero_(head)
        logits = classify(torch.rand(3, 384), head)
        assert logits.shape == (3, 7)
        assert torch.count_nonzero(logits) == 0

    def test_bias_shift_keeps_argmax(self):
        head = ExpressionClassifier()
        features = torch.rand(5, 384)
        before = classify(features, head)
        with torch.no_grad():
            head.fc.bias += 2.5
        after = classify(features, head)
        assert torch.allclose(after, before + 2.5, atol=1e-5)
        assert torch.equal(after.argmax(dim=1), before.argmax(dim=1))

    def test_dimension_mismatch(self):
        with pytest.raises(ValidationError):
            classify(torch.rand(2, 64), ExpressionClassifier())

    def test_non_finite_features(self):
        with pytest.raises(ValidationError):
            classify(torch.full((1, 384), float("inf")), ExpressionClassifier())


class TestDiscriminator:
    def test_zero_parameters_give_even_odds(self):
        disc = DomainDiscriminator()
        _zero_(disc)
        logits = discriminate(torch.rand(4, 384), disc)
        assert logits.shape == (4,)
        assert torch.allclose(torch.sigmoid(logits), torch.full((4,), 0.5))

    def test_monotone_in_a_single_weight(self):
        disc = DomainDiscriminator(in_dim=16, hidden=8)
        with torch.no_grad():
            for p in disc.parameters():
                p.fill_(0.05)
        x = torch.rand(3, 16) + 0.1
        before = discriminate(x, disc)
        with torch.no_grad():
            disc.net[0].weight[0, 0] += 0.5
        assert (discriminate(x, disc) > before).all()

    def test_dimension_mismatch(self):
        with pytest.raises(ValidationError):
            discriminate(torch.rand(2, 100), DomainDiscriminator())


class TestLosses:
    def test_uniform_logits(self):
        loss = classification_loss(torch.zeros(4, 7), torch.tensor([0, 3, 6, 2]))
        assert loss.item() == pytest.approx(math.log(7), abs=1e-6)

    def test_saturated_logits(self):
        logits = torch.full((2, 7), -50.0)
        logits[0, 1] = logits[1, 4] = 50.0
        assert classification_loss(logits, torch.tensor([1, 4])).item() < 1e-6

    def test_batch_mean_matches_loop(self):
        logits = torch.randn(6, 7, generator=torch.Generator().manual_seed(0))
        labels = torch.tensor([0, 1, 2, 3, 4, 5])
        per_sample = [-F.log_softmax(logits[i], dim=0)[labels[i]] for i in range(6)]
        assert classification_loss(logits, labels).item() == pytest.approx(torch.stack(per_sample).mean().item(), abs=1e-6)

    def test_invalid_label(self):
        with pytest.raises(ValidationError):
            classification_loss(torch.zeros(1, 7), torch.tensor([7]))
        with pytest.raises(ValidationError):
            classification_loss(torch.zeros(1, 7), torch.tensor([-1]))

    def test_target_labels_are_audited(self):
        with pytest.raises(AuditError):
            classification_loss(torch.zeros(2, 7), torch.tensor([0, 1]), torch.tensor([0, 1]))

    def test_adversarial_zero_logits(self):
        loss = domain_adversarial_loss(torch.zeros(3), torch.zeros(5))
        assert loss.item() == pytest.approx(2 * math.log(2), abs=1e-6)

    def test_adversarial_perfect_discrimination(self):
        assert domain_adversarial_loss(torch.full((3,), 1e6), torch.full((3,), -1e6)).item() < 1e-12

    def test_adversarial_clamp_keeps_loss_finite(self):
        loss = domain_adversarial_loss(torch.full((2,), -1e9), torch.full((2,), 1e9))
        assert math.isfinite(loss.item())
        assert loss.item() == pytest.approx(2 * F.softplus(torch.tensor(LOGIT_CLAMP)).item(), rel=1e-6)

    def test_adversarial_swap_symmetry(self):
        g = torch.Generator().manual_seed(1)
        s, t = torch.randn(4, generator=g), torch.randn(6, generator=g)
        assert domain_adversarial_loss(s, t).item() == pytest.approx(domain_adversarial_loss(-t, -s).item(), abs=1e-6)

    def test_adversarial_empty_batch(self):
        with pytest.raises(ValidationError):
            domain_adversarial_loss(torch.zeros(0), torch.zeros(3))


class TestGradients:
    def test_gradient_reversal(self):
        x = torch.rand(3, 4, requires_grad=True)
        y = grad_reverse(x, 0.5)
        assert torch.equal(y, x)
        y.sum().backward()
        assert torch.allclose(x.grad, torch.full((3, 4), -0.5))

    def test_classifier_gradcheck(self):
        torch.manual_seed(0)
        head = ExpressionClassifier(in_dim=12).double()
        x = torch.rand(4, 12, dtype=torch.float64)
        labels = torch.tensor([0, 2, 4, 6])
        weight = head.fc.weight.detach().clone().requires_grad_(True)
        bias = head.fc.bias.detach().clone().requires_grad_(True)

        def loss_fn(w, b):
            return classification_loss(F.linear(x, w, b), labels)

        assert torch.autograd.gradcheck(loss_fn, (weight, bias), eps=1e-4, atol=1e-5, rtol=1e-4)

    def test_discriminator_gradcheck(self):
        torch.manual_seed(0)
        disc = DomainDiscriminator(in_dim=10, hidden=6).double()
        xs = torch.rand(3, 10, dtype=torch.float64)
        xt = torch.rand(3, 10, dtype=torch.float64) - 0.5
        names = [name for name, _ in disc.named_parameters()]
        params = tuple(p.detach().clone().requires_grad_(True) for p in disc.parameters())

        def loss_fn(*values):
            state = dict(zip(names, values))
            return domain_adversarial_loss(torch.func.functional_call(disc, state, (xs,)),
                                           torch.func.functional_call(disc, state, (xt,)))

        assert torch.autograd.gradcheck(loss_fn, params, eps=1e-4, atol=1e-5, rtol=1e-4)


class TestMinimax:
    def test_discriminator_step_lowers_its_loss(self):
        torch.manual_seed(0)
        disc = DomainDiscriminator(in_dim=32, hidden=16)
        opt = torch.optim.SGD(disc.parameters(), lr=0.01)
        fs, ft = torch.randn(8, 32) + 0.5, torch.randn(8, 32) - 0.5
        decreased = 0
        for _ in range(10):
            before = domain_adversarial_loss(disc(fs), disc(ft))
            opt.zero_grad()
            before.backward()
            opt.step()
            with torch.no_grad():
                decreased += domain_adversarial_loss(disc(fs), disc(ft)).item() < before.item()
        assert decreased > 5

    def test_feature_step_does_not_help_the_frozen_discriminator(self):
        increased = 0
        for trial in range(20):
            torch.manual_seed(trial)
            model = AGRAModel(RunConfig()).eval()
            # zero classifier: L_cls has no gradient w.r.t. the features
            _zero_(model.classifier)
            bank = _random_bank(trial)
            g = torch.Generator().manual_seed(trial)
            images = torch.rand(4, 3, 112, 112, generator=g)
            points = torch.tensor(POINTS).repeat(2, 1, 1)
            source = (images[:2], points, torch.tensor([3, 5]), torch.tensor([0, 0]))
            target = (images[2:], points, torch.tensor([-1, -1]), torch.tensor([1, 1]))
            opt_F = torch.optim.SGD(model.feature_parameters(), lr=0.01)
            opt_D = torch.optim.SGD(model.discriminator_parameters(), lr=0.0)
            frozen = {k: v.clone() for k, v in model.discriminator.state_dict().items()}

            def adversarial():
                with torch.no_grad():
                    feats_s = model.adapted_features(model.region_features(*source[:2]), source[3], bank)
                    feats_t = model.adapted_features(model.region_features(*target[:2]), target[3], bank)
                    return domain_adversarial_loss(model.discriminator(feats_s),
                                                   model.discriminator(feats_t)).item()

            before = adversarial()
            stats = stage2_step(model, bank, source, target, opt_F, opt_D, TrainConfig(weight_decay=0.0))
            for k, v in model.discriminator.state_dict().items():
                assert torch.equal(v, frozen[k])
            assert stats["L_D"] == pytest.approx(before, rel=1e-5)
            increased += adversarial() >= before
        assert increased > 10


class TestModelGradients:
    def test_end_to_end_matches_central_differences(self, images, landmarks, grad_agreement):
        torch.manual_seed(0)
        model = AGRAModel(RunConfig()).double()
        bank = _random_bank()
        x = images.double()
        domains = torch.tensor([0, 1, 1])
        labels = torch.tensor([3])

        def loss():
            feats = model.adapted_features(model.region_features(x, landmarks.double()), domains, bank)
            return classification_loss(model.classifier(feats[:1]), labels) - domain_adversarial_loss(
                model.discriminator(feats[:1]), model.discriminator(feats[1:])
            )

        params = [
            model.adapter.a_intra,
            model.adapter.a_inter,
            model.adapter.intra_weights[0],
            model.classifier.fc.weight,
            next(model.discriminator.parameters()),
            next(model.extractor.holistic_head.parameters()),
            next(model.extractor.local_heads[0].parameters()),
            next(model.extractor.backbone.parameters()),
        ]
        assert grad_agreement(loss, params) >= 0.95


class TestModel:
    def test_parameter_groups_are_disjoint(self):
        model = AGRAModel(RunConfig())
        feature_ids = {id(p) for p in model.feature_parameters()}
        disc_ids = {id(p) for p in model.discriminator_parameters()}
        assert not feature_ids & disc_ids
        assert feature_ids | disc_ids == {id(p) for p in model.parameters() if p.requires_grad}

    def test_forward_shapes(self, images, landmarks):
        model = AGRAModel(RunConfig())
        features, logits = model(images, landmarks, torch.tensor([0, 1, 1]), _random_bank())
        assert features.shape == (3, 384) and logits.shape == (3, 7)

    def test_holistic_bypass_heads_are_narrow(self):
        model = AGRAModel(RunConfig.model_validate({"graph": {"mode": "holistic_only"}}))
        assert model.classifier.in_dim == 64 and model.discriminator.in_dim == 64


class TestPredict:
    def _sample(self):
        image = torch.rand(3, 112, 112, generator=torch.Generator().manual_seed(2))
        return FaceSample(image=image, landmarks=LandmarkSet.from_points(POINTS), domain=Domain.TARGET)

    def test_scores_and_determinism(self):
        torch.manual_seed(0)
        model, bank = AGRAModel(RunConfig()), _random_bank()
        a, b = predict(self._sample(), model, bank), predict(self._sample(), model, bank)
        assert a.scores.shape == (7,)
        assert a.label == b.label
        assert int(a.label) == int(a.scores.argmax())

    def test_matches_classify_on_adapted_features(self, images, landmarks):
        torch.manual_seed(0)
        model, bank = AGRAModel(RunConfig()), _random_bank()
        labels, _ = predict_batch(images, landmarks, model, bank)
        with torch.no_grad():
            stacks = model.region_features(images, landmarks)
            feats = model.adapted_features(stacks, torch.full((3,), int(Domain.TARGET)), bank)
            expected = classify(feats, model.classifier).argmax(dim=1)
        assert torch.equal(labels, expected)

    def test_needs_populated_bank(self):
        model = AGRAModel(RunConfig())
        with pytest.raises(StateError):
            predict(self._sample(), model, ClassDistributionBank(2))
        with pytest.raises(StateError):
            predict(self._sample(), model, None)
