"""
Classifier, domain discriminator, the two-player losses and inference.
"""

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from schemas import NUM_CLASSES, Domain, ExpressionLabel, RunConfig
from agra.errors import AuditError, StateError, ValidationError
from agra.features import FaceSample, RegionFeatureExtractor, xavier_init_
from agra.graph_adapter import GraphAdapter, init_node_batch, propagate

LOGIT_CLAMP = 50.0


class GradientReversal(torch.autograd.Function):
    """Identity forward, gradient scaled by -lambda backward."""

    @staticmethod
    def forward(ctx, x, lambd):
        ctx.lambd = lambd
        return x.view_as(x)

    @staticmethod
    def backward(ctx, grad_output):
        return grad_output.neg() * ctx.lambd, None


def grad_reverse(x: torch.Tensor, lambd: float = 1.0) -> torch.Tensor:
    return GradientReversal.apply(x, lambd)


# ---------------------------
# Heads
# ---------------------------
class ExpressionClassifier(nn.Module):
    """Affine map from F(x) to seven expression scores."""

    def __init__(self, in_dim: int = 384, num_classes: int = NUM_CLASSES):
        super().__init__()
        self.in_dim = in_dim
        self.fc = nn.Linear(in_dim, num_classes)

    def forward(self, features: torch.Tensor) -> torch.Tensor:
        if features.shape[-1] != self.in_dim:
            raise ValidationError(f"classifier expects {self.in_dim}-dim features, got {features.shape[-1]}")
        return self.fc(features)


class DomainDiscriminator(nn.Module):
    """Two hidden affine+ReLU layers and a single domain logit (source = 1)."""

    def __init__(self, in_dim: int = 384, hidden: int = 128):
        super().__init__()
        self.in_dim = in_dim
        self.net = nn.Sequential(
            nn.Linear(in_dim, hidden),
            nn.ReLU(),
            nn.Linear(hidden, hidden),
            nn.ReLU(),
            nn.Linear(hidden, 1),
        )

    def forward(self, features: torch.Tensor) -> torch.Tensor:
        if features.shape[-1] != self.in_dim:
            raise ValidationError(f"discriminator expects {self.in_dim}-dim features, got {features.shape[-1]}")
        return self.net(features).squeeze(-1)


def classify(features: torch.Tensor, classifier: ExpressionClassifier) -> torch.Tensor:
    if not torch.isfinite(features).all():
        raise ValidationError("features must be finite")
    return classifier(features)


def discriminate(features: torch.Tensor, discriminator: DomainDiscriminator) -> torch.Tensor:
    if not torch.isfinite(features).all():
        raise ValidationError("features must be finite")
    return discriminator(features)


# ---------------------------
# Losses
# ---------------------------
def classification_loss(logits: torch.Tensor, labels: torch.Tensor, domains: torch.Tensor | None = None) -> torch.Tensor:
    """Mean cross-entropy. Passing `domains` audits that no target-domain label is used."""
    if domains is not None and (torch.as_tensor(domains) == Domain.TARGET).any():
        raise AuditError("a target-domain label reached the classification loss")
    labels = torch.as_tensor(labels, dtype=torch.long, device=logits.device)
    if labels.numel() == 0:
        raise ValidationError("empty label batch")
    if (labels < 0).any() or (labels >= logits.shape[-1]).any():
        raise ValidationError(f"labels must lie in [0, {logits.shape[-1] - 1}]")
    return F.cross_entropy(logits, labels)


def domain_adversarial_loss(source_logits: torch.Tensor, target_logits: torch.Tensor) -> torch.Tensor:
    """L(F, G, D) = -E_s log σ(D) - E_t log(1 - σ(D)), logits clamped to ±50."""
    if source_logits.numel() == 0 or target_logits.numel() == 0:
        raise ValidationError("adversarial loss needs nonempty source and target batches")
    s = source_logits.clamp(-LOGIT_CLAMP, LOGIT_CLAMP)
    t = target_logits.clamp(-LOGIT_CLAMP, LOGIT_CLAMP)
    return (
        F.binary_cross_entropy_with_logits(s, torch.ones_like(s))
        + F.binary_cross_entropy_with_logits(t, torch.zeros_like(t))
    )


# ---------------------------
# Model
# ---------------------------
class AGRAModel(nn.Module):
    """Region extractor + graph adapter + classifier + discriminator."""

    def __init__(self, cfg: RunConfig):
        super().__init__()
        self.extractor = RegionFeatureExtractor(cfg.backbone)
        self.adapter = GraphAdapter(cfg.graph)
        self.classifier = ExpressionClassifier(self.adapter.output_dim)
        self.discriminator = DomainDiscriminator(self.adapter.output_dim, cfg.train.disc_hidden)
        for module in self.extractor.heads() + [self.classifier, self.discriminator]:
            xavier_init_(module)

    def region_features(self, images: torch.Tensor, landmarks: torch.Tensor) -> torch.Tensor:
        return self.extractor(images, landmarks)

    def adapted_features(self, stacks: torch.Tensor, domains: torch.Tensor, bank=None) -> torch.Tensor:
        H0 = init_node_batch(stacks, domains, bank)
        return propagate(H0, self.adapter, domains, fuse=self.extractor.fuse)

    def forward(self, images, landmarks, domains, bank=None) -> tuple[torch.Tensor, torch.Tensor]:
        features = self.adapted_features(self.region_features(images, landmarks), domains, bank)
        return features, self.classifier(features)

    def feature_parameters(self) -> list[nn.Parameter]:
        """Parameters of F and G (everything but the discriminator) that require grad."""
        return [p for name, p in self.named_parameters()
                if not name.startswith("discriminator.") and p.requires_grad]

    def discriminator_parameters(self) -> list[nn.Parameter]:
        return list(self.discriminator.parameters())


# ---------------------------
# Inference
# ---------------------------
@dataclass(frozen=True)
class Prediction:
    label: ExpressionLabel
    scores: torch.Tensor


def predict_batch(images: torch.Tensor, landmarks: torch.Tensor, model: AGRAModel, bank) -> tuple[torch.Tensor, torch.Tensor]:
    """Treat inputs as target-domain samples: own nodes from the extracted stack,
    source nodes from the nearest source-class distributions. Returns (labels, scores)."""
    if bank is None or not bank.populated:
        raise StateError("prediction needs a populated distribution bank")
    model.eval()
    with torch.no_grad():
        domains = torch.full((images.shape[0],), int(Domain.TARGET), dtype=torch.long)
        features, scores = model(images, landmarks, domains, bank)
    return scores.argmax(dim=1), scores


def predict(sample: FaceSample, model: AGRAModel, bank) -> Prediction:
    labels, scores = predict_batch(
        sample.image.unsqueeze(0), sample.landmarks.as_tensor().unsqueeze(0), model, bank
    )
    return Prediction(label=ExpressionLabel(int(labels[0])), scores=scores[0])
