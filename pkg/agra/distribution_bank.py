"""
Per-domain, per-class, per-region statistical feature distributions.

The bank is initialised by K-means over the 384-dim concatenated region
stacks of each domain, nudged every iteration by a moving average of the
batch cluster means, and reclustered from scratch every E epochs.
"""

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from scipy.spatial.distance import cdist

from schemas import NUM_CLASSES, REGIONS, BankConfig, Domain
from agra.errors import StateError, ValidationError
from agra.features import FEATURE_DIM, RegionFeatureStack

NUM_DOMAINS = 2


# ---------------------------
# K-means
# ---------------------------
@dataclass
class KMeansResult:
    means: np.ndarray
    assignments: np.ndarray
    sse: float
    sse_history: list[float] = field(default_factory=list)
    n_iter: int = 0


def _kmeans_pp(points: np.ndarray, C: int, rng: np.random.Generator) -> np.ndarray:
    centers = [points[rng.integers(len(points))]]
    for _ in range(1, C):
        d2 = cdist(points, np.asarray(centers), "sqeuclidean").min(axis=1)
        total = d2.sum()
        if total > 0:
            idx = rng.choice(len(points), p=d2 / total)
        else:
            idx = rng.integers(len(points))
        centers.append(points[idx])
    return np.array(centers, dtype=np.float64)


def _lloyd(points: np.ndarray, centers: np.ndarray, max_iters: int) -> KMeansResult:
    C = len(centers)
    history: list[float] = []
    previous = None
    it = 0
    for it in range(1, max_iters + 1):
        d2 = cdist(points, centers, "sqeuclidean")
        assign = d2.argmin(axis=1)
        own = d2[np.arange(len(points)), assign]
        history.append(float(own.sum()))
        if previous is not None and np.array_equal(assign, previous):
            break
        previous = assign

        counts = np.bincount(assign, minlength=C)
        new_centers = centers.copy()
        for c in np.flatnonzero(counts):
            new_centers[c] = points[assign == c].mean(axis=0)
        # empty clusters jump to the points worst served by their centers
        spare = own.copy()
        for c in np.flatnonzero(counts == 0):
            idx = int(spare.argmax())
            new_centers[c] = points[idx]
            spare[idx] = -1.0
        centers = new_centers

    d2 = cdist(points, centers, "sqeuclidean")
    assign = d2.argmin(axis=1)
    sse = float(d2[np.arange(len(points)), assign].sum())
    if not history or sse < history[-1]:
        history.append(sse)
    return KMeansResult(means=centers, assignments=assign, sse=sse, sse_history=history, n_iter=it)


def kmeans(points, C: int, seed: int = 0, max_iters: int = 100, restarts: int = 1) -> KMeansResult:
    """Lloyd's algorithm with k-means++ seeding; the best of `restarts` runs by SSE.

    Not sklearn.cluster.KMeans: the bank needs the per-iteration SSE history and
    farthest-point reseeding of empty clusters, while sklearn reports only the
    final inertia and relocates empty clusters its own way.
    """
    points = np.asarray(points, dtype=np.float64)
    if points.ndim == 1:
        points = points[:, None]
    if C < 1:
        raise ValidationError(f"number of clusters must be positive, got {C}")
    if len(points) < C:
        raise ValidationError(f"{len(points)} points cannot form {C} clusters")

    rng = np.random.default_rng(seed)
    best: KMeansResult | None = None
    for _ in range(restarts):
        result = _lloyd(points, _kmeans_pp(points, C, rng), max_iters)
        if best is None or result.sse < best.sse:
            best = result
    return best


# ---------------------------
# Bank
# ---------------------------
class ClassDistributionBank:
    """Means [2 domains, C clusters, 6 regions, 64] plus the update hyper-parameters."""

    def __init__(self, num_clusters: int, alpha: float = 0.1, recluster_period: int = 10):
        if num_clusters < 1:
            raise ValidationError("bank needs at least one cluster")
        if not 0.0 < alpha < 1.0:
            raise ValidationError(f"alpha must lie in (0, 1), got {alpha}")
        if recluster_period < 1:
            raise ValidationError("recluster period must be a positive number of epochs")
        self.means = torch.zeros(NUM_DOMAINS, num_clusters, len(REGIONS), FEATURE_DIM, dtype=torch.float64)
        self.alpha = alpha
        self.recluster_period = recluster_period
        self.populated = False
        self.counts = torch.zeros(NUM_DOMAINS, num_clusters, dtype=torch.long)

    @property
    def num_clusters(self) -> int:
        return self.means.shape[1]

    def check_populated(self) -> None:
        if not self.populated:
            raise StateError("distribution bank is not populated")

    def assign_batch(self, stacks: torch.Tensor, domains) -> torch.Tensor:
        """Nearest cluster (Euclidean on the 384-dim concatenation) per stack; ties -> smallest index."""
        self.check_populated()
        with torch.no_grad():
            flat = stacks.detach().to(self.means).flatten(1)
            domains = torch.as_tensor(domains, dtype=torch.long).cpu().expand(flat.shape[0])
            centers = self.means[domains].flatten(2)
            d2 = ((flat[:, None, :] - centers) ** 2).sum(dim=-1)
            return d2.argmin(dim=1)

    def state_dict(self) -> dict:
        return {
            "means": self.means.clone(),
            "alpha": self.alpha,
            "recluster_period": self.recluster_period,
            "populated": self.populated,
            "counts": self.counts.clone(),
        }

    @classmethod
    def from_state_dict(cls, state: dict) -> "ClassDistributionBank":
        bank = cls(state["means"].shape[1], state["alpha"], state["recluster_period"])
        bank.means = state["means"].clone()
        bank.counts = state["counts"].clone()
        bank.populated = state["populated"]
        return bank

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        torch.save(self.state_dict(), path)
        return path

    @classmethod
    def load(cls, path: str | Path) -> "ClassDistributionBank":
        return cls.from_state_dict(torch.load(path, map_location="cpu"))


def cluster_region_means(stacks: torch.Tensor, assignments, C: int, fallback: torch.Tensor | None = None):
    """Per-cluster, per-region means of stacks [N, 6, 64] and the member counts."""
    stacks = stacks.detach().to(torch.float64)
    assignments = torch.as_tensor(np.asarray(assignments), dtype=torch.long)
    sums = torch.zeros(C, *stacks.shape[1:], dtype=torch.float64).index_add_(0, assignments, stacks)
    counts = torch.bincount(assignments, minlength=C)
    means = sums / counts.clamp(min=1).view(-1, 1, 1).to(sums)
    if fallback is not None and (counts == 0).any():
        means[counts == 0] = fallback[counts == 0].to(means)
    return means, counts


def _cluster_domain(stacks: torch.Tensor, C: int, seed: int, max_iters: int, restarts: int, labels=None):
    if len(stacks) == 0:
        raise ValidationError("cannot build a bank from an empty feature set")
    if labels is not None:
        labels = np.asarray(labels)
        if len(labels) != len(stacks) or (labels < 0).any() or (labels >= C).any():
            raise ValidationError("source_clusters=labels needs a valid label for every source sample")
        fallback = stacks.detach().float().mean(dim=0, keepdim=True).expand(C, -1, -1)
        return cluster_region_means(stacks, labels, C, fallback)
    result = kmeans(stacks.detach().flatten(1).double().cpu().numpy(), C, seed=seed,
                    max_iters=max_iters, restarts=restarts)
    fallback = torch.as_tensor(result.means, dtype=torch.float32).view(C, len(REGIONS), FEATURE_DIM)
    return cluster_region_means(stacks, result.assignments, C, fallback)


def initialize_bank(
    source_stacks: torch.Tensor,
    target_stacks: torch.Tensor,
    C: int = NUM_CLASSES,
    seed: int = 0,
    alpha: float = 0.1,
    recluster_period: int = 10,
    source_labels=None,
    max_iters: int = 100,
    restarts: int = 1,
) -> ClassDistributionBank:
    """Cluster each domain's stacks [N, 6, 64] into C clusters and take per-region means."""
    bank = ClassDistributionBank(C, alpha, recluster_period)
    for domain, stacks, labels in ((Domain.SOURCE, source_stacks, source_labels), (Domain.TARGET, target_stacks, None)):
        means, counts = _cluster_domain(stacks, C, seed, max_iters, restarts, labels)
        bank.means[domain] = means
        bank.counts[domain] = counts
    bank.populated = True
    print(f"[BANK] Initialised {C} clusters per domain (source sizes {bank.counts[0].tolist()}, "
          f"target sizes {bank.counts[1].tolist()})")
    return bank


def dataset_level_bank(source_stacks, target_stacks, alpha: float = 0.1, recluster_period: int = 10) -> ClassDistributionBank:
    """A single cluster per domain: the global per-region averages."""
    return initialize_bank(source_stacks, target_stacks, C=1, alpha=alpha, recluster_period=recluster_period)


def build_bank(cfg: BankConfig, source_stacks, target_stacks, seed: int, source_labels=None) -> ClassDistributionBank:
    """Bank for the configured mode (per_class / dataset_level) and source clustering."""
    if cfg.mode == "dataset_level":
        return dataset_level_bank(source_stacks, target_stacks, cfg.alpha, cfg.recluster_period)
    labels = source_labels if cfg.source_clusters == "labels" else None
    if cfg.source_clusters == "labels" and labels is None:
        raise ValidationError("bank.source_clusters=labels needs source labels")
    return initialize_bank(
        source_stacks, target_stacks, cfg.num_clusters, seed, cfg.alpha, cfg.recluster_period,
        source_labels=labels, max_iters=cfg.kmeans_iters, restarts=cfg.kmeans_restarts,
    )


def assign_cluster(stack: RegionFeatureStack, bank: ClassDistributionBank, domain: Domain) -> int:
    return int(bank.assign_batch(stack.features.unsqueeze(0), int(domain))[0])


def update_iteration(bank: ClassDistributionBank, stacks: torch.Tensor, domains: torch.Tensor,
                     alpha: float | None = None) -> ClassDistributionBank:
    """Moving-average update: μ̄ <- (1 - α) μ̄ + α μ for clusters with batch members."""
    bank.check_populated()
    alpha = bank.alpha if alpha is None else alpha
    stacks = stacks.detach()
    domains = torch.as_tensor(domains, dtype=torch.long)
    with torch.no_grad():
        for domain in domains.unique().tolist():
            members = stacks[domains == domain]
            clusters = bank.assign_batch(members, domain)
            batch_means, counts = cluster_region_means(members, clusters, bank.num_clusters)
            hit = counts > 0
            bank.means[domain, hit] = (1 - alpha) * bank.means[domain, hit] + alpha * batch_means[hit].to(bank.means)
    return bank


def should_recluster(epoch: int, period: int) -> bool:
    return epoch > 0 and epoch % period == 0


def recluster(bank: ClassDistributionBank, source_stacks, target_stacks, epoch: int, seed: int = 0,
              source_labels=None, max_iters: int = 100, restarts: int = 1) -> ClassDistributionBank:
    """Replace every mean with a fresh clustering when `epoch` is a recluster epoch; otherwise no-op."""
    bank.check_populated()
    if not should_recluster(epoch, bank.recluster_period):
        return bank
    fresh = initialize_bank(
        source_stacks, target_stacks, bank.num_clusters, seed, bank.alpha, bank.recluster_period,
        source_labels=source_labels, max_iters=max_iters, restarts=restarts,
    )
    bank.means, bank.counts = fresh.means, fresh.counts
    print(f"[BANK] Reclustered at epoch {epoch}")
    return bank
