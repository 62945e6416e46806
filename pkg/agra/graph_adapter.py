"""
Two-domain region graph and the stacked intra-/inter-domain GCNs.

Node order is fixed: the six source regions followed by the six target
regions, each in REGIONS order. A sample's own-domain rows hold its extracted
features; the other domain's rows hold the nearest class distributions of the
bank. After propagation the own-domain rows are concatenated into F(x).
"""

from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np
import torch
import torch.nn as nn

from schemas import REGIONS, Domain, GraphConfig
from agra.errors import ConfigError, StateError, ValidationError
from agra.features import FEATURE_DIM, RegionFeatureStack

NODE_ORDER = tuple(f"s.{r}" for r in REGIONS) + tuple(f"t.{r}" for r in REGIONS)
NUM_NODES = len(NODE_ORDER)
NODES_PER_DOMAIN = len(REGIONS)
HIDDEN_DIM = 128
INIT_MODES = ("prior", "random", "ones")
GRAPH_MODES = ("full", "intra_only", "inter_only", "single", "holistic_only", "concat")
BYPASS_MODES = ("holistic_only", "concat")


@dataclass(frozen=True)
class GraphSpec:
    """Prior adjacency matrices over NODE_ORDER."""
    a_intra: torch.Tensor
    a_inter: torch.Tensor
    node_order: tuple[str, ...] = NODE_ORDER


@dataclass(frozen=True)
class NodeFeatureMatrix:
    H: torch.Tensor
    stage: str = "initial"

    def __post_init__(self):
        if self.H.shape[-2] != NUM_NODES or self.H.shape[-1] not in (FEATURE_DIM, HIDDEN_DIM):
            raise ValidationError(f"node matrix must be (12, 64|128), got {tuple(self.H.shape)}")
        if self.stage not in ("initial", "post_intra", "post_inter"):
            raise ValidationError(f"unknown node matrix stage '{self.stage}'")
        if not torch.isfinite(self.H).all():
            raise ValidationError("node matrix contains non-finite values")


def node_index(name: str) -> int:
    return NODE_ORDER.index(name)


def intra_mask() -> torch.Tensor:
    """Same-domain pairs without the diagonal."""
    same = torch.zeros(NUM_NODES, NUM_NODES, dtype=torch.bool)
    same[:NODES_PER_DOMAIN, :NODES_PER_DOMAIN] = True
    same[NODES_PER_DOMAIN:, NODES_PER_DOMAIN:] = True
    return same & ~torch.eye(NUM_NODES, dtype=torch.bool)


def inter_mask() -> torch.Tensor:
    cross = torch.zeros(NUM_NODES, NUM_NODES, dtype=torch.bool)
    cross[:NODES_PER_DOMAIN, NODES_PER_DOMAIN:] = True
    cross[NODES_PER_DOMAIN:, :NODES_PER_DOMAIN] = True
    return cross


def build_prior_adjacency(cfg: GraphConfig, generator: torch.Generator | None = None) -> GraphSpec:
    if cfg.init not in INIT_MODES:
        raise ConfigError(f"Unknown graph.init '{cfg.init}'. Known: {INIT_MODES}")

    if cfg.init == "ones":
        return GraphSpec(intra_mask().float(), inter_mask().float())

    if cfg.init == "random":
        mats = []
        for mask in (intra_mask(), inter_mask()):
            upper = torch.triu(torch.rand(NUM_NODES, NUM_NODES, generator=generator), diagonal=1)
            mats.append((upper + upper.T) * mask.float())
        return GraphSpec(*mats)

    e = cfg.edges
    a_intra = torch.zeros(NUM_NODES, NUM_NODES)
    a_inter = torch.zeros(NUM_NODES, NUM_NODES)
    n = NODES_PER_DOMAIN
    for base in (0, n):
        for i in range(n):
            for j in range(i + 1, n):
                value = e.holistic_local if i == 0 else e.local_local
                a_intra[base + i, base + j] = a_intra[base + j, base + i] = value
    for i in range(n):
        for j in range(n):
            holistic = (i == 0) + (j == 0)
            value = (e.inter_local_local, e.inter_holistic_local, e.inter_holistic)[holistic]
            a_inter[i, n + j] = a_inter[n + j, i] = value
    return GraphSpec(a_intra, a_inter)


def normalize_adjacency(A: torch.Tensor) -> torch.Tensor:
    """D^-1/2 (A + I) D^-1/2 with D the degree matrix of A + I."""
    if A.dim() != 2 or A.shape[0] != A.shape[1]:
        raise ValidationError(f"adjacency must be square, got {tuple(A.shape)}")
    if (A < 0).any() or not torch.allclose(A, A.T):
        raise ValidationError("adjacency must be symmetric and nonnegative")
    A = A + torch.eye(A.shape[0], dtype=A.dtype, device=A.device)
    d = A.sum(dim=1).rsqrt()
    return d[:, None] * A * d[None, :]


def init_node_batch(stacks: torch.Tensor, domains: torch.Tensor, bank=None) -> torch.Tensor:
    """stacks [B, 6, 64], domains [B] -> H0 [B, 12, 64].

    Without a bank (stage-1 training) the other domain's rows are zero.
    """
    if bank is None:
        other = torch.zeros_like(stacks)
    else:
        other_domain = 1 - domains
        clusters = bank.assign_batch(stacks, other_domain)
        other = bank.means[other_domain.to(bank.means.device), clusters].to(stacks)
    is_source = (domains == Domain.SOURCE).to(stacks.device).view(-1, 1, 1)
    source_rows = torch.where(is_source, stacks, other)
    target_rows = torch.where(is_source, other, stacks)
    return torch.cat([source_rows, target_rows], dim=1)


def init_nodes(stack: RegionFeatureStack, bank) -> NodeFeatureMatrix:
    if bank is None or not bank.populated:
        raise StateError("distribution bank is not populated")
    domains = torch.tensor([int(stack.domain)])
    H = init_node_batch(stack.features.unsqueeze(0), domains, bank)[0]
    return NodeFeatureMatrix(H=H, stage="initial")


def gcn_layer(H: torch.Tensor, A_hat: torch.Tensor, W: torch.Tensor, activation: str | Callable = "relu") -> torch.Tensor:
    """H' = activation(Â H W); H may carry a leading batch axis."""
    n = A_hat.shape[0]
    if A_hat.dim() != 2 or A_hat.shape[1] != n or H.shape[-2] != n:
        raise ValidationError(f"Â {tuple(A_hat.shape)} does not match H {tuple(H.shape)}")
    if W.dim() != 2 or H.shape[-1] != W.shape[0]:
        raise ValidationError(f"W {tuple(W.shape)} does not match H {tuple(H.shape)}")
    out = A_hat @ H @ W
    if activation == "relu":
        return torch.relu(out)
    if activation == "identity":
        return out
    if callable(activation):
        return activation(out)
    raise ConfigError(f"Unknown activation '{activation}'")


def intra_dims(layers: int) -> list[int]:
    if layers == 1:
        return [FEATURE_DIM, FEATURE_DIM]
    return [FEATURE_DIM] + [HIDDEN_DIM] * (layers - 1) + [FEATURE_DIM]


def validate_graph_config(cfg: GraphConfig) -> None:
    if cfg.mode not in GRAPH_MODES:
        raise ConfigError(f"Unknown graph.mode '{cfg.mode}'. Known: {GRAPH_MODES}")
    if cfg.init not in INIT_MODES:
        raise ConfigError(f"Unknown graph.init '{cfg.init}'. Known: {INIT_MODES}")
    needs_intra = cfg.mode in ("full", "intra_only", "single")
    needs_inter = cfg.mode in ("full", "inter_only", "single")
    if needs_intra and cfg.intra_layers < 1:
        raise ConfigError(f"graph.mode={cfg.mode} conflicts with graph.intra_layers={cfg.intra_layers}")
    if needs_inter and cfg.inter_layers < 1:
        raise ConfigError(f"graph.mode={cfg.mode} conflicts with graph.inter_layers={cfg.inter_layers}")
    if cfg.intra_layers < 0 or cfg.inter_layers < 0:
        raise ConfigError("layer counts must be nonnegative")


class GraphAdapter(nn.Module):
    """Learnable Â_intra / Â_inter and the GCN weight stacks."""

    def __init__(self, cfg: GraphConfig, generator: torch.Generator | None = None):
        super().__init__()
        validate_graph_config(cfg)
        self.mode = cfg.mode
        self.final_activation = cfg.final_activation
        self.freeze_adjacency = cfg.freeze_adjacency

        spec = build_prior_adjacency(cfg, generator)
        trainable = not cfg.freeze_adjacency
        self.a_intra = nn.Parameter(normalize_adjacency(spec.a_intra), requires_grad=trainable)
        self.a_inter = nn.Parameter(normalize_adjacency(spec.a_inter), requires_grad=trainable)

        dims = intra_dims(max(cfg.intra_layers, 1))
        self.intra_weights = nn.ParameterList(
            [nn.Parameter(torch.empty(dims[i], dims[i + 1])) for i in range(max(cfg.intra_layers, 1))]
        )
        self.inter_weights = nn.ParameterList(
            [nn.Parameter(torch.empty(FEATURE_DIM, FEATURE_DIM)) for _ in range(max(cfg.inter_layers, 1))]
        )
        for w in list(self.intra_weights) + list(self.inter_weights):
            nn.init.xavier_uniform_(w)

    @property
    def output_dim(self) -> int:
        return FEATURE_DIM if self.mode in BYPASS_MODES else NODES_PER_DOMAIN * FEATURE_DIM

    def layer_plan(self) -> list[tuple[torch.Tensor, torch.Tensor]]:
        """(Â, W) pairs in application order for the configured mode."""
        if self.mode == "full":
            return [(self.a_intra, w) for w in self.intra_weights] + [(self.a_inter, w) for w in self.inter_weights]
        if self.mode == "intra_only":
            return [(self.a_intra, w) for w in self.intra_weights]
        if self.mode == "inter_only":
            return [(self.a_inter, w) for w in self.inter_weights]
        if self.mode == "single":
            merged = self.a_intra + self.a_inter
            return [(merged, w) for w in list(self.intra_weights) + list(self.inter_weights)]
        return []

    def forward(self, H0: torch.Tensor, domains: torch.Tensor) -> torch.Tensor:
        """H0 [B, 12, 64], domains [B] -> F(x) [B, 384]."""
        H = H0
        plan = self.layer_plan()
        for i, (A_hat, W) in enumerate(plan):
            last = i == len(plan) - 1
            activation = "relu" if (self.final_activation or not last) else "identity"
            H = gcn_layer(H, A_hat, W, activation)
        return own_domain_rows(H, domains).flatten(1)


def own_domain_rows(H: torch.Tensor, domains: torch.Tensor) -> torch.Tensor:
    """Rows of each sample's own domain: [B, 12, d] -> [B, 6, d]."""
    offsets = domains.to(H.device).long().view(-1, 1) * NODES_PER_DOMAIN
    index = offsets + torch.arange(NODES_PER_DOMAIN, device=H.device)
    return torch.gather(H, 1, index.unsqueeze(-1).expand(-1, -1, H.shape[-1]))


def propagate(
    H0: torch.Tensor,
    adapter: GraphAdapter,
    domains: torch.Tensor,
    fuse: Callable[[torch.Tensor, str], torch.Tensor] | None = None,
) -> torch.Tensor:
    """Adapted features for batched initial node matrices.

    The holistic_only / concat modes bypass the graph and return the BH / BHL
    feature of the own-domain rows.
    """
    if adapter.mode in BYPASS_MODES:
        stacks = own_domain_rows(H0, domains)
        if adapter.mode == "holistic_only":
            return stacks[:, 0]
        if fuse is None:
            raise ConfigError("graph.mode=concat needs the extractor's fusion layer")
        return fuse(stacks, "BHL")
    return adapter(H0, domains)


def save_adjacency(adapter: GraphAdapter, out_dir: str | Path) -> list[Path]:
    """Write Â_intra and Â_inter as plain-text numeric matrices."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for name, matrix in (("intra", adapter.a_intra), ("inter", adapter.a_inter)):
        path = out_dir / f"adjacency_{name}.txt"
        np.savetxt(path, matrix.detach().cpu().double().numpy(), fmt="%.8f", header=" ".join(NODE_ORDER))
        paths.append(path)
    return paths
