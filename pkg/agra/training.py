"""
Two-stage training.

Stage 1 fits the extractor, graph adapter and classifier on labelled source
data alone (other-domain nodes are zero). Stage 2 starts from that checkpoint,
builds the distribution bank and trains with the classification loss plus
the domain-adversarial game, updating the bank as it goes.
"""

import copy
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import torch
from torch.optim.lr_scheduler import ReduceLROnPlateau, StepLR
from tqdm import tqdm

from schemas import Domain, RunConfig, TrainConfig, TrainLogRecord, DatasetManifest
from agra.adversarial import AGRAModel, classification_loss, domain_adversarial_loss, grad_reverse
from agra.config import artifact_header, config_hash, get_device, seed_everything
from agra.data import FaceDataset, make_loader
from agra.distribution_bank import ClassDistributionBank, build_bank, recluster, should_recluster, update_iteration
from agra.errors import StateError, ValidationError
from agra.graph_adapter import save_adjacency

# sections whose settings change parameter shapes or semantics of a checkpoint
ARCHITECTURE_SECTIONS = ("backbone", "graph")


# ---------------------------
# Logging
# ---------------------------
class TrainLog:
    """Appends one JSON line per iteration."""

    def __init__(self, path: str | Path, cfg: RunConfig):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self.path.write_text("")
        self.header = artifact_header(cfg)

    def write(self, **fields) -> TrainLogRecord:
        record = TrainLogRecord(**fields, **self.header)
        with open(self.path, "a") as f:
            f.write(record.model_dump_json() + "\n")
        return record


def read_train_log(path: str | Path) -> list[TrainLogRecord]:
    with open(path) as f:
        return [TrainLogRecord.model_validate(json.loads(line)) for line in f if line.strip()]


# ---------------------------
# Checkpoints
# ---------------------------
def save_checkpoint(path: str | Path, *, stage: int, model: AGRAModel, cfg: RunConfig,
                    bank: ClassDistributionBank | None = None, optimizers: dict | None = None,
                    extra: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "stage": stage,
        "model": model.state_dict(),
        "bank": bank.state_dict() if bank is not None else None,
        "optimizers": {name: opt.state_dict() for name, opt in (optimizers or {}).items()},
        "config": cfg.model_dump(mode="json"),
        "rng_state": torch.get_rng_state(),
        **artifact_header(cfg),
        **(extra or {}),
    }
    # a reader never sees a partially written checkpoint
    partial = path.with_name(path.name + ".partial")
    try:
        torch.save(payload, partial)
    except BaseException:
        partial.unlink(missing_ok=True)
        raise
    os.replace(partial, path)
    print(f"[CHECKPOINT] Saved stage-{stage} checkpoint to {path}")
    return path


def load_checkpoint(path: str | Path, expected_stage: int | None = None):
    """Returns (model, bank or None, payload). Raises StateError when absent or of the wrong stage."""
    path = Path(path) if path else None
    if path is None or not path.exists():
        raise StateError(f"checkpoint not found: {path}")
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if expected_stage is not None and payload.get("stage") != expected_stage:
        raise StateError(f"{path} is a stage-{payload.get('stage')} checkpoint, expected stage {expected_stage}")
    cfg = RunConfig.model_validate(payload["config"])
    model = AGRAModel(cfg)
    model.load_state_dict(payload["model"])
    bank = ClassDistributionBank.from_state_dict(payload["bank"]) if payload.get("bank") else None
    return model, bank, payload


def check_architecture(payload: dict, cfg: RunConfig) -> None:
    current = cfg.model_dump(mode="json")
    for section in ARCHITECTURE_SECTIONS:
        if payload["config"].get(section) != current[section]:
            raise StateError(f"checkpoint was trained with a different '{section}' configuration")


# ---------------------------
# Helpers
# ---------------------------
def sgd(params, lr: float, cfg: TrainConfig) -> torch.optim.SGD:
    return torch.optim.SGD(params, lr=lr, momentum=cfg.momentum, weight_decay=cfg.weight_decay)


def unpack_batch(batch: dict, device: torch.device):
    return (batch["image"].to(device), batch["landmarks"].to(device),
            batch["label"].to(device), batch["domain"].to(device))


def extract_stacks(model: AGRAModel, dataset: FaceDataset, batch_size: int = 64) -> tuple[torch.Tensor, torch.Tensor]:
    """Region stacks [N, 6, 64] and labels [N] (-1 when hidden) for a whole dataset, in order."""
    device = next(model.parameters()).device
    model.eval()
    stacks, labels = [], []
    with torch.no_grad():
        for batch in make_loader(dataset, batch_size):
            images, landmarks, y, _ = unpack_batch(batch, device)
            stacks.append(model.region_features(images, landmarks).cpu())
            labels.append(y.cpu())
    if not stacks:
        raise ValidationError(f"dataset for {dataset.manifest.name} has no records in this split")
    return torch.cat(stacks), torch.cat(labels)


def build_stage2_bank(model: AGRAModel, cfg: RunConfig, source: FaceDataset, target: FaceDataset) -> ClassDistributionBank:
    source_stacks, source_labels = extract_stacks(model, source, cfg.train.batch_size)
    target_stacks, _ = extract_stacks(model, target, cfg.train.batch_size)
    labels = source_labels.numpy() if cfg.bank.source_clusters == "labels" else None
    return build_bank(cfg.bank, source_stacks, target_stacks, cfg.seed, source_labels=labels)


def accuracy_on(model: AGRAModel, bank: ClassDistributionBank | None, dataset: FaceDataset,
                batch_size: int = 64) -> float:
    """Accuracy (%) with every sample propagated as a member of dataset.domain."""
    if not dataset.has_all_labels() or dataset.hide_labels:
        raise ValidationError("accuracy needs a labelled dataset")
    if len(dataset) == 0:
        raise ValidationError("accuracy needs a nonempty dataset")
    device = next(model.parameters()).device
    model.eval()
    correct = 0
    with torch.no_grad():
        for batch in make_loader(dataset, batch_size):
            images, landmarks, labels, domains = unpack_batch(batch, device)
            _, logits = model(images, landmarks, domains, bank)
            correct += int((logits.argmax(dim=1) == labels).sum())
    return 100.0 * correct / len(dataset)


@dataclass
class EarlyStopping:
    """Tracks the best validation accuracy and the weights that produced it."""
    patience: int | None
    best: float = float("-inf")
    best_state: dict | None = None
    best_bank: dict | None = None
    stale: int = 0

    def update(self, score: float, model: AGRAModel, bank: ClassDistributionBank | None = None) -> bool:
        """Record a validation score; True when training should stop."""
        if score > self.best:
            self.best, self.stale = score, 0
            self.best_state = copy.deepcopy(model.state_dict())
            self.best_bank = bank.state_dict() if bank is not None else None
            return False
        self.stale += 1
        return self.patience is not None and self.stale >= self.patience


def _validation_set(manifest: DatasetManifest, cfg: TrainConfig) -> FaceDataset | None:
    """Labelled source val split used for early stopping, or None when disabled or absent."""
    if cfg.early_stopping_patience is None:
        return None
    val = FaceDataset(manifest, "val", Domain.SOURCE)
    return val if len(val) and val.has_all_labels() else None


# ---------------------------
# Stage 1
# ---------------------------
@dataclass
class StageResult:
    checkpoint: Path
    model: AGRAModel
    bank: ClassDistributionBank | None = None
    epoch_losses: list[float] = field(default_factory=list)
    log_path: Path | None = None


def train_stage1(cfg: RunConfig, source_manifest: DatasetManifest, out_dir: str | Path) -> StageResult:
    """Train F, G and C on labelled source images with the cross-entropy loss only."""
    out_dir = Path(out_dir)
    train_set = FaceDataset(source_manifest, "train", Domain.SOURCE,
                            flip=cfg.backbone.horizontal_flip, seed=cfg.seed)
    if len(train_set) == 0:
        raise ValidationError(f"source dataset {source_manifest.name} has no training records")
    if not train_set.has_all_labels():
        raise ValidationError(f"source dataset {source_manifest.name} has unlabelled training records")

    generator = seed_everything(cfg.seed)
    device = get_device()
    model = AGRAModel(cfg).to(device)
    optimizer = sgd(model.feature_parameters(), cfg.train.lr, cfg.train)
    loader = make_loader(train_set, cfg.train.batch_size, shuffle=True,
                         generator=generator, num_workers=cfg.train.num_workers)
    log = TrainLog(out_dir / "stage1_log.jsonl", cfg)
    val_set = _validation_set(source_manifest, cfg.train)
    stopper = EarlyStopping(cfg.train.early_stopping_patience)

    print(f"[STAGE1] Training on {len(train_set)} {source_manifest.name} images "
          f"for {cfg.train.stage1_epochs} epochs (config {config_hash(cfg)})")
    epoch_losses: list[float] = []
    for epoch in range(1, cfg.train.stage1_epochs + 1):
        model.train()
        train_set.set_epoch(epoch)
        total = 0.0
        for it, batch in enumerate(tqdm(loader, desc=f"stage1 epoch {epoch}", leave=False)):
            images, landmarks, labels, domains = unpack_batch(batch, device)
            _, logits = model(images, landmarks, domains)
            loss = classification_loss(logits, labels, domains)
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            total += loss.item()
            log.write(stage=1, epoch=epoch, iter=it, L_cls=loss.item(), lr_F=optimizer.param_groups[0]["lr"])
        epoch_losses.append(total / max(len(loader), 1))
        message = f"[STAGE1] epoch {epoch}: L_cls={epoch_losses[-1]:.4f}"
        if val_set is not None:
            val_acc = accuracy_on(model, None, val_set, cfg.train.batch_size)
            message += f" val_acc={val_acc:.2f}"
            if stopper.update(val_acc, model):
                tqdm.write(message + " (early stop)")
                break
        tqdm.write(message)

    if stopper.best_state is not None:
        model.load_state_dict(stopper.best_state)
    path = save_checkpoint(out_dir / "stage1.pt", stage=1, model=model, cfg=cfg,
                           optimizers={"F": optimizer}, extra={"source": source_manifest.name})
    return StageResult(checkpoint=path, model=model, epoch_losses=epoch_losses, log_path=log.path)


# ---------------------------
# Stage 2
# ---------------------------
def stage2_step(model: AGRAModel, bank: ClassDistributionBank, source_batch, target_batch,
                opt_F: torch.optim.Optimizer, opt_D: torch.optim.Optimizer, cfg: TrainConfig) -> dict:
    """One source/target mini-batch. Returns losses and the detached stacks for the bank update."""
    xs, ls, ys, ds = source_batch
    xt, lt, _, dt = target_batch
    stacks_s = model.region_features(xs, ls)
    stacks_t = model.region_features(xt, lt)
    feats_s = model.adapted_features(stacks_s, ds, bank)
    feats_t = model.adapted_features(stacks_t, dt, bank)
    cls_loss = classification_loss(model.classifier(feats_s), ys, ds)
    stats = {"L_cls": cls_loss.item(), "L_adv": None, "L_D": None,
             "stacks": torch.cat([stacks_s, stacks_t]).detach(), "domains": torch.cat([ds, dt])}

    if not cfg.adversarial:
        opt_F.zero_grad()
        cls_loss.backward()
        opt_F.step()
        return stats

    if cfg.adversarial_mode == "grl":
        adv = domain_adversarial_loss(model.discriminator(grad_reverse(feats_s, cfg.grl_lambda)),
                                      model.discriminator(grad_reverse(feats_t, cfg.grl_lambda)))
        opt_F.zero_grad()
        opt_D.zero_grad()
        (cls_loss + adv).backward()
        opt_F.step()
        opt_D.step()
        stats["L_adv"] = stats["L_D"] = adv.item()
        return stats

    # alternating: D minimises L on frozen features, then F, G minimise L_cls - L
    d_loss = domain_adversarial_loss(model.discriminator(feats_s.detach()), model.discriminator(feats_t.detach()))
    opt_D.zero_grad()
    d_loss.backward()
    opt_D.step()

    adv = domain_adversarial_loss(model.discriminator(feats_s), model.discriminator(feats_t))
    opt_F.zero_grad()
    (cls_loss - adv).backward()
    opt_F.step()
    stats["L_adv"], stats["L_D"] = adv.item(), d_loss.item()
    return stats


def _cycle(loader):
    while True:
        yielded = False
        for batch in loader:
            yielded = True
            yield batch
        if not yielded:
            return


def train_stage2(checkpoint: str | Path, cfg: RunConfig, source_manifest: DatasetManifest,
                 target_manifest: DatasetManifest, out_dir: str | Path) -> StageResult:
    """Adversarial graph representation adaptation from a stage-1 checkpoint.

    Target records are read with their labels hidden; only unlabelled target
    images reach the model.
    """
    out_dir = Path(out_dir)
    model, _, payload = load_checkpoint(checkpoint, expected_stage=1)
    check_architecture(payload, cfg)

    flip = cfg.backbone.horizontal_flip
    source_train = FaceDataset(source_manifest, "train", Domain.SOURCE, flip=flip, seed=cfg.seed)
    target_train = FaceDataset(target_manifest, "train", Domain.TARGET, hide_labels=True,
                               flip=flip, seed=cfg.seed)
    if len(source_train) == 0 or len(target_train) == 0:
        raise ValidationError("stage 2 needs nonempty source and target training splits")
    if not source_train.has_all_labels():
        raise ValidationError(f"source dataset {source_manifest.name} has unlabelled training records")

    generator = seed_everything(cfg.seed)
    device = get_device()
    model.to(device)
    # unflipped copies for bank construction and reclustering
    source_plain = FaceDataset(source_manifest, "train", Domain.SOURCE)
    target_plain = FaceDataset(target_manifest, "train", Domain.TARGET, hide_labels=True)
    bank = build_stage2_bank(model, cfg, source_plain, target_plain)
    source_labels = None
    if cfg.bank.source_clusters == "labels":
        source_labels = [r.label for r in source_train.records]

    tc = cfg.train
    opt_F = sgd(model.feature_parameters(), tc.lr, tc)
    opt_D = sgd(model.discriminator_parameters(), tc.disc_lr, tc)
    sched_F = StepLR(opt_F, step_size=tc.lr_decay_epoch, gamma=0.1)
    sched_D = ReduceLROnPlateau(opt_D, mode="min", factor=0.1, patience=tc.disc_patience,
                                threshold=tc.disc_min_delta, threshold_mode="abs")
    half = max(tc.batch_size // 2, 1)
    source_loader = make_loader(source_train, half, shuffle=True, generator=generator, num_workers=tc.num_workers)
    target_batches = _cycle(make_loader(target_train, half, shuffle=True, generator=generator,
                                        num_workers=tc.num_workers))
    log = TrainLog(out_dir / "stage2_log.jsonl", cfg)
    val_set = _validation_set(source_manifest, cfg.train)
    stopper = EarlyStopping(tc.early_stopping_patience)

    print(f"[STAGE2] Adapting {source_manifest.name} -> {target_manifest.name} for {tc.stage2_epochs} epochs "
          f"(adversarial={tc.adversarial}, mode={tc.adversarial_mode}, bank={cfg.bank.mode}/{cfg.bank.update})")
    epoch_losses: list[float] = []
    for epoch in range(1, tc.stage2_epochs + 1):
        model.train()
        source_train.set_epoch(epoch)
        target_train.set_epoch(epoch)
        cls_total, d_total = 0.0, 0.0
        for it, batch in enumerate(tqdm(source_loader, desc=f"stage2 epoch {epoch}", leave=False)):
            stats = stage2_step(model, bank, unpack_batch(batch, device), unpack_batch(next(target_batches), device),
                                opt_F, opt_D, tc)
            if cfg.bank.update in ("full", "iter_only"):
                update_iteration(bank, stats["stacks"].cpu(), stats["domains"].cpu())
            cls_total += stats["L_cls"]
            d_total += stats["L_D"] or 0.0
            log.write(stage=2, epoch=epoch, iter=it, L_cls=stats["L_cls"], L_adv=stats["L_adv"],
                      L_D=stats["L_D"], lr_F=opt_F.param_groups[0]["lr"], lr_D=opt_D.param_groups[0]["lr"])

        n = max(len(source_loader), 1)
        epoch_losses.append(cls_total / n)
        sched_F.step()
        if tc.adversarial:
            sched_D.step(d_total / n)

        if cfg.bank.update in ("full", "epoch_only") and should_recluster(epoch, bank.recluster_period):
            source_stacks, _ = extract_stacks(model, source_plain, tc.batch_size)
            target_stacks, _ = extract_stacks(model, target_plain, tc.batch_size)
            recluster(bank, source_stacks, target_stacks, epoch, cfg.seed, source_labels=source_labels,
                      max_iters=cfg.bank.kmeans_iters, restarts=cfg.bank.kmeans_restarts)

        message = f"[STAGE2] epoch {epoch}: L_cls={epoch_losses[-1]:.4f} L_D={d_total / n:.4f}"
        if val_set is not None:
            val_acc = accuracy_on(model, bank, val_set, tc.batch_size)
            message += f" val_acc={val_acc:.2f}"
            if stopper.update(val_acc, model, bank):
                tqdm.write(message + " (early stop)")
                break
        tqdm.write(message)

    if stopper.best_state is not None:
        model.load_state_dict(stopper.best_state)
        bank = ClassDistributionBank.from_state_dict(stopper.best_bank)
    path = save_checkpoint(out_dir / "stage2.pt", stage=2, model=model, cfg=cfg, bank=bank,
                           optimizers={"F": opt_F, "D": opt_D},
                           extra={"source": source_manifest.name, "target": target_manifest.name})
    bank.save(out_dir / "bank.pt")
    save_adjacency(model.adapter, out_dir)
    return StageResult(checkpoint=path, model=model, bank=bank, epoch_losses=epoch_losses, log_path=log.path)
