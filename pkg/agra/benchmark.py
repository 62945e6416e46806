"""
Evaluation, baselines, MMD diagnostics, feature dumps and report writing.
"""

from pathlib import Path

import numpy as np
import pandas as pd
import torch
from scipy.spatial.distance import cdist, pdist
from tqdm import tqdm

from schemas import BenchmarkReport, DatasetManifest, Domain, MMDConfig, RunConfig
from agra.adversarial import AGRAModel, classification_loss, predict_batch
from agra.config import artifact_header, seed_everything
from agra.data import FaceDataset, make_loader
from agra.distribution_bank import ClassDistributionBank
from agra.errors import ValidationError
from agra.features import FUSION_MODES
from agra.training import build_stage2_bank, check_architecture, load_checkpoint, sgd, unpack_batch

MMD_MODES = FUSION_MODES + ("AGRA",)


# ---------------------------
# Accuracy
# ---------------------------
def evaluate_accuracy(model: AGRAModel, bank: ClassDistributionBank, manifest: DatasetManifest,
                      split: str = "test", batch_size: int = 64) -> float:
    """Percentage of correct predictions on a labelled split, inputs treated as target-domain faces."""
    dataset = FaceDataset(manifest, split, Domain.TARGET)
    if len(dataset) == 0:
        raise ValidationError(f"{manifest.name} has no '{split}' records to evaluate")
    if not dataset.has_all_labels():
        raise ValidationError(f"{manifest.name} '{split}' split has unlabelled records")
    device = next(model.parameters()).device
    correct = 0
    for batch in make_loader(dataset, batch_size):
        images, landmarks, labels, _ = unpack_batch(batch, device)
        predicted, _ = predict_batch(images, landmarks, model, bank)
        correct += int((predicted == labels).sum())
    accuracy = 100.0 * correct / len(dataset)
    print(f"[EVAL] {manifest.name} {split}: {correct}/{len(dataset)} correct ({accuracy:.2f}%)")
    return accuracy


# ---------------------------
# MMD
# ---------------------------
def median_distance(X: np.ndarray, Y: np.ndarray) -> float:
    """Median pairwise Euclidean distance over the pooled sample (1.0 if degenerate)."""
    distances = pdist(np.vstack([X, Y]))
    positive = distances[distances > 0]
    return float(np.median(positive)) if positive.size else 1.0


def compute_mmd(X, Y, bandwidths: list[float] | None = None,
                multipliers: list[float] | tuple[float, ...] = (0.25, 0.5, 1.0, 2.0, 4.0),
                unbiased: bool = True) -> float:
    """Squared MMD under a sum of Gaussian kernels.

    Without explicit bandwidths the kernel widths are the median pooled
    distance times each multiplier.
    """
    X = np.asarray(X, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    if X.ndim != 2 or Y.ndim != 2 or X.shape[1] != Y.shape[1]:
        raise ValidationError(f"MMD needs two [n, d] samples of equal width, got {X.shape} and {Y.shape}")
    if len(X) == 0 or len(Y) == 0:
        raise ValidationError("MMD needs nonempty samples")
    if unbiased and (len(X) < 2 or len(Y) < 2):
        raise ValidationError("the unbiased MMD estimate needs at least two points per sample")
    if bandwidths is None:
        base = median_distance(X, Y)
        bandwidths = [base * m for m in multipliers]

    def kernel(A, B):
        d2 = cdist(A, B, "sqeuclidean")
        return sum(np.exp(-d2 / (2.0 * s ** 2)) for s in bandwidths)

    k_xx, k_yy, k_xy = kernel(X, X), kernel(Y, Y), kernel(X, Y)
    n, m = len(X), len(Y)
    if unbiased:
        xx = (k_xx.sum() - np.trace(k_xx)) / (n * (n - 1))
        yy = (k_yy.sum() - np.trace(k_yy)) / (m * (m - 1))
    else:
        xx, yy = k_xx.mean(), k_yy.mean()
    return float(xx + yy - 2.0 * k_xy.mean())


def collect_features(model: AGRAModel, bank: ClassDistributionBank | None, dataset: FaceDataset,
                     mode: str = "AGRA", batch_size: int = 64) -> np.ndarray:
    """BH / BL / BHL fused features or the adapted AGRA feature of every sample in a dataset."""
    if mode not in MMD_MODES:
        raise ValidationError(f"unknown feature mode '{mode}', expected one of {MMD_MODES}")
    device = next(model.parameters()).device
    model.eval()
    chunks = []
    with torch.no_grad():
        for batch in make_loader(dataset, batch_size):
            images, landmarks, _, domains = unpack_batch(batch, device)
            stacks = model.region_features(images, landmarks)
            if mode == "AGRA":
                chunks.append(model.adapted_features(stacks, domains, bank).cpu())
            else:
                chunks.append(model.extractor.fuse(stacks, mode).cpu())
    if not chunks:
        raise ValidationError(f"no records in {dataset.manifest.name} to collect features from")
    return torch.cat(chunks).double().numpy()


def mmd_by_mode(model: AGRAModel, bank: ClassDistributionBank, source_manifest: DatasetManifest,
                target_manifest: DatasetManifest, mmd_cfg: MMDConfig, split: str = "test",
                modes: tuple[str, ...] = MMD_MODES) -> dict[str, float]:
    source = FaceDataset(source_manifest, split, Domain.SOURCE)
    target = FaceDataset(target_manifest, split, Domain.TARGET, hide_labels=True)
    result = {}
    for mode in modes:
        result[mode] = compute_mmd(
            collect_features(model, bank, source, mode), collect_features(model, bank, target, mode),
            bandwidths=mmd_cfg.bandwidths, multipliers=mmd_cfg.multipliers, unbiased=mmd_cfg.unbiased,
        )
        print(f"[MMD] {source_manifest.name} -> {target_manifest.name} {mode}: {result[mode]:.6f}")
    return result


# ---------------------------
# Baselines
# ---------------------------
def dt_model(checkpoint: str | Path, cfg: RunConfig, source_manifest: DatasetManifest,
             target_manifest: DatasetManifest) -> tuple[AGRAModel, ClassDistributionBank]:
    """Stage-1 model plus a bank built from its own features, with no adaptation."""
    model, _, payload = load_checkpoint(checkpoint, expected_stage=1)
    check_architecture(payload, cfg)
    seed_everything(cfg.seed)
    bank = build_stage2_bank(
        model, cfg,
        FaceDataset(source_manifest, "train", Domain.SOURCE),
        FaceDataset(target_manifest, "train", Domain.TARGET, hide_labels=True),
    )
    return model, bank


def baseline_dt(checkpoint: str | Path, cfg: RunConfig, source_manifest: DatasetManifest,
                target_manifest: DatasetManifest) -> float:
    """Direct transfer: evaluate the source-only model on the target test split."""
    model, bank = dt_model(checkpoint, cfg, source_manifest, target_manifest)
    return evaluate_accuracy(model, bank, target_manifest, "test", cfg.train.batch_size)


def pseudo_label(model: AGRAModel, bank: ClassDistributionBank, dataset: FaceDataset,
                 batch_size: int = 64) -> tuple[torch.Tensor, torch.Tensor]:
    """Predicted labels and softmax confidences for every item of a dataset, in order."""
    device = next(model.parameters()).device
    labels, confidence = [], []
    for batch in make_loader(dataset, batch_size):
        images, landmarks, _, _ = unpack_batch(batch, device)
        predicted, scores = predict_batch(images, landmarks, model, bank)
        labels.append(predicted.cpu())
        confidence.append(scores.softmax(dim=1).max(dim=1).values.cpu())
    return torch.cat(labels), torch.cat(confidence)


def fine_tune_on_pseudo_labels(model: AGRAModel, bank: ClassDistributionBank, dataset: FaceDataset,
                               pseudo_labels: torch.Tensor, cfg: RunConfig) -> list[float]:
    """Fine-tune the region heads and classifier on target pseudo-labels; returns epoch losses."""
    params = [p for module in model.extractor.heads() + [model.classifier] for p in module.parameters()]
    optimizer = sgd(params, cfg.train.lr, cfg.train)
    generator = seed_everything(cfg.seed)
    loader = make_loader(dataset, cfg.train.batch_size, shuffle=True, generator=generator)
    device = next(model.parameters()).device
    pseudo_labels = torch.as_tensor(pseudo_labels, dtype=torch.long)

    losses = []
    for epoch in range(1, cfg.train.plft_epochs + 1):
        model.train()
        # the backbone is not tuned, so its BatchNorm statistics stay fixed too
        model.extractor.backbone.eval()
        total = 0.0
        for batch in tqdm(loader, desc=f"plft epoch {epoch}", leave=False):
            images, landmarks, _, domains = unpack_batch(batch, device)
            _, logits = model(images, landmarks, domains, bank)
            loss = classification_loss(logits, pseudo_labels[batch["index"]].to(device))
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            total += loss.item()
        losses.append(total / max(len(loader), 1))
        tqdm.write(f"[PLFT] epoch {epoch}: L_cls={losses[-1]:.4f}")
    return losses


def write_pseudo_label_audit(dataset: FaceDataset, manifest: DatasetManifest, pseudo_labels, confidence,
                             path: str | Path, cfg: RunConfig) -> Path:
    """CSV of pseudo-labels next to the manifest labels, for after-the-fact auditing only."""
    truth = [r.label for r in manifest.split("train")]
    frame = pd.DataFrame({
        "id": [r.id or r.path for r in dataset.records],
        "pseudo_label": pd.Series(pseudo_labels).astype(int),
        "confidence": pd.Series(confidence).astype(float),
        "manifest_label": pd.Series(truth, dtype="Int64"),
    })
    return write_artifact_csv(frame, path, cfg)


def baseline_plft(checkpoint: str | Path, cfg: RunConfig, source_manifest: DatasetManifest,
                  target_manifest: DatasetManifest, out_dir: str | Path | None = None) -> float:
    """Pseudo-label fine-tuning: DT labels the target train split, then the heads are fine-tuned on them."""
    model, bank = dt_model(checkpoint, cfg, source_manifest, target_manifest)
    target_train = FaceDataset(target_manifest, "train", Domain.TARGET, hide_labels=True)
    labels, confidence = pseudo_label(model, bank, target_train, cfg.train.batch_size)
    print(f"[PLFT] Pseudo-labelled {len(labels)} {target_manifest.name} faces, mean confidence {float(confidence.mean()):.3f}")
    if out_dir is not None:
        write_pseudo_label_audit(target_train, target_manifest, labels.numpy(), confidence.numpy(),
                                 Path(out_dir) / "plft_pseudo_labels.csv", cfg)
    fine_tune_on_pseudo_labels(model, bank, target_train, labels, cfg)
    return evaluate_accuracy(model, bank, target_manifest, "test", cfg.train.batch_size)


# ---------------------------
# Artifacts
# ---------------------------
def write_artifact_csv(frame: pd.DataFrame, path: str | Path, cfg: RunConfig) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = artifact_header(cfg)
    with open(path, "w") as f:
        f.write(f"# config_hash={header['config_hash']} seed={header['seed']}\n")
        frame.to_csv(f, index=False)
    return path


def read_artifact_csv(path: str | Path) -> pd.DataFrame:
    return pd.read_csv(path, comment="#")


def dump_features(model: AGRAModel, bank: ClassDistributionBank, manifest: DatasetManifest,
                  out_path: str | Path, cfg: RunConfig, split: str | None = None,
                  domain: Domain = Domain.TARGET) -> Path:
    """Adapted features F(x) of a manifest as CSV rows, in manifest order.

    Columns are `label` (empty when the record has none), `domain` and one
    column per feature dimension. Labels are copied for plotting only.
    """
    bank.check_populated()
    dataset = FaceDataset(manifest, split, domain)
    features = collect_features(model, bank, dataset, "AGRA", cfg.train.batch_size)
    frame = pd.DataFrame(features, columns=[f"f_{k}" for k in range(features.shape[1])])
    frame.insert(0, "label", pd.Series([r.label for r in dataset.records], dtype="Int64"))
    frame.insert(1, "domain", int(domain))
    path = write_artifact_csv(frame, out_path, cfg)
    print(f"[DUMP] Wrote {len(frame)} feature rows for {manifest.name} to {path}")
    return path


def report_frame(report: BenchmarkReport) -> pd.DataFrame:
    """One row per method, one column per target plus the mean."""
    def fmt(value):
        return "failed" if value is None else f"{value:.2f}"

    rows = []
    for row in report.rows:
        entry = {"Method": row.method, "Source": row.source, "Backbone": row.backbone}
        for target in report.targets:
            entry[target] = fmt(row.accuracies.get(target))
        entry["Mean"] = fmt(row.mean)
        rows.append(entry)
    return pd.DataFrame(rows)


def format_report(report: BenchmarkReport) -> str:
    lines = [f"config_hash={report.config_hash} seed={report.seed} wall_clock={report.wall_clock:.1f}s", ""]
    lines.append(report_frame(report).to_markdown(index=False))
    failures = [(row.method, target, message) for row in report.rows for target, message in row.failures.items()]
    if failures:
        lines += ["", "Failures:"]
        lines += [f"- {method} on {target}: {message}" for method, target, message in failures]
    mmd_rows = [row for row in report.rows if row.mmd_after]
    if mmd_rows:
        lines += ["", "MMD (AGRA feature) before -> after adaptation:"]
        for row in mmd_rows:
            for target, after in row.mmd_after.items():
                before = row.mmd_before.get(target)
                before_text = "n/a" if before is None else f"{before:.6f}"
                lines.append(f"- {row.method} {target}: {before_text} -> {after:.6f}")
    return "\n".join(lines) + "\n"


def write_report(report: BenchmarkReport, out_dir: str | Path) -> tuple[Path, Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    json_path = out_dir / "report.json"
    json_path.write_text(report.model_dump_json(indent=2))
    md_path = out_dir / "report.md"
    md_path.write_text(format_report(report))
    print(f"[REPORT] Wrote {json_path} and {md_path}")
    return json_path, md_path
