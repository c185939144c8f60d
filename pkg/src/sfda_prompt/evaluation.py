"""Dice evaluation and metrics records."""
from dataclasses import dataclass

import numpy as np

from .data import stack_images, stack_masks
from .errors import RejectedInputError
from .pipeline import predict_probs

METRICS_COLUMNS = ("variant", "domain", "class", "dice_mean", "dice_std", "seed")


@dataclass
class MetricsRecord:
    variant: str
    domain: str
    class_index: object  # int, or "all" on aggregate rows
    dice_mean: float
    dice_std: float
    seed: object  # int, or "all" on aggregate rows

    def __post_init__(self):
        if not 0.0 <= self.dice_mean <= 1.0:
            raise RejectedInputError(f"dice_mean {self.dice_mean} outside [0, 1]")
        if self.dice_std < 0:
            raise RejectedInputError(f"dice_std {self.dice_std} is negative")

    def row(self):
        return [self.variant, self.domain, str(self.class_index),
                f"{self.dice_mean:.6f}", f"{self.dice_std:.6f}", str(self.seed)]


def dice_score(pred, gt):
    """``2|P & G| / (|P| + |G|)``; two empty masks score 1.0."""
    pred, gt = np.asarray(pred), np.asarray(gt)
    if pred.shape != gt.shape:
        raise RejectedInputError(f"dice_score shape mismatch: {pred.shape} vs {gt.shape}")
    for name, m in (("pred", pred), ("gt", gt)):
        if not np.all((m == 0) | (m == 1)):
            raise RejectedInputError(f"dice_score {name} mask is not binary")
    p, g = pred.astype(bool), gt.astype(bool)
    denom = int(p.sum()) + int(g.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int((p & g).sum()) / denom


def per_sample_dice(masks_pred, masks_gt):
    """(N, K) Dice matrix for (N, K, H, W) binary stacks."""
    n, k = masks_gt.shape[:2]
    out = np.empty((n, k))
    for i in range(n):
        for c in range(k):
            out[i, c] = dice_score(masks_pred[i, c], masks_gt[i, c])
    return out


def evaluate_model(model, prompt, dataset, threshold=0.5, variant="eval", domain="", seed=0):
    """One MetricsRecord per class; mean and std over samples."""
    dataset = list(dataset)
    if not dataset:
        raise RejectedInputError("evaluate_model needs a labeled dataset")
    probs = predict_probs(model, stack_images(dataset), prompt)
    pred = (probs > threshold).astype(np.uint8)
    gt = stack_masks(dataset).astype(np.uint8)
    scores = per_sample_dice(pred, gt)
    return [MetricsRecord(variant, domain, c, float(scores[:, c].mean()), float(scores[:, c].std()), seed)
            for c in range(scores.shape[1])]


def mean_dice(records):
    return float(np.mean([r.dice_mean for r in records]))


def aggregate(records, variant, domain):
    """Across-seed mean and std of per-class means, plus an all-class row."""
    classes = sorted({r.class_index for r in records if r.variant == variant and r.domain == domain})
    out = []
    for c in classes:
        vals = [r.dice_mean for r in records if r.variant == variant and r.domain == domain and r.class_index == c]
        out.append(MetricsRecord(variant, domain, c, float(np.mean(vals)), float(np.std(vals)), "all"))
    return out


def metrics_to_csv(records):
    lines = [",".join(METRICS_COLUMNS)]
    lines.extend(",".join(r.row()) for r in records)
    return "\n".join(lines) + "\n"
