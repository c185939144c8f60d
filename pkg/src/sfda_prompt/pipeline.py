"""Two-stage source-free adaptation: prompt learning, then feature alignment.

Stage one learns an image-shaped additive prompt that makes a frozen source
model's batch-norm statistics on target images match the statistics it
stored during source training. Stage two fine-tunes the model on pseudo
labels while pulling bottleneck features of each image and a
Fourier-restyled copy together.
"""
import logging
from dataclasses import dataclass, field

import numpy as np

from . import spectral
from .data import stack_images, stack_masks
from .engine import ops
from .engine.optim import OptimizerState, poly_decay_lr, sgd_momentum_step
from .engine.tensor import Tensor, as_tensor, backward
from .errors import RejectedInputError
from .segnet import SegModelConfig, build_model

log = logging.getLogger(__name__)

COMBINE_OPS = ("add", "mul")
PROMPT_SPACES = ("spatial", "frequency")


# ------------------------------------------------------------------ configs

@dataclass
class PlsConfig:
    alpha: float = 0.01
    bn_layer_count: object = "all"
    epochs: int = 100
    lr0: float = 0.01
    batch_size: int = 16
    momentum: float = 0.99
    combine_op: str = "add"
    prompt_space: str = "spatial"

    def __post_init__(self):
        if self.alpha < 0:
            raise RejectedInputError(f"alpha must be >= 0, got {self.alpha}")
        if self.epochs < 1 or self.batch_size < 1:
            raise RejectedInputError("epochs and batch_size must be >= 1")
        if self.combine_op not in COMBINE_OPS:
            raise RejectedInputError(f"combine_op must be one of {COMBINE_OPS}")
        if self.prompt_space not in PROMPT_SPACES:
            raise RejectedInputError(f"prompt_space must be one of {PROMPT_SPACES}")
        if self.bn_layer_count != "all" and (not isinstance(self.bn_layer_count, int) or self.bn_layer_count < 1):
            raise RejectedInputError(f"bn_layer_count must be 'all' or a positive int, got {self.bn_layer_count!r}")


@dataclass
class FasConfig:
    gamma: float = 0.1
    epochs: int = 100
    lr0: float = 0.001
    threshold: float = 0.5
    batch_size: int = 16
    momentum: float = 0.99
    beta_max: float = 0.15
    augment: bool = True

    def __post_init__(self):
        if self.gamma < 0:
            raise RejectedInputError(f"gamma must be >= 0, got {self.gamma}")
        if not 0.0 < self.threshold < 1.0:
            raise RejectedInputError(f"threshold must be in (0, 1), got {self.threshold}")
        if self.epochs < 1 or self.batch_size < 1:
            raise RejectedInputError("epochs and batch_size must be >= 1")
        spectral.AugConfig(self.beta_max)


@dataclass
class SourceConfig:
    epochs: int = 100
    lr0: float = 0.01
    batch_size: int = 16
    momentum: float = 0.99
    base_channels: int = 8
    depth: int = 3
    noise_sigma: float = 0.05
    max_shift: int = 4

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise RejectedInputError("epochs and batch_size must be >= 1")


# ------------------------------------------------------------------ prompt

@dataclass
class Prompt:
    """Learnable (H, W, C) offset applied to every target image."""

    offsets: Tensor
    combine_op: str = "add"
    prompt_space: str = "spatial"

    @classmethod
    def identity(cls, shape, combine_op="add", prompt_space="spatial", dtype=np.float32):
        fill = 1.0 if combine_op == "mul" else 0.0
        return cls(Tensor(np.full(shape, fill, dtype=dtype)), combine_op, prompt_space)

    @property
    def shape(self):
        return self.offsets.shape

    def array(self):
        return self.offsets.data

    def frozen(self):
        return Prompt(Tensor(self.offsets.data), self.combine_op, self.prompt_space)


@dataclass
class PseudoLabelSet:
    masks: np.ndarray  # (N, K, H, W) uint8, read-only

    def __post_init__(self):
        self.masks = np.ascontiguousarray(self.masks, dtype=np.uint8)
        if not np.all(self.masks <= 1):
            raise RejectedInputError("pseudo labels must be binary")
        self.masks.setflags(write=False)

    def __len__(self):
        return self.masks.shape[0]


def apply_prompt(images, prompt, combine_op=None, prompt_space=None):
    """Alter an (N, C, H, W) batch with a prompt.

    ``prompt=None`` returns the images unchanged (the no-prompt path).
    """
    x = as_tensor(images)
    if prompt is None:
        return x
    combine_op = combine_op or prompt.combine_op
    prompt_space = prompt_space or prompt.prompt_space
    p = prompt.offsets if isinstance(prompt, Prompt) else as_tensor(prompt)
    if not np.all(np.isfinite(p.data)):
        raise RejectedInputError("prompt contains non-finite values")
    h, w, c = p.shape
    if x.ndim != 4 or x.shape[1:] != (c, h, w):
        raise RejectedInputError(f"prompt of shape {(h, w, c)} does not fit images of shape {x.shape}")
    pc = ops.transpose(p, (2, 0, 1))
    if prompt_space == "spatial":
        if combine_op == "add":
            return ops.add(x, pc)
        if combine_op == "mul":
            return ops.mul(x, pc)
        raise RejectedInputError(f"unknown combine_op {combine_op!r}")
    if prompt_space == "frequency":
        return spectral.amplitude_prompt(x, pc, combine_op)
    raise RejectedInputError(f"unknown prompt_space {prompt_space!r}")


# ------------------------------------------------------- alignment losses

def _resolve_layer_count(layer_count, total):
    if layer_count == "all" or layer_count is None:
        return total
    if not isinstance(layer_count, (int, np.integer)) or not 1 <= layer_count <= total:
        raise RejectedInputError(f"layer_count {layer_count!r} outside 1..{total}")
    return int(layer_count)


def statistic_alignment_loss(stored, batch, alpha=0.01, layer_count="all"):
    """Sum over the first ``layer_count`` BN layers of
    ``mean_c |mu - mu_batch| + alpha * mean_c |sigma - sigma_batch|``."""
    if len(stored) != len(batch):
        raise RejectedInputError(f"{len(stored)} stored BN layers but {len(batch)} batch statistics")
    k = _resolve_layer_count(layer_count, len(stored))
    total = None
    for layer, stats in zip(stored[:k], batch[:k]):
        mean_term = ops.l1_distance(stats.mean, np.asarray(layer.running_mean, dtype=stats.mean.dtype))
        std_term = ops.l1_distance(stats.std, np.asarray(layer.running_std, dtype=stats.std.dtype))
        term = ops.add(mean_term, ops.mul(std_term, alpha))
        total = term if total is None else ops.add(total, term)
    return total


def fas_losses(model, prompt, batch, augmented, pseudo, gamma):
    """Returns ``(total, l_seg, l_al)`` for one batch in train mode."""
    batch, augmented = as_tensor(batch), as_tensor(augmented)
    pseudo = np.asarray(pseudo)
    if batch.shape != augmented.shape or batch.shape[0] != pseudo.shape[0]:
        raise RejectedInputError(
            f"misaligned FAS batch: images {batch.shape}, augmented {augmented.shape}, pseudo {pseudo.shape}"
        )
    xt = apply_prompt(batch, prompt)
    xa = apply_prompt(augmented, prompt)
    out_t = model.forward(xt, "train")
    out_a = model.forward(xa, "train")
    l_al = ops.l1_distance(out_t.bottleneck, out_a.bottleneck)
    target = pseudo.astype(out_t.probs.dtype)
    l_seg = ops.add(ops.binary_cross_entropy(out_t.probs, target), ops.binary_cross_entropy(out_a.probs, target))
    total = ops.add(l_seg, ops.mul(l_al, gamma))
    return total, l_seg, l_al


# ----------------------------------------------------------------- helpers

def as_batch(images):
    """Accept a list of Samples or an (N, C, H, W) array."""
    if isinstance(images, np.ndarray):
        arr = images
    else:
        images = list(images)
        if not images:
            raise RejectedInputError("empty dataset")
        arr = stack_images(images)
    if arr.ndim != 4 or arr.shape[0] == 0:
        raise RejectedInputError(f"expected a non-empty (N, C, H, W) batch, got {arr.shape}")
    return arr


def _batches(n, batch_size, rng):
    order = rng.permutation(n) if rng is not None else np.arange(n)
    return [order[i:i + batch_size] for i in range(0, n, batch_size)]


@dataclass
class TraceRow:
    stage: str
    epoch: int
    loss_sa: float = None
    loss_seg: float = None
    loss_al: float = None
    lr: float = None


TRACE_COLUMNS = ("stage", "epoch", "loss_sa", "loss_seg", "loss_al", "lr")


def trace_to_csv(rows):
    def fmt(v):
        if v is None:
            return ""
        if isinstance(v, float):
            return repr(float(v))
        return str(v)

    lines = [",".join(TRACE_COLUMNS)]
    lines.extend(",".join(fmt(getattr(r, c)) for c in TRACE_COLUMNS) for r in rows)
    return "\n".join(lines) + "\n"


# --------------------------------------------------------------------- PLS

@dataclass
class PlsResult:
    prompt: Prompt
    loss_trace: list
    initial_loss: float
    final_loss: float
    rows: list = field(default_factory=list)


def mean_alignment_loss(model, images, prompt, config):
    """Dataset-mean statistic alignment loss in fixed batches, no updates."""
    frozen = model.copy().set_trainable(False)
    fixed = prompt.frozen() if prompt is not None else None
    losses, weights = [], []
    for idx in _batches(images.shape[0], config.batch_size, None):
        out = frozen.forward(apply_prompt(images[idx], fixed), "stat_collect")
        loss = statistic_alignment_loss(frozen.bns, out.stats, config.alpha, config.bn_layer_count)
        losses.append(float(loss.data))
        weights.append(len(idx))
    return float(np.average(losses, weights=weights))


def run_pls(source_model, target_images, config, seed=0):
    """Learn a prompt against the frozen source model.

    Each iteration: restyle the batch with the prompt, forward in
    ``stat_collect`` mode, score the BN statistics, step the prompt only,
    then restore the BN buffers. The caller's model is never touched.
    """
    images = as_batch(target_images)
    n, c, h, w = images.shape
    model = source_model.copy().set_trainable(False)
    anchor = model.bn_checkpoint("snapshot")
    prompt = Prompt.identity((h, w, c), config.combine_op, config.prompt_space, dtype=model.dtype)
    prompt.offsets.set_requires_grad(True)
    state = OptimizerState(lr0=config.lr0, T=config.epochs, momentum=config.momentum)
    rng = np.random.default_rng([seed, 101])
    initial = mean_alignment_loss(model, images, prompt, config)
    trace, rows = [], []
    for epoch in range(config.epochs):
        state.t = epoch
        lr = poly_decay_lr(config.lr0, epoch, config.epochs)
        epoch_losses, weights = [], []
        for idx in _batches(n, config.batch_size, rng):
            prompt.offsets.zero_grad()
            out = model.forward(apply_prompt(images[idx], prompt), "stat_collect")
            loss = statistic_alignment_loss(model.bns, out.stats, config.alpha, config.bn_layer_count)
            backward(loss)
            sgd_momentum_step([prompt.offsets], [prompt.offsets.grad], state, lr)
            model.bn_checkpoint("restore", anchor)
            epoch_losses.append(float(loss.data))
            weights.append(len(idx))
        mean_loss = float(np.average(epoch_losses, weights=weights))
        trace.append(mean_loss)
        rows.append(TraceRow("pls", epoch, loss_sa=mean_loss, lr=lr))
        log.debug("pls epoch %d loss_sa %.5f lr %.5g", epoch, mean_loss, lr)
    prompt.offsets.set_requires_grad(False)
    final = mean_alignment_loss(model, images, prompt, config)
    return PlsResult(prompt, trace, initial, final, rows)


# ------------------------------------------------------------ pseudo labels

def predict_probs(model, images, prompt=None, batch_size=16):
    images = as_batch(images)
    fixed = prompt.frozen() if prompt is not None else None
    chunks = []
    for idx in _batches(images.shape[0], batch_size, None):
        out = model.forward(apply_prompt(images[idx], fixed), "eval")
        chunks.append(out.probs.data)
    return np.concatenate(chunks, axis=0)


def generate_pseudo_labels(source_model, prompt, target_images, threshold=0.5, batch_size=16):
    """Binarize the source model's eval-mode output on prompted images (strict >)."""
    probs = predict_probs(source_model, target_images, prompt, batch_size)
    return PseudoLabelSet((probs > threshold).astype(np.uint8))


def predict(model, prompt, image, threshold=0.5):
    """Per-class binary masks for one (C, H, W) image or an (N, C, H, W) batch."""
    arr = np.asarray(image)
    single = arr.ndim == 3
    batch = arr[None] if single else arr
    if prompt is not None:
        h, w, c = prompt.shape
        if batch.shape[1:] != (c, h, w):
            raise RejectedInputError(f"image shape {arr.shape} does not match prompt shape {prompt.shape}")
    probs = predict_probs(model, batch, prompt)
    masks = (probs > threshold).astype(np.uint8)
    return masks[0] if single else masks


# --------------------------------------------------------------------- FAS

@dataclass
class FasResult:
    model: object
    rows: list


def run_fas(source_model, prompt, target_images, pseudo, config, seed=0, use_prompt=True):
    """Fine-tune a copy of the source model on prompted target images.

    ``use_prompt=False`` trains on raw images (the prompt then only shaped
    the pseudo labels). The prompt itself is never modified.
    """
    images = as_batch(target_images)
    if len(pseudo) != images.shape[0]:
        raise RejectedInputError(f"{len(pseudo)} pseudo labels for {images.shape[0]} images")
    model = source_model.copy().set_trainable(True)
    params = model.parameters()
    fixed = prompt.frozen() if (prompt is not None and use_prompt) else None
    aug = spectral.AugConfig(config.beta_max, seed)
    state = OptimizerState(lr0=config.lr0, T=config.epochs, momentum=config.momentum)
    rng = np.random.default_rng([seed, 202])
    rows = []
    for epoch in range(config.epochs):
        state.t = epoch
        lr = poly_decay_lr(config.lr0, epoch, config.epochs)
        sums = np.zeros(3)
        count = 0
        for b, idx in enumerate(_batches(images.shape[0], config.batch_size, rng)):
            batch = images[idx]
            if config.augment and len(idx) > 1:
                augmented, _, _ = spectral.batch_style_permute(list(batch), aug, seed=[seed, epoch, b])
                augmented = np.stack(augmented).astype(batch.dtype)
            else:
                augmented = batch
            model.zero_grad()
            total, l_seg, l_al = fas_losses(model, fixed, batch, augmented, pseudo.masks[idx], config.gamma)
            backward(total)
            sgd_momentum_step(params, [p.grad for p in params], state, lr)
            sums += len(idx) * np.array([float(total.data), float(l_seg.data), float(l_al.data)])
            count += len(idx)
        mean_total, mean_seg, mean_al = sums / count
        rows.append(TraceRow("fas", epoch, loss_seg=mean_seg, loss_al=mean_al, lr=lr))
        log.debug("fas epoch %d total %.5f seg %.5f al %.5f", epoch, mean_total, mean_seg, mean_al)
    model.set_trainable(False)
    return FasResult(model, rows)


# ----------------------------------------------------------- source model

def _augment_source(batch, masks, rng, config):
    """Random flips, 90-degree rotations, circular shift jitter, and noise."""
    out_x, out_y = np.empty_like(batch), np.empty_like(masks)
    for i in range(batch.shape[0]):
        x, y = batch[i], masks[i]
        if rng.random() < 0.5:
            x, y = x[:, :, ::-1], y[:, :, ::-1]
        if rng.random() < 0.5:
            x, y = x[:, ::-1, :], y[:, ::-1, :]
        k = int(rng.integers(4))
        x, y = np.rot90(x, k, axes=(1, 2)), np.rot90(y, k, axes=(1, 2))
        if config.max_shift:
            dy, dx = rng.integers(-config.max_shift, config.max_shift + 1, size=2)
            x, y = np.roll(x, (dy, dx), axis=(1, 2)), np.roll(y, (dy, dx), axis=(1, 2))
        out_x[i] = x + rng.standard_normal(x.shape).astype(x.dtype) * config.noise_sigma
        out_y[i] = y
    return out_x, out_y


@dataclass
class SourceResult:
    model: object
    rows: list
    initial_loss: float


def dataset_bce(model, images, masks, batch_size=16):
    """Sample-weighted BCE over fixed batches using batch statistics, no updates."""
    probe = model.copy().set_trainable(False)
    total = 0.0
    for idx in _batches(images.shape[0], batch_size, None):
        out = probe.forward(images[idx], "stat_collect")
        total += len(idx) * float(ops.binary_cross_entropy(out.probs, masks[idx]).data)
    return total / images.shape[0]


def train_source(datasets, config, seed=0, model_config=None):
    """Supervised BCE training on the union of labeled source datasets."""
    samples = [s for ds in datasets for s in ds]
    if not samples:
        raise RejectedInputError("train_source needs labeled samples")
    images = stack_images(samples)
    masks = stack_masks(samples)
    model_config = model_config or SegModelConfig(
        in_channels=images.shape[1], base_channels=config.base_channels, depth=config.depth,
        num_classes=masks.shape[1],
    )
    model = build_model(model_config, seed=seed)
    params = model.parameters()
    state = OptimizerState(lr0=config.lr0, T=config.epochs, momentum=config.momentum)
    rng = np.random.default_rng([seed, 303])

    initial_loss = dataset_bce(model, images, masks, config.batch_size)

    rows = []
    for epoch in range(config.epochs):
        state.t = epoch
        lr = poly_decay_lr(config.lr0, epoch, config.epochs)
        total, count = 0.0, 0
        for idx in _batches(images.shape[0], config.batch_size, rng):
            if len(idx) < 2:
                continue
            x, y = _augment_source(images[idx], masks[idx], rng, config)
            model.zero_grad()
            out = model.forward(x, "train")
            loss = ops.binary_cross_entropy(out.probs, y)
            backward(loss)
            sgd_momentum_step(params, [p.grad for p in params], state, lr)
            total += len(idx) * float(loss.data)
            count += len(idx)
        rows.append(TraceRow("source", epoch, loss_seg=total / count, lr=lr))
        log.debug("source epoch %d loss %.5f", epoch, total / count)
    model.set_trainable(False)
    return SourceResult(model, rows, initial_loss)
