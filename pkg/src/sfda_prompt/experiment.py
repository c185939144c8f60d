"""Variant orchestration: no_da, self_train, pls_only, fas_only, full."""
import logging
from dataclasses import replace
from pathlib import Path

from . import data
from .errors import ConfigError
from .evaluation import aggregate, evaluate_model, metrics_to_csv
from .pipeline import (
    generate_pseudo_labels,
    run_fas,
    run_pls,
    trace_to_csv,
)
from .segnet import SegModel

log = logging.getLogger(__name__)


def save_prompt(path, prompt):
    data.io_tensor(path, "write", prompt.array())


def check_artifacts(config, need_model=True):
    """Fail fast with a ConfigError if inputs are missing."""
    if not config.data_root:
        raise ConfigError("data_root is not set")
    root = Path(config.data_root)
    target = config.data.target_domain
    for split in ("train", "test"):
        manifest = root / target / split / "manifest.txt"
        if not manifest.exists():
            raise ConfigError(f"missing target split: {manifest}")
    if need_model:
        if not config.source_model:
            raise ConfigError("source_model is not set")
        if not Path(config.source_model).exists():
            raise ConfigError(f"source model not found: {config.source_model}")


class _StageCache:
    """Per-seed PLS results shared by the variants that need them."""

    def __init__(self, model, train_images, config):
        self.model = model
        self.images = train_images
        self.config = config
        self._pls = {}

    def pls(self, seed):
        if seed not in self._pls:
            self._pls[seed] = run_pls(self.model, self.images, self.config.pls, seed=seed)
        return self._pls[seed]


def run_variant(variant, seed, source_model, train_images, test_samples, config, cache=None, domain="target"):
    """Run one variant for one seed; returns (records, artifacts dict)."""
    cache = cache or _StageCache(source_model, train_images, config)
    fas_cfg = config.fas
    threshold = fas_cfg.threshold
    artifacts = {"rows": []}
    if variant == "no_da":
        model, prompt = source_model, None
    elif variant == "pls_only":
        pls = cache.pls(seed)
        model, prompt = source_model, pls.prompt
        artifacts.update(prompt=pls.prompt, rows=list(pls.rows))
    elif variant in ("full", "fas_only"):
        pls = cache.pls(seed)
        pseudo = generate_pseudo_labels(source_model, pls.prompt, train_images, threshold)
        use_prompt = variant == "full"
        fas = run_fas(source_model, pls.prompt, train_images, pseudo, fas_cfg, seed=seed, use_prompt=use_prompt)
        model = fas.model
        prompt = pls.prompt if use_prompt else None
        artifacts.update(prompt=pls.prompt, model=model, rows=list(pls.rows) + fas.rows)
    elif variant == "self_train":
        pseudo = generate_pseudo_labels(source_model, None, train_images, threshold)
        plain = replace(fas_cfg, gamma=0.0, augment=False)
        fas = run_fas(source_model, None, train_images, pseudo, plain, seed=seed, use_prompt=False)
        model, prompt = fas.model, None
        artifacts.update(model=model, rows=fas.rows)
    else:
        raise ConfigError(f"unknown variant {variant!r}")
    records = evaluate_model(model, prompt, test_samples, threshold, variant=variant, domain=domain, seed=seed)
    return records, artifacts


def run_experiment(config, out_dir, variants=None):
    """Execute variants x seeds on the target domain and write reports.

    Writes ``metrics.csv`` (per-seed rows plus one aggregate row per
    variant and class), and per run a loss trace, the prompt, and the
    adapted model where one exists. Returns the list of records.
    """
    variants = tuple(variants or (config.variant,))
    check_artifacts(config)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    source_model = SegModel.load(config.source_model)
    domain = config.data.target_domain
    train, _ = data.load_split(config.data_root, domain, "train")
    test, _ = data.load_split(config.data_root, domain, "test")
    train_images = data.stack_images(train)
    cache = _StageCache(source_model, train_images, config)

    records = []
    for seed in config.seeds:
        for variant in variants:
            log.info("running %s seed %d", variant, seed)
            recs, art = run_variant(variant, seed, source_model, train_images, test, config, cache, domain)
            records.extend(recs)
            tag = f"{variant}_seed{seed}"
            if art["rows"]:
                (out / f"trace_{tag}.csv").write_text(trace_to_csv(art["rows"]))
            if "prompt" in art:
                save_prompt(out / f"prompt_{tag}.tns", art["prompt"])
            if "model" in art:
                art["model"].save(out / f"model_{tag}.bin")
    summary = []
    for variant in variants:
        summary.extend(aggregate(records, variant, domain))
    (out / "metrics.csv").write_text(metrics_to_csv(records + summary))
    return records + summary
