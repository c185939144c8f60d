"""Command-line entry point: gen-data, train-source, adapt, eval, ablate.

Exit codes: 0 success, 1 configuration/usage error, 2 runtime failure.
"""
import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

from . import data
from .config import ExperimentConfig, parse_config, serialize_config
from .errors import ConfigError, FormatError
from .evaluation import evaluate_model, mean_dice, metrics_to_csv
from .experiment import check_artifacts, run_experiment, run_variant, save_prompt
from .pipeline import Prompt, train_source, trace_to_csv
from .segnet import SegModel

log = logging.getLogger("sfda_prompt")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise ConfigError(message)


def _load_config(path):
    return parse_config(path) if path else ExperimentConfig()


def _domain_dir(path, split):
    """Accept a split directory (has manifest.txt) or a domain directory."""
    path = Path(path)
    if (path / "manifest.txt").exists():
        return path.parent, path.name
    if (path / split / "manifest.txt").exists():
        return path, split
    raise ConfigError(f"no dataset split found at {path} (looked for manifest.txt and {split}/manifest.txt)")


def _load(path, split):
    domain_dir, split = _domain_dir(path, split)
    samples, _ = data.load_split(domain_dir.parent, domain_dir.name, split)
    return samples, domain_dir.name


# ---------------------------------------------------------------- commands

def cmd_gen_data(args):
    cfg = _load_config(args.config).data
    out = Path(args.out)
    shape = (cfg.height, cfg.width, cfg.channels)
    domains = list(cfg.source_domains) + [cfg.target_domain]
    for name in domains:
        if name not in data.DOMAIN_PRESETS:
            raise ConfigError(f"unknown domain preset {name!r}; known: {', '.join(data.DOMAIN_PRESETS)}")
    for k, name in enumerate(domains):
        for split_id, (split, n) in enumerate((("train", cfg.n_train), ("test", cfg.n_test))):
            seed = cfg.seed * 1000 + 10 * k + split_id
            samples = data.gen_domain(data.DOMAIN_PRESETS[name], n, shape, seed=seed)
            data.save_split(out, name, split, samples, seed)
            log.info("wrote %s/%s (%d samples)", name, split, n)
    return EXIT_OK


def cmd_train_source(args):
    cfg = _load_config(args.config)
    src_cfg = cfg.source
    if args.epochs is not None:
        src_cfg = replace(src_cfg, epochs=args.epochs)
    if args.base_channels is not None:
        src_cfg = replace(src_cfg, base_channels=args.base_channels)
    root = Path(args.data)
    for name in cfg.data.source_domains:
        if not (root / name / "train" / "manifest.txt").exists():
            raise ConfigError(f"missing source domain {name} under {root}")
    train = [data.load_split(root, name, "train")[0] for name in cfg.data.source_domains]
    result = train_source(train, src_cfg, seed=args.seed)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    result.model.save(out)
    out.with_name(out.name + ".trace.csv").write_text(trace_to_csv(result.rows))
    records = []
    for name in cfg.data.source_domains:
        if (root / name / "test" / "manifest.txt").exists():
            test, _ = data.load_split(root, name, "test")
            records.extend(evaluate_model(result.model, None, test, cfg.fas.threshold,
                                          variant="source", domain=name, seed=args.seed))
    if records:
        out.with_name(out.name + ".metrics.csv").write_text(metrics_to_csv(records))
        print(f"in-domain validation Dice (mean over classes and domains): {mean_dice(records):.4f}")
    return EXIT_OK


def cmd_adapt(args):
    cfg = _load_config(args.config)
    pls, fas = cfg.pls, cfg.fas
    if args.alpha is not None:
        pls = replace(pls, alpha=args.alpha)
    if args.pls_epochs is not None:
        pls = replace(pls, epochs=args.pls_epochs)
    if args.bn_layers is not None:
        pls = replace(pls, bn_layer_count=args.bn_layers)
    if args.gamma is not None:
        fas = replace(fas, gamma=args.gamma)
    if args.fas_epochs is not None:
        fas = replace(fas, epochs=args.fas_epochs)
    cfg = replace(cfg, pls=pls, fas=fas)
    if not Path(args.model).exists():
        raise ConfigError(f"source model not found: {args.model}")
    domain_dir, _ = _domain_dir(args.target, "train")
    source_model = SegModel.load(args.model)
    train, _ = data.load_split(domain_dir.parent, domain_dir.name, "train")
    has_test = (domain_dir / "test" / "manifest.txt").exists()
    test = data.load_split(domain_dir.parent, domain_dir.name, "test")[0] if has_test else train
    records, art = run_variant(args.variant, args.seed, source_model, data.stack_images(train), test, cfg,
                               domain=domain_dir.name)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if "prompt" in art:
        save_prompt(out / "prompt.tns", art["prompt"])
    (art.get("model") or source_model).save(out / "model.bin")
    (out / "trace.csv").write_text(trace_to_csv(art["rows"]))
    if has_test:
        (out / "metrics.csv").write_text(metrics_to_csv(records))
        print(f"{args.variant} target Dice (mean over classes): {mean_dice(records):.4f}")
    return EXIT_OK


def cmd_eval(args):
    if not Path(args.model).exists():
        raise ConfigError(f"model not found: {args.model}")
    model = SegModel.load(args.model)
    prompt = None
    if args.prompt:
        if not Path(args.prompt).exists():
            raise ConfigError(f"prompt not found: {args.prompt}")
        arr = data.io_tensor(args.prompt, "read")
        prompt = Prompt.identity(arr.shape)
        prompt.offsets.data[...] = arr
    samples, domain = _load(args.data, "test")
    records = evaluate_model(model, prompt, samples, args.threshold, variant=args.variant, domain=domain, seed=0)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    Path(args.out).write_text(metrics_to_csv(records))
    print(f"Dice (mean over classes): {mean_dice(records):.4f}")
    return EXIT_OK


def cmd_ablate(args):
    cfg = parse_config(args.config)
    check_artifacts(cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.canonical.txt").write_text(serialize_config(cfg))
    run_experiment(cfg, out, variants=cfg.variants)
    return EXIT_OK


# ------------------------------------------------------------------ parser

def _layers(text):
    if text == "all":
        return "all"
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError("expected an integer or 'all'") from None
    if value < 1:
        raise argparse.ArgumentTypeError("must be >= 1")
    return value


def build_parser():
    parser = _Parser(prog="sfda-prompt", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-data", help="write the synthetic multi-domain benchmark")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train-source", help="train the source model on the source domains")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--config")
    p.add_argument("--epochs", type=int)
    p.add_argument("--base-channels", type=int)
    p.set_defaults(func=cmd_train_source)

    p = sub.add_parser("adapt", help="adapt a source model to a target domain")
    p.add_argument("--model", required=True)
    p.add_argument("--target", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--variant", default="full",
                   choices=["no_da", "self_train", "pls_only", "fas_only", "full"])
    p.add_argument("--alpha", type=float)
    p.add_argument("--gamma", type=float)
    p.add_argument("--pls-epochs", type=int)
    p.add_argument("--fas-epochs", type=int)
    p.add_argument("--bn-layers", type=_layers)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--config")
    p.set_defaults(func=cmd_adapt)

    p = sub.add_parser("eval", help="Dice of a model (optionally prompted) on a labeled split")
    p.add_argument("--model", required=True)
    p.add_argument("--prompt")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--variant", default="eval")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="run every configured variant for every seed")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        logging.basicConfig(level=logging.DEBUG if args.verbose > 1 else
                            logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (FormatError, OSError, ValueError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
