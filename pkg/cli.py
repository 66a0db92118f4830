#!/usr/bin/env python3
"""
命令行入口

    dataset build   生成 binarized / translated / superimposed MNIST，或 cstvae 先验采样合成集
    train           训练 vae / stvae / cstvae
    eval classify   冻结模型特征上的下游分类
    eval decompose  推断图层与真实图层的误差
    render          样本、分解、类别平均图像网格
    gradcheck       有限差分梯度检查
    elbo report     比较多次运行的 ELBO
    config          打印当前配置

退出码: 0 成功, 1 用法/配置错误, 2 运行失败
"""

import argparse
import dataclasses
import logging
import os
import sys
from typing import List, Optional

import datasets
import gradcheck
import metrics_analyzer
import tensor_store
from chart_generator import ChartGenerator
from config import Config, load_config_file, merge_overrides, setup_logging
from errors import ConfigError, CstvaeError
from cstvae import CstVae
from evaluation import (RENDER_MODES, ClassifierConfig, classify, evaluate_decomposition, generated_set,
                        render, write_accuracy_report, write_decomposition_report)
from training import TrainConfig, Trainer, build_model_from_config, load_checkpoint_model

logger = logging.getLogger(__name__)

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2
FEATURE_KINDS = ("vae", "stvae", "cstvae", "raw", "raw_stn")
GENERATED_COUNTS = {"train": 10000, "test": 2000}
TRAIN_OPTIONS = [f.name for f in dataclasses.fields(TrainConfig)]


class UsageError(Exception):
    pass


class CliParser(argparse.ArgumentParser):
    """Usage errors print help and exit 1 instead of argparse's 2"""

    def error(self, message):
        self.print_help(sys.stderr)
        self.exit(EXIT_USAGE, f"\n{self.prog}: error: {message}\n")


def _common(p: argparse.ArgumentParser):
    p.add_argument("--seed", type=int, default=None, help="master seed (default: CSTVAE_SEED)")
    p.add_argument("--out", default=None, help="output directory or file")
    p.add_argument("--checkpoint", default=None, help="checkpoint directory")
    p.add_argument("--config", default=None, help=".toml or KEY=value experiment file")


def build_parser() -> CliParser:
    parser = CliParser(prog="cstvae", description="Layered VAEs with spatial transformers")
    parser.add_argument("--log-level", default=None, help="DEBUG, INFO, WARNING, ...")
    sub = parser.add_subparsers(dest="command", required=True)

    # dataset build
    dataset = sub.add_parser("dataset", help="dataset generation")
    dataset_sub = dataset.add_subparsers(dest="action", required=True)
    build = dataset_sub.add_parser("build", help="build a derived MNIST dataset")
    _common(build)
    build.add_argument("--kind", choices=["mnist", "translated", "superimposed", "generated"], required=True,
                       help="generated: composites sampled from a cstvae --checkpoint")
    build.add_argument("--mnist-dir", default=None, help="IDX files (default: CSTVAE_MNIST_DIR)")
    build.add_argument("--resize", type=int, default=None, help="rescale digits to HxH first")
    build.add_argument("--threshold", type=float, default=datasets.DEFAULT_THRESHOLD)
    build.add_argument("--canvas", type=int, default=None, help="36 translated, 50 superimposed")
    build.add_argument("--n-train", type=int, default=None)
    build.add_argument("--n-test", type=int, default=None)
    build.add_argument("--take-train", type=int, default=None, help="use only the first N source digits")
    build.add_argument("--take-test", type=int, default=None)

    # train
    train = sub.add_parser("train", help="train a model")
    _common(train)
    train.add_argument("--data", required=False, help="dataset directory from `dataset build`")
    train.add_argument("--model", choices=["vae", "stvae", "cstvae"], default=None)
    train.add_argument("--layers", type=int, default=None)
    train.add_argument("--tie-layers", dest="tie_layers", action=argparse.BooleanOptionalAction, default=None)
    train.add_argument("--steps", dest="max_steps", type=int, default=None)
    train.add_argument("--batch-size", dest="minibatch_size", type=int, default=None)
    train.add_argument("--lr", dest="learning_rate", type=float, default=None)
    train.add_argument("--weight-decay", dest="weight_decay_lambda", type=float, default=None)
    train.add_argument("--content-dim", type=int, default=None, help="50 vae/stvae, 20 per layer cstvae")
    train.add_argument("--pose-dim", type=int, default=None)
    train.add_argument("--content-hidden", type=int, default=None, help="256 vae/stvae, 128 cstvae")
    train.add_argument("--pose-hidden", type=int, default=None)
    train.add_argument("--hidden-layers", type=int, default=None)
    train.add_argument("--likelihood", choices=["bernoulli", "gaussian"], default=None)
    train.add_argument("--gaussian-variance", type=float, default=None)
    train.add_argument("--logit-link", action=argparse.BooleanOptionalAction, default=None)
    train.add_argument("--kl-mode", choices=["analytic", "sampled"], default=None)
    train.add_argument("--samples", type=int, default=None)
    train.add_argument("--eval-every", type=int, default=None)
    train.add_argument("--eval-examples", type=int, default=None)
    train.add_argument("--checkpoint-every", type=int, default=None)
    train.add_argument("--max-skip-rate", type=float, default=None)
    train.add_argument("--check-ranges", action=argparse.BooleanOptionalAction, default=None)
    train.add_argument("--limit-train", type=int, default=None)
    train.add_argument("--limit-test", type=int, default=None)
    train.add_argument("--no-progress", action="store_true")

    # eval classify
    evaluate = sub.add_parser("eval", help="evaluation")
    eval_sub = evaluate.add_subparsers(dest="action", required=True)
    cls = eval_sub.add_parser("classify", help="downstream digit classification")
    _common(cls)
    cls.add_argument("--data", required=True)
    cls.add_argument("--features", choices=FEATURE_KINDS, required=True,
                     help="model whose latent means are used, or raw / raw_stn baselines")
    cls.add_argument("--hidden", type=int, default=None, help="32 single digits, 256 pairs")
    cls.add_argument("--epochs", type=int, default=30)
    cls.add_argument("--limit-train", type=int, default=None)
    cls.add_argument("--limit-test", type=int, default=None)
    dec = eval_sub.add_parser("decompose", help="layer error of a cstvae on a superimposed or generated set")
    _common(dec)
    dec.add_argument("--data", required=True)
    dec.add_argument("--split", choices=["train", "test"], default="test")
    dec.add_argument("--limit", type=int, default=None, help="use only the first N images")

    # render
    rend = sub.add_parser("render", help="write image grids")
    _common(rend)
    rend.add_argument("--mode", choices=RENDER_MODES, required=True)
    rend.add_argument("--data", default=None, help="dataset directory (decomposition, class_averages)")
    rend.add_argument("--split", choices=["train", "test"], default="test")
    rend.add_argument("--n", type=int, default=8)

    # gradcheck
    grad = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    _common(grad)
    grad.add_argument("--module", choices=["all", *gradcheck.SUITES], default="all")

    # elbo report
    elbo = sub.add_parser("elbo", help="ELBO analysis")
    elbo_sub = elbo.add_subparsers(dest="action", required=True)
    report = elbo_sub.add_parser("report", help="compare runs by final test ELBO")
    _common(report)
    report.add_argument("runs", nargs="+", help="run directories")
    report.add_argument("--chart", action="store_true", help="also draw learning curves")

    sub.add_parser("config", help="print the active configuration")
    return parser


def _seed(args) -> int:
    return Config.SEED if args.seed is None else args.seed


# -------------------------------------------------------------- commands

def _load_layered(checkpoint: Optional[str], purpose: str) -> CstVae:
    if not checkpoint:
        raise UsageError(f"{purpose} needs --checkpoint")
    model, train_config = load_checkpoint_model(checkpoint)
    if not isinstance(model, CstVae):
        raise ConfigError(f"checkpoint holds a {train_config.model} model, {purpose} needs cstvae")
    return model


def cmd_dataset_generated(args) -> int:
    model = _load_layered(args.checkpoint, "--kind generated")
    seed = _seed(args)
    out = args.out or os.path.join(Config.DATA_DIR, "generated")
    n_images = {"train": args.n_train or GENERATED_COUNTS["train"],
                "test": args.n_test or GENERATED_COUNTS["test"]}
    splits = {name: generated_set(model, n, seed, name) for name, n in n_images.items()}
    config = {"kind": "generated", "n_images": n_images, "layers": len(model.layers),
              "source": os.path.abspath(args.checkpoint)}
    datasets.save_dataset(out, splits, config, seed)
    print(f"✅ generated dataset written to {out}")
    return EXIT_OK


def cmd_dataset_build(args) -> int:
    if args.kind == "generated":
        return cmd_dataset_generated(args)
    mnist_dir = args.mnist_dir or Config.MNIST_DIR
    if not mnist_dir:
        raise UsageError("--mnist-dir (or CSTVAE_MNIST_DIR) is required")
    seed = _seed(args)
    out = args.out or os.path.join(Config.DATA_DIR, args.kind)
    limits = {"train": args.take_train, "test": args.take_test}
    n_images = {"train": args.n_train, "test": args.n_test}

    splits = {}
    for name, s in datasets.load_mnist(mnist_dir).items():
        if limits[name]:
            s = s.take(limits[name])
        if args.resize:
            s = datasets.resize_set(s, args.resize, args.resize)
        s = datasets.binarize(s, args.threshold)
        if args.kind == "translated":
            s = datasets.translate_set(s, args.canvas or 36, args.canvas or 36, seed=seed)
        elif args.kind == "superimposed":
            s = datasets.superimpose_set(s, args.canvas or 50, n_images[name], seed=seed)
        splits[name] = s

    config = {"kind": args.kind, "threshold": args.threshold, "resize": args.resize,
              "canvas": args.canvas, "take": limits, "n_images": n_images,
              "source": os.path.abspath(mnist_dir)}
    datasets.save_dataset(out, splits, config, seed)
    print(f"✅ {args.kind} dataset written to {out}")
    return EXIT_OK


def _load_splits(path: str, limit_train: Optional[int] = None, limit_test: Optional[int] = None):
    splits = datasets.load_dataset(path)
    if limit_train and "train" in splits:
        splits["train"] = splits["train"].take(limit_train)
    if limit_test and "test" in splits:
        splits["test"] = splits["test"].take(limit_test)
    return splits


def cmd_train(args) -> int:
    flags = {key: getattr(args, key, None) for key in TRAIN_OPTIONS}
    flags["seed"] = args.seed
    file_values = load_config_file(args.config) if args.config else {}
    values = merge_overrides(file_values, flags)
    file_data = values.pop("data", None)
    data = args.data or file_data
    if not data:
        raise UsageError("--data is required")

    if args.checkpoint:
        manifest = tensor_store.read_manifest(args.checkpoint)
        config = TrainConfig.from_dict(manifest.get("config", {}))
    else:
        values.setdefault("seed", Config.SEED)
        values.setdefault("model", "stvae")
        config = TrainConfig.from_dict(values)

    splits = _load_splits(data, args.limit_train, args.limit_test)
    train_set, test_set = splits["train"], splits.get("test")
    if config.likelihood == "bernoulli" and not train_set.is_binary:
        raise ConfigError("bernoulli likelihood needs a binarized dataset")

    run_dir = args.out or os.path.join(Config.RUNS_DIR, f"{config.model}_seed{config.seed}")
    test_images = None if test_set is None else test_set.images
    if args.checkpoint:
        model = build_model_from_config(config, manifest["image_shape"])
        trainer = Trainer.resume(args.checkpoint, model, train_set.images, test_images, run_dir)
    else:
        model = build_model_from_config(config, train_set.image_shape)
        trainer = Trainer(config, model, train_set.images, test_images, run_dir)

    result = trainer.train(max_steps=args.max_steps, progress=not args.no_progress)
    print(f"✅ {config.model}: {result.steps} steps, skips {result.skips}")
    if result.final_test:
        print(f"  • test ELBO / example: {result.final_test['elbo_per_example']:.4f}")
    print(f"  • checkpoint: {result.checkpoint}")
    return EXIT_OK


def cmd_eval_classify(args) -> int:
    seed = _seed(args)
    splits = _load_splits(args.data, args.limit_train, args.limit_test)
    train_set, test_set = splits["train"], splits["test"]
    pairs = train_set.labels.ndim == 2

    model = None
    if args.features in ("vae", "stvae", "cstvae"):
        if not args.checkpoint:
            raise UsageError(f"--features {args.features} needs --checkpoint")
        model, train_config = load_checkpoint_model(args.checkpoint)
        if train_config.model != args.features:
            raise ConfigError(f"checkpoint holds a {train_config.model} model, not {args.features}")
        input_kind = "latent_means"
    else:
        input_kind = "raw_pixels" if args.features == "raw" else "raw_pixels_with_stn"

    cfg = ClassifierConfig(input_kind=input_kind, hidden=args.hidden or (256 if pairs else 32),
                           epochs=args.epochs, seed=seed)
    report = classify(model, train_set, test_set, cfg)
    out = args.out or os.path.join(Config.RUNS_DIR, "accuracy.csv")
    write_accuracy_report(out, args.features, cfg, report)

    print("model,input_kind,train_acc,test_acc,seed")
    print(f"{args.features},{input_kind},{report.train_acc:.6f},{report.test_acc:.6f},{seed}")
    if report.test_single_acc is not None:
        print(f"  • single-digit test accuracy: {report.test_single_acc:.4f}")
    return EXIT_OK


def cmd_eval_decompose(args) -> int:
    model = _load_layered(args.checkpoint, "eval decompose")
    splits = datasets.load_dataset(args.data)
    if args.split not in splits:
        raise ConfigError(f"{args.data} has no {args.split} split")
    s = splits[args.split]
    if s.layers is None and s.provenance is None:
        raise ConfigError(f"{args.data} carries no ground-truth layers (use a superimposed or generated set)")
    examples, mae = evaluate_decomposition(model, s, args.limit)
    out = args.out or os.path.join(Config.RUNS_DIR, "decomposition.csv")
    write_decomposition_report(out, args.checkpoint, args.split, examples, mae)

    print("checkpoint,split,examples,layer_mae")
    print(f"{args.checkpoint},{args.split},{examples},{mae:.6f}")
    return EXIT_OK


def cmd_render(args) -> int:
    if not args.checkpoint:
        raise UsageError("render needs --checkpoint")
    model, _ = load_checkpoint_model(args.checkpoint)
    images = labels = None
    if args.data:
        s = datasets.load_dataset(args.data)[args.split]
        images, labels = s.images, s.labels
    out = args.out or Config.CHARTS_DIR
    for path in render(model, args.mode, out, images, labels, n=args.n, seed=_seed(args)):
        print(f"🖼️  {path}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    results = gradcheck.run_suite(args.module, seed=_seed(args))
    failed = [r for r in results if not r.passed]
    for r in results:
        mark = "✅" if r.passed else "❌"
        print(f"  {mark} {r.module:20s} {r.check:40s} {r.max_rel_error:.2e}")
    print(f"\n{len(results) - len(failed)}/{len(results)} checks passed")
    return EXIT_OK if not failed else EXIT_RUNTIME


def cmd_elbo_report(args) -> int:
    metrics_analyzer.generate_report(args.runs)
    if args.chart:
        frames = {metrics_analyzer.run_label(r): metrics_analyzer.load_run_metrics(r) for r in args.runs}
        path = ChartGenerator(args.out or Config.CHARTS_DIR).generate_learning_curves(frames)
        if path is None:
            return EXIT_RUNTIME
    return EXIT_OK


def cmd_config(args) -> int:
    Config.print_config_summary()
    return EXIT_OK


COMMANDS = {
    ("dataset", "build"): cmd_dataset_build,
    ("train", None): cmd_train,
    ("eval", "classify"): cmd_eval_classify,
    ("eval", "decompose"): cmd_eval_decompose,
    ("render", None): cmd_render,
    ("gradcheck", None): cmd_gradcheck,
    ("elbo", "report"): cmd_elbo_report,
    ("config", None): cmd_config,
}


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code in (0, None) else EXIT_USAGE

    handler = COMMANDS[(args.command, getattr(args, "action", None))]
    try:
        setup_logging(args.log_level)
        return handler(args)
    except UsageError as e:
        parser.print_usage(sys.stderr)
        logger.error(str(e))
        return EXIT_USAGE
    except ConfigError as e:
        logger.error(f"configuration error: {e}")
        return EXIT_USAGE
    except (CstvaeError, OSError) as e:
        logger.error(f"{type(e).__name__}: {e}")
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
