#!/usr/bin/env python3
"""
Command-line entry point for partial channel dependence forecasting.

    python3 scripts/pcd.py train --synth-spec "lagged_copy:C=4,T=2000,tau=3,sigma=0.1,seed=7" \
        --mode pcd --horizon 12 --out runs/pcd
    python3 scripts/pcd.py analyze --data data/etth1.csv --metric dtw
"""
import argparse
import logging
import os
import sys
from dataclasses import replace
from typing import Dict, List, Optional

import numpy as np

sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

import autodiff as ad
from chanmask import STRATEGIES, VARIANTS, ParamsRegistry, ScalarParams, build_mask, register_params, select_unseen_params
from chanstats import METRICS, CorrCache, compute_stats, train_split_stats
from dataio import RawDataset, SplitSpec, SynthSpec, linear_interpolate, load_csv, prepare, synth_generate
from errors import ContractError, NumericError, PCDError
from experiments import (ABLATION_MASKS, DEFAULT_HORIZONS, DEFAULT_RATIOS, MASK_CHOICES,
                         ablation_run, benchmark, cd_ratio_report, fit_and_evaluate,
                         mcp_compare, robustness_sweep)
from forecaster import COMPOSITIONS, MODES, ForecastModel, ModelConfig, batch_loss, load_checkpoint, save_checkpoint
from report import history_report, render_history, render_json, render_text, write_report
from settings import load_config, merge_options, setup_logging, storage_dir
from store import RunRecord, get_store
from train import TrainConfig, evaluate, masked_channel_prediction

logger = logging.getLogger("pcd")

DEFAULTS = {
    "data": None,
    "synth_spec": None,
    "allow_missing": False,
    "mode": "pcd",
    "composition": "both",
    "mask_variant": "scalar",
    "mask_kind": "full",
    "metric": "pearson",
    "lookback": 96,
    "horizon": 96,
    "d_model": 64,
    "n_heads": 4,
    "n_layers": 2,
    "vector_dim": 8,
    "instance_norm": True,
    "epochs": 10,
    "batch_size": 32,
    "lr": 1e-3,
    "lr_decay": "constant",
    "patience": None,
    "train_fraction": 0.7,
    "val_fraction": 0.1,
    "data_ratio": 1.0,
    "seed": 0,
    "out": None,
    "registry": None,
    "storage": None,
    "no_store": False,
}

COMMAND_DEFAULTS = {
    # an instance-normalised model pins a masked channel's forecast
    "mcp": {"instance_norm": False},
}

COMPOSITION_ALIASES = {"local": "local_only", "global": "global_only", "both": "both",
                       "local_only": "local_only", "global_only": "global_only"}

GRADCHECK_LIMITS = {"model": 1e-4, "mask": 1e-6}


def _csv_list(text: str) -> List[str]:
    return [t.strip() for t in str(text).split(",") if t.strip()]


# --- Option resolution ---

def resolve(command: str, args: argparse.Namespace, config: Dict) -> Dict:
    flags = {k: v for k, v in vars(args).items() if k not in ("command", "config", "verbose")}
    defaults = dict(DEFAULTS, **COMMAND_DEFAULTS.get(command, {}))
    opts = merge_options(command, flags, config, defaults, sections=COMMANDS)
    opts["composition"] = COMPOSITION_ALIASES.get(opts["composition"], opts["composition"])
    return opts


def model_config(opts: Dict) -> ModelConfig:
    return ModelConfig(
        lookback=int(opts["lookback"]), horizon=int(opts["horizon"]), d_model=int(opts["d_model"]),
        n_heads=int(opts["n_heads"]), n_layers=int(opts["n_layers"]),
        attention_mode=opts["mode"], composition=opts["composition"],
        instance_norm=bool(opts["instance_norm"]), mask_variant=opts["mask_variant"],
        mask_kind=opts["mask_kind"], vector_dim=int(opts["vector_dim"]), seed=int(opts["seed"]),
    ).validate()


def train_config(opts: Dict) -> TrainConfig:
    return TrainConfig(
        epochs=int(opts["epochs"]), batch_size=int(opts["batch_size"]), lr=float(opts["lr"]),
        seed=int(opts["seed"]), lr_decay=opts["lr_decay"],
        patience=int(opts["patience"]) if opts["patience"] is not None else None,
    ).validate()


def split_spec(opts: Dict) -> SplitSpec:
    train, val = float(opts["train_fraction"]), float(opts["val_fraction"])
    return SplitSpec(train, val, round(1.0 - train - val, 12))


def load_dataset(opts: Dict) -> RawDataset:
    if opts["data"]:
        ds = load_csv(opts["data"], allow_missing=bool(opts["allow_missing"]))
        if np.isnan(ds.values).any():
            logger.info("%s: interpolating %d missing cells", ds.name, int(np.isnan(ds.values).sum()))
            ds = linear_interpolate(ds)
        return ds
    spec = opts["synth_spec"]
    if spec:
        spec = SynthSpec.from_dict(spec) if isinstance(spec, dict) else SynthSpec.parse(spec)
        return synth_generate(spec)
    raise ContractError("no dataset: give --data or --synth-spec")


def _storage(opts: Dict, config: Dict) -> str:
    return storage_dir(config, opts["storage"])


def _registry(opts: Dict, config: Dict) -> ParamsRegistry:
    path = opts["registry"] or os.path.join(_storage(opts, config), "registry.yaml")
    return ParamsRegistry(path)


def _cache(opts: Dict, config: Dict) -> CorrCache:
    return CorrCache(os.path.join(_storage(opts, config), "corr_cache.yaml"))


def _emit(report: Dict, opts: Dict) -> None:
    if opts["out"]:
        write_report(opts["out"], report)
    print(render_text(report), end="")


def _record(opts: Dict, config: Dict, report, cfg: ModelConfig) -> None:
    if opts["no_store"]:
        return
    store = get_store(config, opts["storage"])
    for horizon, metrics in sorted(report.per_horizon.items()):
        store.add_run(RunRecord(
            dataset=report.dataset, mode=report.mode, composition=report.composition,
            mask_kind=report.mask_kind,
            mask_variant=cfg.mask_variant if cfg.attention_mode == "pcd" else "none",
            metric=opts["metric"], horizon=int(horizon), lookback=cfg.lookback, seed=cfg.seed,
            mse=metrics["mse"], mae=metrics["mae"], cd_ratio=metrics.get("cd_ratio", report.cd_ratio),
            alpha=report.alpha, beta=report.beta, r_abs=report.r_abs, channels=report.channels))


# --- Commands ---

def cmd_train(opts: Dict, config: Dict) -> int:
    ds = load_dataset(opts)
    cfg = model_config(opts)
    result = fit_and_evaluate(ds, cfg, train_config(opts), opts["metric"], split_spec(opts),
                              float(opts["data_ratio"]), _cache(opts, config))
    report = result.report.to_dict()
    report["history"] = result.history.to_dict()

    if opts["out"]:
        os.makedirs(opts["out"], exist_ok=True)
        save_checkpoint(result.model, os.path.join(opts["out"], "model.ckpt"))
    if isinstance(result.model.domain, ScalarParams) and cfg.mask_kind == "full":
        registry = _registry(opts, config)
        register_params(registry, ds.name, result.model.domain, result.stats.r_bar, ds.task)
        registry.save()
    _record(opts, config, result.report, cfg)
    _emit(report, opts)
    return 0


def cmd_eval(opts: Dict, config: Dict) -> int:
    if not opts.get("checkpoint"):
        raise ContractError("eval needs --checkpoint")
    model = load_checkpoint(opts["checkpoint"])
    ds = load_dataset(opts)
    prep = prepare(ds, model.config.lookback, model.config.horizon, split_spec(opts))
    stats = model.stats or train_split_stats(prep.train_values, opts["metric"])
    report = evaluate(model, prep.test_ws, stats, ds.name)
    _emit(report.to_dict(), opts)
    return 0


def cmd_mcp(opts: Dict, config: Dict) -> int:
    ds = load_dataset(opts)
    if opts.get("checkpoint"):
        model = load_checkpoint(opts["checkpoint"])
        prep = prepare(ds, model.config.lookback, model.config.horizon, split_spec(opts))
        rows = masked_channel_prediction(model, prep.test_ws)
        title = f"{ds.name} [{model.config.attention_mode}] masked channel prediction"
    else:
        modes = _csv_list(opts.get("modes") or "ci,pcd")
        rows = mcp_compare(ds, model_config(opts), train_config(opts), modes,
                           opts["metric"], split_spec(opts))
        title = f"{ds.name} masked channel prediction ({', '.join(modes)})"
    _emit({"title": title, "dataset": ds.name, "mcp": rows}, opts)
    return 0


def cmd_analyze(opts: Dict, config: Dict) -> int:
    ds = load_dataset(opts)
    prep = prepare(ds, int(opts["lookback"]), int(opts["horizon"]), split_spec(opts))
    stats = train_split_stats(prep.train_values, opts["metric"], ds.name, _cache(opts, config))
    mask = None
    if opts.get("checkpoint"):
        mask = load_checkpoint(opts["checkpoint"]).mask_snapshot()
    summary = cd_ratio_report(stats, mask)
    summary["warnings"] = list(stats.warnings)
    report = {"title": f"{ds.name} channel statistics", "dataset": ds.name, "stats": summary,
              "R_abs": np.asarray(stats.R_abs).tolist()}
    _emit(report, opts)
    return 0


def cmd_ablate(opts: Dict, config: Dict) -> int:
    ds = load_dataset(opts)
    masks = _csv_list(opts.get("masks") or ",".join(ABLATION_MASKS))
    compositions = [COMPOSITION_ALIASES.get(c, c)
                    for c in _csv_list(opts.get("compositions") or ",".join(COMPOSITIONS))]
    rows = ablation_run(ds, model_config(opts), train_config(opts), masks, compositions,
                        opts["metric"], split_spec(opts), _cache(opts, config))
    _emit({"title": f"{ds.name} ablation", "dataset": ds.name, "ablation": rows}, opts)
    return 0


def cmd_robustness(opts: Dict, config: Dict) -> int:
    ds = load_dataset(opts)
    ratios = [float(r) for r in _csv_list(opts.get("ratios") or ",".join(map(str, DEFAULT_RATIOS)))]
    rows = robustness_sweep(ds, model_config(opts), train_config(opts), ratios,
                            int(opts["seed"]), opts["metric"], split_spec(opts))
    _emit({"title": f"{ds.name} missing-value robustness", "dataset": ds.name,
           "robustness": rows}, opts)
    return 0


def cmd_bench(opts: Dict, config: Dict) -> int:
    ds = load_dataset(opts)
    horizons = [int(h) for h in _csv_list(opts.get("horizons") or ",".join(map(str, DEFAULT_HORIZONS)))]
    cfg = model_config(opts)
    report = benchmark(ds, cfg, train_config(opts), horizons, opts["metric"], split_spec(opts),
                       float(opts["data_ratio"]), _cache(opts, config))
    _record(opts, config, report, cfg)
    _emit(report.to_dict(), opts)
    return 0


def cmd_unseen(opts: Dict, config: Dict) -> int:
    registry = _registry(opts, config)
    strategy = opts.get("strategy") or "avg_all"
    target = opts.get("target_rbar")
    ds = None
    if target is None and (opts["data"] or opts["synth_spec"]):
        ds = load_dataset(opts)
        prep = prepare(ds, int(opts["lookback"]), int(opts["horizon"]), split_spec(opts))
        target = train_split_stats(prep.train_values, opts["metric"]).r_bar
    params = select_unseen_params(registry, strategy, target)
    alpha, beta = params.values
    report = {"title": f"unseen-dataset parameters ({strategy})",
              "params": {"strategy": strategy, "alpha": alpha, "beta": beta,
                         "target_rbar": target}}

    if opts.get("evaluate"):
        ds = ds or load_dataset(opts)
        cfg = replace(model_config(opts), attention_mode="pcd", mask_variant="scalar", mask_kind="full")
        result = fit_and_evaluate(ds, cfg, train_config(opts), opts["metric"], split_spec(opts),
                                  registry=registry, strategy=strategy)
        report.update(result.report.to_dict())
    _emit(report, opts)
    return 0


def cmd_gradcheck(opts: Dict, config: Dict) -> int:
    """Finite-difference check of the full pcd forecaster and of the scalar mask alone"""
    rng = np.random.default_rng(int(opts["seed"]))
    C, L, H = 4, 16, 8
    data = rng.normal(size=(64, C))
    stats = compute_stats(data, "pearson")
    cfg = ModelConfig(lookback=L, horizon=H, d_model=8, n_heads=2, n_layers=1,
                      attention_mode="pcd", mask_variant=opts["mask_variant"],
                      seed=int(opts["seed"]))
    model = ForecastModel(cfg, stats)
    x = rng.normal(size=(2, L, C))
    y = rng.normal(size=(2, H, C))
    errors = {"model": ad.grad_check(lambda: batch_loss(model, x, y), model.parameters())}

    mask_params = ScalarParams.init(0.7, -0.3)
    target = rng.uniform(size=(C, C))
    errors["mask"] = ad.grad_check(
        lambda: ad.mse_loss(build_mask(stats, mask_params).M, ad.constant(target)),
        mask_params.parameters())

    _emit({"title": "gradient check", "gradcheck": errors}, opts)
    for name, err in errors.items():
        if err >= GRADCHECK_LIMITS[name]:
            raise NumericError(f"grad check {name}: relative error {err:.3e} exceeds "
                               f"{GRADCHECK_LIMITS[name]:.0e}", name=name)
    return 0


def cmd_report(opts: Dict, config: Dict) -> int:
    history = history_report(get_store(config, opts["storage"]), opts.get("dataset"))
    if opts.get("json"):
        print(render_json(history))
    else:
        print(render_history(history), end="")
    return 0


def cmd_register(opts: Dict, config: Dict) -> int:
    for key in ("name", "alpha", "beta", "r_rbar"):
        if opts.get(key) is None:
            raise ContractError(f"register needs --{key.replace('_', '-')}")
    registry = _registry(opts, config)
    params = ScalarParams.init(float(opts["alpha"]), float(opts["beta"]), requires_grad=False)
    register_params(registry, opts["name"], params, float(opts["r_rbar"]), opts.get("task") or "forecast")
    registry.save()
    print(f"registered {opts['name']}: alpha={params.values[0]!r} beta={params.values[1]!r}")
    return 0


COMMANDS = {
    "train": cmd_train,
    "eval": cmd_eval,
    "mcp": cmd_mcp,
    "analyze": cmd_analyze,
    "ablate": cmd_ablate,
    "robustness": cmd_robustness,
    "bench": cmd_bench,
    "unseen-params": cmd_unseen,
    "gradcheck": cmd_gradcheck,
    "report": cmd_report,
    "register": cmd_register,
}


# --- Parser ---

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=str, default=None, help="Config file path")
    common.add_argument("--verbose", "-v", action="store_true", help="Debug logging")
    common.add_argument("--storage", type=str, default=None, help="Directory for run db, cache, registry")
    common.add_argument("--out", type=str, default=None, help="Directory for report.json / report.txt")

    data = argparse.ArgumentParser(add_help=False)
    data.add_argument("--data", type=str, default=None, help="CSV file (T rows x C channels)")
    data.add_argument("--synth-spec", type=str, default=None,
                      help='Synthetic data, e.g. "lagged_copy:C=4,T=2000,tau=3,sigma=0.1,seed=7"')
    data.add_argument("--allow-missing", action="store_true", default=None,
                      help="Load empty/nan cells and interpolate them")
    data.add_argument("--metric", choices=METRICS, default=None)
    data.add_argument("--lookback", type=int, default=None)
    data.add_argument("--horizon", type=int, default=None)
    data.add_argument("--train-fraction", type=float, default=None)
    data.add_argument("--val-fraction", type=float, default=None)
    data.add_argument("--seed", type=int, default=None)

    model = argparse.ArgumentParser(add_help=False)
    model.add_argument("--mode", choices=MODES, default=None)
    model.add_argument("--composition", choices=sorted(COMPOSITION_ALIASES), default=None)
    model.add_argument("--mask-variant", choices=VARIANTS, default=None)
    model.add_argument("--mask-kind", choices=[m for m in MASK_CHOICES if m != "none"], default=None)
    model.add_argument("--d-model", type=int, default=None)
    model.add_argument("--n-heads", type=int, default=None)
    model.add_argument("--n-layers", type=int, default=None)
    model.add_argument("--vector-dim", type=int, default=None)
    model.add_argument("--instance-norm", action=argparse.BooleanOptionalAction, default=None)
    model.add_argument("--epochs", type=int, default=None)
    model.add_argument("--batch-size", type=int, default=None)
    model.add_argument("--lr", type=float, default=None)
    model.add_argument("--lr-decay", choices=["constant", "halve"], default=None)
    model.add_argument("--patience", type=int, default=None)
    model.add_argument("--data-ratio", type=float, default=None, help="Few-shot fraction of the train split")
    model.add_argument("--no-store", action="store_true", default=None, help="Do not record the run")

    parser = argparse.ArgumentParser(description="Partial channel dependence forecasting")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", parents=[common, data, model], help="Train and evaluate one model")
    p.add_argument("--registry", type=str, default=None, help="Parameter registry file")

    p = sub.add_parser("eval", parents=[common, data], help="Evaluate a saved checkpoint")
    p.add_argument("--checkpoint", type=str, required=True)

    p = sub.add_parser("mcp", parents=[common, data, model], help="Masked channel prediction")
    p.add_argument("--checkpoint", type=str, default=None)
    p.add_argument("--modes", type=str, default=None, help="Comma list of modes to train and compare")

    p = sub.add_parser("analyze", parents=[common, data], help="Channel statistics and CD ratios")
    p.add_argument("--checkpoint", type=str, default=None, help="Report r(M) of this model's mask")

    p = sub.add_parser("ablate", parents=[common, data, model], help="Mask x composition grid")
    p.add_argument("--masks", type=str, default=None, help=f"Comma list of {', '.join(MASK_CHOICES)}")
    p.add_argument("--compositions", type=str, default=None)

    p = sub.add_parser("robustness", parents=[common, data, model], help="Missing-value sweep")
    p.add_argument("--ratios", type=str, default=None, help="Comma list of missing ratios")

    p = sub.add_parser("bench", parents=[common, data, model], help="One model per horizon")
    p.add_argument("--horizons", type=str, default=None, help="Comma list of horizons")

    p = sub.add_parser("unseen-params", parents=[common, data, model],
                       help="Pick domain parameters for an unseen dataset")
    p.add_argument("--registry", type=str, default=None)
    p.add_argument("--strategy", choices=STRATEGIES, default=None)
    p.add_argument("--target-rbar", type=float, default=None)
    p.add_argument("--evaluate", action="store_true", default=None,
                   help="Train with the selected parameters frozen and evaluate")

    p = sub.add_parser("gradcheck", parents=[common], help="Finite-difference gradient check")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--mask-variant", choices=VARIANTS, default=None)

    p = sub.add_parser("report", parents=[common], help="Run history and gains over CI")
    p.add_argument("--dataset", type=str, default=None)
    p.add_argument("--json", action="store_true", default=None)

    p = sub.add_parser("register", parents=[common], help="Add domain parameters to the registry")
    p.add_argument("--registry", type=str, default=None)
    p.add_argument("--name", type=str, default=None)
    p.add_argument("--alpha", type=float, default=None)
    p.add_argument("--beta", type=float, default=None)
    p.add_argument("--r-rbar", type=float, default=None)
    p.add_argument("--task", type=str, default=None)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    setup_logging(args.verbose)

    try:
        config = load_config(args.config)
        opts = resolve(args.command, args, config)
        return COMMANDS[args.command](opts, config)
    except (PCDError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
