"""
Experiment orchestration: single runs, multi-horizon benchmarks, ablation grids,
missing-value robustness sweeps, CD-ratio reports and unseen-dataset runs
"""
import logging
from dataclasses import dataclass, replace
from typing import Dict, List, Optional, Sequence

from chanmask import ChannelMask, ParamsRegistry, select_unseen_params
from chanstats import CorrCache, CorrStats, cd_ratio, train_split_stats
from dataio import (Prepared, RawDataset, SplitSpec, chrono_split, corrupt_missing,
                    linear_interpolate, make_windows, prepare, standardize)
from errors import ContractError
from forecaster import COMPOSITIONS, ForecastModel, ModelConfig
from train import EvalReport, History, TrainConfig, evaluate, masked_channel_prediction, train

logger = logging.getLogger(__name__)

DEFAULT_HORIZONS = (12, 24, 48, 96)
DEFAULT_RATIOS = (0.1, 0.25, 0.5, 0.75)
ABLATION_MASKS = ("ones", "abs", "centered", "params_only", "full")
# "none" is the unmasked CD model, valid with local_only or both
MASK_CHOICES = ("none",) + ABLATION_MASKS


@dataclass
class RunResult:
    model: ForecastModel
    history: History
    report: EvalReport
    stats: CorrStats
    prepared: Prepared


def fit_and_evaluate(ds: RawDataset, model_cfg: ModelConfig, train_cfg: TrainConfig,
                     metric: str = "pearson", split: SplitSpec = SplitSpec(),
                     data_ratio: float = 1.0, cache: Optional[CorrCache] = None,
                     stats: Optional[CorrStats] = None,
                     registry: Optional[ParamsRegistry] = None,
                     strategy: Optional[str] = None) -> RunResult:
    """
    prepare -> train-split stats -> train -> evaluate on the test windows.

    With a registry and strategy the scalar domain parameters are taken from the
    registry and kept frozen.
    """
    if strategy is not None and registry is None:
        raise ContractError(f"strategy {strategy!r} needs a parameter registry")
    prep = prepare(ds, model_cfg.lookback, model_cfg.horizon, split, data_ratio)
    if stats is None:
        stats = train_split_stats(prep.train_values, metric, dataset=ds.name, cache=cache)

    domain = None
    if strategy is not None:
        if model_cfg.attention_mode != "pcd" or model_cfg.mask_variant != "scalar":
            raise ContractError("registry parameters apply to pcd models with the scalar variant")
        domain = select_unseen_params(registry, strategy, stats.r_bar)
    model = ForecastModel(model_cfg, stats if model_cfg.attention_mode == "pcd" else None, domain)
    model, history = train(model, prep.train_ws, train_cfg, prep.val_ws)
    report = evaluate(model, prep.test_ws, stats, ds.name)
    return RunResult(model, history, report, stats, prep)


def cd_ratio_report(stats: CorrStats, mask: Optional[ChannelMask] = None) -> Dict:
    """r(|R|) and r(R_bar) of the dataset next to r(M) of a mask"""
    if stats.channel_count < 2:
        raise ContractError("cd ratios need at least 2 channels")
    return {
        "channels": stats.channel_count,
        "metric": stats.metric,
        "r_abs": stats.r_abs,
        "r_bar": stats.r_bar,
        "r_mask": cd_ratio(mask.M.data) if mask is not None else None,
    }


def benchmark(ds: RawDataset, model_cfg: ModelConfig, train_cfg: TrainConfig,
              horizons: Sequence[int] = DEFAULT_HORIZONS, metric: str = "pearson",
              split: SplitSpec = SplitSpec(), data_ratio: float = 1.0,
              cache: Optional[CorrCache] = None) -> EvalReport:
    """One model per horizon; the report's averages are exact means over horizons"""
    if not horizons:
        raise ContractError("benchmark needs at least one horizon")
    merged: Optional[EvalReport] = None
    ratios = []
    for horizon in horizons:
        result = fit_and_evaluate(ds, replace(model_cfg, horizon=int(horizon)), train_cfg,
                                  metric, split, data_ratio, cache)
        report = result.report
        entry = dict(report.per_horizon[int(horizon)])
        if report.cd_ratio is not None:
            entry["cd_ratio"] = report.cd_ratio
            ratios.append(report.cd_ratio)
        if merged is None:
            merged = replace(report, per_horizon={})
        merged.per_horizon[int(horizon)] = entry
    merged.cd_ratio = sum(ratios) / len(ratios) if ratios else None
    merged.alpha = merged.beta = None
    return merged


def _ablation_cell(model_cfg: ModelConfig, mask: str, composition: str) -> ModelConfig:
    if mask not in MASK_CHOICES:
        raise ContractError(f"unknown ablation mask {mask!r}; choose from {', '.join(MASK_CHOICES)}")
    if composition not in COMPOSITIONS:
        raise ContractError(f"unknown composition {composition!r}")
    if mask == "none":
        if composition == "global_only":
            raise ContractError("global_only composition needs a mask")
        return model_cfg.with_mode("cd", composition)
    return model_cfg.with_mode("pcd", composition, mask)


def ablation_run(ds: RawDataset, model_cfg: ModelConfig, train_cfg: TrainConfig,
                 masks: Sequence[str] = ABLATION_MASKS,
                 compositions: Sequence[str] = COMPOSITIONS,
                 metric: str = "pearson", split: SplitSpec = SplitSpec(),
                 cache: Optional[CorrCache] = None) -> List[Dict]:
    """Train one model per (mask, composition) cell at the shared seed"""
    cells = []
    for mask in masks:
        for composition in compositions:
            cells.append((mask, composition, _ablation_cell(model_cfg, mask, composition)))
    if not cells:
        raise ContractError("ablation grid is empty")

    prep = prepare(ds, model_cfg.lookback, model_cfg.horizon, split)
    stats = train_split_stats(prep.train_values, metric, dataset=ds.name, cache=cache)
    rows = []
    for mask, composition, cfg in cells:
        logger.info("ablation cell mask=%s composition=%s", mask, composition)
        model = ForecastModel(cfg, stats if cfg.attention_mode == "pcd" else None)
        model, _ = train(model, prep.train_ws, train_cfg, prep.val_ws)
        report = evaluate(model, prep.test_ws, stats, ds.name)
        rows.append({"mask": mask, "composition": composition, "mse": report.mse,
                     "mae": report.mae, "cd_ratio": report.cd_ratio})
    return rows


def robustness_sweep(ds: RawDataset, model_cfg: ModelConfig, train_cfg: TrainConfig,
                     ratios: Sequence[float] = DEFAULT_RATIOS, seed: int = 0,
                     metric: str = "pearson", split: SplitSpec = SplitSpec()) -> List[Dict]:
    """
    Corrupt -> interpolate -> recompute the correlation -> train -> evaluate, per ratio.

    The first row is the clean baseline (ratio 0). Test windows always come from the
    clean series, standardised with the corrupted run's training statistics.
    """
    for ratio in ratios:
        if not 0 <= ratio < 1:
            raise ContractError(f"missing ratio must be in [0, 1), got {ratio}")
    _, _, clean_test = chrono_split(ds, split)
    rows = []
    for ratio in (0.0, *ratios):
        filled = linear_interpolate(corrupt_missing(ds, ratio, seed))
        result = fit_and_evaluate(filled, model_cfg, train_cfg, metric, split)
        test_ws = standardize(make_windows(clean_test, model_cfg.lookback, model_cfg.horizon),
                              result.prepared.scaler)
        report = evaluate(result.model, test_ws, result.stats, ds.name)
        rows.append({"ratio": float(ratio), "r_abs": result.stats.r_abs,
                     "mse": report.mse, "mae": report.mae})
        logger.info("missing ratio %.2f: r(|R|)=%.4f mse=%.6f", ratio, rows[-1]["r_abs"], report.mse)
    return rows


def mcp_compare(ds: RawDataset, model_cfg: ModelConfig, train_cfg: TrainConfig,
                modes: Sequence[str] = ("ci", "pcd"), metric: str = "pearson",
                split: SplitSpec = SplitSpec()) -> List[Dict]:
    """Masked channel prediction for several attention modes trained on the same data"""
    tables = {}
    for mode in modes:
        result = fit_and_evaluate(ds, model_cfg.with_mode(mode), train_cfg, metric, split)
        tables[mode] = masked_channel_prediction(result.model, result.prepared.test_ws)
    rows = []
    for c in range(ds.channels):
        row = {"channel": c, "name": ds.channel_names[c]}
        for mode in modes:
            row[f"{mode}_masked_mse"] = tables[mode][c]["masked_mse"]
        rows.append(row)
    return rows
