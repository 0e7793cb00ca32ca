"""
Training loop (Adam + MSE), evaluation metrics and masked channel prediction
"""
import logging
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

import autodiff as ad
from chanstats import CorrStats
from dataio import WindowedSet
from errors import ContractError, TrainingError
from forecaster import ForecastModel, batch_loss, parameter_digest, predict

logger = logging.getLogger(__name__)

LR_DECAYS = ("constant", "halve")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 10
    batch_size: int = 32
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    lr_decay: str = "constant"
    patience: Optional[int] = None

    def validate(self) -> "TrainConfig":
        if self.epochs < 1 or self.batch_size < 1:
            raise ContractError(f"epochs and batch_size must be >= 1, got {self.epochs}, {self.batch_size}")
        if self.lr < 0 or self.eps <= 0:
            raise ContractError(f"lr must be >= 0 and eps > 0, got {self.lr}, {self.eps}")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ContractError(f"Adam betas must be in [0, 1), got {self.beta1}, {self.beta2}")
        if self.lr_decay not in LR_DECAYS:
            raise ContractError(f"unknown lr_decay {self.lr_decay!r}; choose from {', '.join(LR_DECAYS)}")
        if self.patience is not None and self.patience < 1:
            raise ContractError(f"patience must be >= 1, got {self.patience}")
        return self


class Adam:
    """Adam with bias correction; parameters without a gradient this step are left alone"""

    def __init__(self, params: Dict[str, ad.Tensor], lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = {name: np.zeros_like(p.data) for name, p in params.items()}
        self.v = {name: np.zeros_like(p.data) for name, p in params.items()}

    def step(self) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for name, p in self.params.items():
            if p.grad is None or not p.requires_grad:
                continue
            g = p.grad
            self.m[name] = self.beta1 * self.m[name] + (1.0 - self.beta1) * g
            self.v[name] = self.beta2 * self.v[name] + (1.0 - self.beta2) * g * g
            p.data -= self.lr * (self.m[name] / c1) / (np.sqrt(self.v[name] / c2) + self.eps)


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: Optional[float]
    lr: float
    alpha: Optional[float] = None
    beta: Optional[float] = None


@dataclass
class History:
    epochs: List[EpochRecord] = field(default_factory=list)
    best_epoch: int = 0
    selected_on: str = "val"
    stopped_early: bool = False

    def train_losses(self) -> List[float]:
        return [e.train_loss for e in self.epochs]

    def to_dict(self) -> Dict:
        return {"best_epoch": self.best_epoch, "selected_on": self.selected_on,
                "stopped_early": self.stopped_early, "epochs": [asdict(e) for e in self.epochs]}


def window_loss(model: ForecastModel, ws: WindowedSet, batch_size: int = 256) -> float:
    pred = predict(model, ws.x, batch_size)
    return float(np.mean((pred - ws.y) ** 2))


def train(model: ForecastModel, ws: WindowedSet, cfg: TrainConfig = TrainConfig(),
          val: Optional[WindowedSet] = None) -> Tuple[ForecastModel, History]:
    """
    Fit the model in place with Adam on the MSE of its (denormalised) forecasts.

    Batches are contiguous slices of a per-epoch permutation drawn from cfg.seed.
    The parameters of the best epoch (validation loss, or training loss when no
    validation windows exist) are restored before returning.
    """
    cfg.validate()
    n = len(ws)
    if n == 0:
        raise ContractError("training set has no windows")
    if val is not None and len(val) == 0:
        val = None
    history = History(selected_on="val" if val is not None else "train")
    if val is None:
        logger.info("no validation windows; selecting the best epoch on training loss")

    rng = np.random.default_rng(cfg.seed)
    params = model.parameters()
    opt = Adam(params, cfg.lr, cfg.beta1, cfg.beta2, cfg.eps)
    best_score, best_state = np.inf, model.state()

    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(n)
        total = 0.0
        for batch, start in enumerate(range(0, n, cfg.batch_size), 1):
            idx = order[start:start + cfg.batch_size]
            model.zero_grad()
            with ad.Tape() as tape:
                loss = batch_loss(model, ws.x[idx], ws.y[idx])
            value = loss.item()
            if not np.isfinite(value):
                raise TrainingError(epoch, batch, value)
            tape.backward(loss)
            opt.step()
            total += value * len(idx)

        train_loss = total / n
        val_loss = window_loss(model, val) if val is not None else None
        alpha, beta = model.domain_values() or (None, None)
        history.epochs.append(EpochRecord(epoch, train_loss, val_loss, opt.lr, alpha, beta))
        logger.info("epoch %d: train %.6f%s", epoch, train_loss,
                    f" val {val_loss:.6f}" if val_loss is not None else "")

        score = val_loss if val_loss is not None else train_loss
        if score < best_score:
            best_score, best_state = score, model.state()
            history.best_epoch = epoch
        elif cfg.patience is not None and epoch - history.best_epoch >= cfg.patience:
            logger.info("early stop after epoch %d (best %d)", epoch, history.best_epoch)
            history.stopped_early = True
            break
        if cfg.lr_decay == "halve":
            opt.lr *= 0.5

    model.load_state(best_state)
    return model, history


# --- Evaluation ---

def forecast_metrics(pred: np.ndarray, target: np.ndarray) -> Tuple[float, float]:
    """(MSE, MAE) over every window, step and channel"""
    pred, target = np.asarray(pred, dtype=np.float64), np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ContractError(f"prediction {pred.shape} and target {target.shape} differ")
    if pred.size == 0:
        raise ContractError("nothing to evaluate")
    diff = pred - target
    return float(np.mean(diff ** 2)), float(np.mean(np.abs(diff)))


@dataclass
class EvalReport:
    """Per-horizon metrics of one dataset/mode plus mask diagnostics and optional tables"""
    dataset: str
    mode: str
    composition: str
    mask_kind: str
    per_horizon: Dict[int, Dict[str, float]] = field(default_factory=dict)
    cd_ratio: Optional[float] = None
    alpha: Optional[float] = None
    beta: Optional[float] = None
    r_abs: Optional[float] = None
    channels: Optional[int] = None
    mcp: Optional[List[Dict]] = None
    robustness: Optional[List[Dict]] = None
    ablation: Optional[List[Dict]] = None

    @property
    def mse(self) -> float:
        return float(np.mean([m["mse"] for m in self.per_horizon.values()]))

    @property
    def mae(self) -> float:
        return float(np.mean([m["mae"] for m in self.per_horizon.values()]))

    def to_dict(self) -> Dict:
        out = {
            "dataset": self.dataset,
            "mode": self.mode,
            "composition": self.composition,
            "mask_kind": self.mask_kind,
            "per_horizon": {str(h): dict(m) for h, m in sorted(self.per_horizon.items())},
            "average": {"mse": self.mse, "mae": self.mae} if self.per_horizon else None,
            "cd_ratio": self.cd_ratio,
            "alpha": self.alpha,
            "beta": self.beta,
            "r_abs": self.r_abs,
            "channels": self.channels,
        }
        for name in ("mcp", "robustness", "ablation"):
            if getattr(self, name) is not None:
                out[name] = getattr(self, name)
        return out


def evaluate(model: ForecastModel, ws_test: WindowedSet, stats: Optional[CorrStats] = None,
             dataset: Optional[str] = None) -> EvalReport:
    if len(ws_test) == 0:
        raise ContractError("test set has no windows")
    cfg = model.config
    mse, mae = forecast_metrics(predict(model, ws_test.x), ws_test.y)
    report = EvalReport(dataset or ws_test.name.split(":")[0], cfg.attention_mode,
                        cfg.composition, cfg.mask_kind if cfg.attention_mode == "pcd" else "none",
                        {cfg.horizon: {"mse": mse, "mae": mae}}, channels=ws_test.channels)
    mask = model.mask_snapshot()
    if mask is not None and mask.channels >= 2:
        report.cd_ratio = mask.cd_ratio
    report.alpha, report.beta = model.domain_values() or (None, None)
    if stats is not None and stats.channel_count >= 2:
        report.r_abs = stats.r_abs
    return report


def masked_channel_prediction(model: ForecastModel, ws_test: WindowedSet) -> List[Dict]:
    """
    Erase one channel's history at a time (fill with its window mean) and score the
    forecast of that channel alone. The model is only read, never updated.
    """
    C = ws_test.channels
    if C < 2:
        raise ContractError("masked channel prediction needs at least 2 channels")
    if len(ws_test) == 0:
        raise ContractError("test set has no windows")
    if model.config.instance_norm:
        logger.warning("instance-normalised model: a masked channel's forecast is pinned "
                       "to its fill value; train with instance_norm=false for this test")

    digest = parameter_digest(model)
    clean = predict(model, ws_test.x)
    rows = []
    for c in range(C):
        x = ws_test.x.copy()
        x[:, :, c] = x[:, :, c].mean(axis=1, keepdims=True)
        pred = predict(model, x)
        rows.append({
            "channel": c,
            "masked_mse": float(np.mean((pred[:, :, c] - ws_test.y[:, :, c]) ** 2)),
            "clean_mse": float(np.mean((clean[:, :, c] - ws_test.y[:, :, c]) ** 2)),
        })
    if parameter_digest(model) != digest:
        raise ContractError("masked channel prediction changed the model parameters")
    return rows
