"""
Channel masks built from CorrStats and learnable domain parameters, plus the
per-dataset parameter registry used to pick parameters for unseen datasets.

    scalar  M = sigmoid(alpha * R_bar + beta)
    vector  M = Norm(E E^T) * R_bar           Norm = row softmax of ReLU
    asym    M = Norm(E1 E2^T) * R_bar
    matrix  M = A * R_bar
"""
import logging
import os
from dataclasses import dataclass, field
from typing import Dict, Optional

import numpy as np
import yaml

import autodiff as ad
from chanstats import CorrStats, cd_ratio
from errors import ContractError, NumericError

logger = logging.getLogger(__name__)

VARIANTS = ("scalar", "vector", "asym", "matrix")
# ablation sources for the mask: learned formula, all-ones, |R|, R_bar, sigmoid(alpha*I + beta)
MASK_KINDS = ("full", "ones", "abs", "centered", "params_only")
STRATEGIES = ("avg_all", "avg_forecast", "closest_rbar")


class DomainParams:
    """Learnable per-dataset parameters that shape the mask"""
    variant = ""

    def parameters(self) -> Dict[str, ad.Tensor]:
        raise NotImplementedError

    def check(self, channels: int) -> None:
        raise NotImplementedError

    def state(self) -> Dict[str, np.ndarray]:
        return {name: t.data.copy() for name, t in self.parameters().items()}

    def snapshot(self) -> "DomainParams":
        """Detached copy, never attached to a tape"""
        return params_from_state(self.variant, self.state(), requires_grad=False)


@dataclass
class ScalarParams(DomainParams):
    alpha: ad.Tensor
    beta: ad.Tensor
    variant = "scalar"

    @classmethod
    def init(cls, alpha: float = 1.0, beta: float = 0.0, requires_grad: bool = True) -> "ScalarParams":
        return cls(ad.Tensor([[alpha]], requires_grad, name="mask.alpha"),
                   ad.Tensor([[beta]], requires_grad, name="mask.beta"))

    @property
    def values(self):
        return float(self.alpha.data[0, 0]), float(self.beta.data[0, 0])

    def parameters(self):
        return {"mask.alpha": self.alpha, "mask.beta": self.beta}

    def check(self, channels):
        if not (np.isfinite(self.alpha.data).all() and np.isfinite(self.beta.data).all()):
            raise NumericError("scalar domain parameters must be finite", name="mask.alpha/beta")


@dataclass
class VectorParams(DomainParams):
    E: ad.Tensor
    variant = "vector"

    def parameters(self):
        return {"mask.E": self.E}

    def check(self, channels):
        if self.E.rows != channels or self.E.cols < 1:
            raise ContractError(f"vector params: E is {self.E.shape}, dataset has C={channels}")


@dataclass
class AsymVectorParams(DomainParams):
    E1: ad.Tensor
    E2: ad.Tensor
    variant = "asym"

    def parameters(self):
        return {"mask.E1": self.E1, "mask.E2": self.E2}

    def check(self, channels):
        for t in (self.E1, self.E2):
            if t.rows != channels or t.cols < 1 or t.shape != self.E1.shape:
                raise ContractError(
                    f"asym params: E1 {self.E1.shape}, E2 {self.E2.shape}, dataset has C={channels}")


@dataclass
class MatrixParams(DomainParams):
    A: ad.Tensor
    variant = "matrix"

    def parameters(self):
        return {"mask.A": self.A}

    def check(self, channels):
        if self.A.shape != (channels, channels):
            raise ContractError(f"matrix params: A is {self.A.shape}, dataset has C={channels}")


def init_params(variant: str, channels: int, dim: int = 8,
                rng: Optional[np.random.Generator] = None) -> DomainParams:
    """Initial parameters: alpha=1, beta=0; E ~ N(0, 1/dim); A = ones"""
    if variant == "scalar":
        return ScalarParams.init()
    if dim < 1:
        raise ContractError(f"vector dimension must be >= 1, got {dim}")
    rng = rng if rng is not None else np.random.default_rng(0)
    if variant == "vector":
        return VectorParams(ad.parameter(rng.normal(0.0, dim ** -0.5, (channels, dim)), "mask.E"))
    if variant == "asym":
        return AsymVectorParams(
            ad.parameter(rng.normal(0.0, dim ** -0.5, (channels, dim)), "mask.E1"),
            ad.parameter(rng.normal(0.0, dim ** -0.5, (channels, dim)), "mask.E2"))
    if variant == "matrix":
        return MatrixParams(ad.parameter(np.ones((channels, channels)), "mask.A"))
    raise ContractError(f"unknown mask variant {variant!r}; choose from {', '.join(VARIANTS)}")


def params_from_state(variant: str, state: Dict[str, np.ndarray],
                      requires_grad: bool = True) -> DomainParams:
    def t(name):
        return ad.Tensor(np.asarray(state[name], dtype=np.float64), requires_grad, name=name)

    if variant == "scalar":
        return ScalarParams(t("mask.alpha"), t("mask.beta"))
    if variant == "vector":
        return VectorParams(t("mask.E"))
    if variant == "asym":
        return AsymVectorParams(t("mask.E1"), t("mask.E2"))
    if variant == "matrix":
        return MatrixParams(t("mask.A"))
    raise ContractError(f"unknown mask variant {variant!r}")


@dataclass
class ChannelMask:
    """C x C mask tensor (differentiable into its params) and its cached CD ratio"""
    M: ad.Tensor
    variant: str
    kind: str = "full"
    cd_ratio: float = field(init=False)

    def __post_init__(self):
        self.cd_ratio = cd_ratio(self.M.data) if self.M.rows >= 2 else 0.0

    @property
    def channels(self) -> int:
        return self.M.rows


def _norm(x: ad.Tensor) -> ad.Tensor:
    return ad.softmax_rows(ad.relu(x))


def build_mask(stats: CorrStats, params: Optional[DomainParams], kind: str = "full") -> ChannelMask:
    """
    Mask for one dataset. R_bar enters as a constant; gradients flow into params only.

    kind selects the ablation source: "full" applies the variant's formula, "ones",
    "abs" and "centered" use 1, |R| and R_bar without parameters, "params_only"
    replaces R_bar by the identity in the scalar formula.
    """
    channels = stats.channel_count
    if kind not in MASK_KINDS:
        raise ContractError(f"unknown mask kind {kind!r}; choose from {', '.join(MASK_KINDS)}")
    variant = params.variant if params is not None else "none"

    if kind == "ones":
        return ChannelMask(ad.constant(np.ones((channels, channels))), variant, kind)
    if kind == "abs":
        return ChannelMask(ad.constant(stats.R_abs), variant, kind)
    if kind == "centered":
        return ChannelMask(ad.constant(stats.R_bar), variant, kind)

    if params is None:
        raise ContractError(f"mask kind {kind!r} needs domain parameters")
    try:
        params.check(channels)
    except ContractError as e:
        raise ContractError(f"{params.variant} mask for C={channels}: {e}") from e

    if kind == "params_only":
        if not isinstance(params, ScalarParams):
            raise ContractError("params_only masks are defined for the scalar variant only")
        M = ad.sigmoid(ad.scale_shift(ad.constant(np.eye(channels)), params.alpha, params.beta))
        return ChannelMask(M, params.variant, kind)

    r_bar = ad.constant(stats.R_bar)
    if isinstance(params, ScalarParams):
        M = ad.sigmoid(ad.scale_shift(r_bar, params.alpha, params.beta))
    elif isinstance(params, VectorParams):
        M = ad.hadamard(_norm(ad.matmul(params.E, ad.transpose(params.E))), r_bar)
    elif isinstance(params, AsymVectorParams):
        M = ad.hadamard(_norm(ad.matmul(params.E1, ad.transpose(params.E2))), r_bar)
    elif isinstance(params, MatrixParams):
        M = ad.hadamard(params.A, r_bar)
    else:
        raise ContractError(f"unsupported domain parameters {type(params).__name__}")
    return ChannelMask(M, params.variant, kind)


# --- Registry ---

@dataclass
class RegistryEntry:
    dataset: str
    params: DomainParams
    r_rbar: float
    task: str = "forecast"


class ParamsRegistry:
    """Dataset name -> detached domain-parameter snapshot, r(R_bar) and task tag"""

    def __init__(self, path: Optional[str] = None):
        self.path = os.path.expanduser(path) if path else None
        self.entries: Dict[str, RegistryEntry] = {}
        if self.path and os.path.exists(self.path):
            self.load(self.path)

    def __len__(self):
        return len(self.entries)

    def __contains__(self, name):
        return name in self.entries

    def get(self, name: str) -> Optional[RegistryEntry]:
        return self.entries.get(name)

    def load(self, path: str) -> None:
        with open(os.path.expanduser(path), "r") as f:
            records = yaml.safe_load(f) or []
        for rec in records:
            variant = rec.get("variant", "scalar")
            if variant == "scalar":
                state = {"mask.alpha": [[rec["alpha"]]], "mask.beta": [[rec["beta"]]]}
            else:
                state = rec["values"]
            self.entries[rec["dataset"]] = RegistryEntry(
                rec["dataset"], params_from_state(variant, state, requires_grad=False),
                float(rec["r_rbar"]), rec.get("task", "forecast"))

    def save(self, path: Optional[str] = None) -> None:
        path = os.path.expanduser(path) if path else self.path
        if not path:
            raise ContractError("registry has no file path")
        records = []
        for name in sorted(self.entries):
            entry = self.entries[name]
            rec = {"dataset": name, "task": entry.task, "variant": entry.params.variant,
                   "r_rbar": float(entry.r_rbar)}
            if isinstance(entry.params, ScalarParams):
                rec["alpha"], rec["beta"] = entry.params.values
            else:
                rec["values"] = {k: v.tolist() for k, v in entry.params.state().items()}
            records.append(rec)
        directory = os.path.dirname(path)
        if directory:
            os.makedirs(directory, exist_ok=True)
        with open(path, "w") as f:
            yaml.safe_dump(records, f, sort_keys=True)


def register_params(registry: ParamsRegistry, name: str, params: DomainParams,
                    r_bar_ratio: float, task: str = "forecast") -> None:
    if not name:
        raise ContractError("dataset name must be non-empty")
    if name in registry.entries:
        logger.info("registry: overwriting domain parameters for %s", name)
    registry.entries[name] = RegistryEntry(name, params.snapshot(), float(r_bar_ratio), task)


def select_unseen_params(registry: ParamsRegistry, strategy: str,
                         target_rbar: Optional[float] = None) -> ScalarParams:
    """Scalar (alpha, beta) for a dataset that was never trained on"""
    if strategy not in STRATEGIES:
        raise ContractError(f"unknown strategy {strategy!r}; choose from {', '.join(STRATEGIES)}")
    eligible = [e for e in registry.entries.values() if isinstance(e.params, ScalarParams)]
    if strategy == "avg_forecast":
        eligible = [e for e in eligible if e.task == "forecast"]
    if not eligible:
        raise ContractError(f"strategy {strategy}: no eligible scalar entries in the registry")

    if strategy == "closest_rbar":
        if target_rbar is None:
            raise ContractError("strategy closest_rbar needs a target r(R_bar)")
        best = min(eligible, key=lambda e: (abs(e.r_rbar - target_rbar), e.dataset))
        alpha, beta = best.params.values
        logger.info("closest r(R_bar) entry: %s (r=%.4f)", best.dataset, best.r_rbar)
        return ScalarParams.init(alpha, beta, requires_grad=False)

    pairs = [e.params.values for e in eligible]
    alpha = sum(a for a, _ in pairs) / len(pairs)
    beta = sum(b for _, b in pairs) / len(pairs)
    return ScalarParams.init(alpha, beta, requires_grad=False)
