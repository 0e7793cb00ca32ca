"""
Channel-token transformer forecaster.

Each channel's lookback window becomes one token; attention runs across channels.
The attention mode decides how channels may see each other:

    ci   off-diagonal logits replaced by -inf (no cross-channel attention)
    cd   plain scaled dot-product logits
    pcd  logits modulated by the channel mask M built from the dataset's R_bar

Batches are processed as one (B*C) x d token matrix; attention is evaluated on
groups of samples with a block-diagonal keep pattern so samples never mix.
"""
import hashlib
import logging
import math
from dataclasses import asdict, dataclass, replace
from typing import Dict, List, Optional, Tuple

import numpy as np
import yaml

import autodiff as ad
from chanmask import MASK_KINDS, VARIANTS, ChannelMask, DomainParams, build_mask, init_params, params_from_state
from chanstats import CorrStats, stats_from_matrix
from errors import ContractError, LoadError

logger = logging.getLogger(__name__)

MODES = ("ci", "cd", "pcd")
COMPOSITIONS = ("local_only", "global_only", "both")
NORM_EPS = 1e-5
GROUP_TOKENS = 512
CHECKPOINT_FORMAT = 1


@dataclass(frozen=True)
class ModelConfig:
    lookback: int = 96
    horizon: int = 96
    d_model: int = 64
    n_heads: int = 4
    n_layers: int = 2
    attention_mode: str = "pcd"
    composition: str = "both"
    instance_norm: bool = True
    mask_variant: str = "scalar"
    mask_kind: str = "full"
    vector_dim: int = 8
    d_ff: Optional[int] = None
    seed: int = 0

    @property
    def ff_dim(self) -> int:
        return self.d_ff or 4 * self.d_model

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    def validate(self) -> "ModelConfig":
        for name in ("lookback", "horizon", "d_model", "n_heads", "n_layers", "vector_dim"):
            if getattr(self, name) < 1:
                raise ContractError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.d_model % self.n_heads:
            raise ContractError(f"d_model {self.d_model} is not divisible by n_heads {self.n_heads}")
        if self.attention_mode not in MODES:
            raise ContractError(f"unknown attention mode {self.attention_mode!r}")
        if self.composition not in COMPOSITIONS:
            raise ContractError(f"unknown composition {self.composition!r}")
        if self.composition == "global_only" and self.attention_mode != "pcd":
            raise ContractError("global_only composition needs attention_mode pcd")
        if self.mask_variant not in VARIANTS:
            raise ContractError(f"unknown mask variant {self.mask_variant!r}")
        if self.mask_kind not in MASK_KINDS:
            raise ContractError(f"unknown mask kind {self.mask_kind!r}")
        return self

    def with_mode(self, mode: str, composition: str = "both", kind: str = "full") -> "ModelConfig":
        return replace(self, attention_mode=mode, composition=composition, mask_kind=kind)


@dataclass(frozen=True)
class NormStats:
    """Per-window, per-channel mean and floored std (arrays shaped like x with L collapsed)"""
    mean: np.ndarray
    std: np.ndarray


def instance_normalize(x: np.ndarray) -> Tuple[np.ndarray, NormStats]:
    """Normalise each channel of each window over its time axis (second to last)"""
    x = np.asarray(x, dtype=np.float64)
    mean = x.mean(axis=-2, keepdims=True)
    std = np.maximum(x.std(axis=-2, keepdims=True), NORM_EPS)
    return (x - mean) / std, NormStats(mean, std)


def instance_denormalize(y: np.ndarray, stats: NormStats) -> np.ndarray:
    return np.asarray(y, dtype=np.float64) * stats.std + stats.mean


def _uniform(rng: np.random.Generator, fan_in: int, shape) -> np.ndarray:
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, shape)


def init_weights(config: ModelConfig) -> Dict[str, ad.Tensor]:
    """Transformer weights, uniform(+-1/sqrt(fan_in)); layer norms start at gain 1, bias 0"""
    rng = np.random.default_rng(config.seed)
    d, L, H, F = config.d_model, config.lookback, config.horizon, config.ff_dim
    weights: Dict[str, ad.Tensor] = {}

    def linear(prefix: str, fan_in: int, fan_out: int, w: str = "W", b: str = "b"):
        weights[f"{prefix}.{w}"] = ad.parameter(_uniform(rng, fan_in, (fan_in, fan_out)), f"{prefix}.{w}")
        weights[f"{prefix}.{b}"] = ad.parameter(_uniform(rng, fan_in, (1, fan_out)), f"{prefix}.{b}")

    def norm(prefix: str):
        weights[f"{prefix}.g"] = ad.parameter(np.ones((1, d)), f"{prefix}.g")
        weights[f"{prefix}.b"] = ad.parameter(np.zeros((1, d)), f"{prefix}.b")

    linear("embed", L, d)
    for i in range(config.n_layers):
        norm(f"layer{i}.ln1")
        for proj in ("q", "k", "v", "o"):
            linear(f"layer{i}.attn", d, d, f"W{proj}", f"b{proj}")
        norm(f"layer{i}.ln2")
        linear(f"layer{i}.ff1", d, F)
        linear(f"layer{i}.ff2", F, d)
    norm("final_ln")
    linear("proj", d, H)
    return weights


class ForecastModel:
    """Transformer weights, attention mode and, in pcd mode, the dataset mask inputs"""

    def __init__(self, config: ModelConfig, stats: Optional[CorrStats] = None,
                 domain: Optional[DomainParams] = None):
        self.config = config.validate()
        self.weights = init_weights(config)
        self.stats = stats
        self.domain = domain
        if config.attention_mode == "pcd":
            if stats is None:
                raise ContractError("pcd mode needs the dataset's channel statistics")
            if domain is None and config.mask_kind in ("full", "params_only"):
                variant = "scalar" if config.mask_kind == "params_only" else config.mask_variant
                self.domain = init_params(variant, stats.channel_count, config.vector_dim,
                                          rng=np.random.default_rng(config.seed + 1))

    @property
    def channels(self) -> Optional[int]:
        return self.stats.channel_count if self.stats is not None else None

    def parameters(self) -> Dict[str, ad.Tensor]:
        params = dict(self.weights)
        if self.domain is not None:
            params.update(self.domain.parameters())
        return params

    def parameter_count(self) -> int:
        return sum(t.data.size for t in self.parameters().values())

    def zero_grad(self) -> None:
        for t in self.parameters().values():
            t.zero_grad()

    def mask(self) -> Optional[ChannelMask]:
        """The channel mask as part of the current graph; None outside pcd mode"""
        if self.config.attention_mode != "pcd":
            return None
        return build_mask(self.stats, self.domain, self.config.mask_kind)

    def mask_snapshot(self) -> Optional[ChannelMask]:
        with ad.no_grad():
            return self.mask()

    def domain_values(self) -> Optional[Tuple[float, float]]:
        """(alpha, beta) for scalar domain parameters"""
        values = getattr(self.domain, "values", None)
        return tuple(values) if values is not None else None

    def state(self) -> Dict[str, np.ndarray]:
        return {name: t.data.copy() for name, t in self.parameters().items()}

    def load_state(self, state: Dict[str, np.ndarray]) -> None:
        for name, t in self.parameters().items():
            if name not in state:
                raise ContractError(f"state has no value for parameter {name}")
            if np.shape(state[name]) != t.shape:
                raise ContractError(f"{name}: state shape {np.shape(state[name])} != {t.shape}")
            t.data[...] = state[name]


# --- Attention ---

def _keep_pattern(samples: int, channels: int, mode: str) -> np.ndarray:
    if mode == "ci":
        return np.eye(samples * channels, dtype=bool)
    return np.kron(np.eye(samples), np.ones((channels, channels))).astype(bool)


def _tile(M: ad.Tensor, samples: int) -> ad.Tensor:
    """Repeat the C x C mask over a samples x samples grid of blocks"""
    if samples == 1:
        return M
    stack = np.tile(np.eye(M.rows), (samples, 1))
    return ad.matmul(ad.matmul(ad.constant(stack), M), ad.constant(stack.T))


def masked_attention(tokens: ad.Tensor, block: Dict[str, ad.Tensor], n_heads: int,
                     mask: Optional[ChannelMask], mode: str, composition: str = "both",
                     channels: Optional[int] = None,
                     trace: Optional[List[np.ndarray]] = None) -> ad.Tensor:
    """
    Multi-head attention across the channel tokens of every sample.

    block holds Wq, bq, Wk, bk, Wv, bv, Wo, bo. tokens is (samples * channels) x d
    with each sample's channels in consecutive rows. When trace is a list, the
    post-softmax weight matrices are appended to it.
    """
    if (mask is not None) != (mode == "pcd"):
        raise ContractError(f"mode {mode} {'needs' if mode == 'pcd' else 'takes no'} channel mask")
    if composition == "global_only" and mode != "pcd":
        raise ContractError("global_only composition needs a channel mask")
    channels = channels or tokens.rows
    if tokens.rows % channels:
        raise ContractError(f"{tokens.rows} token rows do not split into {channels} channels")
    if mask is not None and mask.channels != channels:
        raise ContractError(f"mask is {mask.channels} x {mask.channels}, tokens have C={channels}")
    d = tokens.cols
    if d % n_heads:
        raise ContractError(f"token width {d} is not divisible by {n_heads} heads")
    dk = d // n_heads
    samples = tokens.rows // channels

    uses_logits = composition != "global_only"
    if uses_logits:
        q = ad.add_bias(ad.matmul(tokens, block["Wq"]), block["bq"])
        k = ad.add_bias(ad.matmul(tokens, block["Wk"]), block["bk"])
    v = ad.add_bias(ad.matmul(tokens, block["Wv"]), block["bv"])

    per_group = max(1, GROUP_TOKENS // channels)
    outputs = []
    for start in range(0, samples, per_group):
        stop = min(samples, start + per_group)
        group = stop - start
        lo, hi = start * channels, stop * channels

        def rows(t: ad.Tensor) -> ad.Tensor:
            return t if (lo, hi) == (0, tokens.rows) else ad.row_slice(t, lo, hi)

        keep = _keep_pattern(group, channels, mode)
        prior = _tile(mask.M, group) if mask is not None and composition != "local_only" else None
        vg = rows(v)
        if uses_logits:
            qg, kg = rows(q), rows(k)
        else:
            shared = ad.softmax_rows(prior if keep.all() else ad.masked_fill(prior, keep, -np.inf))

        heads = []
        for h in range(n_heads):
            def head(t: ad.Tensor) -> ad.Tensor:
                return t if n_heads == 1 else ad.col_slice(t, h * dk, (h + 1) * dk)

            if uses_logits:
                logits = ad.scale(ad.matmul(head(qg), ad.transpose(head(kg))), 1.0 / math.sqrt(dk))
                if prior is not None:
                    logits = ad.hadamard(prior, logits)
                if not keep.all():
                    logits = ad.masked_fill(logits, keep, -np.inf)
                weights = ad.softmax_rows(logits)
            else:
                weights = shared
            if trace is not None:
                trace.append(weights.data.copy())
            heads.append(ad.matmul(weights, head(vg)))
        outputs.append(heads[0] if n_heads == 1 else ad.hstack(heads))

    out = outputs[0] if len(outputs) == 1 else ad.vstack(outputs)
    return ad.add_bias(ad.matmul(out, block["Wo"]), block["bo"])


# --- Forward ---

def embed_channels(model: ForecastModel, x: np.ndarray) -> ad.Tensor:
    """Map each channel's L-length history (columns of an L x C window) to a d-dim token"""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] != model.config.lookback:
        raise ContractError(f"expected an L x C window with L={model.config.lookback}, got {x.shape}")
    return _embed(model, x.T)


def _embed(model: ForecastModel, token_inputs: np.ndarray) -> ad.Tensor:
    return ad.add_bias(ad.matmul(ad.constant(token_inputs), model.weights["embed.W"]),
                       model.weights["embed.b"])


def _check_batch(model: ForecastModel, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 2:
        x = x[None]
    if x.ndim != 3 or x.shape[1] != model.config.lookback:
        raise ContractError(f"expected B x L x C input with L={model.config.lookback}, got {x.shape}")
    if model.channels is not None and x.shape[2] != model.channels:
        raise ContractError(f"model mask covers C={model.channels}, input has C={x.shape[2]}")
    if not np.isfinite(x).all():
        raise ContractError("input window contains NaN or inf")
    return x


def _to_tokens(a: np.ndarray) -> np.ndarray:
    """B x T x C -> (B*C) x T"""
    return a.transpose(0, 2, 1).reshape(-1, a.shape[1])


def _from_tokens(a: np.ndarray, samples: int) -> np.ndarray:
    """(B*C) x T -> B x T x C"""
    return a.reshape(samples, -1, a.shape[1]).transpose(0, 2, 1)


def forward_tokens(model: ForecastModel, x: np.ndarray,
                   trace: Optional[List[np.ndarray]] = None) -> ad.Tensor:
    """Forecast graph for a B x L x C batch; rows of the result are (sample, channel) tokens"""
    cfg = model.config
    x = _check_batch(model, x)
    samples, _, channels = x.shape
    if cfg.instance_norm:
        x, norm = instance_normalize(x)

    w = model.weights
    h = _embed(model, _to_tokens(x))
    mask = model.mask()
    for i in range(cfg.n_layers):
        p = f"layer{i}"
        block = {name: w[f"{p}.attn.{name}"] for name in
                 ("Wq", "bq", "Wk", "bk", "Wv", "bv", "Wo", "bo")}
        a = masked_attention(ad.layer_norm(h, w[f"{p}.ln1.g"], w[f"{p}.ln1.b"]), block,
                             cfg.n_heads, mask, cfg.attention_mode, cfg.composition,
                             channels, trace)
        h = ad.add(h, a)
        f = ad.layer_norm(h, w[f"{p}.ln2.g"], w[f"{p}.ln2.b"])
        f = ad.relu(ad.add_bias(ad.matmul(f, w[f"{p}.ff1.W"]), w[f"{p}.ff1.b"]))
        f = ad.add_bias(ad.matmul(f, w[f"{p}.ff2.W"]), w[f"{p}.ff2.b"])
        h = ad.add(h, f)
    h = ad.layer_norm(h, w["final_ln.g"], w["final_ln.b"])
    out = ad.add_bias(ad.matmul(h, w["proj.W"]), w["proj.b"])

    if cfg.instance_norm:
        std = np.repeat(_to_tokens(norm.std), cfg.horizon, axis=1)
        mean = np.repeat(_to_tokens(norm.mean), cfg.horizon, axis=1)
        out = ad.add(ad.hadamard(out, ad.constant(std)), ad.constant(mean))
    return out


def batch_loss(model: ForecastModel, x: np.ndarray, y: np.ndarray) -> ad.Tensor:
    """MSE between the forecast and the B x H x C targets"""
    y = np.asarray(y, dtype=np.float64)
    if y.ndim == 2:
        y = y[None]
    if y.shape[1] != model.config.horizon:
        raise ContractError(f"targets have horizon {y.shape[1]}, model has {model.config.horizon}")
    return ad.mse_loss(forward_tokens(model, x), ad.constant(_to_tokens(y)))


def forward_batch(model: ForecastModel, x: np.ndarray) -> np.ndarray:
    """B x L x C -> B x H x C, without building a graph"""
    x = _check_batch(model, x)
    with ad.no_grad():
        out = forward_tokens(model, x)
    return _from_tokens(out.data, x.shape[0])


def forward(model: ForecastModel, x: np.ndarray) -> np.ndarray:
    """L x C window -> H x C forecast"""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise ContractError(f"forward takes one L x C window, got {x.shape}")
    return forward_batch(model, x[None])[0]


def predict(model: ForecastModel, x: np.ndarray, batch_size: int = 256) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    parts = [forward_batch(model, x[i:i + batch_size]) for i in range(0, len(x), batch_size)]
    return np.concatenate(parts, axis=0)


# --- Persistence ---

def parameter_digest(model: ForecastModel) -> str:
    digest = hashlib.sha256()
    for name, t in model.parameters().items():
        digest.update(name.encode())
        digest.update(np.ascontiguousarray(t.data).tobytes())
    return digest.hexdigest()


def save_checkpoint(model: ForecastModel, path: str) -> None:
    """YAML header closed by a '...' line, then the parameters as little-endian float64"""
    params = model.parameters()
    header = {
        "format": CHECKPOINT_FORMAT,
        "config": asdict(model.config),
        "parameters": [{"name": n, "shape": list(t.shape)} for n, t in params.items()],
        "domain_variant": model.domain.variant if model.domain is not None else None,
    }
    if model.stats is not None:
        header["stats"] = {"metric": model.stats.metric, "source_rows": model.stats.source_rows,
                           "R": np.asarray(model.stats.R).tolist()}
    payload = b"".join(np.ascontiguousarray(t.data, dtype="<f8").tobytes() for t in params.values())
    with open(path, "wb") as f:
        f.write(yaml.safe_dump(header, sort_keys=True, explicit_end=True).encode())
        f.write(payload)


def load_checkpoint(path: str) -> ForecastModel:
    with open(path, "rb") as f:
        raw = f.read()
    head, sep, payload = raw.partition(b"\n...\n")
    if not sep:
        raise LoadError(path, 1, "checkpoint header has no '...' terminator")
    header = yaml.safe_load(head.decode())
    if header.get("format") != CHECKPOINT_FORMAT:
        raise LoadError(path, 1, f"unsupported checkpoint format {header.get('format')!r}")

    config = ModelConfig(**header["config"])
    stats = None
    if "stats" in header:
        s = header["stats"]
        stats = stats_from_matrix(s["metric"], s["R"], s["source_rows"])

    values = np.frombuffer(payload, dtype="<f8")
    state, offset = {}, 0
    for entry in header["parameters"]:
        size = int(np.prod(entry["shape"]))
        if offset + size > values.size:
            raise LoadError(path, 1, f"payload too short for parameter {entry['name']}")
        state[entry["name"]] = values[offset:offset + size].reshape(entry["shape"]).copy()
        offset += size
    if offset != values.size:
        raise LoadError(path, 1, f"payload has {values.size - offset} trailing values")

    domain = None
    if header.get("domain_variant"):
        names = [n for n in state if n.startswith("mask.")]
        domain = params_from_state(header["domain_variant"], {n: state[n] for n in names})
    model = ForecastModel(config, stats, domain)
    model.load_state(state)
    return model
