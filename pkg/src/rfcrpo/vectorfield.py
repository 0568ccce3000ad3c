"""Conditional velocity-field MLP u(x, t, c; theta) with hand-written backprop.

The input layer sees ``[x, sin(2^j pi t), cos(2^j pi t) for j < time_features,
embedding[c]]``. Embedding row ``num_conditions`` is the null condition used
for classifier-free guidance.

Forward products use ``einsum`` instead of BLAS ``@``: BLAS picks different
kernels for different batch sizes, which changes the last bits of a row's
output. Sampling relies on a row's result being independent of what else is
in the batch (best-of-N prefixes, per-prompt streams).
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import expit

from .errors import BadCondition, CheckpointError, ShapeMismatch
from .numkit import Rng

CHECKPOINT_MAGIC = b"RFCK1\n"


@dataclass(frozen=True)
class ModelConfig:
    data_dim: int
    num_conditions: int
    hidden_dims: tuple[int, ...] = (64, 64)
    embed_dim: int = 8
    time_features: int = 8
    activation: str = "silu"

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))
        dims = [self.data_dim, self.num_conditions, self.embed_dim, self.time_features, *self.hidden_dims]
        if any(d < 1 for d in dims):
            raise ValueError(f"all model dimensions must be >= 1: {self}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")

    @property
    def input_dim(self) -> int:
        return self.data_dim + 2 * self.time_features + self.embed_dim

    @property
    def null_condition(self) -> int:
        return self.num_conditions

    def layer_dims(self) -> list[tuple[int, int]]:
        sizes = [self.input_dim, *self.hidden_dims, self.data_dim]
        return list(zip(sizes[:-1], sizes[1:]))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden_dims"] = list(self.hidden_dims)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**{**d, "hidden_dims": tuple(d.get("hidden_dims", (64, 64)))})


def _silu(z):
    return z * expit(z)


def _silu_grad(z):
    s = expit(z)
    return s * (1.0 + z * (1.0 - s))


def _tanh_grad(z):
    return 1.0 - np.tanh(z) ** 2


ACTIVATIONS = {
    "silu": (_silu, _silu_grad),
    "tanh": (np.tanh, _tanh_grad),
}


@dataclass
class ModelParameters:
    """Trainable arrays keyed by name, in declaration order."""

    config: ModelConfig
    arrays: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def num_layers(self) -> int:
        return len(self.config.layer_dims())

    def names(self) -> list[str]:
        return list(self.arrays)

    def shapes(self) -> dict[str, tuple[int, ...]]:
        return {k: v.shape for k, v in self.arrays.items()}

    def num_parameters(self) -> int:
        return sum(v.size for v in self.arrays.values())

    def flat(self) -> np.ndarray:
        return np.concatenate([v.ravel() for v in self.arrays.values()])

    def equals(self, other: "ModelParameters") -> bool:
        return self.config == other.config and all(
            np.array_equal(a, other.arrays[k]) for k, a in self.arrays.items()
        )


def parameter_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    shapes = {}
    for i, (fan_in, fan_out) in enumerate(config.layer_dims()):
        shapes[f"layer{i}.weight"] = (fan_in, fan_out)
        shapes[f"layer{i}.bias"] = (fan_out,)
    shapes["embedding"] = (config.num_conditions + 1, config.embed_dim)
    return shapes


def init_params(config: ModelConfig, rng: Rng) -> ModelParameters:
    """Weights ~ N(0, 1/fan_in), biases 0, embeddings ~ N(0, 1)."""
    arrays = {}
    for name, shape in parameter_shapes(config).items():
        if name.endswith(".weight"):
            arrays[name] = rng.normal(shape) / np.sqrt(shape[0])
        elif name.endswith(".bias"):
            arrays[name] = np.zeros(shape)
        else:
            arrays[name] = rng.normal(shape)
    return ModelParameters(config, arrays)


def zero_params(config: ModelConfig) -> ModelParameters:
    return ModelParameters(config, {k: np.zeros(s) for k, s in parameter_shapes(config).items()})


def zeros_like(params: ModelParameters) -> dict[str, np.ndarray]:
    return {k: np.zeros_like(v) for k, v in params.arrays.items()}


def clone_frozen(params: ModelParameters) -> ModelParameters:
    return ModelParameters(params.config, {k: v.copy() for k, v in params.arrays.items()})


def time_features(t: np.ndarray, count: int) -> np.ndarray:
    t = np.asarray(t, dtype=np.float64).reshape(-1, 1)
    freqs = (2.0 ** np.arange(count)) * np.pi
    angles = t * freqs
    return np.concatenate([np.sin(angles), np.cos(angles)], axis=1)


def condition_indices(config: ModelConfig, c, n: int) -> np.ndarray:
    """Map conditions (int, None for null, or a sequence that may hold None) to embedding rows."""
    if c is None:
        return np.full(n, config.null_condition, dtype=np.int64)
    if isinstance(c, (list, tuple)):
        c = [config.null_condition if v is None else v for v in c]
    idx = np.asarray(c, dtype=np.int64)
    if idx.ndim == 0:
        idx = np.full(n, int(idx), dtype=np.int64)
    if idx.shape != (n,):
        raise ShapeMismatch(f"expected {n} conditions, got shape {idx.shape}")
    if idx.size and (idx.min() < 0 or idx.max() > config.null_condition):
        raise BadCondition(f"condition outside [0, {config.num_conditions}]: {idx.min()}..{idx.max()}")
    return idx


def _rowdot(a: np.ndarray, w: np.ndarray) -> np.ndarray:
    return np.einsum("bi,ij->bj", a, w)


def _forward_cached(params: ModelParameters, x, t, c):
    cfg = params.config
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    n = x.shape[0]
    if x.shape[1] != cfg.data_dim:
        raise ShapeMismatch(f"x has dim {x.shape[1]}, model expects {cfg.data_dim}")
    t = np.broadcast_to(np.asarray(t, dtype=np.float64), (n,))
    idx = condition_indices(cfg, c, n)
    act, _ = ACTIVATIONS[cfg.activation]
    h = np.concatenate([x, time_features(t, cfg.time_features), params.arrays["embedding"][idx]], axis=1)
    hs, zs = [h], []
    last = params.num_layers - 1
    for i in range(params.num_layers):
        z = _rowdot(h, params.arrays[f"layer{i}.weight"]) + params.arrays[f"layer{i}.bias"]
        if i < last:
            zs.append(z)
            h = act(z)
            hs.append(h)
        else:
            h = z
    return h, (hs, zs, idx)


def forward_batch(params: ModelParameters, x, t, c) -> np.ndarray:
    """Velocities for a batch: x (B, d), t scalar or (B,), c int/None/(B,)."""
    out, _ = _forward_cached(params, x, t, c)
    return out


def forward(params: ModelParameters, x, t: float, c: int | None) -> np.ndarray:
    if c is not None and not 0 <= int(c) < params.config.num_conditions:
        raise BadCondition(f"condition {c} outside [0, {params.config.num_conditions})")
    return forward_batch(params, np.asarray(x, dtype=np.float64)[None, :], t, c)[0]


def _backward_cached(params: ModelParameters, cache, upstream: np.ndarray) -> dict[str, np.ndarray]:
    hs, zs, idx = cache
    cfg = params.config
    _, act_grad = ACTIVATIONS[cfg.activation]
    grads = {}
    delta = np.atleast_2d(upstream)
    for i in reversed(range(params.num_layers)):
        grads[f"layer{i}.weight"] = hs[i].T @ delta
        grads[f"layer{i}.bias"] = delta.sum(axis=0)
        if i > 0:
            delta = (delta @ params.arrays[f"layer{i}.weight"].T) * act_grad(zs[i - 1])
        else:
            delta = delta @ params.arrays["layer0.weight"].T
    emb = np.zeros_like(params.arrays["embedding"])
    np.add.at(emb, idx, delta[:, -cfg.embed_dim:])
    grads["embedding"] = emb
    return {k: grads[k] for k in params.arrays}


def backward_batch(params: ModelParameters, x, t, c, upstream) -> dict[str, np.ndarray]:
    """d(sum_b upstream_b . u(x_b, t_b, c_b)) / d(theta)."""
    out, cache = _forward_cached(params, x, t, c)
    upstream = np.asarray(upstream, dtype=np.float64)
    if upstream.shape != out.shape:
        raise ShapeMismatch(f"upstream shape {upstream.shape} does not match batch")
    return _backward_cached(params, cache, upstream)


def backward(params: ModelParameters, x, t: float, c: int | None, upstream_grad) -> dict[str, np.ndarray]:
    if c is not None and not 0 <= int(c) < params.config.num_conditions:
        raise BadCondition(f"condition {c} outside [0, {params.config.num_conditions})")
    x = np.asarray(x, dtype=np.float64)[None, :]
    return backward_batch(params, x, t, c, np.asarray(upstream_grad, dtype=np.float64)[None, :])


def forward_and_vjp(params: ModelParameters, x, t, c):
    """Outputs plus a closure mapping an upstream (B, d) array to gradients."""
    out, cache = _forward_cached(params, x, t, c)
    return out, lambda upstream: _backward_cached(params, cache, upstream)


def add_grads(a: dict[str, np.ndarray], b: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    return {k: a[k] + b[k] for k in a}


# ---------------------------------------------------------------- optimizer


@dataclass
class OptimizerState:
    lr: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.95
    eps: float = 1e-8
    weight_decay: float = 0.0
    warmup_steps: int = 100
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def hyper(self) -> dict:
        return {
            "lr": self.lr,
            "beta1": self.beta1,
            "beta2": self.beta2,
            "eps": self.eps,
            "weight_decay": self.weight_decay,
            "warmup_steps": self.warmup_steps,
            "step": self.step,
        }


def init_optimizer(params: ModelParameters, **hyper) -> OptimizerState:
    state = OptimizerState(**hyper)
    state.m = zeros_like(params)
    state.v = zeros_like(params)
    return state


def scheduled_lr(state: OptimizerState, step: int) -> float:
    """Learning rate for the 1-based update ``step``: linear warmup from 0, then flat."""
    if state.warmup_steps > 0 and step < state.warmup_steps:
        return state.lr * step / state.warmup_steps
    return state.lr


def adamw_step(state: OptimizerState, params: ModelParameters, grads: dict[str, np.ndarray]):
    """One AdamW update in place; returns ``(params, state)`` for chaining."""
    if set(grads) != set(params.arrays):
        raise ShapeMismatch(f"gradient keys {sorted(grads)} != parameter keys {sorted(params.arrays)}")
    for k, p in params.arrays.items():
        if grads[k].shape != p.shape:
            raise ShapeMismatch(f"{k}: gradient {grads[k].shape} vs parameter {p.shape}")
    state.step += 1
    k_step = state.step
    lr = scheduled_lr(state, k_step)
    bc1 = 1.0 - state.beta1**k_step
    bc2 = 1.0 - state.beta2**k_step
    for k, p in params.arrays.items():
        g = grads[k]
        m = state.m[k]
        v = state.v[k]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        if state.weight_decay:
            p -= lr * state.weight_decay * p
        p -= lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
    return params, state


# -------------------------------------------------------------- checkpoint


def save_checkpoint(path, params: ModelParameters, step: int = 0, optimizer: OptimizerState | None = None) -> None:
    """Write ``RFCK1`` magic, a one-line JSON header, a blank line, then raw <f8 arrays."""
    fields = [(k, v) for k, v in params.arrays.items()]
    if optimizer is not None:
        fields += [(f"adam.m.{k}", optimizer.m[k]) for k in params.arrays]
        fields += [(f"adam.v.{k}", optimizer.v[k]) for k in params.arrays]
    header = {
        "config": params.config.to_dict(),
        "fields": [{"name": k, "shape": list(v.shape)} for k, v in fields],
        "optimizer": optimizer.hyper() if optimizer is not None else None,
        "step": int(step),
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8"))
        fh.write(b"\n\n")
        for _, v in fields:
            fh.write(np.ascontiguousarray(v, dtype="<f8").tobytes())


def load_checkpoint(path) -> tuple[ModelParameters, int, OptimizerState | None]:
    data = Path(path).read_bytes()
    if not data.startswith(CHECKPOINT_MAGIC):
        raise CheckpointError(f"{path}: bad magic")
    end = data.find(b"\n\n", len(CHECKPOINT_MAGIC))
    if end < 0:
        raise CheckpointError(f"{path}: unterminated header")
    try:
        header = json.loads(data[len(CHECKPOINT_MAGIC):end].decode("utf-8"))
        config = ModelConfig.from_dict(header["config"])
    except (ValueError, KeyError, TypeError) as exc:
        raise CheckpointError(f"{path}: bad header ({exc})") from exc
    expected = parameter_shapes(config)
    offset = end + 2
    arrays = {}
    for f in header["fields"]:
        shape = tuple(f["shape"])
        count = int(np.prod(shape))
        nbytes = 8 * count
        if offset + nbytes > len(data):
            raise CheckpointError(f"{path}: truncated at field {f['name']}")
        arrays[f["name"]] = np.frombuffer(data, dtype="<f8", count=count, offset=offset).astype(np.float64).reshape(shape)
        offset += nbytes
    if offset != len(data):
        raise CheckpointError(f"{path}: {len(data) - offset} trailing bytes")
    params = ModelParameters(config, {k: arrays[k] for k in expected if k in arrays})
    if params.shapes() != expected:
        raise CheckpointError(f"{path}: parameter shapes do not match config")
    optimizer = None
    if header.get("optimizer") is not None:
        optimizer = OptimizerState(**header["optimizer"])
        optimizer.m = {k: arrays[f"adam.m.{k}"] for k in expected}
        optimizer.v = {k: arrays[f"adam.v.{k}"] for k in expected}
    return params, int(header["step"]), optimizer
