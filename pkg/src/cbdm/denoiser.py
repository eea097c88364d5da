"""Conditional noise-prediction network and its reverse-mode gradients.

The network is a plain MLP over ``[x_t | time-emb | class-emb (| omega-emb)]``
with SiLU activations.  Row ``K`` of the class-embedding table is reserved for
the null (unconditional) label.

Losses are written as closures over a :class:`Tape`.  The tape records every
network call and every elementwise op on :class:`Var` values, then replays them
backwards to produce exact parameter gradients.  :func:`sg` freezes a value.
"""
from __future__ import annotations

import hashlib
import json
import struct
from collections import OrderedDict
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

NULL_LABEL = -1  # array encoding of the unconditional label

_MAGIC = b"CBDMCKPT"
_VERSION = 1


@dataclass(frozen=True)
class DenoiserConfig:
    num_classes: int
    data_dim: int = 2
    hidden_dims: tuple[int, ...] = (128, 128)
    time_embed_dim: int = 32
    class_embed_dim: int = 16
    tcfg_enabled: bool = False
    omega_embed_dim: int = 8
    max_timestep: int = 200  # sets the frequency range of the time embedding
    omega_max: float = 2.0  # omega in [0, omega_max] spans the same range as t

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))
        dims = [self.num_classes, self.data_dim, self.time_embed_dim, self.class_embed_dim,
                self.max_timestep, *self.hidden_dims]
        if self.tcfg_enabled:
            dims.append(self.omega_embed_dim)
        if not self.hidden_dims or any(int(d) <= 0 for d in dims):
            raise ValueError(f"denoiser dimensions must be positive: {self}")
        for name in ("time_embed_dim", "omega_embed_dim"):
            if getattr(self, name) % 2:
                raise ValueError(f"{name} must be even")

    @property
    def input_dim(self) -> int:
        d = self.data_dim + self.time_embed_dim + self.class_embed_dim
        return d + (self.omega_embed_dim if self.tcfg_enabled else 0)

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, separators=(",", ":"))

    def digest(self) -> bytes:
        return hashlib.sha256(self.to_json().encode()).digest()


def parameter_shapes(config: DenoiserConfig) -> "OrderedDict[str, tuple[int, ...]]":
    """Array names and shapes in checkpoint declaration order."""
    shapes: OrderedDict[str, tuple[int, ...]] = OrderedDict()
    shapes["class_embed"] = (config.num_classes + 1, config.class_embed_dim)
    if config.tcfg_enabled:
        shapes["omega_w"] = (config.omega_embed_dim, config.omega_embed_dim)
        shapes["omega_b"] = (config.omega_embed_dim,)
    widths = [config.input_dim, *config.hidden_dims, config.data_dim]
    for i, (a, b) in enumerate(zip(widths[:-1], widths[1:])):
        shapes[f"w{i}"] = (a, b)
        shapes[f"b{i}"] = (b,)
    return shapes


@dataclass(eq=False)
class DenoiserParams:
    config: DenoiserConfig
    arrays: "OrderedDict[str, np.ndarray]" = field(repr=False)

    @property
    def parameter_count(self) -> int:
        return int(sum(a.size for a in self.arrays.values()))

    @property
    def num_classes(self) -> int:
        return self.config.num_classes

    @property
    def data_dim(self) -> int:
        return self.config.data_dim

    @property
    def tcfg_enabled(self) -> bool:
        return self.config.tcfg_enabled

    def predict_eps(self, x_t, y, t, omega=None) -> np.ndarray:
        return predict_eps(self, x_t, y, t, omega)

    def copy(self) -> "DenoiserParams":
        return DenoiserParams(self.config, OrderedDict((k, v.copy()) for k, v in self.arrays.items()))

    def flat(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.arrays.values()])

    def all_finite(self) -> bool:
        return all(np.isfinite(a).all() for a in self.arrays.values())


GradientBuffer = "OrderedDict[str, np.ndarray]"


def zeros_like_params(params: DenoiserParams):
    return OrderedDict((k, np.zeros_like(v)) for k, v in params.arrays.items())


def init_denoiser(config: DenoiserConfig, seed: int) -> DenoiserParams:
    rng = np.random.default_rng(seed)
    arrays: OrderedDict[str, np.ndarray] = OrderedDict()
    for name, shape in parameter_shapes(config).items():
        if name == "class_embed":
            arrays[name] = rng.normal(0.0, 0.1, size=shape)
        else:
            fan_in = shape[0] if name.startswith(("w", "omega_w")) else _fan_in_for_bias(name, config)
            bound = 1.0 / np.sqrt(fan_in)
            arrays[name] = rng.uniform(-bound, bound, size=shape)
    return DenoiserParams(config, arrays)


def _fan_in_for_bias(name: str, config: DenoiserConfig) -> int:
    if name == "omega_b":
        return config.omega_embed_dim
    widths = [config.input_dim, *config.hidden_dims]
    return widths[int(name[1:])]


# ---------------------------------------------------------------- embeddings

def sinusoidal_embedding(pos, dim: int, max_period: float) -> np.ndarray:
    """Sin/cos features with frequencies geometric between 1 and 1/max_period."""
    pos = np.asarray(pos, dtype=np.float64).reshape(-1)
    half = dim // 2
    if half == 1:
        freqs = np.ones(1)
    else:
        freqs = float(max_period) ** (-np.arange(half) / (half - 1))
    args = pos[:, None] * freqs[None, :]
    return np.concatenate([np.sin(args), np.cos(args)], axis=1)


def _omega_features(omega, config: DenoiserConfig) -> np.ndarray:
    scaled = np.asarray(omega, dtype=np.float64) * (config.max_timestep / config.omega_max)
    return sinusoidal_embedding(scaled, config.omega_embed_dim, config.max_timestep)


def _label_index(y, batch: int, num_classes: int) -> np.ndarray:
    if y is None:
        return np.full(batch, num_classes, dtype=np.int64)
    y = np.asarray(y)
    if y.dtype.kind not in "iu":
        raise TypeError(f"labels must be integers or None, got {y.dtype}")
    y = np.broadcast_to(y.astype(np.int64), (batch,))
    if y.size and (y.max() >= num_classes or y.min() < NULL_LABEL):
        raise ValueError(f"label out of range for K={num_classes}: {np.unique(y)}")
    return np.where(y == NULL_LABEL, num_classes, y)


def _as_batch(x_t, data_dim: int) -> tuple[np.ndarray, bool]:
    x = np.asarray(x_t, dtype=np.float64)
    single = x.ndim == 1
    x = np.atleast_2d(x)
    if x.shape[1] != data_dim:
        raise ValueError(f"expected data_dim={data_dim}, got shape {np.shape(x_t)}")
    return x, single


# ---------------------------------------------------------------- forward / vjp

def _forward(params: DenoiserParams, x: np.ndarray, y_idx: np.ndarray, t, omega):
    cfg = params.config
    A = params.arrays
    B = x.shape[0]
    t = np.broadcast_to(np.asarray(t, dtype=np.float64), (B,))
    parts = [x, sinusoidal_embedding(t, cfg.time_embed_dim, cfg.max_timestep), A["class_embed"][y_idx]]
    omega_feat = None
    if cfg.tcfg_enabled:
        if omega is None:
            parts.append(np.zeros((B, cfg.omega_embed_dim)))
        else:
            omega_feat = _omega_features(np.broadcast_to(np.asarray(omega, dtype=np.float64), (B,)), cfg)
            parts.append(omega_feat @ A["omega_w"] + A["omega_b"])
    h = np.concatenate(parts, axis=1)
    n_layers = len(cfg.hidden_dims) + 1
    acts = [h]
    pre = []
    for i in range(n_layers):
        z = h @ A[f"w{i}"] + A[f"b{i}"]
        if i < n_layers - 1:
            pre.append(z)
            s = 1.0 / (1.0 + np.exp(-z))
            h = z * s
            acts.append(h)
        else:
            h = z
    cache = (y_idx, omega_feat, acts, pre)
    return h, cache


def _vjp(params: DenoiserParams, cache, g_out: np.ndarray, grads) -> None:
    """Accumulate d(<g_out, output>)/d(params) into ``grads``."""
    cfg = params.config
    A = params.arrays
    y_idx, omega_feat, acts, pre = cache
    n_layers = len(cfg.hidden_dims) + 1
    g = g_out
    for i in reversed(range(n_layers)):
        grads[f"w{i}"] += acts[i].T @ g
        grads[f"b{i}"] += g.sum(axis=0)
        g = g @ A[f"w{i}"].T
        if i > 0:
            z = pre[i - 1]
            s = 1.0 / (1.0 + np.exp(-z))
            g = g * (s * (1.0 + z * (1.0 - s)))
    off = cfg.data_dim + cfg.time_embed_dim
    g_class = g[:, off:off + cfg.class_embed_dim]
    np.add.at(grads["class_embed"], y_idx, g_class)
    if omega_feat is not None:
        off += cfg.class_embed_dim
        g_om = g[:, off:off + cfg.omega_embed_dim]
        grads["omega_w"] += omega_feat.T @ g_om
        grads["omega_b"] += g_om.sum(axis=0)


def predict_eps(params: DenoiserParams, x_t, y, t, omega=None) -> np.ndarray:
    """Noise prediction for one vector or a (B, d) batch.

    ``y`` is an int, an int array (``NULL_LABEL`` for unconditional rows) or
    ``None`` for a fully unconditional call.  ``omega`` selects the guidance
    embedding and is only accepted by TCFG-enabled networks; leaving it out on
    such a network takes the plain conditional path.
    """
    if omega is not None and not params.config.tcfg_enabled:
        raise ValueError("omega supplied but the denoiser has no guidance embedding")
    x, single = _as_batch(x_t, params.config.data_dim)
    y_idx = _label_index(y, x.shape[0], params.config.num_classes)
    out, _ = _forward(params, x, y_idx, t, omega)
    return out[0] if single else out


# ---------------------------------------------------------------- tape

class Var:
    """A recorded value on a :class:`Tape`."""

    __slots__ = ("tape", "value", "parents", "cache")

    def __init__(self, tape: "Tape", value, parents=(), cache=None):
        self.tape = tape
        self.value = value
        self.parents = parents  # tuple of (Var, vjp_fn)
        self.cache = cache  # network-call cache, for call nodes only
        tape.nodes.append(self)

    def _lift(self, other):
        return other if isinstance(other, Var) else Var(self.tape, np.asarray(other, dtype=np.float64))

    def __add__(self, other):
        other = self._lift(other)
        return Var(self.tape, self.value + other.value,
                   ((self, _ident), (other, _ident)))

    __radd__ = __add__

    def __sub__(self, other):
        other = self._lift(other)
        return Var(self.tape, self.value - other.value,
                   ((self, _ident), (other, np.negative)))

    def __rsub__(self, other):
        return self._lift(other) - self

    def __neg__(self):
        return Var(self.tape, -self.value, ((self, np.negative),))

    def __mul__(self, w):
        if isinstance(w, Var):
            raise TypeError("products of two tape values are not supported")
        w = _row_broadcast(np.asarray(w, dtype=np.float64), self.value)
        return Var(self.tape, self.value * w, ((self, lambda g: g * w),))

    __rmul__ = __mul__

    def sq_norm(self) -> "Var":
        """Squared Euclidean norm over the last axis."""
        v = self.value
        return Var(self.tape, np.sum(v * v, axis=-1),
                   ((self, lambda g: 2.0 * v * np.expand_dims(g, -1)),))

    def sum(self) -> "Var":
        shape = np.shape(self.value)
        return Var(self.tape, np.sum(self.value), ((self, lambda g: np.broadcast_to(g, shape)),))

    def mean(self) -> "Var":
        shape = np.shape(self.value)
        n = max(int(np.prod(shape)), 1)
        return Var(self.tape, np.sum(self.value) / n,
                   ((self, lambda g: np.broadcast_to(g / n, shape)),))


def _ident(g):
    return g


def _row_broadcast(w: np.ndarray, value: np.ndarray) -> np.ndarray:
    if w.ndim == 1 and np.ndim(value) == 2 and w.shape[0] == np.shape(value)[0]:
        return w[:, None]
    return w


def sg(v: Var) -> Var:
    """Stop-gradient: same value, no backward path."""
    return v.tape.stop_gradient(v)


class Tape:
    """Records network calls and elementwise ops for one loss evaluation.

    ``frozen`` replays previously captured stop-gradient values instead of the
    live ones; finite-difference checks use it so that perturbed evaluations
    treat sg() outputs as constants, matching the backward semantics.
    """

    def __init__(self, params: DenoiserParams, frozen: list | None = None):
        self.params = params
        self.nodes: list[Var] = []
        self.terms: dict[str, float] = {}
        self.num_calls = 0
        self._frozen = frozen
        self._frozen_pos = 0
        self.stopped: list[np.ndarray] = []

    def eps(self, x_t, y, t, omega=None) -> Var:
        if omega is not None and not self.params.config.tcfg_enabled:
            raise ValueError("omega supplied but the denoiser has no guidance embedding")
        x, _ = _as_batch(x_t, self.params.config.data_dim)
        y_idx = _label_index(y, x.shape[0], self.params.config.num_classes)
        out, cache = _forward(self.params, x, y_idx, t, omega)
        self.num_calls += 1
        return Var(self, out, cache=cache)

    def const(self, value) -> Var:
        return Var(self, np.asarray(value, dtype=np.float64))

    def stop_gradient(self, v: Var) -> Var:
        if self._frozen is not None:
            value = self._frozen[self._frozen_pos]
            self._frozen_pos += 1
        else:
            value = v.value.copy()
        self.stopped.append(value)
        return Var(self, value)

    def backward(self, out: Var):
        if np.ndim(out.value) != 0:
            raise ValueError("loss closure must return a scalar")
        grads = zeros_like_params(self.params)
        cot: dict[int, np.ndarray] = {id(out): np.asarray(1.0)}
        for node in reversed(self.nodes):
            g = cot.pop(id(node), None)
            if g is None:
                continue
            if node.cache is not None:
                if np.any(g):
                    _vjp(self.params, node.cache, np.asarray(g, dtype=np.float64), grads)
                continue
            for parent, fn in node.parents:
                contrib = fn(g)
                key = id(parent)
                cot[key] = cot[key] + contrib if key in cot else contrib
        return grads


LossClosure = Callable[[Tape], Var]


def evaluate(params: DenoiserParams, closure: LossClosure, frozen=None) -> float:
    tape = Tape(params, frozen)
    return float(closure(tape).value)


def backward(params: DenoiserParams, closure: LossClosure):
    """Return ``(loss, grads)`` for a scalar loss closure."""
    tape = Tape(params)
    out = closure(tape)
    loss = float(out.value)
    if not np.isfinite(loss):
        raise FloatingPointError(
            f"non-finite loss {loss} (terms: {tape.terms}, network calls: {tape.num_calls})")
    return loss, tape.backward(out)


def grad_check(params: DenoiserParams, num_probes: int, step: float = 1e-5,
               closure: LossClosure | None = None, seed: int = 0, floor: float = 1e-6) -> float:
    """Worst relative error between reverse-mode and central differences.

    Coordinates are sampled uniformly over all parameter entries.  Without an
    explicit closure a random CBDM-shaped loss is used.  Relative errors use
    ``max(|a|, |b|, floor)`` as the denominator.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    if num_probes <= 0:
        return 0.0
    rng = np.random.default_rng(seed)
    if closure is None:
        closure = _random_cbdm_closure(params, rng)
    tape = Tape(params)
    out = closure(tape)
    grads = tape.backward(out)
    frozen = tape.stopped

    names = list(params.arrays)
    sizes = np.array([params.arrays[n].size for n in names])
    flat_idx = rng.choice(int(sizes.sum()), size=min(num_probes, int(sizes.sum())), replace=False)
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    worst = 0.0
    for fi in np.sort(flat_idx):
        k = int(np.searchsorted(offsets, fi, side="right") - 1)
        arr = params.arrays[names[k]]
        idx = np.unravel_index(int(fi - offsets[k]), arr.shape)
        orig = arr[idx]
        arr[idx] = orig + step
        lp = evaluate(params, closure, frozen)
        arr[idx] = orig - step
        lm = evaluate(params, closure, frozen)
        arr[idx] = orig
        fd = (lp - lm) / (2.0 * step)
        ad = grads[names[k]][idx]
        worst = max(worst, abs(ad - fd) / max(abs(ad), abs(fd), floor))
    return worst


def _random_cbdm_closure(params: DenoiserParams, rng: np.random.Generator) -> LossClosure:
    cfg = params.config
    B = 8
    x = rng.normal(size=(B, cfg.data_dim))
    eps = rng.normal(size=(B, cfg.data_dim))
    t = rng.integers(1, cfg.max_timestep + 1, size=B)
    y = rng.integers(0, cfg.num_classes, size=B)
    y[0] = NULL_LABEL
    y2 = rng.integers(0, cfg.num_classes, size=B)
    w = rng.uniform(0.1, 1.0) * t / cfg.max_timestep
    gamma = 0.25

    def closure(tape: Tape) -> Var:
        e = tape.eps(x, y, t)
        e2 = tape.eps(x, y2, t)
        reg = (e - sg(e2)).sq_norm() + gamma * (sg(e) - e2).sq_norm()
        return ((e - eps).sq_norm() + reg * w).mean()

    return closure


# ---------------------------------------------------------------- checkpoints

def save_params(params: DenoiserParams, path) -> None:
    cfg_json = params.config.to_json().encode()
    header = _MAGIC + struct.pack("<II", _VERSION, len(cfg_json)) + cfg_json + params.config.digest()
    body = b"".join(np.ascontiguousarray(a, dtype="<f8").tobytes() for a in params.arrays.values())
    Path(path).write_bytes(header + body)


def load_params(path) -> DenoiserParams:
    raw = Path(path).read_bytes()
    if raw[:8] != _MAGIC:
        raise ValueError(f"{path}: not a denoiser checkpoint")
    version, n = struct.unpack("<II", raw[8:16])
    if version != _VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    cfg_dict = json.loads(raw[16:16 + n])
    cfg = DenoiserConfig(**cfg_dict)
    pos = 16 + n
    if raw[pos:pos + 32] != cfg.digest():
        raise ValueError(f"{path}: config digest mismatch")
    pos += 32
    arrays: OrderedDict[str, np.ndarray] = OrderedDict()
    for name, shape in parameter_shapes(cfg).items():
        count = int(np.prod(shape))
        arrays[name] = np.frombuffer(raw, dtype="<f8", count=count, offset=pos).reshape(shape).astype(np.float64)
        pos += 8 * count
    if pos != len(raw):
        raise ValueError(f"{path}: trailing bytes in checkpoint")
    return DenoiserParams(cfg, arrays)
