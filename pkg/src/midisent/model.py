"""Networks: pooled-MLP front-end encoder, decoupling block, classifier heads
and the three variational networks, plus the checkpoint container.

Main-network parameters (encoder, decoupler, classifier heads) and the three
variational networks live in disjoint groups so that the alternating
optimiser can update one side while the other is held fixed.
"""

from __future__ import annotations

import contextlib
import json
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from . import tensor as T
from .errors import CheckpointError, ConfigError, DimensionError, LabelError
from .tensor import Tensor

LOGVAR_MIN, LOGVAR_MAX = -10.0, 10.0
CHECKPOINT_MAGIC = b"MIDISENT-CKPT"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    feat_dim: int = 8          # F
    frames: int = 20           # T
    embed_dim: int = 16        # D
    num_speakers: int = 20     # S
    num_devices: int = 3       # V
    enc_hidden: int = 64
    var_hidden: int = 64       # H

    def __post_init__(self):
        for f in fields(self):
            if getattr(self, f.name) < 1:
                raise ConfigError(f"{f.name} must be positive")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> ModelConfig:
        return cls(**{f.name: int(d[f.name]) for f in fields(cls) if f.name in d})


def xavier_uniform(rng: np.random.Generator, fan_out: int, fan_in: int) -> np.ndarray:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_out, fan_in))


class Module:
    """Owns named parameters, numpy buffers and child modules.

    While a module is frozen (see :func:`frozen`) :meth:`p` hands out detached
    copies of the parameters, so nothing downstream can reach them in backward.
    """

    def __init__(self):
        self.params: dict[str, Tensor] = {}
        self.buffers: dict[str, np.ndarray] = {}
        self.children: dict[str, Module] = {}
        self._frozen = False

    def p(self, name: str) -> Tensor:
        t = self.params[name]
        return t.detach() if self._frozen else t

    def add_child(self, name: str, module: Module) -> Module:
        self.children[name] = module
        return module

    def modules(self):
        yield self
        for child in self.children.values():
            yield from child.modules()

    def named_parameters(self, prefix: str = "") -> list[tuple[str, Tensor]]:
        out = [(prefix + k, v) for k, v in self.params.items()]
        for name, child in self.children.items():
            out.extend(child.named_parameters(f"{prefix}{name}."))
        return out

    def named_buffers(self, prefix: str = "") -> list[tuple[str, np.ndarray]]:
        out = [(prefix + k, v) for k, v in self.buffers.items()]
        for name, child in self.children.items():
            out.extend(child.named_buffers(f"{prefix}{name}."))
        return out

    def parameters(self) -> list[Tensor]:
        return [t for _, t in self.named_parameters()]

    def state_arrays(self, prefix: str = "") -> dict[str, np.ndarray]:
        state = {k: t.data for k, t in self.named_parameters(prefix)}
        state.update(self.named_buffers(prefix))
        return state

    def load_arrays(self, arrays: dict[str, np.ndarray], prefix: str = "") -> None:
        for name, t in self.named_parameters(prefix):
            t.data[...] = _fetch(arrays, name, t.shape)
        for name, buf in self.named_buffers(prefix):
            buf[...] = _fetch(arrays, name, buf.shape)

    def zero_grad(self) -> None:
        for t in self.parameters():
            t.grad = None


def _fetch(arrays: dict[str, np.ndarray], name: str, shape) -> np.ndarray:
    if name not in arrays:
        raise CheckpointError(f"checkpoint is missing '{name}'")
    arr = arrays[name]
    if arr.shape != tuple(shape):
        raise CheckpointError(f"'{name}' has shape {arr.shape}, model expects {tuple(shape)}")
    return arr


@contextlib.contextmanager
def frozen(*modules: Module):
    """Hold the parameters of ``modules`` fixed: forward passes see constants."""
    flagged = [m for mod in modules for m in mod.modules()]
    previous = [m._frozen for m in flagged]
    for m in flagged:
        m._frozen = True
    try:
        yield
    finally:
        for m, prev in zip(flagged, previous):
            m._frozen = prev


# ----------------------------------------------------------------------
# layers
# ----------------------------------------------------------------------
class Linear(Module):
    def __init__(self, fan_in: int, fan_out: int, rng: np.random.Generator):
        super().__init__()
        self.params["W"] = T.parameter(xavier_uniform(rng, fan_out, fan_in))
        self.params["b"] = T.parameter(np.zeros(fan_out))

    def __call__(self, x: Tensor) -> Tensor:
        return T.linear(x, self.p("W"), self.p("b"))


class BatchNorm(Module):
    def __init__(self, dim: int):
        super().__init__()
        self.params["gamma"] = T.parameter(np.ones(dim))
        self.params["beta"] = T.parameter(np.zeros(dim))
        self.buffers["running_mean"] = np.zeros(dim)
        self.buffers["running_var"] = np.ones(dim)

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        return T.batchnorm(x, self.p("gamma"), self.p("beta"),
                           self.buffers["running_mean"], self.buffers["running_var"], training)


class MLPBlock(Module):
    """FC -> ReLU -> BN."""

    def __init__(self, fan_in: int, fan_out: int, rng: np.random.Generator):
        super().__init__()
        self.fc = self.add_child("fc", Linear(fan_in, fan_out, rng))
        self.bn = self.add_child("bn", BatchNorm(fan_out))

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        return self.bn(T.relu(self.fc(x)), training)


# ----------------------------------------------------------------------
# main networks
# ----------------------------------------------------------------------
def stats_pool(X: Tensor) -> Tensor:
    """[B, F, T] -> [B, 2F]: per-feature mean over time, then standard deviation."""
    mu = X.mean(axis=2)
    centered = X - T.reshape(mu, mu.shape + (1,))
    std = T.sqrt((centered * centered).mean(axis=2))
    return T.concat([mu, std], axis=1)


class Encoder(Module):
    """Mean+std pooling over frames followed by a two-layer MLP to the initial embedding."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        super().__init__()
        self.cfg = cfg
        self.fc1 = self.add_child("fc1", Linear(2 * cfg.feat_dim, cfg.enc_hidden, rng))
        self.bn1 = self.add_child("bn1", BatchNorm(cfg.enc_hidden))
        self.fc2 = self.add_child("fc2", Linear(cfg.enc_hidden, cfg.embed_dim, rng))

    def __call__(self, X, training: bool) -> Tensor:
        X = T.as_tensor(X)
        single = X.ndim == 2
        if single:
            X = T.reshape(X, (1,) + X.shape)
        if X.ndim != 3 or X.shape[1] != self.cfg.feat_dim or X.shape[2] != self.cfg.frames:
            raise DimensionError(
                f"encoder expects [B, {self.cfg.feat_dim}, {self.cfg.frames}] features, got {X.shape}")
        h = self.bn1(T.relu(self.fc1(stats_pool(X))), training)
        x = self.fc2(h)
        return x[0] if single else x


class Decoupler(Module):
    """Shared MLP block feeding two parallel branch blocks (speaker, device)."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        super().__init__()
        d = cfg.embed_dim
        self.embed_dim = d
        self.shared = self.add_child("shared", MLPBlock(d, d, rng))
        self.speaker = self.add_child("speaker", MLPBlock(d, d, rng))
        self.device = self.add_child("device", MLPBlock(d, d, rng))

    def __call__(self, x, training: bool) -> tuple[Tensor, Tensor]:
        x = T.as_tensor(x)
        if x.shape[-1] != self.embed_dim:
            raise DimensionError(f"decoupler expects dimension {self.embed_dim}, got {x.shape}")
        h = self.shared(x, training)
        return self.speaker(h, training), self.device(h, training)


class SpeakerHead(Module):
    """AAM class weights [S, D] plus the learnable affine cosine of the prototypical loss."""

    def __init__(self, num_classes: int, dim: int, rng: np.random.Generator,
                 ap_scale_init: float = 10.0, ap_bias_init: float = 0.0):
        super().__init__()
        self.params["weight"] = T.parameter(xavier_uniform(rng, num_classes, dim))
        self.params["ap_scale"] = T.parameter(np.array([ap_scale_init]))
        self.params["ap_bias"] = T.parameter(np.array([ap_bias_init]))


class DeviceHead(Module):
    def __init__(self, num_classes: int, dim: int, rng: np.random.Generator):
        super().__init__()
        self.params["weight"] = T.parameter(xavier_uniform(rng, num_classes, dim))


# ----------------------------------------------------------------------
# variational networks
# ----------------------------------------------------------------------
class GaussianQ(Module):
    """Diagonal Gaussian q(x^d | x^s): shared hidden layer, mean head and log-variance head."""

    def __init__(self, dim: int, hidden: int, rng: np.random.Generator, out_dim: int | None = None):
        super().__init__()
        out_dim = dim if out_dim is None else out_dim
        self.trunk = self.add_child("trunk", Linear(dim, hidden, rng))
        self.mu = self.add_child("mu", Linear(hidden, out_dim, rng))
        self.logvar = self.add_child("logvar", Linear(hidden, out_dim, rng))

    def __call__(self, xs) -> tuple[Tensor, Tensor]:
        h = T.relu(self.trunk(T.as_tensor(xs)))
        return self.mu(h), T.clamp(self.logvar(h), LOGVAR_MIN, LOGVAR_MAX)


class CategoricalQ(Module):
    """Softmax classifier q(y | x) returning logits."""

    def __init__(self, dim: int, hidden: int, num_classes: int, rng: np.random.Generator):
        super().__init__()
        self.num_classes = num_classes
        self.fc1 = self.add_child("fc1", Linear(dim, hidden, rng))
        self.fc2 = self.add_child("fc2", Linear(hidden, num_classes, rng))

    def __call__(self, x) -> Tensor:
        return self.fc2(T.relu(self.fc1(T.as_tensor(x))))


def _as_rows(x) -> tuple[Tensor, bool]:
    x = T.as_tensor(x)
    if x.ndim == 1:
        return T.reshape(x, (1, x.shape[0])), True
    return x, False


def gaussian_logprob(q: GaussianQ, xs, xd) -> Tensor:
    """log q(x^d | x^s) per row: sum_k -1/2 log(2 pi var_k) - (x^d_k - mu_k)^2 / (2 var_k).

    Accepts single vectors (returns a scalar) or [N, D] batches (returns [N]).
    """
    xs, single = _as_rows(xs)
    xd, _ = _as_rows(xd)
    if xs.shape[0] != xd.shape[0]:
        raise DimensionError("x^s and x^d batches differ in length")
    mu, logvar = q(xs)
    if mu.shape != xd.shape:
        raise DimensionError(f"variational mean {mu.shape} vs target {xd.shape}")
    diff = xd - mu
    per_dim = -0.5 * (T.LOG_2PI + logvar) - 0.5 * diff * diff * T.exp(-logvar)
    out = per_dim.sum(axis=1)
    return out[0] if single else out


def check_labels(y, num_classes: int) -> np.ndarray:
    y = np.asarray(y)
    if y.ndim == 0:
        y = y.reshape(1)
    if not np.issubdtype(y.dtype, np.integer):
        if not np.all(np.equal(np.mod(y, 1), 0)):
            raise LabelError("labels must be integers")
        y = y.astype(np.int64)
    if y.size and (y.min() < 0 or y.max() >= num_classes):
        raise LabelError(f"label outside [0, {num_classes})")
    return y.astype(np.int64)


def categorical_logprob(q: CategoricalQ, x, y) -> Tensor:
    """log of the softmax probability the head assigns to class ``y`` (scalar or per row)."""
    x, single = _as_rows(x)
    y = check_labels(y, q.num_classes)
    if y.shape[0] != x.shape[0]:
        raise DimensionError("labels and inputs differ in length")
    logp = T.log_softmax(q(x), axis=1)
    out = logp[np.arange(len(y)), y]
    return out[0] if single else out


# ----------------------------------------------------------------------
# the full graph
# ----------------------------------------------------------------------
THETA_GROUPS = ("encoder", "decoupler", "speaker_head", "device_head")
PHI_GROUPS = ("q1", "q2", "q3")


class DisentangleModel:
    """Encoder, decoupler, classifier heads (theta) and q1, q2, q3 (phi1..phi3)."""

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        self.cfg = cfg
        rng = np.random.default_rng([seed, 11])
        d, h = cfg.embed_dim, cfg.var_hidden
        self.encoder = Encoder(cfg, rng)
        self.decoupler = Decoupler(cfg, rng)
        self.speaker_head = SpeakerHead(cfg.num_speakers, d, rng)
        self.device_head = DeviceHead(cfg.num_devices, d, rng)
        self.q1 = GaussianQ(d, h, rng)
        self.q2 = CategoricalQ(d, h, cfg.num_speakers, rng)
        self.q3 = CategoricalQ(d, h, cfg.num_devices, rng)
        self._check_disjoint()

    def group(self, name: str) -> Module:
        return getattr(self, name)

    def groups(self) -> dict[str, Module]:
        return {g: self.group(g) for g in THETA_GROUPS + PHI_GROUPS}

    def theta(self) -> list[Tensor]:
        return [t for g in THETA_GROUPS for t in self.group(g).parameters()]

    def phi(self, i: int | None = None) -> list[Tensor]:
        names = PHI_GROUPS if i is None else (PHI_GROUPS[i - 1],)
        return [t for g in names for t in self.group(g).parameters()]

    def theta_state(self) -> list[Tensor]:
        """theta parameters plus batchnorm running statistics, for checksums."""
        extra = [T.Tensor(b) for g in THETA_GROUPS for _, b in self.group(g).named_buffers()]
        return self.theta() + extra

    def _check_disjoint(self) -> None:
        sets = [{id(t) for t in self.theta()}] + [{id(t) for t in self.phi(i)} for i in (1, 2, 3)]
        for i in range(len(sets)):
            for j in range(i + 1, len(sets)):
                if sets[i] & sets[j]:
                    raise ConfigError("parameter groups overlap")

    def embed(self, X, training: bool) -> tuple[Tensor, Tensor]:
        return self.decoupler(self.encoder(X, training), training)

    def zero_grad(self) -> None:
        for m in self.groups().values():
            m.zero_grad()

    def state_arrays(self, groups=None) -> dict[str, np.ndarray]:
        out: dict[str, np.ndarray] = {}
        for g in groups or self.groups():
            out.update(self.group(g).state_arrays(g + "."))
        return out

    def load_arrays(self, arrays: dict[str, np.ndarray], groups) -> None:
        for g in groups:
            self.group(g).load_arrays(arrays, g + ".")


# ----------------------------------------------------------------------
# checkpoint container
# ----------------------------------------------------------------------
def save_checkpoint(path, cfg: ModelConfig, groups: list[str], arrays: dict[str, np.ndarray],
                    meta: dict | None = None) -> None:
    """Write a flat checkpoint: magic line, one JSON header line, raw little-endian float64 payload.

    The header lists D, F, T, S, V and hidden widths, the parameter groups
    present, and every array's name and shape in payload order.
    """
    names = sorted(arrays)
    header = {
        "version": CHECKPOINT_VERSION,
        "config": cfg.to_dict(),
        "groups": sorted(groups),
        "tensors": [{"name": n, "shape": list(arrays[n].shape)} for n in names],
        "meta": meta or {},
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC + b" %d\n" % CHECKPOINT_VERSION)
        fh.write(json.dumps(header, sort_keys=True).encode() + b"\n")
        for n in names:
            fh.write(np.ascontiguousarray(arrays[n], dtype="<f8").tobytes())


def load_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    first, _, rest = raw.partition(b"\n")
    if not first.startswith(CHECKPOINT_MAGIC):
        raise CheckpointError(f"{path} is not a checkpoint")
    if int(first.split()[1]) != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version in {path}")
    head, _, payload = rest.partition(b"\n")
    try:
        header = json.loads(head)
    except ValueError as exc:
        raise CheckpointError(f"{path}: unreadable header") from exc
    arrays, offset = {}, 0
    for entry in header["tensors"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape, dtype=np.int64))
        if offset + 8 * count > len(payload):
            raise CheckpointError(f"{path}: payload is truncated")
        arrays[entry["name"]] = np.frombuffer(payload, dtype="<f8", count=count,
                                              offset=offset).reshape(shape).astype(np.float64)
        offset += 8 * count
    if offset != len(payload):
        raise CheckpointError(f"{path}: payload length does not match header")
    return header, arrays


def save_model(path, model: DisentangleModel, groups=None, meta: dict | None = None) -> None:
    groups = list(groups or model.groups())
    save_checkpoint(path, model.cfg, groups, model.state_arrays(groups), meta)


def load_model(path, seed: int = 0) -> tuple[DisentangleModel, dict]:
    header, arrays = load_checkpoint(path)
    model = DisentangleModel(ModelConfig.from_dict(header["config"]), seed=seed)
    model.load_arrays(arrays, header["groups"])
    return model, header
