"""Encoder with split (or shared) latent space, linear heads, and objectives."""
from __future__ import annotations

import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import measures
from . import numerics as nx
from .numerics import ParamSet, Tensor

METHODS = ("baseline", "rebalance", "mine", "dcor", "adversarial")

_CKPT_MAGIC = b"CBM1"


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class LatentCode:
    z1: Tensor
    z2: Tensor

    @property
    def width(self) -> int:
        return self.z1.shape[1] + self.z2.shape[1]


@dataclass(frozen=True)
class EncoderSpec:
    height: int = 16
    width: int = 16
    hidden: tuple[int, ...] = (64,)
    d1: int = 2
    d2: int = 2
    mode: str = "split"  # or "shared"

    def __post_init__(self):
        if self.mode not in ("split", "shared"):
            raise ConfigError(f"unknown encoder mode {self.mode!r}")
        if self.d1 < 1 or self.d2 < 1:
            raise ConfigError("latent subspaces need at least one dimension each")

    @property
    def input_dim(self) -> int:
        return self.height * self.width

    @property
    def latent_dim(self) -> int:
        return self.d1 + self.d2

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "EncoderSpec":
        d = dict(d)
        d["hidden"] = tuple(d.get("hidden", (64,)))
        return cls(**d)


@dataclass
class MethodConfig:
    """One method entry of an experiment.

    ``lambda_weight`` is the fixed penalty weight for ``mine``/``dcor``.
    For ``adversarial`` the weight follows the GRL ramp
    ``alpha * (2 / (1 + exp(-gamma * p)) - 1)`` instead.
    """

    method: str
    name: str = ""
    lambda_weight: float = 0.0
    alpha: float = 1.0
    gamma: float = 10.0
    n_b: int = 3
    optimizer: str = "adam"
    lr: float = 1e-3
    momentum: float = 0.9
    estimator_lr: float = 1e-3
    estimator_hidden: tuple[int, ...] = (64, 64)

    def __post_init__(self):
        if not self.name:
            self.name = self.method
        self.estimator_hidden = tuple(self.estimator_hidden)
        self.validate()

    def validate(self) -> None:
        if self.method not in METHODS:
            raise ConfigError(f"unknown method {self.method!r}; choose from {', '.join(METHODS)}")
        if self.lambda_weight < 0:
            raise ConfigError("lambda_weight must be >= 0")
        if self.method == "mine" and self.n_b < 2:
            raise ConfigError("mine needs n_b >= 2")
        if self.optimizer not in ("adam", "sgd"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")
        if self.lr <= 0 or self.estimator_lr <= 0:
            raise ConfigError("learning rates must be positive")

    @property
    def encoder_mode(self) -> str:
        return "shared" if self.method == "adversarial" else "split"

    def to_dict(self) -> dict:
        d = asdict(self)
        d["estimator_hidden"] = list(self.estimator_hidden)
        return d


class Model:
    """Encoder plus two linear heads, all in one ParamSet.

    In split mode head 1 reads z1 and head 2 reads z2. In shared mode both
    heads read the whole latent.
    """

    def __init__(self, spec: EncoderSpec, seed: int = 0):
        self.spec = spec
        rng = np.random.default_rng(seed)
        self.params = ParamSet()
        widths = (spec.input_dim, *spec.hidden, spec.latent_dim)
        for i, (fi, fo) in enumerate(zip(widths[:-1], widths[1:])):
            nx.add_linear(self.params, f"enc.l{i}", fi, fo, rng)
        self.n_enc = len(widths) - 1
        h1_in, h2_in = (spec.d1, spec.d2) if spec.mode == "split" else (spec.latent_dim,) * 2
        nx.add_linear(self.params, "head1", h1_in, 2, rng)
        nx.add_linear(self.params, "head2", h2_in, 2, rng)

    def encoder_keys(self) -> list[str]:
        return [k for k in self.params if k.startswith("enc.")]

    def latent(self, x) -> Tensor:
        x = x if isinstance(x, Tensor) else Tensor(x)
        if x.data.ndim != 2 or x.shape[1] != self.spec.input_dim:
            raise nx.ShapeError(f"encoder expects N x {self.spec.input_dim} inputs, got {x.shape}")
        h = x
        for i in range(self.n_enc):
            h = nx.affine(h, self.params[f"enc.l{i}.W"], self.params[f"enc.l{i}.b"])
            if i < self.n_enc - 1:
                h = nx.relu(h)
        return h

    def encode(self, x) -> LatentCode:
        """Forward pass; in shared mode z1/z2 are the two halves of the one latent."""
        z = self.latent(x)
        d1 = self.spec.d1
        return LatentCode(nx.slice_cols(z, 0, d1), nx.slice_cols(z, d1, self.spec.latent_dim))

    def head_logits(self, which: int, z: Tensor) -> Tensor:
        return head_logits(self.params, f"head{which}", z)

    def snapshot(self) -> "Model":
        clone = Model.__new__(Model)
        clone.spec = self.spec
        clone.n_enc = self.n_enc
        clone.params = ParamSet()
        for k, arr in self.params.state_dict().items():
            clone.params.add(k, arr)
        return clone


def encode(model: Model, x) -> LatentCode:
    return model.encode(x)


def head_logits(params: ParamSet | dict, prefix: str, z: Tensor) -> Tensor:
    """Single affine map to two logits; no hidden layer by design."""
    return nx.affine(z, params[f"{prefix}.W"], params[f"{prefix}.b"])


def loss_subspace_ce(model: Model, z: LatentCode, y1, y2) -> Tensor:
    t1 = nx.one_hot(y1)
    t2 = nx.one_hot(y2)
    ce1 = nx.softmax_cross_entropy(model.head_logits(1, z.z1), t1)
    ce2 = nx.softmax_cross_entropy(model.head_logits(2, z.z2), t2)
    return nx.scale(nx.add(ce1, ce2), 0.5)


def dependence_penalty(z: LatentCode, measure: str, mine_net: measures.MineNet | None = None,
                       perm: np.ndarray | None = None) -> Tensor:
    if measure == "dcor":
        return measures.dcor(z.z1, z.z2)
    if measure == "mine":
        if mine_net is None or perm is None:
            raise ConfigError("mine penalty needs an estimator and a permutation")
        return measures.mine_dv_bound(mine_net, z.z1, z.z2, perm, frozen=True)
    raise ConfigError(f"unknown dependence measure {measure!r}")


def loss_penalized(model: Model, z: LatentCode, y1, y2, measure: str, lam: float,
                   mine_net: measures.MineNet | None = None,
                   perm: np.ndarray | None = None) -> tuple[Tensor, Tensor | None]:
    """Subspace CE plus ``lam`` times the dependence measure.

    Returns ``(loss, penalty)``. With ``lam == 0`` the measure is skipped
    and the loss is the subspace CE itself. The MINE estimator is read
    through frozen parameters so it receives no gradient here.
    """
    ce = loss_subspace_ce(model, z, y1, y2)
    if lam == 0:
        return ce, None
    pen = dependence_penalty(z, measure, mine_net, perm)
    return nx.add(ce, nx.scale(pen, lam)), pen


def loss_adversarial(model: Model, z_shared: Tensor, y1, y2, lam: float) -> tuple[Tensor, Tensor, Tensor]:
    """CE1 + CE2 where head 2 sees the latent through gradient reversal.

    Head 2 minimises its own CE while the encoder receives
    ``grad CE1 - lam * grad CE2``. Returns ``(total, ce1, ce2)``.
    """
    if model.spec.mode != "shared":
        raise ConfigError("adversarial loss needs a shared-latent encoder")
    ce1 = nx.softmax_cross_entropy(model.head_logits(1, z_shared), nx.one_hot(y1))
    ce2 = nx.softmax_cross_entropy(model.head_logits(2, nx.grad_reverse(z_shared, lam)), nx.one_hot(y2))
    return nx.add(ce1, ce2), ce1, ce2


def grl_lambda_schedule(p: float, alpha: float = 1.0, gamma: float = 10.0) -> float:
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"training progress must be in [0, 1], got {p}")
    return alpha * (2.0 / (1.0 + math.exp(-gamma * p)) - 1.0)


# -- CBM1 checkpoints ---------------------------------------------------------


def save_params(params: ParamSet | dict, path) -> None:
    items = params.items() if isinstance(params, ParamSet) else params.items()
    chunks = [_CKPT_MAGIC]
    for name, value in items:
        arr = value.data if isinstance(value, Tensor) else np.asarray(value)
        raw_name = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(raw_name)))
        chunks.append(raw_name)
        chunks.append(struct.pack("<B", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_params(path) -> dict[str, np.ndarray]:
    raw = Path(path).read_bytes()
    if raw[:4] != _CKPT_MAGIC:
        raise ValueError(f"{path}: not a CBM1 checkpoint")
    pos, out = 4, {}
    try:
        while pos < len(raw):
            (n,) = struct.unpack_from("<H", raw, pos)
            pos += 2
            name = raw[pos:pos + n].decode("utf-8")
            pos += n
            (rank,) = struct.unpack_from("<B", raw, pos)
            pos += 1
            dims = struct.unpack_from(f"<{rank}I", raw, pos)
            pos += 4 * rank
            count = int(np.prod(dims)) if rank else 1
            if pos + 4 * count > len(raw):
                raise ValueError("truncated tensor payload")
            out[name] = np.frombuffer(raw, dtype="<f4", count=count, offset=pos).reshape(dims).astype(np.float32)
            pos += 4 * count
    except (struct.error, UnicodeDecodeError, ValueError) as exc:
        raise ValueError(f"{path}: corrupt checkpoint ({exc})") from None
    return out


def save_checkpoint(model: Model, path) -> None:
    save_params(model.params, path)


def load_checkpoint(path, spec: EncoderSpec) -> Model:
    model = Model(spec, seed=0)
    model.params.load_state_dict(load_params(path))
    return model
