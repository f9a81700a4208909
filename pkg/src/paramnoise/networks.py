"""Fully connected Q-networks: plain layers, factorized-noise layers, frozen targets.

Parameter tensors are plain float64 arrays owned by the layers.  Two forward
paths exist and agree bit-for-bit: :func:`q_values` evaluates directly with
numpy (acting, target values) and :func:`forward` records every op on an
autodiff :class:`~paramnoise.autodiff.Record` so gradients with respect to the
parameters and the observation are available.
"""

from __future__ import annotations

import copy
import enum
import math
import os
import warnings
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import autodiff as ad
from . import kernels

SIGMA0 = 0.35
CHECKPOINT_VERSION = 1


class Kind(str, enum.Enum):
    PLAIN = "plain"
    NOISY = "noisy"


class ArchitectureError(ValueError):
    """Raised when two networks or a checkpoint disagree on architecture."""


class CheckpointError(ValueError):
    """Raised for unreadable, truncated, or incompatible checkpoint files."""


def signed_sqrt(x: np.ndarray) -> np.ndarray:
    """Factor transform f(x) = sign(x) * sqrt(|x|)."""
    return np.sign(x) * np.sqrt(np.abs(x))


# swap this to change how factor vectors become weight noise
noise_transform: Callable[[np.ndarray], np.ndarray] = signed_sqrt


@dataclass(frozen=True)
class Architecture:
    input_width: int
    n_actions: int
    hidden: tuple[int, ...] = (64, 64)
    kind: Kind = Kind.PLAIN
    sigma0: float = SIGMA0

    @property
    def widths(self) -> tuple[int, ...]:
        return (self.input_width, *self.hidden, self.n_actions)

    def describe(self) -> str:
        hidden = ",".join(str(h) for h in self.hidden)
        return (
            f"input={self.input_width} hidden={hidden} actions={self.n_actions} "
            f"kind={Kind(self.kind).value} sigma0={self.sigma0!r}"
        )

    @classmethod
    def parse(cls, text: str) -> "Architecture":
        fields_ = dict(item.split("=", 1) for item in text.split())
        hidden = tuple(int(h) for h in fields_["hidden"].split(",") if h)
        return cls(
            input_width=int(fields_["input"]),
            n_actions=int(fields_["actions"]),
            hidden=hidden,
            kind=Kind(fields_["kind"]),
            sigma0=float(fields_["sigma0"]),
        )


@dataclass
class LinearLayer:
    W: np.ndarray
    b: np.ndarray

    param_names = ("W", "b")

    def effective(self, use_noise: bool = True) -> tuple[np.ndarray, np.ndarray]:
        return self.W, self.b


@dataclass
class NoisyLinearLayer:
    """Linear layer with weights mu + sigma * eps built from two factor vectors.

    ``eps_in`` and ``eps_out`` hold raw standard-normal draws; the transform
    is applied when the weight noise is formed.
    """

    mu_W: np.ndarray
    sigma_W: np.ndarray
    mu_b: np.ndarray
    sigma_b: np.ndarray
    eps_in: np.ndarray
    eps_out: np.ndarray

    param_names = ("mu_W", "sigma_W", "mu_b", "sigma_b")
    _noise_cache: tuple | None = field(default=None, repr=False, compare=False)

    def weight_noise(self) -> tuple[np.ndarray, np.ndarray]:
        """(eps_W, eps_b); eps_W is the rank-1 outer product f(eps_out) f(eps_in)^T."""
        c = self._noise_cache
        # resampling rebinds the eps arrays, so identity tracks freshness
        if c is not None and c[0] is self.eps_in and c[1] is self.eps_out and c[2] is noise_transform:
            return c[3], c[4]
        f_out = noise_transform(self.eps_out)
        eps_W = np.outer(f_out, noise_transform(self.eps_in))
        self._noise_cache = (self.eps_in, self.eps_out, noise_transform, eps_W, f_out)
        return eps_W, f_out

    def effective(self, use_noise: bool = True) -> tuple[np.ndarray, np.ndarray]:
        if not use_noise:
            return self.mu_W, self.mu_b
        f_out = noise_transform(self.eps_out)
        W = kernels.noisy_weights(self.mu_W, self.sigma_W, f_out, noise_transform(self.eps_in))
        return W, self.mu_b + self.sigma_b * f_out

    def resample(self, rng: np.random.Generator) -> None:
        self.eps_in = rng.standard_normal(self.eps_in.shape[0])
        self.eps_out = rng.standard_normal(self.eps_out.shape[0])


Layer = LinearLayer | NoisyLinearLayer


@dataclass
class QNetwork:
    arch: Architecture
    layers: list[Layer]
    # False evaluates noisy layers at their means
    use_noise: bool = True

    @property
    def kind(self) -> Kind:
        return Kind(self.arch.kind)

    def parameters(self) -> list[tuple[str, np.ndarray]]:
        """Learnable arrays in a fixed order, named ``layer{i}.{param}``."""
        out = []
        for i, layer in enumerate(self.layers):
            for name in layer.param_names:
                out.append((f"layer{i}.{name}", getattr(layer, name)))
        return out

    def noise_vectors(self) -> list[tuple[str, np.ndarray]]:
        out = []
        for i, layer in enumerate(self.layers):
            if isinstance(layer, NoisyLinearLayer):
                out.append((f"layer{i}.eps_in", layer.eps_in))
                out.append((f"layer{i}.eps_out", layer.eps_out))
        return out

    def effective_weights(self) -> list[tuple[np.ndarray, np.ndarray]]:
        return [layer.effective(self.use_noise) for layer in self.layers]

    def copy(self) -> "QNetwork":
        return copy.deepcopy(self)


@dataclass
class TargetNetwork:
    """Frozen copy of a QNetwork's parameters (and, for noisy nets, one noise draw)."""

    net: QNetwork
    syncs: int = 0
    _weights: list | None = field(default=None, repr=False, compare=False)

    def weights(self) -> list[tuple[np.ndarray, np.ndarray]]:
        """Effective (W, b) per layer, computed once per sync or noise draw."""
        if self._weights is None:
            self._weights = self.net.effective_weights()
        return self._weights

    def resample_noise(self, rng: np.random.Generator) -> None:
        sample_noise(self.net, rng)
        self._weights = None

    @classmethod
    def from_network(cls, src: QNetwork, rng: np.random.Generator | None = None) -> "TargetNetwork":
        tgt = cls(src.copy())
        if rng is not None and tgt.net.kind is Kind.NOISY:
            sample_noise(tgt.net, rng)
        return tgt


def init_parameters(arch: Architecture, rng: np.random.Generator) -> QNetwork:
    """Uniform(+-1/sqrt(fan_in)) weights; noisy sigmas start at sigma0/sqrt(fan_in)."""
    widths = arch.widths
    if any(w <= 0 for w in widths):
        raise ArchitectureError(f"zero-width layer in {widths}")
    layers: list[Layer] = []
    for fan_in, fan_out in zip(widths[:-1], widths[1:]):
        bound = 1.0 / math.sqrt(fan_in)
        W = rng.uniform(-bound, bound, size=(fan_out, fan_in))
        b = rng.uniform(-bound, bound, size=fan_out)
        if arch.kind is Kind.NOISY:
            s = arch.sigma0 / math.sqrt(fan_in)
            layers.append(
                NoisyLinearLayer(
                    mu_W=W,
                    sigma_W=np.full((fan_out, fan_in), s),
                    mu_b=b,
                    sigma_b=np.full(fan_out, s),
                    eps_in=rng.standard_normal(fan_in),
                    eps_out=rng.standard_normal(fan_out),
                )
            )
        else:
            layers.append(LinearLayer(W, b))
    return QNetwork(arch, layers)


def sample_noise(net: QNetwork, rng: np.random.Generator) -> bool:
    """Redraw every noisy layer's factor vectors. Returns False for plain nets."""
    if net.kind is not Kind.NOISY:
        warnings.warn("sample_noise called on a plain network; ignored", stacklevel=2)
        return False
    for layer in net.layers:
        layer.resample(rng)
    return True


def _as_batch(net: QNetwork, obs) -> tuple[np.ndarray, bool]:
    x = np.asarray(obs, dtype=np.float64)
    single = x.ndim == 1
    if single:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != net.arch.input_width:
        raise ad.ShapeError(
            f"observation shape {np.shape(obs)} does not match input width {net.arch.input_width}"
        )
    return x, single


def q_values(net: QNetwork, obs) -> np.ndarray:
    """Q(obs, .) for one observation (shape [|A|]) or a batch (shape [n, |A|])."""
    x, single = _as_batch(net, obs)
    params = net.effective_weights()
    last = len(params) - 1
    for i, (W, b) in enumerate(params):
        x = x @ W.T + b
        if i < last:
            x = np.maximum(x, 0.0)
    return x[0] if single else x


@dataclass
class RecordedForward:
    """Handles into a recorded forward pass."""

    record: ad.Record
    obs: ad.Tensor
    q: ad.Tensor
    params: dict[str, ad.Tensor] = field(default_factory=dict)


def forward(net: QNetwork, obs, record: ad.Record | None = None) -> RecordedForward:
    """Record Q(obs, .) so it can be differentiated w.r.t. parameters and obs.

    The op sequence mirrors :func:`q_values` exactly, so values are identical.
    """
    record = record if record is not None else ad.Record()
    x_arr, single = _as_batch(net, obs)
    x_leaf = record.leaf(x_arr, "obs")
    params: dict[str, ad.Tensor] = {}
    h = x_leaf
    last = len(net.layers) - 1
    for i, layer in enumerate(net.layers):
        if isinstance(layer, NoisyLinearLayer):
            mu_W = params[f"layer{i}.mu_W"] = record.leaf(layer.mu_W, f"layer{i}.mu_W")
            s_W = params[f"layer{i}.sigma_W"] = record.leaf(layer.sigma_W, f"layer{i}.sigma_W")
            mu_b = params[f"layer{i}.mu_b"] = record.leaf(layer.mu_b, f"layer{i}.mu_b")
            s_b = params[f"layer{i}.sigma_b"] = record.leaf(layer.sigma_b, f"layer{i}.sigma_b")
            if net.use_noise:
                eps_W, eps_b = layer.weight_noise()
                W = ad.add(mu_W, ad.mul(s_W, record.leaf(eps_W, f"layer{i}.eps_W")))
                b = ad.add(mu_b, ad.mul(s_b, record.leaf(eps_b, f"layer{i}.eps_b")))
            else:
                W, b = mu_W, mu_b
        else:
            W = params[f"layer{i}.W"] = record.leaf(layer.W, f"layer{i}.W")
            b = params[f"layer{i}.b"] = record.leaf(layer.b, f"layer{i}.b")
        h = ad.add(ad.matmul_nt(h, W), b)
        if i < last:
            h = ad.relu(h)
    if single:
        h = _row(h, 0)
    return RecordedForward(record, x_leaf, h, params)


def _row(m: ad.Tensor, i: int) -> ad.Tensor:
    def vjp(g, v, o):
        gv = np.zeros_like(v)
        gv[i] = g
        return (gv,)

    return m.record._emit("row", (m,), lambda v: v[i].copy(), vjp)


def sync_target(src: QNetwork, dst: TargetNetwork, rng: np.random.Generator | None = None) -> None:
    """theta_minus <- theta (deep copy); a noisy target draws one frozen noise sample."""
    if src.arch != dst.net.arch:
        raise ArchitectureError(f"cannot sync {src.arch.describe()} into {dst.net.arch.describe()}")
    dst.net = src.copy()
    dst._weights = None
    if rng is not None and dst.net.kind is Kind.NOISY:
        sample_noise(dst.net, rng)
    dst.syncs += 1


# -- checkpoint format ------------------------------------------------------
#
#   paramnoise-checkpoint <version>
#   arch <Architecture.describe()>
#   seed <int>
#   step <int>
#   block <name> <dim> [<dim>]      followed by one repr(float) per line
#   end


def save_checkpoint(net: QNetwork, path, seed: int = 0, step: int = 0) -> None:
    lines = [
        f"paramnoise-checkpoint {CHECKPOINT_VERSION}",
        f"arch {net.arch.describe()}",
        f"seed {int(seed)}",
        f"step {int(step)}",
    ]
    for name, arr in net.parameters() + net.noise_vectors():
        lines.append(f"block {name} {' '.join(str(d) for d in arr.shape)}")
        lines.extend(repr(float(v)) for v in arr.ravel())
    lines.append("end")
    os.makedirs(os.path.dirname(os.fspath(path)) or ".", exist_ok=True)
    tmp = f"{path}.tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
    os.replace(tmp, path)


@dataclass
class Checkpoint:
    net: QNetwork
    seed: int
    step: int


def load_checkpoint(path, expect: Architecture | None = None) -> Checkpoint:
    """Parse a checkpoint; nothing is returned unless the whole file is valid."""
    try:
        with open(path, encoding="utf-8") as fh:
            lines = fh.read().splitlines()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    try:
        magic, version = lines[0].split()
        if magic != "paramnoise-checkpoint":
            raise CheckpointError(f"{path}: not a checkpoint file")
        if int(version) != CHECKPOINT_VERSION:
            raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
        tag, arch_text = lines[1].split(" ", 1)
        if tag != "arch":
            raise CheckpointError(f"{path}: missing arch line")
        arch = Architecture.parse(arch_text)
        seed = int(lines[2].split()[1])
        step = int(lines[3].split()[1])
        blocks: dict[str, np.ndarray] = {}
        pos = 4
        while lines[pos] != "end":
            parts = lines[pos].split()
            if parts[0] != "block":
                raise CheckpointError(f"{path}: malformed line {pos + 1}")
            shape = tuple(int(d) for d in parts[2:])
            n = math.prod(shape)
            vals = lines[pos + 1 : pos + 1 + n]
            if len(vals) != n:
                raise CheckpointError(f"{path}: truncated block {parts[1]}")
            blocks[parts[1]] = np.array([float(v) for v in vals], dtype=np.float64).reshape(shape)
            pos += 1 + n
    except CheckpointError:
        raise
    except (IndexError, ValueError, KeyError) as exc:
        raise CheckpointError(f"{path}: corrupt or truncated checkpoint ({exc})") from exc

    if expect is not None and expect != arch:
        raise ArchitectureError(
            f"{path}: checkpoint holds {arch.describe()}, expected {expect.describe()}"
        )
    net = init_parameters(arch, np.random.default_rng(0))
    for name, arr in net.parameters() + net.noise_vectors():
        if name not in blocks:
            raise CheckpointError(f"{path}: missing block {name}")
        if blocks[name].shape != arr.shape:
            raise CheckpointError(f"{path}: block {name} has shape {blocks[name].shape}, expected {arr.shape}")
        i, attr = name.split(".")
        setattr(net.layers[int(i[5:])], attr, blocks.pop(name))
    if blocks:
        raise CheckpointError(f"{path}: unexpected blocks {sorted(blocks)}")
    return Checkpoint(net, seed, step)
