"""Small fully connected networks, a finite-difference gradient checker and checkpoints."""

from __future__ import annotations

import json
import math
import struct
from collections import OrderedDict
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn as nn

from .errors import FormatError, NumericError, ParameterError

DTYPE = torch.float64
ACTIVATIONS = ("identity", "rectifier", "sigmoid", "softmax")


@dataclass(frozen=True)
class Layer:
    input_dim: int
    output_dim: int
    activation: str = "identity"
    dropout: float = 0.0


@dataclass(frozen=True)
class NetworkSpec:
    layers: Tuple[Layer, ...]

    def __post_init__(self):
        layers = tuple(self.layers)
        object.__setattr__(self, "layers", layers)
        if not layers:
            raise ParameterError("a network needs at least one layer")
        for i, layer in enumerate(layers):
            if layer.activation not in ACTIVATIONS:
                raise ParameterError(f"layer {i}: unknown activation {layer.activation!r}")
            if not 0.0 <= layer.dropout < 1.0:
                raise ParameterError(f"layer {i}: dropout must be in [0, 1)")
            if layer.input_dim < 1 or layer.output_dim < 1:
                raise ParameterError(f"layer {i}: dims must be positive")
            if layer.activation == "softmax" and i != len(layers) - 1:
                raise ParameterError("softmax is only allowed as the final activation")
        for i, (a, b) in enumerate(zip(layers, layers[1:])):
            if a.output_dim != b.input_dim:
                raise ParameterError(f"layers {i} and {i + 1} do not chain: {a.output_dim} != {b.input_dim}")

    @property
    def input_dim(self) -> int:
        return self.layers[0].input_dim

    @property
    def output_dim(self) -> int:
        return self.layers[-1].output_dim

    def to_dict(self) -> dict:
        return {"layers": [asdict(layer) for layer in self.layers]}

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkSpec":
        return cls(tuple(Layer(**layer) for layer in d["layers"]))


def mlp(dims: Sequence[int], hidden_activation="rectifier", final_activation="identity",
        dropout: float = 0.0) -> NetworkSpec:
    """Chain of FC layers; `dropout` applies after every hidden activation."""
    layers = []
    for i, (a, b) in enumerate(zip(dims, dims[1:])):
        last = i == len(dims) - 2
        layers.append(Layer(a, b, final_activation if last else hidden_activation, 0.0 if last else dropout))
    return NetworkSpec(tuple(layers))


# default desk-scale architecture
def generator_spec(d_in: int, hidden: int = 64) -> NetworkSpec:
    return mlp([d_in, hidden], final_activation="rectifier")


def encoder_spec(d_in: int = 64, hidden: int = 32, latent: int = 16) -> NetworkSpec:
    return mlp([d_in, hidden, latent])


def decoder_spec(latent: int = 16, hidden: int = 32, d_out: int = 64) -> NetworkSpec:
    return mlp([latent, hidden, d_out])


def classifier_spec(latent: int, C: int) -> NetworkSpec:
    return mlp([latent, C], final_activation="softmax")


def discriminator_spec(d_h: int, hidden: int = 32, dropout: float = 0.0) -> NetworkSpec:
    return mlp([d_h, hidden, 1], final_activation="sigmoid", dropout=dropout)


def wide_discriminator_spec(d_h: int, hidden: int = 1024) -> NetworkSpec:
    """FC-ReLU-DROP-FC-ReLU-DROP-FC-Sigmoid."""
    return mlp([d_h, hidden, hidden, 1], final_activation="sigmoid", dropout=0.5)


def vida512_specs() -> Tuple[NetworkSpec, NetworkSpec]:
    """Encoder FC(512-256)-ReLU-FC(256-128) and decoder FC(64-256)-ReLU-FC(256-512).

    The encoder's 128 outputs are read as a 64-dim mean followed by 64 unused
    log-variance slots; only the mean feeds the decoder.
    """
    return mlp([512, 256, 128]), mlp([64, 256, 512])


def init_params(spec: NetworkSpec, seed: int) -> "OrderedDict[str, torch.Tensor]":
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) for weights and biases."""
    g = torch.Generator().manual_seed(int(seed))
    params = OrderedDict()
    for i, layer in enumerate(spec.layers):
        bound = 1.0 / math.sqrt(layer.input_dim)
        w = (torch.rand(layer.output_dim, layer.input_dim, generator=g, dtype=DTYPE) * 2 - 1) * bound
        b = (torch.rand(layer.output_dim, generator=g, dtype=DTYPE) * 2 - 1) * bound
        params[f"w{i}"] = w
        params[f"b{i}"] = b
    return params


def _activate(x, name, logits):
    if name == "rectifier":
        return torch.relu(x)
    if name == "sigmoid":
        return x if logits else torch.sigmoid(x)
    if name == "softmax":
        return x if logits else torch.softmax(x, dim=1)
    return x


def forward(spec: NetworkSpec, params, x: torch.Tensor, training: bool = False,
            generator: Optional[torch.Generator] = None, logits: bool = False) -> torch.Tensor:
    """Run `x` through the network described by `spec`.

    Dropout is active only when `training` is set; pass a seeded `generator`
    to make the masks reproducible. With `logits=True` the final sigmoid or
    softmax is skipped.
    """
    x = torch.as_tensor(x, dtype=DTYPE)
    if x.dim() != 2 or x.shape[1] != spec.input_dim:
        raise ParameterError(f"expected input of shape [b, {spec.input_dim}], got {tuple(x.shape)}")
    for i, layer in enumerate(spec.layers):
        x = x @ params[f"w{i}"].T + params[f"b{i}"]
        x = _activate(x, layer.activation, logits and i == len(spec.layers) - 1)
        if training and layer.dropout > 0:
            keep = torch.rand(x.shape, generator=generator, dtype=DTYPE) >= layer.dropout
            x = x * keep / (1.0 - layer.dropout)
    return x


class Network(nn.Module):
    def __init__(self, spec: NetworkSpec, seed: int = 0):
        super().__init__()
        self.spec = spec
        self.params = nn.ParameterDict({k: nn.Parameter(v) for k, v in init_params(spec, seed).items()})

    def forward(self, x, generator=None, logits=False):
        return forward(self.spec, self.params, x, training=self.training, generator=generator, logits=logits)


def check_gradients(loss_fn: Callable[[], torch.Tensor], params: Iterable[torch.Tensor],
                    epsilon: float = 1e-6, max_samples: int = 64, seed: int = 0) -> float:
    """Compare autograd gradients with central differences on sampled coordinates.

    `loss_fn` is called without arguments and must read the tensors in
    `params`, which are perturbed in place. Returns the largest
    |analytic - fd| / (|analytic| + |fd| + 1e-12) over the sample.
    """
    if not 1e-6 <= epsilon <= 1e-3:
        raise ParameterError("epsilon must lie in [1e-6, 1e-3]")
    params = [p for p in params]
    for p in params:
        p.grad = None
    loss = loss_fn()
    if not torch.isfinite(loss):
        raise NumericError(f"loss is not finite: {loss.item()}")
    grads = torch.autograd.grad(loss, params, allow_unused=True)
    grads = [torch.zeros_like(p) if g is None else g.detach() for p, g in zip(params, grads)]

    coords = [(i, j) for i, p in enumerate(params) for j in range(p.numel())]
    rng = np.random.default_rng(seed)
    if len(coords) > max_samples:
        pick = rng.choice(len(coords), size=max_samples, replace=False)
        coords = [coords[k] for k in sorted(pick)]

    worst = 0.0
    with torch.no_grad():
        for i, j in coords:
            flat = params[i].view(-1)
            orig = flat[j].item()
            flat[j] = orig + epsilon
            up = loss_fn().item()
            flat[j] = orig - epsilon
            down = loss_fn().item()
            flat[j] = orig
            if not (math.isfinite(up) and math.isfinite(down)):
                raise NumericError("loss became non-finite under perturbation")
            fd = (up - down) / (2 * epsilon)
            an = grads[i].view(-1)[j].item()
            worst = max(worst, abs(an - fd) / (abs(an) + abs(fd) + 1e-12))
    return worst


_HEADER = struct.Struct("<Q")


def save_checkpoint(path, tensors: Dict[str, torch.Tensor], meta: Optional[dict] = None) -> None:
    """Write a JSON shape manifest followed by the tensors as little-endian float64.

    Layout: 8-byte little-endian manifest length, UTF-8 manifest, raw data.
    """
    entries, chunks, offset = [], [], 0
    for name, t in tensors.items():
        arr = np.ascontiguousarray(torch.as_tensor(t).detach().cpu().numpy(), dtype="<f8")
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        chunks.append(arr.tobytes())
        offset += arr.size
    manifest = json.dumps({"tensors": entries, "meta": meta or {}}, sort_keys=True).encode("utf-8")
    with Path(path).open("wb") as fh:
        fh.write(_HEADER.pack(len(manifest)))
        fh.write(manifest)
        for c in chunks:
            fh.write(c)


def load_checkpoint(path) -> Tuple["OrderedDict[str, torch.Tensor]", dict]:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise FormatError(f"{path}: truncated checkpoint")
    (n,) = _HEADER.unpack_from(raw)
    try:
        manifest = json.loads(raw[_HEADER.size:_HEADER.size + n].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: bad manifest: {exc}") from None
    data = np.frombuffer(raw, dtype="<f8", offset=_HEADER.size + n)
    out = OrderedDict()
    for e in manifest["tensors"]:
        size = int(np.prod(e["shape"], dtype=np.int64))
        if e["offset"] + size > data.size:
            raise FormatError(f"{path}: tensor {e['name']} runs past end of file")
        arr = data[e["offset"]:e["offset"] + size].reshape(e["shape"]).astype(np.float64)
        out[e["name"]] = torch.from_numpy(arr)
    return out, manifest.get("meta", {})
