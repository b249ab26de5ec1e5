"""Two-level dense network: encoder -> abstraction -> linear head.

The low-level encoder is a stack of dense layers (ReLU between them, linear
output).  The abstraction is two dense layers with a ReLU in between.  The
head is a single linear map.  All arithmetic is float64; the checkpoint
stores float32.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import BadDims, DimMismatch, ShapeError

_MAGIC = b"ACIAMD1\n"


@dataclass(frozen=True)
class Arch:
    input_dim: int
    encoder: tuple[int, ...]  # hidden sizes of the encoder, last one is the low-level dim
    abstract_dim: int
    out_dim: int

    def layer_dims(self) -> dict[str, list[tuple[int, int]]]:
        enc = [self.input_dim, *self.encoder]
        return {
            "encoder": list(zip(enc[:-1], enc[1:])),
            "abstraction": [(self.encoder[-1], self.abstract_dim), (self.abstract_dim, self.abstract_dim)],
            "head": [(self.abstract_dim, self.out_dim)],
        }

    def to_dict(self) -> dict:
        return {"input_dim": self.input_dim, "encoder": list(self.encoder), "abstract_dim": self.abstract_dim, "out_dim": self.out_dim}

    @classmethod
    def from_dict(cls, d: dict) -> "Arch":
        return cls(int(d["input_dim"]), tuple(int(v) for v in d["encoder"]), int(d["abstract_dim"]), int(d["out_dim"]))


GROUPS = ("encoder", "abstraction", "head")


@dataclass
class AciaModel:
    arch: Arch
    layers: dict[str, list[tuple[np.ndarray, np.ndarray]]]
    init_seed: int = 0
    step: int = 0

    def params(self) -> list[np.ndarray]:
        """Parameter arrays in a fixed order (W then b, group by group)."""
        return [a for g in GROUPS for W, b in self.layers[g] for a in (W, b)]

    def flat(self) -> np.ndarray:
        return np.concatenate([p.ravel() for p in self.params()])

    def with_flat(self, vec: np.ndarray) -> "AciaModel":
        out, i = {}, 0
        for g in GROUPS:
            out[g] = []
            for W, b in self.layers[g]:
                nw, nb = W.size, b.size
                out[g].append((vec[i : i + nw].reshape(W.shape).copy(), vec[i + nw : i + nw + nb].copy()))
                i += nw + nb
        if i != vec.size:
            raise ShapeError(f"expected {i} parameters, got {vec.size}")
        return AciaModel(self.arch, out, self.init_seed, self.step)

    @property
    def n_params(self) -> int:
        return sum(p.size for p in self.params())


def default_arch(family: str, input_dim: int, out_dim: int) -> Arch:
    """Low-level dim 32 for vector inputs, 256 for grid inputs; abstraction dim 128."""
    if family == "toy-scm":
        return Arch(input_dim, (8,), 8, out_dim)
    low = 32 if family == "colored-digit" else 256
    return Arch(input_dim, (low,), 128, out_dim)


def init_model(arch: Arch, seed: int) -> AciaModel:
    """Uniform fan-in initialisation: W, b ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in))."""
    dims = [arch.input_dim, *arch.encoder, arch.abstract_dim, arch.out_dim]
    if not arch.encoder or any(int(d) <= 0 for d in dims):
        raise BadDims(f"all layer sizes must be positive, got {dims}")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xA1]))
    layers = {}
    for g, shapes in arch.layer_dims().items():
        layers[g] = []
        for fan_in, fan_out in shapes:
            bound = 1.0 / np.sqrt(fan_in)
            W = rng.uniform(-bound, bound, size=(fan_in, fan_out))
            b = rng.uniform(-bound, bound, size=fan_out)
            layers[g].append((W, b))
    return AciaModel(arch, layers, seed)


def zeros_like(model: AciaModel) -> AciaModel:
    return model.with_flat(np.zeros(model.n_params))


@dataclass
class Cache:
    """Activations kept for the backward pass."""

    inputs: dict[str, list[np.ndarray]] = field(default_factory=dict)  # layer inputs per group
    pre: dict[str, list[np.ndarray]] = field(default_factory=dict)  # pre-activations per group
    z_low: np.ndarray | None = None
    z_high: np.ndarray | None = None
    output: np.ndarray | None = None


def _stack(layers, x, cache: Cache, group: str):
    ins, pres = [], []
    h = x
    for i, (W, b) in enumerate(layers):
        ins.append(h)
        a = h @ W + b
        pres.append(a)
        h = np.maximum(a, 0.0) if i < len(layers) - 1 else a
    cache.inputs[group], cache.pre[group] = ins, pres
    return h


def forward_cache(model: AciaModel, x: np.ndarray) -> Cache:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != model.arch.input_dim:
        raise DimMismatch(f"input shape {x.shape} does not match input dim {model.arch.input_dim}")
    c = Cache()
    c.z_low = _stack(model.layers["encoder"], x, c, "encoder")
    c.z_high = _stack(model.layers["abstraction"], c.z_low, c, "abstraction")
    c.output = _stack(model.layers["head"], c.z_high, c, "head")
    return c


def forward(model: AciaModel, x: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Returns ``(z_low, z_high, output)``; classification outputs are logits."""
    c = forward_cache(model, x)
    return c.z_low, c.z_high, c.output


def _back_stack(layers, cache: Cache, group: str, d_out: np.ndarray, grads: dict):
    d = d_out
    gs = [None] * len(layers)
    for i in range(len(layers) - 1, -1, -1):
        W, _ = layers[i]
        if i < len(layers) - 1:
            d = d * (cache.pre[group][i] > 0.0)  # subgradient 0 at the kink
        gs[i] = (cache.inputs[group][i].T @ d, d.sum(axis=0))
        d = d @ W.T
    grads[group] = gs
    return d


def backprop(model: AciaModel, cache: Cache, d_output=None, d_high=None, d_low=None) -> AciaModel:
    """Gradients of a scalar given its partials w.r.t. output, abstraction and
    encoder activations.  Returned as a model-shaped container."""
    d_output = np.zeros_like(cache.output) if d_output is None else d_output
    grads: dict = {}
    dh = _back_stack(model.layers["head"], cache, "head", d_output, grads)
    if d_high is not None:
        dh = dh + d_high
    dl = _back_stack(model.layers["abstraction"], cache, "abstraction", dh, grads)
    if d_low is not None:
        dl = dl + d_low
    _back_stack(model.layers["encoder"], cache, "encoder", dl, grads)
    return AciaModel(model.arch, grads, model.init_seed, model.step)


def add_grads(a: AciaModel, b: AciaModel) -> AciaModel:
    return a.with_flat(a.flat() + b.flat())


# --- checkpoints ------------------------------------------------------------------


def checkpoint_bytes(model: AciaModel, extra: dict | None = None) -> bytes:
    """Magic, u64 header length, JSON header, little-endian float32 parameters."""
    header = {
        "format": "acia-model/1",
        "arch": model.arch.to_dict(),
        "init_seed": model.init_seed,
        "step": model.step,
        "n_params": model.n_params,
        "layers": "dense",
    }
    if extra:
        header.update(extra)
    hb = json.dumps(header, sort_keys=True).encode()
    return _MAGIC + struct.pack("<Q", len(hb)) + hb + model.flat().astype("<f4").tobytes()


def save_model(model: AciaModel, path, extra: dict | None = None) -> None:
    with open(path, "wb") as fh:
        fh.write(checkpoint_bytes(model, extra))


def load_model(path) -> tuple[AciaModel, dict]:
    with open(path, "rb") as fh:
        raw = fh.read()
    if not raw.startswith(_MAGIC):
        raise ShapeError(f"{path} is not an acia checkpoint")
    (hlen,) = struct.unpack_from("<Q", raw, len(_MAGIC))
    off = len(_MAGIC) + 8
    header = json.loads(raw[off : off + hlen])
    vec = np.frombuffer(raw, dtype="<f4", offset=off + hlen).astype(np.float64)
    arch = Arch.from_dict(header["arch"])
    template = AciaModel(arch, _shapes_only(arch), header["init_seed"], header["step"])
    return template.with_flat(vec), header


def _shapes_only(arch: Arch):
    return {g: [(np.zeros(s), np.zeros(s[1])) for s in shapes] for g, shapes in arch.layer_dims().items()}
