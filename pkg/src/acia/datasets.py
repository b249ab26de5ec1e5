"""Seeded generators for the anti-causal benchmark families.

MNIST digits are replaced by fixed per-class prototypes (smooth random
vectors or grids drawn from ``prototype_seed``); the causal mechanisms
Y -> X <- E are kept.  Every generator is a pure function of
``(GenConfig, seed)``: each environment draws from its own
``SeedSequence([seed, env_id])`` stream, so environments can be generated
independently and in any order.
"""
from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from typing import Literal, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator
from scipy import ndimage

from .causal_space import FiniteSCM, toy_scm
from .errors import AlphaOutOfRange, ConfigMismatch, RejectionBudgetExceeded, ShapeError

Family = Literal["toy-scm", "colored-digit", "rotated-digit", "ball-agent"]
FAMILIES = ("toy-scm", "colored-digit", "rotated-digit", "ball-agent")

_MAGIC = b"ACIADS1\n"
REJECTION_BUDGET = 10_000


class EnvBlock(BaseModel):
    """Per-environment mechanism parameters.  Only the fields of the
    dataset's family are read."""

    model_config = ConfigDict(extra="forbid")

    env_id: int = Field(ge=0)
    # colored-digit: P(red | even digit); P(red | odd digit) is its complement.
    p_red_even: float = Field(0.75, ge=0.0, le=1.0)
    # rotated-digit
    base_angle: float = Field(15.0, ge=0.0, le=90.0)
    angle_offset: float = Field(45.0, ge=0.0, le=90.0)
    p_coupled: float = Field(0.75, ge=0.0, le=1.0)
    # ball-agent
    intervention_prob: float = Field(0.5, ge=0.0, le=1.0)
    shift: tuple[float, float] = (0.05, 0.05)

    @model_validator(mode="after")
    def _angles_in_range(self):
        if self.base_angle + self.angle_offset > 90.0:
            raise ValueError("base_angle + angle_offset must stay within [0, 90] degrees")
        return self


class GenConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    family: Family
    n_per_env: int = Field(1000, ge=0)
    envs: list[EnvBlock] = Field(default_factory=list)
    alpha: float = Field(0.0, ge=0.0, le=1.0)
    noise_sigma: float = Field(0.5, ge=0.0)
    prototype_seed: int = Field(1234, ge=0)
    proto_dim: int = Field(64, ge=1)
    grid: int = Field(16, ge=2)
    n_classes: int = Field(10, ge=2)
    n_balls: int = Field(4, ge=1)
    blob_sigma: float = Field(1.0, gt=0.0)

    @model_validator(mode="before")
    @classmethod
    def _fill_family_defaults(cls, data):
        # Omitted fields take the family's benchmark values, not the generic ones.
        if isinstance(data, dict) and data.get("family") in FAMILIES:
            return {**_family_defaults(data["family"]), **data}
        return data

    @model_validator(mode="after")
    def _check(self):
        ids = [b.env_id for b in self.envs]
        if len(set(ids)) != len(ids):
            raise ValueError(f"duplicate env ids {ids}")
        if self.family == "rotated-digit" and self.grid % 2:
            raise ValueError("rotated-digit grids must have even size")
        if self.family == "ball-agent" and self.grid < 8:
            raise ValueError("ball-agent grid resolution must be at least 8")
        return self

    def env(self, env_id: int) -> EnvBlock:
        for b in self.envs:
            if b.env_id == env_id:
                return b
        raise ConfigMismatch(f"environment {env_id} not configured")


def _family_defaults(family: str) -> dict:
    if family == "colored-digit":
        return dict(envs=[EnvBlock(env_id=1, p_red_even=0.75), EnvBlock(env_id=2, p_red_even=0.25)])
    if family == "rotated-digit":
        return dict(
            alpha=1.0,
            envs=[EnvBlock(env_id=1, base_angle=15.0, p_coupled=0.75), EnvBlock(env_id=2, base_angle=15.0, p_coupled=0.25)],
        )
    if family == "ball-agent":
        return dict(
            alpha=1.0,
            noise_sigma=0.0,
            envs=[EnvBlock(env_id=1, shift=(0.05, 0.05)), EnvBlock(env_id=2, shift=(-0.05, 0.05))],
        )
    if family == "toy-scm":
        return dict(envs=[EnvBlock(env_id=0), EnvBlock(env_id=1)], noise_sigma=0.0)
    raise ConfigMismatch(f"unknown family {family!r}")


def default_config(family: str, **overrides) -> GenConfig:
    """Configuration mirroring the benchmark constructions for ``family``."""
    return GenConfig(family=family, **overrides)


def make_imperfect(cfg: GenConfig, alpha: float) -> GenConfig:
    """Config whose mechanisms blend observational and perfect versions with weight ``alpha``."""
    if not 0.0 <= alpha <= 1.0:
        raise AlphaOutOfRange(f"alpha={alpha} outside [0, 1]")
    return cfg.model_copy(update={"alpha": float(alpha)})


def _perfect(p: float) -> float:
    if p > 0.5:
        return 1.0
    if p < 0.5:
        return 0.0
    return p


def color_table(cfg: GenConfig) -> dict[int, tuple[float, float]]:
    """Effective ``(P(red | even), P(red | odd))`` per environment."""
    if cfg.family != "colored-digit":
        raise ConfigMismatch(f"color tables exist for colored-digit, not {cfg.family}")
    out = {}
    for b in cfg.envs:
        even = (1 - cfg.alpha) * b.p_red_even + cfg.alpha * _perfect(b.p_red_even)
        odd_obs = 1.0 - b.p_red_even
        odd = (1 - cfg.alpha) * odd_obs + cfg.alpha * _perfect(odd_obs)
        out[b.env_id] = (even, odd)
    return out


@dataclass(eq=False)
class EnvironmentDataset:
    features: np.ndarray
    labels: np.ndarray
    envs: np.ndarray
    family: str
    gen_config: dict
    seed: int
    aux: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.envs)

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    @property
    def env_ids(self) -> list[int]:
        return sorted(set(self.envs.tolist()))

    @property
    def is_regression(self) -> bool:
        return self.labels.ndim == 2

    def select(self, mask) -> "EnvironmentDataset":
        return EnvironmentDataset(
            self.features[mask],
            self.labels[mask],
            self.envs[mask],
            self.family,
            self.gen_config,
            self.seed,
            {k: v[mask] for k, v in self.aux.items()},
        )

    def by_env(self) -> dict[int, "EnvironmentDataset"]:
        return {e: self.select(self.envs == e) for e in self.env_ids}


def concat(parts: list[EnvironmentDataset]) -> EnvironmentDataset:
    first = parts[0]
    if any(p.family != first.family for p in parts):
        raise ConfigMismatch("cannot concatenate datasets of different families")
    if any(p.dim != first.dim for p in parts):
        raise ShapeError("feature dimensionality differs between datasets")
    aux_keys = set.intersection(*[set(p.aux) for p in parts]) if parts else set()
    return EnvironmentDataset(
        np.concatenate([p.features for p in parts]),
        np.concatenate([p.labels for p in parts]),
        np.concatenate([p.envs for p in parts]),
        first.family,
        first.gen_config,
        first.seed,
        {k: np.concatenate([p.aux[k] for p in parts]) for k in sorted(aux_keys)},
    )


def _splitmix64(x: np.ndarray) -> np.ndarray:
    x = x.astype(np.uint64)
    with np.errstate(over="ignore"):
        x = x + np.uint64(0x9E3779B97F4A7C15)
        x = (x ^ (x >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
        x = (x ^ (x >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    return x ^ (x >> np.uint64(31))


def hash_split(ds: EnvironmentDataset, holdout: float = 0.1) -> tuple[EnvironmentDataset, EnvironmentDataset]:
    """Deterministic train/held-out split by hashed sample index."""
    h = _splitmix64(np.arange(len(ds), dtype=np.uint64) ^ np.uint64(ds.seed & 0xFFFFFFFFFFFFFFFF))
    u = (h >> np.uint64(11)).astype(np.float64) / float(1 << 53)
    held = u < holdout
    return ds.select(~held), ds.select(held)


def _env_rng(seed: int, env_id: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, env_id]))


def _empty(cfg: GenConfig, dim: int, seed: int, label_shape=()) -> EnvironmentDataset:
    return EnvironmentDataset(
        np.zeros((0, dim), np.float32),
        np.zeros((0, *label_shape), np.float64 if label_shape else np.int64),
        np.zeros(0, np.int32),
        cfg.family,
        cfg.model_dump(mode="json"),
        seed,
    )


# --- toy SCM -----------------------------------------------------------------


def gen_toy_scm(n: int, seed: int, scm: Optional[FiniteSCM] = None) -> EnvironmentDataset:
    """``n`` i.i.d. draws of ``(X, Y, E)`` from a finite SCM (default: the toy SCM)."""
    if n < 0:
        raise ValueError("n must be non-negative")
    scm = scm or toy_scm()
    rng = np.random.default_rng(np.random.SeedSequence([seed]))
    yi = rng.choice(scm.n_labels, size=n, p=scm.p_label)
    ei = rng.choice(scm.n_envs, size=n, p=scm.p_env)
    cdf = np.cumsum(scm.p_obs_given, axis=2)[yi, ei]
    xi = np.minimum((rng.random(n)[:, None] >= cdf).sum(axis=1), scm.n_obs - 1)
    cfg = {"family": "toy-scm", "n": n, "scm": scm.to_dict()}
    return EnvironmentDataset(
        np.asarray(scm.obs_support, np.float32)[xi][:, None],
        np.asarray(scm.label_support, np.int64)[yi],
        np.asarray(scm.env_support, np.int32)[ei],
        "toy-scm",
        cfg,
        seed,
    )


# --- prototypes ----------------------------------------------------------------


def _separated(protos: np.ndarray, min_dist: float) -> bool:
    flat = protos.reshape(len(protos), -1)
    d = np.sqrt(((flat[:, None, :] - flat[None, :, :]) ** 2).sum(-1))
    return bool(np.all(d[np.triu_indices(len(flat), 1)] >= min_dist))


def vector_prototypes(cfg: GenConfig) -> np.ndarray:
    """Smooth random class prototypes, unit RMS, shape ``(n_classes, proto_dim)``."""
    rng = np.random.default_rng(np.random.SeedSequence([cfg.prototype_seed, 0xC0]))
    for _ in range(100):
        raw = ndimage.gaussian_filter1d(rng.standard_normal((cfg.n_classes, cfg.proto_dim)), 2.0, axis=1, mode="wrap")
        protos = raw / np.sqrt((raw**2).mean(axis=1, keepdims=True))
        if _separated(protos, 3.0 * cfg.noise_sigma):
            return protos
    raise ConfigMismatch("could not draw prototypes separated by 3 noise standard deviations")


def grid_prototypes(cfg: GenConfig) -> np.ndarray:
    """Smooth random class images inside a disc, unit RMS, shape ``(n_classes, g, g)``."""
    g = cfg.grid
    rng = np.random.default_rng(np.random.SeedSequence([cfg.prototype_seed, 0x6D]))
    c = (g - 1) / 2.0
    yy, xx = np.mgrid[0:g, 0:g]
    # Disc envelope keeps mass away from corners so rotations do not clip it.
    envelope = np.clip(1.0 - np.hypot(yy - c, xx - c) / (0.5 * g), 0.0, None)
    for _ in range(100):
        raw = ndimage.gaussian_filter(rng.standard_normal((cfg.n_classes, g, g)), (0, 1.5, 1.5))
        raw = raw * envelope
        protos = raw / np.sqrt((raw**2).mean(axis=(1, 2), keepdims=True))
        if _separated(protos, 3.0 * cfg.noise_sigma):
            return protos
    raise ConfigMismatch("could not draw prototypes separated by 3 noise standard deviations")


def rotate_grid(img: np.ndarray, angle: float) -> np.ndarray:
    """Bilinear rotation about the grid centre, same shape, zero fill."""
    return ndimage.rotate(img, angle, reshape=False, order=1, mode="constant", cval=0.0)


# --- colored digits --------------------------------------------------------------


def _labels(rng, n, n_classes):
    return rng.integers(0, n_classes, size=n)


def gen_colored_digits(cfg: GenConfig, seed: int) -> EnvironmentDataset:
    """Two-block colour encoding: the drawn colour's block holds ``prototype(y) + noise``."""
    if cfg.family != "colored-digit":
        raise ConfigMismatch(f"gen_colored_digits got a {cfg.family} config")
    if cfg.n_classes != 10:
        raise ConfigMismatch("colored-digit uses 10 labels")
    protos = vector_prototypes(cfg)
    d = cfg.proto_dim
    table = color_table(cfg)
    parts = []
    for b in cfg.envs:
        rng = _env_rng(seed, b.env_id)
        n = cfg.n_per_env
        y = _labels(rng, n, cfg.n_classes)
        p_even, p_odd = table[b.env_id]
        red = rng.random(n) < np.where(y % 2 == 0, p_even, p_odd)
        shape = protos[y] + cfg.noise_sigma * rng.standard_normal((n, d))
        X = np.zeros((n, 2 * d))
        X[red, :d] = shape[red]
        X[~red, d:] = shape[~red]
        parts.append((X, y, np.full(n, b.env_id), {"red": red.astype(np.int8)}))
    return _assemble(cfg, seed, parts, 2 * d)


def _assemble(cfg: GenConfig, seed: int, parts, dim: int, label_shape=()) -> EnvironmentDataset:
    if not parts:
        return _empty(cfg, dim, seed, label_shape)
    aux_keys = parts[0][3].keys()
    return EnvironmentDataset(
        np.concatenate([p[0] for p in parts]).astype(np.float32),
        np.concatenate([p[1] for p in parts]).astype(np.float64 if label_shape else np.int64),
        np.concatenate([p[2] for p in parts]).astype(np.int32),
        cfg.family,
        cfg.model_dump(mode="json"),
        seed,
        {k: np.concatenate([p[3][k] for p in parts]) for k in aux_keys},
    )


# --- rotated digits ---------------------------------------------------------------


def rotation_angles(cfg: GenConfig, block: EnvBlock, y: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Per-sample angles: the parity-assigned angle is used with probability
    ``p_coupled`` (the other angle otherwise), then blended toward the
    environment's base angle by ``1 - alpha``."""
    lo, hi = block.base_angle, block.base_angle + block.angle_offset
    coupled = rng.random(len(y)) < block.p_coupled
    even = y % 2 == 0
    assigned = np.where(even == coupled, lo, hi)
    return (1.0 - cfg.alpha) * block.base_angle + cfg.alpha * assigned


def gen_rotated_digits(cfg: GenConfig, seed: int) -> EnvironmentDataset:
    if cfg.family != "rotated-digit":
        raise ConfigMismatch(f"gen_rotated_digits got a {cfg.family} config")
    protos = grid_prototypes(cfg)
    g = cfg.grid
    cache: dict = {}
    parts = []
    for b in cfg.envs:
        rng = _env_rng(seed, b.env_id)
        n = cfg.n_per_env
        y = _labels(rng, n, cfg.n_classes)
        angles = rotation_angles(cfg, b, y, rng)
        X = np.empty((n, g * g))
        for i, (label, a) in enumerate(zip(y, angles)):
            key = (int(label), float(a))
            if key not in cache:
                cache[key] = rotate_grid(protos[label], a).ravel()
            X[i] = cache[key]
        X += cfg.noise_sigma * rng.standard_normal(X.shape)
        parts.append((X, y, np.full(n, b.env_id), {"angle": angles}))
    return _assemble(cfg, seed, parts, g * g)


# --- ball agent --------------------------------------------------------------------


def sample_ball_positions(rng: np.random.Generator, n: int, n_balls: int, min_dist: float = 0.2) -> np.ndarray:
    """``(n, 2 * n_balls)`` coordinates in U(0.1, 0.9) with pairwise distance >= ``min_dist``.

    Vectorised rejection sampling; a sample that fails ``REJECTION_BUDGET``
    times raises :class:`RejectionBudgetExceeded`.
    """
    out = np.empty((n, n_balls, 2))
    pending = np.arange(n)
    attempts = 0
    iu = np.triu_indices(n_balls, 1)
    while pending.size:
        if attempts >= REJECTION_BUDGET:
            raise RejectionBudgetExceeded(f"{pending.size} samples failed {REJECTION_BUDGET} placement attempts")
        cand = rng.uniform(0.1, 0.9, size=(pending.size, n_balls, 2))
        if n_balls > 1:
            diff = cand[:, :, None, :] - cand[:, None, :, :]
            dist = np.sqrt((diff**2).sum(-1))[:, iu[0], iu[1]]
            ok = np.all(dist >= min_dist, axis=1)
        else:
            ok = np.ones(pending.size, dtype=bool)
        out[pending[ok]] = cand[ok]
        pending = pending[~ok]
        attempts += 1
    return out.reshape(n, 2 * n_balls)


def render_balls(positions: np.ndarray, grid: int, blob_sigma: float) -> np.ndarray:
    """One ``grid x grid`` Gaussian-blob channel per ball; ``positions`` is ``(n, 2 * n_balls)``
    of ``(x, y)`` pairs in unit coordinates.  Cell ``(r, c)`` has centre ``((c + .5)/g, (r + .5)/g)``."""
    n = len(positions)
    pos = positions.reshape(n, positions.shape[1] // 2, 2) * grid - 0.5
    r = np.arange(grid)
    gx = np.exp(-((r[None, None, :] - pos[:, :, 0:1]) ** 2) / (2 * blob_sigma**2))
    gy = np.exp(-((r[None, None, :] - pos[:, :, 1:2]) ** 2) / (2 * blob_sigma**2))
    img = gy[:, :, :, None] * gx[:, :, None, :]
    return img.reshape(n, pos.shape[1] * grid * grid)


def gen_ball_agent(cfg: GenConfig, seed: int) -> EnvironmentDataset:
    """Labels are ball coordinates; each coordinate is intervened with the
    environment's probability, which shifts where it is rendered by ``alpha * shift``."""
    if cfg.family != "ball-agent":
        raise ConfigMismatch(f"gen_ball_agent got a {cfg.family} config")
    k = cfg.n_balls
    parts = []
    for b in cfg.envs:
        rng = _env_rng(seed, b.env_id)
        n = cfg.n_per_env
        y = sample_ball_positions(rng, n, k)
        mask = rng.random((n, 2 * k)) < b.intervention_prob
        offset = cfg.alpha * np.tile(np.asarray(b.shift), k)
        X = render_balls(y + mask * offset, cfg.grid, cfg.blob_sigma)
        X += cfg.noise_sigma * rng.standard_normal(X.shape)
        parts.append((X, y, np.full(n, b.env_id), {"intervened": mask.astype(np.int8)}))
    return _assemble(cfg, seed, parts, k * cfg.grid**2, label_shape=(2 * k,))


def gen_toy_from_config(cfg: GenConfig, seed: int) -> EnvironmentDataset:
    return gen_toy_scm(cfg.n_per_env * max(len(cfg.envs), 1), seed)


GENERATORS = {
    "toy-scm": gen_toy_from_config,
    "colored-digit": gen_colored_digits,
    "rotated-digit": gen_rotated_digits,
    "ball-agent": gen_ball_agent,
}


def generate(cfg: GenConfig, seed: int) -> EnvironmentDataset:
    return GENERATORS[cfg.family](cfg, seed)


# --- file formats -------------------------------------------------------------------


def _header(ds: EnvironmentDataset) -> dict:
    return {
        "format": "acia-dataset/1",
        "family": ds.family,
        "gen_config": ds.gen_config,
        "seed": ds.seed,
        "dims": {"features": ds.dim, "labels": 0 if ds.labels.ndim == 1 else ds.labels.shape[1]},
        "label_dtype": "int64" if ds.labels.dtype.kind == "i" else "float64",
        "counts": {str(e): int((ds.envs == e).sum()) for e in ds.env_ids},
        "n": len(ds),
        "aux": {k: [str(v.dtype), list(v.shape[1:])] for k, v in sorted(ds.aux.items())},
    }


def dataset_bytes(ds: EnvironmentDataset, manifest: dict | None = None) -> bytes:
    """Binary container: magic, u64 header length, JSON header, then
    little-endian float32 features, labels, int32 envs and aux columns."""
    header = _header(ds)
    if manifest is not None:
        header["manifest"] = manifest
    hb = json.dumps(header, sort_keys=True).encode()
    chunks = [
        _MAGIC,
        struct.pack("<Q", len(hb)),
        hb,
        ds.features.astype("<f4").tobytes(),
        ds.labels.astype("<i8" if header["label_dtype"] == "int64" else "<f8").tobytes(),
        ds.envs.astype("<i4").tobytes(),
    ]
    for k in sorted(ds.aux):
        v = ds.aux[k]
        chunks.append(v.astype(v.dtype.newbyteorder("<")).tobytes())
    return b"".join(chunks)


def save_dataset(ds: EnvironmentDataset, path, manifest: dict | None = None) -> str:
    data = dataset_bytes(ds, manifest)
    with open(path, "wb") as fh:
        fh.write(data)
    return hashlib.sha256(data).hexdigest()


def read_header(path) -> dict:
    with open(path, "rb") as fh:
        if fh.read(len(_MAGIC)) != _MAGIC:
            raise ShapeError(f"{path} is not an acia dataset file")
        (hlen,) = struct.unpack("<Q", fh.read(8))
        return json.loads(fh.read(hlen))


def load_dataset(path) -> EnvironmentDataset:
    with open(path, "rb") as fh:
        raw = fh.read()
    if not raw.startswith(_MAGIC):
        if raw.lstrip().startswith(b"{"):
            return dataset_from_json(json.loads(raw))
        raise ShapeError(f"{path} is not an acia dataset file")
    off = len(_MAGIC)
    (hlen,) = struct.unpack_from("<Q", raw, off)
    off += 8
    h = json.loads(raw[off : off + hlen])
    off += hlen
    n, d, ld = h["n"], h["dims"]["features"], h["dims"]["labels"]

    def take(dtype, count, shape):
        nonlocal off
        arr = np.frombuffer(raw, dtype=dtype, count=count, offset=off).reshape(shape)
        off += arr.nbytes
        return arr

    X = take("<f4", n * d, (n, d)).astype(np.float32)
    lshape = (n, ld) if ld else (n,)
    y = take("<i8" if h["label_dtype"] == "int64" else "<f8", int(np.prod(lshape)), lshape)
    y = y.astype(np.int64 if h["label_dtype"] == "int64" else np.float64)
    e = take("<i4", n, (n,)).astype(np.int32)
    aux = {}
    for k, (dt, tail) in sorted(h["aux"].items()):
        dtype = np.dtype(dt).newbyteorder("<")
        aux[k] = take(dtype, n * int(np.prod(tail or [1])), (n, *tail)).astype(dt)
    return EnvironmentDataset(X, y, e, h["family"], h["gen_config"], h["seed"], aux)


def dataset_to_json(ds: EnvironmentDataset) -> dict:
    """Small-dataset JSON mode (exact: float32 values round-trip through repr)."""
    return {
        "header": _header(ds),
        "features": ds.features.astype(np.float64).tolist(),
        "labels": ds.labels.tolist(),
        "envs": ds.envs.tolist(),
        "aux": {k: v.tolist() for k, v in sorted(ds.aux.items())},
    }


def dataset_from_json(d: dict) -> EnvironmentDataset:
    h = d["header"]
    dim = h["dims"]["features"]
    X = np.asarray(d["features"], dtype=np.float32).reshape(-1, dim)
    y = np.asarray(d["labels"], dtype=np.int64 if h["label_dtype"] == "int64" else np.float64)
    aux = {k: np.asarray(v, dtype=h["aux"][k][0]) for k, v in d.get("aux", {}).items()}
    return EnvironmentDataset(X, y, np.asarray(d["envs"], np.int32), h["family"], h["gen_config"], h["seed"], aux)
