"""Deep Modality Blending Network.

Each modality has an encoder mapping ``(t, state)`` to a latent of size
``d_latent``. Latents are averaged per modality, blended across modalities with
a normalised weighted average, and decoded per modality at a query time into a
Gaussian (mean, std).
"""
from __future__ import annotations

import io
import json
import logging
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np
import torch
from torch import nn

from . import numcore as nc
from .seeding import stream

log = logging.getLogger(__name__)

P_FLOOR = 1e-6


class CheckpointFormatError(ValueError):
    pass


# --- specs --------------------------------------------------------------------

@dataclass(frozen=True)
class ModalitySpec:
    """One modality's shape and network topology.

    For images (rank-3 shapes) ``encoder`` lists the conv block channels,
    ``decoder`` the conv+upsample block channels and ``decoder_post`` the extra
    full-resolution convs. For vectors both are dense hidden widths.
    """

    name: str
    shape: tuple
    encoder: tuple
    decoder: tuple
    decoder_post: tuple = ()
    variance: str = "learned"  # or "fixed-unit"

    def __post_init__(self):
        object.__setattr__(self, "shape", tuple(self.shape))
        object.__setattr__(self, "encoder", tuple(self.encoder))
        object.__setattr__(self, "decoder", tuple(self.decoder))
        object.__setattr__(self, "decoder_post", tuple(self.decoder_post))
        if self.variance not in ("learned", "fixed-unit"):
            raise ValueError(f"unknown variance mode {self.variance!r}")
        if self.is_image and self.shape[1] % 2 ** len(self.encoder):
            raise ValueError(f"{self.name}: {len(self.encoder)} pooling blocks do not divide {self.shape}")

    @property
    def is_image(self) -> bool:
        return len(self.shape) == 3

    @property
    def size(self) -> int:
        return math.prod(self.shape)


@dataclass(frozen=True)
class ModelSpec:
    modalities: tuple
    d_latent: int = 64
    seed: int = 0
    sigma_floor: float = 0.01

    def __post_init__(self):
        object.__setattr__(self, "modalities", tuple(self.modalities))
        names = [m.name for m in self.modalities]
        if len(set(names)) != len(names):
            raise ValueError(f"duplicate modality names {names}")

    @property
    def names(self) -> list:
        return [m.name for m in self.modalities]

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "ModelSpec":
        raw = json.loads(text)
        raw["modalities"] = tuple(ModalitySpec(**m) for m in raw["modalities"])
        return cls(**raw)


def image_spec(size: int = 32, channels: int = 3, variance: str = "fixed-unit", scale: str = "desk") -> ModalitySpec:
    if scale == "paper":
        return ModalitySpec("image", (channels, size, size), (32, 64, 64, 128, 128, 256),
                            (256, 128, 128, 64, 64, 32), (16, 8), variance)
    return ModalitySpec("image", (channels, size, size), (16, 32, 32, 64),
                        (64, 32, 32, 16), (8,), variance)


def joint_spec(dim: int = 3, scale: str = "desk") -> ModalitySpec:
    if scale == "paper":
        return ModalitySpec("joint", (dim,), (32, 64, 64, 128, 128, 256, 128), (1024, 512, 216, 128, 32))
    return ModalitySpec("joint", (dim,), (32, 64, 64, 64, 64, 128, 64), (256, 128, 64, 64, 32))


def desk_spec(seed: int = 0, d_latent: int = 64, image_only: bool = False,
              image_variance: str = "fixed-unit") -> ModelSpec:
    mods = [image_spec(variance=image_variance)]
    if not image_only:
        mods.append(joint_spec())
    return ModelSpec(tuple(mods), d_latent, seed)


def paper_spec(seed: int = 0) -> ModelSpec:
    return ModelSpec((image_spec(128, scale="paper"), joint_spec(7, scale="paper")), 128, seed)


@dataclass
class BlendWeights:
    p: np.ndarray
    w: np.ndarray

    def __post_init__(self):
        self.p = np.asarray(self.p, dtype=np.float64)
        self.w = np.asarray(self.w, dtype=np.float64)
        if self.p.shape != self.w.shape:
            raise ValueError("p and w must have the same length")
        if abs(self.p.sum() - 1.0) > 1e-9 or (self.p < P_FLOOR - 1e-12).any():
            raise ValueError(f"p must lie on the simplex with entries >= {P_FLOOR}: {self.p}")
        if (self.w < 0).any() or (self.w > 1).any() or not (self.w > 0).any():
            raise ValueError(f"availability must be in [0, 1] and not all zero: {self.w}")

    @classmethod
    def inference(cls, w) -> "BlendWeights":
        w = np.asarray(w, dtype=np.float64)
        return cls(np.full(len(w), 1.0 / len(w)), w)

    def coefficients(self) -> np.ndarray:
        pw = self.p * self.w
        total = pw.sum()
        if total <= 0:
            raise ValueError("cannot blend: no available modality")
        return pw / total


@dataclass
class GaussianPrediction:
    mean: np.ndarray  # (Q, *shape)
    std: np.ndarray


@dataclass
class TrainConfig:
    iterations: int = 100_000
    lr: float = 1e-4
    obs_max: int = 5
    seed: int = 0
    log_every: int = 100
    checkpoint_every: int = 0
    targets: int = 1

    def __post_init__(self):
        if self.obs_max < 1:
            raise ValueError("obs_max must be >= 1")
        if self.targets < 1:
            raise ValueError("targets must be >= 1")


# --- network ------------------------------------------------------------------

class _Net(nn.Module):
    """Parameter container with deterministic fan-in initialisation."""

    def __init__(self, rng: np.random.Generator):
        super().__init__()
        self._rng = rng

    def _dense(self, name: str, n_in: int, n_out: int):
        self.register_parameter(f"{name}_w", nn.Parameter(nc.fan_in_uniform(self._rng, (n_in, n_out), n_in)))
        self.register_parameter(f"{name}_b", nn.Parameter(torch.zeros(n_out)))

    def _conv(self, name: str, c_in: int, c_out: int):
        w = nc.fan_in_uniform(self._rng, (c_out, c_in, 3, 3), 9 * c_in)
        self.register_parameter(f"{name}_w", nn.Parameter(w))
        self.register_parameter(f"{name}_b", nn.Parameter(torch.zeros(c_out)))

    def p(self, name: str):
        return getattr(self, f"{name}_w"), getattr(self, f"{name}_b")


class ImageEncoder(_Net):
    def __init__(self, spec: ModalitySpec, d_latent: int, rng, extra_channels: int = 1):
        super().__init__(rng)
        c, h, _ = spec.shape
        chans = (c + extra_channels,) + spec.encoder
        for i in range(len(spec.encoder)):
            self._conv(f"conv{i}", chans[i], chans[i + 1])
        self.n_blocks = len(spec.encoder)
        side = h // 2 ** self.n_blocks
        self._dense("out", chans[-1] * side * side, d_latent)

    def forward(self, x):
        for i in range(self.n_blocks):
            x = nc.maxpool2x2(nc.relu(nc.conv3x3(x, *self.p(f"conv{i}"))))
        return nc.dense(nc.reshape(x, (x.shape[0], -1)), *self.p("out"))


class VectorEncoder(_Net):
    def __init__(self, n_in: int, widths: Sequence[int], rng):
        super().__init__(rng)
        sizes = (n_in,) + tuple(widths)
        for i in range(len(widths)):
            self._dense(f"fc{i}", sizes[i], sizes[i + 1])
        self.n_layers = len(widths)

    def forward(self, x):
        for i in range(self.n_layers):
            x = nc.relu(nc.dense(x, *self.p(f"fc{i}")))
        return x


class ImageDecoder(_Net):
    def __init__(self, spec: ModalitySpec, n_in: int, out_channels: int, rng):
        super().__init__(rng)
        _, h, _ = spec.shape
        self.side = h // 2 ** len(spec.decoder)
        self.c0 = spec.decoder[0]
        self._dense("fc", n_in, self.c0 * self.side * self.side)
        chans = (self.c0,) + spec.decoder
        for i in range(len(spec.decoder)):
            self._conv(f"up{i}", chans[i], chans[i + 1])
        post = (chans[-1],) + spec.decoder_post
        for i in range(len(spec.decoder_post)):
            self._conv(f"post{i}", post[i], post[i + 1])
        self._conv("out", post[-1], out_channels)
        self.n_up, self.n_post = len(spec.decoder), len(spec.decoder_post)

    def forward(self, z):
        x = nc.relu(nc.dense(z, *self.p("fc")))
        x = nc.reshape(x, (z.shape[0], self.c0, self.side, self.side))
        for i in range(self.n_up):
            x = nc.upsample2x2(nc.relu(nc.conv3x3(x, *self.p(f"up{i}"))))
        for i in range(self.n_post):
            x = nc.relu(nc.conv3x3(x, *self.p(f"post{i}")))
        return nc.conv3x3(x, *self.p("out"))


class VectorDecoder(_Net):
    def __init__(self, n_in: int, widths: Sequence[int], n_out: int, rng):
        super().__init__(rng)
        sizes = (n_in,) + tuple(widths)
        for i in range(len(widths)):
            self._dense(f"fc{i}", sizes[i], sizes[i + 1])
        self._dense("out", sizes[-1], n_out)
        self.n_layers = len(widths)

    def forward(self, x):
        for i in range(self.n_layers):
            x = nc.relu(nc.dense(x, *self.p(f"fc{i}")))
        return nc.dense(x, *self.p("out"))


class DMBN(nn.Module):
    def __init__(self, spec: ModelSpec):
        super().__init__()
        self.spec = spec
        rng = stream(spec.seed, "init")
        d = spec.d_latent
        self.encoders = nn.ModuleDict()
        self.decoders = nn.ModuleDict()
        for m in spec.modalities:
            if m.is_image:
                self.encoders[m.name] = ImageEncoder(m, d, rng)
                c = m.shape[0] * (2 if m.variance == "learned" else 1)
                self.decoders[m.name] = ImageDecoder(m, d + 1, c, rng)
            else:
                if m.encoder[-1] != d:
                    raise ValueError(f"{m.name}: encoder output {m.encoder[-1]} != latent size {d}")
                self.encoders[m.name] = VectorEncoder(1 + m.size, m.encoder, rng)
                n_out = m.size * (2 if m.variance == "learned" else 1)
                self.decoders[m.name] = VectorDecoder(d + 1, m.decoder, n_out, rng)
        self.modality = {m.name: m for m in spec.modalities}

    @property
    def names(self) -> list:
        return self.spec.names

    def encode(self, name: str, t: torch.Tensor, x: torch.Tensor) -> torch.Tensor:
        """Latents for a batch of ``(t, state)`` observations of one modality."""
        m = self.modality[name]
        if tuple(x.shape[1:]) != m.shape or t.shape != (x.shape[0],):
            raise nc.ShapeError(f"encode[{name}]: expected t (n,) and x (n, *{m.shape}), "
                                f"got {tuple(t.shape)} and {tuple(x.shape)}")
        if m.is_image:
            tc = t.reshape(-1, 1, 1, 1).expand(-1, 1, *m.shape[1:])
            inp = nc.concat([x, tc], dim=1)
        else:
            inp = nc.concat([t.reshape(-1, 1), x], dim=1)
        return self.encoders[name](inp)

    def decode(self, name: str, r: torch.Tensor, t: torch.Tensor):
        """Mean and std for latents ``r`` (q, d) at query times ``t`` (q,)."""
        m = self.modality[name]
        if bool(((t < 0) | (t > 1)).any()):
            raise ValueError(f"query times must lie in [0, 1], got {t.tolist()}")
        out = self.decoders[name](nc.concat([r, t.reshape(-1, 1)], dim=1))
        if m.is_image:
            c = m.shape[0]
            mean = nc.sigmoid(nc.slice_(out, 0, c, dim=1))
            if m.variance == "learned":
                std = self.spec.sigma_floor + nc.softplus(nc.slice_(out, c, 2 * c, dim=1))
            else:
                std = torch.ones_like(mean)
        else:
            k = m.size
            mean = nc.slice_(out, 0, k).reshape(-1, *m.shape)
            if m.variance == "learned":
                std = (self.spec.sigma_floor + nc.softplus(nc.slice_(out, k, 2 * k))).reshape(-1, *m.shape)
            else:
                std = torch.ones_like(mean)
        return mean, std

    def represent(self, observations: Mapping, weights: BlendWeights) -> torch.Tensor:
        """Blended latent from per-modality observation batches ``{name: (t, x)}``."""
        coeff = weights.coefficients()
        means = {}
        for name, c in zip(self.names, coeff):
            if c == 0:
                continue
            obs = observations.get(name)
            if obs is None or len(obs[0]) == 0:
                raise ValueError(f"modality {name!r} has weight {c:.3g} but no observations")
            means[name] = aggregate(self.encode(name, *obs))
        return blend([means.get(n) for n in self.names], weights)

    def forward(self, observations: Mapping, weights: BlendWeights, t_target: torch.Tensor) -> dict:
        r = self.represent(observations, weights)
        rq = r.unsqueeze(0).expand(len(t_target), -1)
        return {n: self.decode(n, rq, t_target) for n in self.names}


# --- blending -----------------------------------------------------------------

def aggregate(latents: torch.Tensor) -> torch.Tensor:
    """Mean of per-observation latents (n, d) -> (d,)."""
    if latents.shape[0] == 0:
        raise ValueError("cannot aggregate an empty observation set")
    return nc.set_mean(latents)


def blend(means: Sequence, weights: BlendWeights) -> torch.Tensor:
    """Normalised weighted average of per-modality latents.

    Entries of ``means`` for modalities with zero coefficient may be ``None``.
    """
    coeff = weights.coefficients()
    if len(means) != len(coeff):
        raise ValueError(f"{len(means)} latents for {len(coeff)} weights")
    out = None
    for r, c in zip(means, coeff):
        if c == 0:
            continue
        term = nc.scale(r, float(c))
        out = term if out is None else nc.add(out, term)
    return out


def sample_blend_coefficients(n_modalities: int, rng: np.random.Generator) -> np.ndarray:
    """Flat-Dirichlet mixture weights, each floored at ``P_FLOOR``."""
    if n_modalities < 1:
        raise ValueError("need at least one modality")
    if n_modalities == 1:
        return np.ones(1)
    q = rng.dirichlet(np.ones(n_modalities))
    p = P_FLOOR + (1.0 - n_modalities * P_FLOOR) * q
    return p / p.sum()


# --- data ---------------------------------------------------------------------

class TrainingData:
    """Interactions held as float tensors for fast sampling."""

    def __init__(self, interactions: Sequence, names: Sequence[str]):
        if not interactions:
            raise ValueError("training needs at least one interaction")
        self.names = list(names)
        self.times = [torch.as_tensor(np.asarray(it.times, dtype=np.float32)).to(torch.get_default_dtype())
                      for it in interactions]
        self.states = [{n: torch.as_tensor(np.asarray(it.states[n])).to(torch.get_default_dtype())
                        for n in self.names} for it in interactions]

    def __len__(self):
        return len(self.times)


@dataclass
class Batch:
    interaction: int
    obs_index: np.ndarray
    target_index: np.ndarray
    weights: BlendWeights


def sample_training_batch(data: TrainingData, obs_max: int, rng: np.random.Generator, targets: int = 1) -> Batch:
    i = int(rng.integers(len(data)))
    T = len(data.times[i])
    n = int(rng.integers(1, obs_max + 1))
    obs = rng.integers(0, T, size=n)
    tgt = rng.integers(0, T, size=targets)
    k = len(data.names)
    return Batch(i, obs, tgt, BlendWeights(sample_blend_coefficients(k, rng), np.ones(k)))


def batch_tensors(data: TrainingData, batch: Batch):
    i = batch.interaction
    oi = torch.as_tensor(batch.obs_index)
    ti = torch.as_tensor(batch.target_index)
    times, states = data.times[i], data.states[i]
    observations = {n: (times[oi], states[n][oi]) for n in data.names}
    target = {n: states[n][ti] for n in data.names}
    return observations, target, times[ti]


def loss_fn(predictions: Mapping, target: Mapping) -> torch.Tensor:
    """Summed Gaussian NLL over modalities."""
    total = None
    for name, (mean, std) in predictions.items():
        term = nc.gaussian_nll(target[name], mean, std)
        total = term if total is None else total + term
    return total


# --- training -----------------------------------------------------------------

@dataclass
class TrainResult:
    model: DMBN
    losses: list = field(default_factory=list)
    optimizer: nc.OptimizerState | None = None


def train(model: DMBN, interactions: Sequence, config: TrainConfig,
          on_checkpoint: Callable[[int, DMBN, nc.OptimizerState], None] | None = None,
          optimizer: nc.OptimizerState | None = None) -> TrainResult:
    data = TrainingData(interactions, model.names)
    rng = stream(config.seed, "training")
    params = list(model.parameters())
    nc.flatten_parameters(params)
    opt = optimizer or nc.OptimizerState.for_params(params, lr=config.lr)
    losses = []
    for it in range(config.iterations):
        batch = sample_training_batch(data, config.obs_max, rng, config.targets)
        observations, target, t_target = batch_tensors(data, batch)
        loss = loss_fn(model(observations, batch.weights, t_target), target)
        value = float(loss.detach())
        if not math.isfinite(value):
            raise nc.NonFiniteError(f"non-finite loss at iteration {it} (lr={opt.lr})")
        grads = nc.backward(loss, params)
        nc.adam_step(opt, params, grads)
        losses.append(value)
        if config.log_every and (it + 1) % config.log_every == 0:
            log.info("iter %d loss %.4f", it + 1, float(np.mean(losses[-config.log_every:])))
        if on_checkpoint and config.checkpoint_every and (it + 1) % config.checkpoint_every == 0:
            on_checkpoint(it + 1, model, opt)
    return TrainResult(model, losses, opt)


# --- inference ----------------------------------------------------------------

def _as_tensor(x):
    return torch.as_tensor(np.asarray(x, dtype=np.float64)).to(torch.get_default_dtype())


def predict_trajectory(model: DMBN, observations: Mapping, availability, queries: Sequence[float]) -> dict:
    """Condition on ``{name: [(t, state), ...]}`` and decode every query time.

    Mixture weights are fixed to 1/|M|. Each query is decoded on its own, so the
    output at one time never depends on the other requested times.
    """
    weights = BlendWeights.inference(availability)
    obs = {}
    for name, pairs in observations.items():
        pairs = list(pairs)
        if pairs:
            obs[name] = (_as_tensor([p[0] for p in pairs]), _as_tensor(np.stack([p[1] for p in pairs])))
    qs = np.asarray(queries, dtype=np.float64)
    if not np.isfinite(qs).all() or (qs < 0).any() or (qs > 1).any():
        raise ValueError("query times must be finite and within [0, 1]")
    out = {n: ([], []) for n in model.names}
    with torch.no_grad():
        r = model.represent(obs, weights).unsqueeze(0)
        for q in qs:
            tq = _as_tensor([q])
            for name in model.names:
                mean, std = model.decode(name, r, tq)
                out[name][0].append(mean[0].numpy())
                out[name][1].append(std[0].numpy())
    return {n: GaussianPrediction(np.stack(m), np.stack(s)) for n, (m, s) in out.items()}


def encode_states(model: DMBN, name: str, times, states) -> np.ndarray:
    with torch.no_grad():
        return model.encode(name, _as_tensor(times), _as_tensor(states)).numpy()


# --- checkpoints --------------------------------------------------------------

def checkpoint_bytes(model: nn.Module, spec_json: str, optimizer: nc.OptimizerState | None = None,
                     magic: bytes = b"DMBN") -> bytes:
    buf = io.BytesIO()
    buf.write(magic)
    raw = spec_json.encode()
    buf.write(struct.pack("<II", 1, len(raw)) + raw)
    named = list(model.named_parameters())
    buf.write(struct.pack("<I", len(named)))

    def put(name: str, t: torch.Tensor):
        nb = name.encode()
        buf.write(struct.pack("<I", len(nb)) + nb)
        buf.write(struct.pack(f"<I{t.dim()}I", t.dim(), *t.shape))
        buf.write(t.detach().numpy().astype("<f4").tobytes())

    for name, p in named:
        put(name, p)
    if optimizer is None:
        buf.write(struct.pack("<B", 0))
    else:
        o = optimizer
        buf.write(struct.pack("<BQdddd", 1, o.step, o.lr, o.beta1, o.beta2, o.eps))
        for (name, _), m, v in zip(named, o.m, o.v):
            put(name + ".m", m)
            put(name + ".v", v)
    return buf.getvalue()


def parse_checkpoint(data: bytes, magic: bytes = b"DMBN"):
    """Returns (spec_json, {name: float32 array}, optimizer dict or None)."""
    buf = io.BytesIO(data)
    got = buf.read(4)
    if got != magic:
        raise CheckpointFormatError(f"bad magic {got!r}, expected {magic!r}")

    def read(fmt):
        size = struct.calcsize(fmt)
        raw = buf.read(size)
        if len(raw) != size:
            raise CheckpointFormatError("truncated checkpoint")
        return struct.unpack(fmt, raw)

    def get():
        (n,) = read("<I")
        name = buf.read(n).decode()
        (rank,) = read("<I")
        shape = read(f"<{rank}I")
        count = math.prod(shape)
        raw = buf.read(4 * count)
        if len(raw) != 4 * count:
            raise CheckpointFormatError("truncated checkpoint")
        arr = np.frombuffer(raw, dtype="<f4")
        return name, arr.reshape(shape).astype(np.float32)

    version, n = read("<II")
    if version != 1:
        raise CheckpointFormatError(f"unsupported checkpoint version {version}")
    spec_json = buf.read(n).decode()
    (count,) = read("<I")
    params = dict(get() for _ in range(count))
    (has_opt,) = read("<B")
    opt = None
    if has_opt:
        step, lr, b1, b2, eps = read("<Qdddd")
        moments = dict(get() for _ in range(2 * count))
        opt = {"step": step, "lr": lr, "beta1": b1, "beta2": b2, "eps": eps, "moments": moments}
    if buf.read(1):
        raise CheckpointFormatError("trailing bytes after checkpoint")
    return spec_json, params, opt


def _restore(model: nn.Module, params: dict, opt: dict | None):
    named = list(model.named_parameters())
    if set(params) != {n for n, _ in named}:
        raise CheckpointFormatError("parameter table does not match the model")
    for name, p in named:
        if params[name].shape != tuple(p.shape):
            raise CheckpointFormatError(f"{name}: stored shape {params[name].shape} != model shape {tuple(p.shape)}")
    with torch.no_grad():
        for name, p in named:
            p.copy_(torch.from_numpy(params[name]))
    if opt is None:
        return None
    state = nc.OptimizerState(lr=opt["lr"], beta1=opt["beta1"], beta2=opt["beta2"], eps=opt["eps"], step=opt["step"])
    state.set_moments([torch.from_numpy(opt["moments"][n + ".m"]).to(p.dtype) for n, p in named],
                      [torch.from_numpy(opt["moments"][n + ".v"]).to(p.dtype) for n, p in named])
    return state


def save_checkpoint(model: DMBN, path, optimizer: nc.OptimizerState | None = None) -> None:
    Path(path).write_bytes(checkpoint_bytes(model, model.spec.to_json(), optimizer))


def load_checkpoint(path) -> tuple[DMBN, nc.OptimizerState | None]:
    spec_json, params, opt = parse_checkpoint(Path(path).read_bytes())
    model = DMBN(ModelSpec.from_json(spec_json))
    return model, _restore(model, params, opt)
