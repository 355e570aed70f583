"""Denoising multimodal autoencoder baseline over consecutive state pairs.

The input is the state at ``t`` stacked with the state at ``t+1`` (image
channels concatenated, joint vectors concatenated). Masked blocks hold the
sentinel ``-2``. The model is deterministic: no std head and no KL term, so
it is trained with plain reconstruction MSE over the whole pair.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import torch
from torch import nn

from . import numcore as nc
from .dmbn import (ImageDecoder, ImageEncoder, ModalitySpec, VectorDecoder, VectorEncoder, _Net, _restore,
                   checkpoint_bytes, image_spec, joint_spec, parse_checkpoint)
from .seeding import stream

log = logging.getLogger(__name__)

MASK_VALUE = -2.0
SLOTS = ("t", "t+1")

# Each scheme lists the (modality, slot) blocks it masks. The first six are the
# baseline set; the combined ones are the input patterns met during rollouts.
SCHEMES: dict[str, frozenset] = {
    "none": frozenset(),
    "joints@t+1": frozenset({("joint", "t+1")}),
    "image@t+1": frozenset({("image", "t+1")}),
    "all@t+1": frozenset({("joint", "t+1"), ("image", "t+1")}),
    "joints@t": frozenset({("joint", "t")}),
    "image@t": frozenset({("image", "t")}),
    "all@t": frozenset({("joint", "t"), ("image", "t")}),
    "all@t+1,image@t": frozenset({("joint", "t+1"), ("image", "t+1"), ("image", "t")}),
    "all@t+1,joints@t": frozenset({("joint", "t+1"), ("image", "t+1"), ("joint", "t")}),
    "all@t,image@t+1": frozenset({("joint", "t"), ("image", "t"), ("image", "t+1")}),
    "all@t,joints@t+1": frozenset({("joint", "t"), ("image", "t"), ("joint", "t+1")}),
}
SCHEME_NAMES = tuple(SCHEMES)


@dataclass(frozen=True)
class MvaeSpec:
    modalities: tuple  # per-frame ModalitySpecs; the pair doubles channels / length
    d_latent: int = 64
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "modalities", tuple(self.modalities))

    @property
    def names(self) -> list:
        return [m.name for m in self.modalities]

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "MvaeSpec":
        raw = json.loads(text)
        raw["modalities"] = tuple(ModalitySpec(**m) for m in raw["modalities"])
        return cls(**raw)


def desk_mvae_spec(seed: int = 0, d_latent: int = 64) -> MvaeSpec:
    return MvaeSpec((image_spec(), joint_spec()), d_latent, seed)


@dataclass
class MvaeConfig:
    epochs: int = 200
    batch_size: int = 128
    lr: float = 1e-3
    seed: int = 0
    schemes: tuple = SCHEME_NAMES


class _Fusion(_Net):
    def __init__(self, n_in: int, d: int, n_out: int, rng):
        super().__init__(rng)
        self._dense("enc", n_in, d)
        self._dense("dec", d, n_out)

    def forward(self, h):
        z = nc.tanh(nc.dense(h, *self.p("enc")))
        return nc.relu(nc.dense(z, *self.p("dec")))


class MVAE(nn.Module):
    def __init__(self, spec: MvaeSpec):
        super().__init__()
        self.spec = spec
        rng = stream(spec.seed, "init")
        d = spec.d_latent
        self.encoders = nn.ModuleDict()
        self.decoders = nn.ModuleDict()
        for m in spec.modalities:
            if m.is_image:
                self.encoders[m.name] = ImageEncoder(m, d, rng, extra_channels=m.shape[0])
                self.decoders[m.name] = ImageDecoder(m, d, 2 * m.shape[0], rng)
            else:
                self.encoders[m.name] = VectorEncoder(2 * m.size, m.encoder, rng)
                self.decoders[m.name] = VectorDecoder(d, m.decoder, 2 * m.size, rng)
        k = len(spec.modalities)
        self.fusion = _Fusion(k * d, d, k * d, rng)
        self.modality = {m.name: m for m in spec.modalities}

    @property
    def names(self) -> list:
        return self.spec.names

    def pair_shape(self, name: str) -> tuple:
        m = self.modality[name]
        return (2 * m.shape[0],) + m.shape[1:]

    def forward(self, pair: Mapping) -> dict:
        """``{name: (N, *pair_shape)}`` -> reconstructed pair of the same shapes."""
        hs = []
        for name in self.names:
            x = pair[name]
            if tuple(x.shape[1:]) != self.pair_shape(name):
                raise nc.ShapeError(f"mvae[{name}]: expected (N, *{self.pair_shape(name)}), got {tuple(x.shape)}")
            h = self.encoders[name](x)
            if self.modality[name].is_image:
                h = nc.relu(h)
            hs.append(h)
        shared = self.fusion(nc.concat(hs, dim=1))
        d = self.spec.d_latent
        out = {}
        for i, name in enumerate(self.names):
            y = self.decoders[name](nc.slice_(shared, i * d, (i + 1) * d, dim=1))
            out[name] = y.reshape(-1, *self.pair_shape(name))
        return out


# --- masking ------------------------------------------------------------------

def _block_slice(spec: ModalitySpec, slot: str) -> slice:
    n = spec.shape[0]
    return slice(0, n) if slot == "t" else slice(n, 2 * n)


def mask_input(model_or_spec, pair: Mapping, scheme: str) -> dict:
    """Copy of ``pair`` with the blocks named by ``scheme`` set to -2."""
    spec = model_or_spec.spec if isinstance(model_or_spec, MVAE) else model_or_spec
    blocks = SCHEMES[scheme]
    mods = {m.name: m for m in spec.modalities}
    out = {}
    for name, x in pair.items():
        x = x.clone() if isinstance(x, torch.Tensor) else np.array(x, copy=True)
        for slot in SLOTS:
            if (name, slot) in blocks:
                x[(slice(None), _block_slice(mods[name], slot))] = MASK_VALUE
        out[name] = x
    return out


def _mask_tables(spec: MvaeSpec, schemes: Sequence[str]) -> dict:
    """Per-modality boolean tables (n_schemes, pair leading extent)."""
    tables = {}
    for m in spec.modalities:
        rows = []
        for s in schemes:
            row = np.zeros(2 * m.shape[0], dtype=bool)
            for slot in SLOTS:
                if (m.name, slot) in SCHEMES[s]:
                    row[_block_slice(m, slot)] = True
            rows.append(row)
        tables[m.name] = torch.as_tensor(np.stack(rows))
    return tables


def make_pairs(interactions: Sequence, names: Sequence[str]) -> dict:
    """Stack every consecutive (t, t+1) state pair of every interaction."""
    out = {}
    for name in names:
        chunks = []
        for it in interactions:
            x = np.asarray(it.states[name])
            chunks.append(np.concatenate([x[:-1], x[1:]], axis=1))
        out[name] = torch.as_tensor(np.concatenate(chunks)).to(torch.get_default_dtype())
    return out


def reconstruction_loss(pred: Mapping, target: Mapping) -> torch.Tensor:
    return sum(((pred[n] - target[n]) ** 2).mean() for n in pred)


# --- training -----------------------------------------------------------------

@dataclass
class MvaeResult:
    model: MVAE
    losses: list = field(default_factory=list)  # mean loss per epoch
    optimizer: nc.OptimizerState | None = None


def mvae_train(model: MVAE, interactions: Sequence, config: MvaeConfig) -> MvaeResult:
    pairs = make_pairs(interactions, model.names)
    n = len(next(iter(pairs.values())))
    tables = _mask_tables(model.spec, config.schemes)
    rng = stream(config.seed, "training")
    params = list(model.parameters())
    nc.flatten_parameters(params)
    opt = nc.OptimizerState.for_params(params, lr=config.lr)
    losses = []
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        chosen = rng.integers(len(config.schemes), size=n)
        total = 0.0
        for start in range(0, n, config.batch_size):
            idx = torch.as_tensor(order[start:start + config.batch_size])
            sch = torch.as_tensor(chosen[start:start + config.batch_size])
            target = {k: v[idx] for k, v in pairs.items()}
            masked = {}
            for k, v in target.items():
                mask = tables[k][sch].reshape(len(idx), -1, *([1] * (v.dim() - 2)))
                masked[k] = torch.where(mask, torch.full_like(v, MASK_VALUE), v)
            loss = reconstruction_loss(model(masked), target)
            value = float(loss.detach())
            if not math.isfinite(value):
                raise nc.NonFiniteError(f"non-finite loss in epoch {epoch} (lr={opt.lr})")
            nc.adam_step(opt, params, nc.backward(loss, params))
            total += value * len(idx)
        losses.append(total / n)
        log.info("epoch %d loss %.5f", epoch + 1, losses[-1])
    return MvaeResult(model, losses, opt)


# --- rollout ------------------------------------------------------------------

def _pair_input(model: MVAE, known: Mapping, slot: str) -> dict:
    """Pair batch of one whose ``slot`` holds ``known`` states; all else masked."""
    out = {}
    for name in model.names:
        m = model.modality[name]
        x = torch.full((1,) + model.pair_shape(name), MASK_VALUE)
        state = known.get(name)
        if state is not None:
            x[0, _block_slice(m, slot)] = torch.as_tensor(np.asarray(state)).to(x.dtype)
        out[name] = x
    return out


def _take(model: MVAE, out: Mapping, slot: str) -> dict:
    return {n: out[n][0, _block_slice(model.modality[n], slot)].numpy() for n in model.names}


def mvae_rollout(model: MVAE, observation: Mapping, steps: int, direction: str = "forward") -> dict:
    """Iterated prediction from one (possibly partial) observation.

    ``observation`` maps modality names to states; missing modalities are
    masked. Each step's full prediction becomes the next step's input.
    Returns ``{name: (steps, *shape)}``.
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    src, dst = ("t", "t+1") if direction == "forward" else ("t+1", "t")
    if direction not in ("forward", "backward"):
        raise ValueError(f"unknown direction {direction!r}")
    known = dict(observation)
    preds = {n: [] for n in model.names}
    with torch.no_grad():
        for _ in range(steps):
            nxt = _take(model, model(_pair_input(model, known, src)), dst)
            for n in model.names:
                preds[n].append(nxt[n])
            known = nxt
    return {n: np.stack(v) for n, v in preds.items()}


def predict_full(model: MVAE, observation: Mapping, index: int, T: int) -> dict:
    """Whole trajectory from an observation at step ``index``.

    Steps after ``index`` are rolled out forward, steps before it backward, and
    the observed step itself is the model's reconstruction of its input.
    """
    with torch.no_grad():
        here = _take(model, model(_pair_input(model, observation, "t")), "t")
    parts = {n: [here[n][None]] for n in model.names}
    if index > 0:
        back = mvae_rollout(model, observation, index, "backward")
        for n in model.names:
            parts[n].insert(0, back[n][::-1])
    if index < T - 1:
        fwd = mvae_rollout(model, observation, T - 1 - index, "forward")
        for n in model.names:
            parts[n].append(fwd[n])
    return {n: np.concatenate(v) for n, v in parts.items()}


# --- checkpoints --------------------------------------------------------------

def save_mvae(model: MVAE, path, optimizer: nc.OptimizerState | None = None) -> None:
    Path(path).write_bytes(checkpoint_bytes(model, model.spec.to_json(), optimizer, magic=b"MVAE"))


def load_mvae(path):
    spec_json, params, opt = parse_checkpoint(Path(path).read_bytes(), magic=b"MVAE")
    model = MVAE(MvaeSpec.from_json(spec_json))
    return model, _restore(model, params, opt)
