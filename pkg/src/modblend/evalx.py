"""Experiment harness: missing-modality sweeps, horizon analysis, latent export,
mirror tests, template retrieval, the image-only ablation and out-of-distribution
objects. Every experiment is a pure function of its models, data and seeds.
"""
from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
from scipy import ndimage, stats

from . import simgen
from .dmbn import (DMBN, TrainConfig, desk_spec, encode_states, load_checkpoint, predict_trajectory,
                   save_checkpoint, train)
from .mvae import MVAE, MvaeConfig, desk_mvae_spec, load_mvae, mvae_rollout, mvae_train, predict_full, save_mvae
from .seeding import stream

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
SIZES = (10, 20, 40, 60, 80)
COMBOS = (("image", "image"), ("joint", "image"), ("image", "joint"), ("joint", "joint"))


@dataclass(frozen=True)
class MetricRow:
    experiment: str
    conditions: tuple  # sorted (key, value) pairs
    metric: str
    value: float
    seed: int

    @classmethod
    def make(cls, experiment: str, metric: str, value: float, seed: int, **conditions) -> "MetricRow":
        return cls(experiment, tuple(sorted(conditions.items())), metric, float(value), int(seed))

    def condition(self, key: str):
        return dict(self.conditions)[key]


def write_metrics(rows: Sequence[MetricRow], path) -> None:
    keys = sorted({k for r in rows for k, _ in r.conditions})
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh)
        out.writerow(["experiment", *keys, "metric", "value", "seed"])
        for r in rows:
            cond = dict(r.conditions)
            out.writerow([r.experiment, *[cond.get(k, "") for k in keys], r.metric, repr(r.value), r.seed])


def mse(a, b) -> float:
    d = np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)
    return float((d * d).mean())


def mae(a, b) -> float:
    return float(np.abs(np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)).mean())


# --- model provisioning -------------------------------------------------------

@dataclass
class Trainer:
    """Trains (or loads cached) models for a dataset.

    Cache keys cover the dataset contents, training subset size, seed and every
    training setting, so a cached checkpoint is exactly what training would give.
    """

    dataset: simgen.Dataset
    dmbn_iterations: int = 20_000
    mvae_epochs: int = 200
    cache_dir: Path | None = None
    image_variance: str = "fixed-unit"

    def __post_init__(self):
        if self.cache_dir is not None:
            self.cache_dir = Path(self.cache_dir)
            self.cache_dir.mkdir(parents=True, exist_ok=True)
        self._fingerprint = hashlib.sha256(simgen.dataset_bytes(self.dataset)).hexdigest()[:16]

    def _path(self, kind: str, **key) -> Path | None:
        if self.cache_dir is None:
            return None
        blob = json.dumps({"kind": kind, "data": self._fingerprint, **key}, sort_keys=True)
        return self.cache_dir / f"{kind}-{hashlib.sha256(blob.encode()).hexdigest()[:20]}.ckpt"

    def subset(self, size: int | None) -> list:
        return self.dataset.train[:self._size(size)]

    def _size(self, size: int | None) -> int:
        n = len(self.dataset.train)
        return n if size is None else min(size, n)

    def dmbn(self, seed: int, size: int | None = None, image_only: bool = False,
             iterations: int | None = None) -> DMBN:
        iterations = self.dmbn_iterations if iterations is None else iterations
        size = self._size(size)
        path = self._path("dmbn", seed=seed, size=size, image_only=image_only, iterations=iterations,
                          variance=self.image_variance)
        if path is not None and path.exists():
            return load_checkpoint(path)[0]
        model = DMBN(desk_spec(seed, image_only=image_only, image_variance=self.image_variance))
        train(model, self.subset(size), TrainConfig(iterations=iterations, seed=seed, log_every=0))
        if path is not None:
            save_checkpoint(model, path)
        return model

    def snapshots(self, seed: int, iterations: int, fractions: Sequence[float] = (0.0, 0.25, 0.5, 1.0)) -> list:
        """Models captured at the given fractions of one training run."""
        marks = [round(f * iterations) for f in fractions]
        paths = [self._path("snap", seed=seed, iterations=iterations, at=k, variance=self.image_variance)
                 for k in marks]
        if paths[0] is not None and all(p.exists() for p in paths):
            return [load_checkpoint(p)[0] for p in paths]
        step = math.gcd(*[k for k in marks if k] or [iterations])
        model = DMBN(desk_spec(seed, image_variance=self.image_variance))
        kept = {}
        if 0 in marks:
            kept[0] = DMBN(model.spec)
            kept[0].load_state_dict(model.state_dict())

        def keep(it, m, _opt):
            if it in marks:
                kept[it] = DMBN(m.spec)
                kept[it].load_state_dict(m.state_dict())

        train(model, self.subset(None),
              TrainConfig(iterations=iterations, seed=seed, log_every=0, checkpoint_every=step), on_checkpoint=keep)
        out = [kept[k] for k in marks]
        if paths[0] is not None:
            for m, p in zip(out, paths):
                save_checkpoint(m, p)
        return out

    def mvae(self, seed: int, size: int | None = None) -> MVAE:
        size = self._size(size)
        path = self._path("mvae", seed=seed, size=size, epochs=self.mvae_epochs)
        if path is not None and path.exists():
            return load_mvae(path)[0]
        model = MVAE(desk_mvae_spec(seed))
        mvae_train(model, self.subset(size), MvaeConfig(epochs=self.mvae_epochs, seed=seed))
        if path is not None:
            save_mvae(model, path)
        return model


# --- conditioning helpers -----------------------------------------------------

def dmbn_full_trajectory(model: DMBN, interaction, given: Sequence[str], index: int) -> dict:
    """Mean trajectories conditioned on the modalities ``given`` at step ``index``."""
    obs = {n: [(interaction.times[index], interaction.states[n][index])] for n in given}
    w = [1.0 if n in given else 0.0 for n in model.names]
    pred = predict_trajectory(model, obs, w, interaction.times)
    return {n: p.mean for n, p in pred.items()}


def mvae_full_trajectory(model: MVAE, interaction, given: Sequence[str], index: int) -> dict:
    obs = {n: interaction.states[n][index] for n in given}
    return predict_full(model, obs, index, interaction.T)


# --- missing modalities -------------------------------------------------------

def eval_missing_modality(trainer: Trainer, sizes: Sequence[int] = SIZES, seeds: Sequence[int] = (0, 1, 2),
                          models: Sequence[str] = ("dmbn", "mvae")) -> list:
    rows = []
    test = trainer.dataset.test
    for size in sizes:
        for seed in seeds:
            for kind in models:
                model = trainer.dmbn(seed, size) if kind == "dmbn" else trainer.mvae(seed, size)
                predict = dmbn_full_trajectory if kind == "dmbn" else mvae_full_trajectory
                for given, target in COMBOS:
                    errs, abs_errs = [], []
                    for it in test:
                        idx = simgen.pre_contact_index(it.T)
                        pred = predict(model, it, [given], idx)[target]
                        errs.append(mse(pred, it.states[target]))
                        abs_errs.append(mae(pred, it.states[target]))
                    cond = dict(model=kind, given=given, predicted=target, size=size)
                    rows.append(MetricRow.make("missing", "mse", np.mean(errs), seed, **cond))
                    if target == "image":
                        rows.append(MetricRow.make("missing", "mae", np.mean(abs_errs), seed, **cond))
    return rows


# --- horizon ------------------------------------------------------------------

def eval_multistep(dmbn_model: DMBN, mvae_model: MVAE, dataset: simgen.Dataset, seed: int = 0) -> list:
    """Per-step error against the number of steps from the first frame.

    Both models see the full state at ``t = 0``. DMBN decodes time ``k``
    directly while the baseline feeds its own predictions back ``k`` times.
    """
    test = dataset.test
    T = test[0].T
    names = dmbn_model.names
    err = {(m, n): np.zeros(T - 1) for m in ("dmbn", "mvae") for n in names}
    for it in test:
        d_pred = dmbn_full_trajectory(dmbn_model, it, names, 0)
        m_pred = mvae_rollout(mvae_model, {n: it.states[n][0] for n in names}, T - 1, "forward")
        for k in range(1, T):
            for n in names:
                err["dmbn", n][k - 1] += mse(d_pred[n][k], it.states[n][k])
                err["mvae", n][k - 1] += mse(m_pred[n][k - 1], it.states[n][k])
    rows = []
    for (model, n), values in err.items():
        for k, v in enumerate(values / len(test), start=1):
            rows.append(MetricRow.make("horizon", "mse", v, seed, model=model, modality=n, step=k))
    return rows


def horizon_spearman(rows: Iterable[MetricRow], model: str, modality: str) -> float:
    pts = sorted((r.condition("step"), r.value) for r in rows
                 if r.experiment == "horizon" and r.condition("model") == model and r.condition("modality") == modality)
    steps, values = zip(*pts)
    return float(stats.spearmanr(steps, values).statistic)


# --- latents ------------------------------------------------------------------

@dataclass
class LatentExport:
    rows: list  # (modality, action, interaction, t, latent vector)
    projection: np.ndarray  # (N, 2)
    ratio: float


def pca_2d(x: np.ndarray) -> np.ndarray:
    """Project onto the top-2 covariance eigenvectors; each eigenvector's
    largest-magnitude component is made positive."""
    centred = x - x.mean(axis=0)
    cov = centred.T @ centred / max(len(x) - 1, 1)
    vals, vecs = np.linalg.eigh(cov)
    order = np.argsort(vals)[::-1][:2]
    vecs = vecs[:, order]
    for j in range(vecs.shape[1]):
        if vecs[np.argmax(np.abs(vecs[:, j])), j] < 0:
            vecs[:, j] = -vecs[:, j]
    return centred @ vecs


def paired_latents(model: DMBN, interactions: Sequence) -> tuple[np.ndarray, np.ndarray]:
    img = np.concatenate([encode_states(model, "image", it.times, it.states["image"]) for it in interactions])
    jnt = np.concatenate([encode_states(model, "joint", it.times, it.states["joint"]) for it in interactions])
    return img, jnt


def alignment_ratio(img: np.ndarray, jnt: np.ndarray, seed: int = 0, draws: int = 5) -> float:
    """Mean paired L2 distance over mean mismatched-pair L2 distance."""
    paired = np.linalg.norm(img - jnt, axis=1).mean()
    rng = stream(seed, "eval")
    n = len(img)
    mismatched = []
    for _ in range(draws):
        perm = rng.permutation(n)
        fixed = perm == np.arange(n)
        perm[fixed] = (perm[fixed] + 1) % n
        mismatched.append(np.linalg.norm(img - jnt[perm], axis=1).mean())
    return float(paired / np.mean(mismatched))


def export_latents(model: DMBN, dataset: simgen.Dataset, seed: int = 0) -> LatentExport:
    rows = []
    train_set = dataset.train
    for idx, it in enumerate(train_set):
        for name in ("image", "joint"):
            z = encode_states(model, name, it.times, it.states[name])
            for t, vec in zip(it.times, z):
                rows.append((name, it.label, idx, float(t), vec))
    latents = np.stack([r[4] for r in rows])
    img, jnt = paired_latents(model, train_set)
    return LatentExport(rows, pca_2d(latents), alignment_ratio(img, jnt, seed))


def write_latents(export: LatentExport, latent_path, pca_path) -> None:
    d = len(export.rows[0][4])
    with open(latent_path, "w", newline="") as fh:
        out = csv.writer(fh)
        out.writerow(["modality", "action", "interaction", "t"] + [f"component_{i}" for i in range(d)])
        for name, label, idx, t, vec in export.rows:
            out.writerow([name, label, idx, repr(t)] + [repr(float(v)) for v in vec])
    with open(pca_path, "w", newline="") as fh:
        out = csv.writer(fh)
        out.writerow(["pc_0", "pc_1"])
        for a, b in export.projection:
            out.writerow([repr(float(a)), repr(float(b))])


# --- behaviour classification -------------------------------------------------

@dataclass
class BehaviorConfig:
    min_displacement_px: float = 2.0
    cone_deg: float = 45.0
    arm_fraction: float = 0.25
    object_color: tuple = simgen.OBJECT_COLOR
    object_tol: float = 0.35
    arm_tol: float = 0.3


@dataclass
class BehaviorLabel:
    label: str  # egocentric | effect | none | incoherent
    displacement: tuple  # pixels (col, row)
    arm_pixels: float
    reason: str = ""


def object_centroid(frame: np.ndarray, config: BehaviorConfig):
    mask = simgen.color_mask(frame, config.object_color, config.object_tol)
    labels, n = ndimage.label(mask)
    if n == 0:
        return None
    sizes = ndimage.sum(mask, labels, index=np.arange(1, n + 1))
    return simgen.centroid(labels == 1 + int(np.argmax(sizes)))


def arm_pixel_count(frame: np.ndarray, tol: float = 0.3) -> int:
    return int(simgen.color_mask(frame, simgen.ARM_COLOR, tol).sum())


def training_arm_average(interactions: Sequence, tol: float = 0.3) -> float:
    return float(np.mean([arm_pixel_count(f, tol) for it in interactions for f in it.states["image"]]))


def _angle(a, b) -> float:
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        return 180.0
    return math.degrees(math.acos(float(np.clip(np.dot(a, b) / (na * nb), -1.0, 1.0))))


def classify_behavior(images: np.ndarray, joints: np.ndarray | None, demo_direction, arm_reference: float,
                      config: BehaviorConfig = BehaviorConfig()) -> BehaviorLabel:
    """Label a predicted rollout by how the predicted object moves.

    ``demo_direction`` is the demonstrated object motion expressed in our own
    image frame (col, row). ``arm_reference`` is the mean arm-pixel count of
    training renders.
    """
    if joints is not None and len(joints) != len(images):
        raise ValueError("image and joint sequences differ in length")
    arm = float(np.mean([arm_pixel_count(f, config.arm_tol) for f in images]))
    cents = [object_centroid(f, config) for f in images]
    found = [i for i, c in enumerate(cents) if c is not None]
    if 2 * len(found) <= len(images):
        return BehaviorLabel("incoherent", (0.0, 0.0), arm, "object missing in most frames")
    d = cents[found[-1]] - cents[found[0]]
    disp = (float(d[0]), float(d[1]))
    if arm < config.arm_fraction * arm_reference:
        return BehaviorLabel("incoherent", disp, arm, "arm largely missing")
    if np.linalg.norm(d) < config.min_displacement_px:
        return BehaviorLabel("none", disp, arm)
    to_base = simgen.world_to_pixel(simgen.OWN_BASE[:2]) - cents[found[0]]
    if _angle(d, to_base) < config.cone_deg:
        return BehaviorLabel("egocentric", disp, arm)
    if _angle(d, np.asarray(demo_direction, dtype=float)) < config.cone_deg:
        return BehaviorLabel("effect", disp, arm)
    return BehaviorLabel("incoherent", disp, arm, "motion matches neither reading")


# --- mirror tests -------------------------------------------------------------

@dataclass(frozen=True)
class Scenario:
    """Another agent acting on the table, seen from our camera.

    The demonstrator runs one of our own plans (``pull`` is grasp-and-retract
    toward its base); ``viewpoint`` places it around the table.
    """

    name: str
    viewpoint: str
    occlusion: str = "none"
    action: str = "pull"
    phi: float = -math.pi / 2 + 0.3

    @property
    def plan_action(self) -> str:
        return "grasp" if self.action == "pull" else "push"

    def scenes(self, T: int = simgen.T_STEPS) -> list:
        return simgen.plan_action(self.plan_action, self.phi, T=T)

    def observation(self, T: int = simgen.T_STEPS) -> np.ndarray:
        scene = self.scenes(T)[simgen.pre_contact_index(T)]
        return simgen.render_frame(scene, self.viewpoint, self.occlusion)

    def demo_direction(self) -> np.ndarray:
        """Demonstrated object travel in our image frame."""
        scenes = self.scenes()
        start = np.array([scenes[0].obj_x, scenes[0].obj_y])
        end = np.array([scenes[-1].obj_x, scenes[-1].obj_y])
        return simgen.world_dir_to_image(end - start, self.viewpoint)


CANONICAL = (
    Scenario("case1-opposite", "opposite"),
    Scenario("case2-left", "left"),
)
SCENARIOS = {s.name: s for s in CANONICAL + (
    Scenario("opposite-hide-arm", "opposite", "hide-arm"),
    Scenario("left-hide-base", "left", "hide-base"),
    Scenario("right", "right"),
    Scenario("own-pull", "own"),
    Scenario("opposite-push", "opposite", action="push", phi=math.pi / 2 + 0.3),
)}


@dataclass
class MirrorResult:
    scenario: Scenario
    images: np.ndarray
    joints: np.ndarray | None
    behavior: BehaviorLabel

    def report(self) -> dict:
        return {"scenario": asdict(self.scenario), "behavior": asdict(self.behavior)}


def mirror_test(model: DMBN, scenario: Scenario, arm_reference: float, T: int = simgen.T_STEPS,
                config: BehaviorConfig = BehaviorConfig()) -> MirrorResult:
    times = (np.arange(T) / (T - 1)).astype(np.float32)
    idx = simgen.pre_contact_index(T)
    obs = {"image": [(times[idx], scenario.observation(T))]}
    w = [1.0 if n == "image" else 0.0 for n in model.names]
    pred = predict_trajectory(model, obs, w, times)
    joints = pred["joint"].mean if "joint" in pred else None
    behavior = classify_behavior(pred["image"].mean, joints, scenario.demo_direction(), arm_reference, config)
    return MirrorResult(scenario, pred["image"].mean, joints, behavior)


# --- retrieval ----------------------------------------------------------------

@dataclass
class Match:
    interaction: int
    frame: int
    distance: float
    label: str


def nearest_pixel(query: np.ndarray, interactions: Sequence) -> Match:
    best = None
    q = np.asarray(query, dtype=np.float64)
    for i, it in enumerate(interactions):
        frames = np.asarray(it.states["image"], dtype=np.float64)
        d = ((frames - q) ** 2).reshape(len(frames), -1).mean(axis=1)
        j = int(np.argmin(d))
        if best is None or d[j] < best.distance:
            best = Match(i, j, float(d[j]), it.label)
    return best


def nearest_latent(query: np.ndarray, t_query: float, interactions: Sequence, model: DMBN) -> Match:
    zq = encode_states(model, "image", [t_query], np.asarray(query)[None]).astype(np.float64)[0]
    best = None
    for i, it in enumerate(interactions):
        z = encode_states(model, "image", it.times, it.states["image"]).astype(np.float64)
        d = ((z - zq) ** 2).sum(axis=1)
        j = int(np.argmin(d))
        if best is None or d[j] < best.distance:
            best = Match(i, j, float(d[j]), it.label)
    return best


def retrieval(model: DMBN, scenario: Scenario, interactions: Sequence) -> dict:
    T = interactions[0].T
    query = scenario.observation(T)
    t_query = float(interactions[0].times[simgen.pre_contact_index(T)])
    return {"pixel": nearest_pixel(query, interactions), "latent": nearest_latent(query, t_query, interactions, model)}


# --- ablation -----------------------------------------------------------------

def ablate_image_only(trainer: Trainer, scenarios: Sequence[Scenario] = CANONICAL, n_runs: int = 10,
                      config: BehaviorConfig = BehaviorConfig()) -> dict:
    """Success/fail counts of blended vs image-only models over ``n_runs`` seeds."""
    arm_ref = training_arm_average(trainer.dataset.train, config.arm_tol)
    table = {}
    runs = []
    for kind in ("blended", "image-only"):
        counts = {s.name: {"success": 0, "fail": 0} for s in scenarios}
        for seed in range(n_runs):
            model = trainer.dmbn(seed, image_only=(kind == "image-only"))
            for s in scenarios:
                b = mirror_test(model, s, arm_ref, config=config).behavior
                ok = b.label in ("egocentric", "effect")
                counts[s.name]["success" if ok else "fail"] += 1
                runs.append({"model": kind, "seed": seed, "scenario": s.name, "label": b.label,
                             "displacement": b.displacement, "arm_pixels": b.arm_pixels})
        table[kind] = counts
    return {"table": table, "runs": runs}


# --- generalisation -----------------------------------------------------------

def approach_angle(joints: np.ndarray, T: int | None = None) -> float:
    """Approach angle read off a joint trajectory at the end of the approach phase."""
    T = len(joints) if T is None else T
    k = round(simgen.APPROACH_END * (T - 1) / (simgen.T_STEPS - 1))
    th1, th2 = float(joints[k][0]), float(joints[k][1])
    _, tip = simgen.forward_kinematics(th1, th2, simgen.LINKS, simgen.OWN_BASE)
    return math.atan2(tip[1], tip[0])


def wrap(angle: float) -> float:
    return (angle + math.pi) % (2 * math.pi) - math.pi


@dataclass
class Variant:
    name: str
    color: tuple | None = None
    radius: float | None = None


VARIANTS = (Variant("standard"), Variant("blue", color=simgen.BLUE), Variant("large", radius=2 * simgen.OBJECT_RADIUS))


def eval_generalization(model: DMBN, dataset: simgen.Dataset, variants: Sequence[Variant] = VARIANTS,
                        seed: int = 0, config: BehaviorConfig = BehaviorConfig()) -> tuple[list, dict]:
    rows, sequences = [], {}
    test = dataset.test
    for v in variants:
        errs, train_color, variant_color = [], [], []
        for i, it in enumerate(test):
            idx = simgen.pre_contact_index(it.T)
            scenes = it.scenes or simgen.plan_action(it.label, it.phi, T=it.T)
            scene = simgen.variant_scene(scenes[idx], v.color, v.radius)
            image = simgen.render_frame(scene) if (v.color or v.radius) else it.states["image"][idx]
            pred = predict_trajectory(model, {"image": [(it.times[idx], image)]},
                                      [1.0 if n == "image" else 0.0 for n in model.names], it.times)
            frames = pred["image"].mean
            sequences[v.name, i] = frames
            if "joint" in pred:
                errs.append(abs(wrap(approach_angle(pred["joint"].mean) - it.phi)))
            train_color.append(np.mean([simgen.color_mask(f, simgen.OBJECT_COLOR, config.object_tol).sum()
                                        for f in frames]))
            if v.color is not None:
                variant_color.append(np.mean([simgen.color_mask(f, v.color, config.object_tol).sum() for f in frames]))
        if errs:
            rows.append(MetricRow.make("generalize", "angle_error_rad", np.mean(errs), seed, variant=v.name))
        rows.append(MetricRow.make("generalize", "training_color_px", np.mean(train_color), seed, variant=v.name))
        if variant_color:
            rows.append(MetricRow.make("generalize", "variant_color_px", np.mean(variant_color), seed, variant=v.name))
    return rows, sequences
