"""Planar two-link arm world: kinematics, action planning, rendering, datasets.

World units span the square ``[-1.5, 1.5]^2``; the table is ``[-1, 1]^2`` with
the object starting at its centre. Our own agent sits below the table at
``(0, -1.2)`` facing up. Images are 3x32x32 RGB in ``[0, 1]``, rendered with
4x4 supersampling; row 0 is the top of the workspace.
"""
from __future__ import annotations

import io
import math
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .seeding import stream

WORKSPACE = 1.5
TABLE_HALF = 1.0
IMAGE_SIZE = 32
SUPERSAMPLE = 4
LINKS = (1.0, 1.0)
OWN_BASE = (0.0, -1.2, math.pi / 2)
OBJECT_RADIUS = 0.2
PUSH_DISTANCE = 0.3
APPROACH_STANDOFF = 0.5
HOME_TIP = (0.0, -0.55)
T_STEPS = 50
# knot indices: home -> approach point -> contact -> end of manipulation
APPROACH_END = 16
CONTACT_STEP = 28
PRE_CONTACT_STEP = CONTACT_STEP - 1
IK_EPS = 1e-6
TRAIN_FRACTION = 0.8

BACKGROUND = (0.10, 0.10, 0.12)
TABLE_COLOR = (0.55, 0.40, 0.25)
ARM_COLOR = (0.95, 0.95, 0.95)
GRIPPER_COLOR = (0.20, 0.85, 0.30)
BASE_COLOR = (0.85, 0.15, 0.15)
OBJECT_COLOR = (1.00, 0.85, 0.00)
BLUE = (0.05, 0.30, 1.00)

ARM_HALF_WIDTH = 1.0 * (2 * WORKSPACE / IMAGE_SIZE)  # 2 px stroke
FINGER_HALF_WIDTH = 0.5 * (2 * WORKSPACE / IMAGE_SIZE)
FINGER_LENGTH = 0.22
BASE_HALF = 0.22

ACTIONS = ("push", "grasp")
VIEWPOINTS = {"own": 0.0, "opposite": math.pi, "left": math.pi / 2, "right": -math.pi / 2}
OCCLUSIONS = ("none", "hide-arm", "hide-base")


class KinematicsError(ValueError):
    pass


class DatasetFormatError(ValueError):
    pass


@dataclass(frozen=True)
class SceneState:
    theta1: float
    theta2: float
    aperture: float
    obj_x: float = 0.0
    obj_y: float = 0.0
    obj_radius: float = OBJECT_RADIUS
    obj_color: tuple = OBJECT_COLOR
    base_x: float = OWN_BASE[0]
    base_y: float = OWN_BASE[1]
    base_heading: float = OWN_BASE[2]

    def __post_init__(self):
        object.__setattr__(self, "aperture", float(min(1.0, max(0.0, self.aperture))))
        if not (abs(self.obj_x) <= WORKSPACE and abs(self.obj_y) <= WORKSPACE):
            raise ValueError(f"object at ({self.obj_x}, {self.obj_y}) is outside the workspace")

    @property
    def base_pose(self) -> tuple:
        return (self.base_x, self.base_y, self.base_heading)

    @property
    def joints(self) -> np.ndarray:
        return np.array([self.theta1, self.theta2, self.aperture])


@dataclass
class Interaction:
    label: str
    phi: float
    times: np.ndarray
    states: dict  # modality name -> (T, *shape) float32
    scenes: list = field(default=None, repr=False, compare=False)

    @property
    def T(self) -> int:
        return len(self.times)


@dataclass
class Dataset:
    modalities: list  # [(name, shape)]
    interactions: list
    split: int  # interactions[:split] are training data

    @property
    def train(self) -> list:
        return self.interactions[: self.split]

    @property
    def test(self) -> list:
        return self.interactions[self.split:]


# --- kinematics ---------------------------------------------------------------

def _rot(angle: float, v) -> np.ndarray:
    c, s = math.cos(angle), math.sin(angle)
    return np.array([c * v[0] - s * v[1], s * v[0] + c * v[1]])


def forward_kinematics(theta1, theta2, lengths=LINKS, base=(0.0, 0.0, 0.0)):
    """Elbow and tip positions in world coordinates."""
    l1, l2 = lengths
    bx, by, heading = base
    elbow_local = np.array([l1 * math.cos(theta1), l1 * math.sin(theta1)])
    tip_local = elbow_local + np.array([l2 * math.cos(theta1 + theta2), l2 * math.sin(theta1 + theta2)])
    origin = np.array([bx, by])
    return origin + _rot(heading, elbow_local), origin + _rot(heading, tip_local)


def inverse_kinematics(target, lengths=LINKS, base=(0.0, 0.0, 0.0)):
    """Elbow-up solution (theta2 <= 0) reaching ``target``."""
    l1, l2 = lengths
    bx, by, heading = base
    x, y = _rot(-heading, (target[0] - bx, target[1] - by))
    d = math.hypot(x, y)
    lo, hi = abs(l1 - l2) + IK_EPS, l1 + l2 - IK_EPS
    if not lo <= d <= hi:
        raise KinematicsError(f"target at distance {d:.6g} outside reachable annulus [{lo:.6g}, {hi:.6g}]")
    c2 = (d * d - l1 * l1 - l2 * l2) / (2 * l1 * l2)
    theta2 = -math.acos(min(1.0, max(-1.0, c2)))
    theta1 = math.atan2(y, x) - math.atan2(l2 * math.sin(theta2), l1 + l2 * math.cos(theta2))
    theta1 = math.atan2(math.sin(theta1), math.cos(theta1))
    return theta1, theta2


# --- planning -----------------------------------------------------------------

def min_jerk(s: np.ndarray) -> np.ndarray:
    return 10 * s**3 - 15 * s**4 + 6 * s**5


def unit(angle: float) -> np.ndarray:
    return np.array([math.cos(angle), math.sin(angle)])


def push_direction(phi: float) -> np.ndarray:
    """Push travel direction when approaching from angle ``phi``."""
    return -unit(phi)


def plan_action(action: str, phi: float, base=OWN_BASE, T: int = T_STEPS,
                obj_radius: float = OBJECT_RADIUS, obj_color=OBJECT_COLOR) -> list:
    """Scene sequence for one push or grasp-and-retract interaction.

    The knot steps scale with ``T``; the object starts at the table centre.
    Raises ``KinematicsError`` if any waypoint is unreachable.
    """
    if action not in ACTIONS:
        raise ValueError(f"unknown action {action!r}")
    centre = np.zeros(2)
    u = unit(phi)
    approach = centre + APPROACH_STANDOFF * u
    if action == "push":
        contact = centre + obj_radius * u
        travel = push_direction(phi)
    else:
        contact = centre.copy()
        to_base = np.array(base[:2]) - centre
        travel = to_base / np.linalg.norm(to_base)
    home = np.array(base[:2]) + _rot(base[2] - math.pi / 2, HOME_TIP - np.array(OWN_BASE[:2]))
    k1 = round(APPROACH_END * (T - 1) / (T_STEPS - 1))
    k2 = round(CONTACT_STEP * (T - 1) / (T_STEPS - 1))

    scenes = []
    for i in range(T):
        obj = centre
        if i <= k1:
            s = min_jerk(np.array(i / k1))
            tip = home + s * (approach - home)
            g = 1.0
        elif i <= k2:
            s = min_jerk(np.array((i - k1) / (k2 - k1)))
            tip = approach + s * (contact - approach)
            g = 1.0 if action == "push" else 1.0 - float(s)
        else:
            s = min_jerk(np.array((i - k2) / (T - 1 - k2)))
            shift = s * PUSH_DISTANCE * travel
            tip = contact + shift
            obj = centre + shift
            g = 1.0 if action == "push" else 0.0
        th1, th2 = inverse_kinematics(tip, LINKS, base)
        scenes.append(SceneState(th1, th2, g, float(obj[0]), float(obj[1]), obj_radius,
                                 tuple(obj_color), *base))
    return scenes


def pre_contact_index(T: int = T_STEPS) -> int:
    return round(CONTACT_STEP * (T - 1) / (T_STEPS - 1)) - 1


# --- rendering ----------------------------------------------------------------

_HI = IMAGE_SIZE * SUPERSAMPLE
_PIX = 2 * WORKSPACE / _HI
_COORD = -WORKSPACE + (np.arange(_HI) + 0.5) * _PIX
GRID_X, GRID_Y = np.meshgrid(_COORD, _COORD[::-1])


def _segment_mask(a, b, half_width):
    ab = b - a
    denom = float(ab @ ab) or 1e-12
    t = np.clip(((GRID_X - a[0]) * ab[0] + (GRID_Y - a[1]) * ab[1]) / denom, 0.0, 1.0)
    dx = GRID_X - (a[0] + t * ab[0])
    dy = GRID_Y - (a[1] + t * ab[1])
    return dx * dx + dy * dy <= half_width * half_width


def _paint(canvas, mask, color):
    canvas[mask] = color


def render_frame(scene: SceneState, viewpoint: str = "own", occlusion: str = "none") -> np.ndarray:
    if viewpoint not in VIEWPOINTS:
        raise ValueError(f"unknown viewpoint {viewpoint!r}")
    if occlusion not in OCCLUSIONS:
        raise ValueError(f"unknown occlusion {occlusion!r}")
    # rotating the viewing frame by a turns world points by -a
    turn = -VIEWPOINTS[viewpoint]

    def view(p):
        return _rot(turn, p)

    canvas = np.empty((_HI, _HI, 3))
    canvas[:] = BACKGROUND
    _paint(canvas, (np.abs(GRID_X) <= TABLE_HALF) & (np.abs(GRID_Y) <= TABLE_HALF), TABLE_COLOR)

    base_xy = view((scene.base_x, scene.base_y))
    if occlusion != "hide-base":
        square = (np.abs(GRID_X - base_xy[0]) <= BASE_HALF) & (np.abs(GRID_Y - base_xy[1]) <= BASE_HALF)
        _paint(canvas, square, BASE_COLOR)

    elbow, tip = forward_kinematics(scene.theta1, scene.theta2, LINKS, scene.base_pose)
    elbow, tip = view(elbow), view(tip)
    if occlusion != "hide-arm":
        _paint(canvas, _segment_mask(base_xy, elbow, ARM_HALF_WIDTH), ARM_COLOR)
        _paint(canvas, _segment_mask(elbow, tip, ARM_HALF_WIDTH), ARM_COLOR)

    obj = view((scene.obj_x, scene.obj_y))
    disk = (GRID_X - obj[0]) ** 2 + (GRID_Y - obj[1]) ** 2 <= scene.obj_radius ** 2
    _paint(canvas, disk, scene.obj_color)

    forearm = math.atan2(tip[1] - elbow[1], tip[0] - elbow[0])
    spread = math.radians(10 + 35 * scene.aperture)
    for sign in (-1.0, 1.0):
        end = tip + FINGER_LENGTH * unit(forearm + sign * spread)
        _paint(canvas, _segment_mask(tip, end, FINGER_HALF_WIDTH), GRIPPER_COLOR)

    img = canvas.reshape(IMAGE_SIZE, SUPERSAMPLE, IMAGE_SIZE, SUPERSAMPLE, 3).mean(axis=(1, 3))
    return np.ascontiguousarray(np.clip(img, 0.0, 1.0).transpose(2, 0, 1), dtype=np.float32)


def color_mask(image: np.ndarray, color, tol: float = 0.3) -> np.ndarray:
    """Pixels whose RGB value lies within ``tol`` (Euclidean) of ``color``."""
    diff = image - np.asarray(color, dtype=np.float32)[:, None, None]
    return np.sqrt((diff * diff).sum(axis=0)) < tol


def centroid(mask: np.ndarray):
    """(col, row) centroid in continuous pixel coordinates (pixel i spans [i, i+1))."""
    rows, cols = np.nonzero(mask)
    if len(rows) == 0:
        return None
    return np.array([cols.mean() + 0.5, rows.mean() + 0.5])


def world_to_pixel(p, viewpoint: str = "own") -> np.ndarray:
    q = _rot(-VIEWPOINTS[viewpoint], p)
    scale = IMAGE_SIZE / (2 * WORKSPACE)
    return np.array([(q[0] + WORKSPACE) * scale, (WORKSPACE - q[1]) * scale])


def world_dir_to_image(d, viewpoint: str = "own") -> np.ndarray:
    q = _rot(-VIEWPOINTS[viewpoint], d)
    return np.array([q[0], -q[1]])


def variant_scene(scene: SceneState, color=None, radius=None) -> SceneState:
    changes = {}
    if color is not None:
        changes["obj_color"] = tuple(float(c) for c in color)
    if radius is not None:
        if not 0 < radius < TABLE_HALF:
            raise ValueError(f"radius {radius} outside render bounds")
        changes["obj_radius"] = float(radius)
    return replace(scene, **changes) if changes else scene


# --- datasets -----------------------------------------------------------------

def make_interaction(action: str, phi: float, scenes=None, T: int = T_STEPS,
                     viewpoint: str = "own", occlusion: str = "none") -> Interaction:
    scenes = scenes if scenes is not None else plan_action(action, phi, T=T)
    T = len(scenes)
    times = (np.arange(T) / (T - 1)).astype(np.float32)
    joints = np.stack([s.joints for s in scenes]).astype(np.float32)
    images = np.stack([render_frame(s, viewpoint, occlusion) for s in scenes])
    return Interaction(action, float(phi), times, {"joint": joints, "image": images}, scenes)


MODALITIES = [("image", (3, IMAGE_SIZE, IMAGE_SIZE)), ("joint", (3,))]


def generate_dataset(n_push: int, n_grasp: int, seed: int, T: int = T_STEPS) -> Dataset:
    if n_push < 0 or n_grasp < 0 or n_push + n_grasp < 1:
        raise ValueError("need at least one interaction")
    labels = ["push"] * n_push + ["grasp"] * n_grasp
    interactions = []
    for idx, label in enumerate(labels):
        rng = stream(seed, "dataset", idx)
        for _ in range(101):
            phi = float(rng.uniform(0.0, 2 * math.pi))
            try:
                scenes = plan_action(label, phi, T=T)
                break
            except KinematicsError:
                continue
        else:
            raise KinematicsError(f"interaction {idx}: no reachable approach angle after 100 resamples")
        interactions.append(make_interaction(label, phi, scenes))
    order = stream(seed, "dataset", len(labels)).permutation(len(labels))
    interactions = [interactions[i] for i in order]
    n = len(interactions)
    split = max(1, int(round(TRAIN_FRACTION * n)))
    return Dataset(list(MODALITIES), interactions, split)


MAGIC = b"MMDS"
VERSION = 1
LABELS = {"push": 0, "grasp": 1}


def dataset_bytes(ds: Dataset) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<II", VERSION, len(ds.modalities)))
    for name, shape in ds.modalities:
        raw = name.encode()
        buf.write(struct.pack("<I", len(raw)) + raw)
        buf.write(struct.pack(f"<I{len(shape)}I", len(shape), *shape))
    buf.write(struct.pack("<II", len(ds.interactions), ds.split))
    for it in ds.interactions:
        buf.write(struct.pack("<BdI", LABELS[it.label], it.phi, it.T))
        cols = [it.times.reshape(-1, 1)] + [it.states[n].reshape(it.T, -1) for n, _ in ds.modalities]
        buf.write(np.concatenate(cols, axis=1).astype("<f4").tobytes())
    return buf.getvalue()


def save_dataset(ds: Dataset, path) -> None:
    Path(path).write_bytes(dataset_bytes(ds))


def _read(buf, fmt):
    size = struct.calcsize(fmt)
    raw = buf.read(size)
    if len(raw) != size:
        raise DatasetFormatError("truncated dataset file")
    return struct.unpack(fmt, raw)


def load_dataset(path) -> Dataset:
    buf = io.BytesIO(Path(path).read_bytes())
    magic = buf.read(4)
    if magic != MAGIC:
        raise DatasetFormatError(f"bad magic {magic!r}, expected {MAGIC!r}")
    version, n_mod = _read(buf, "<II")
    if version != VERSION:
        raise DatasetFormatError(f"unsupported dataset version {version}")
    modalities = []
    for _ in range(n_mod):
        (n,) = _read(buf, "<I")
        name = buf.read(n).decode()
        (rank,) = _read(buf, "<I")
        modalities.append((name, tuple(_read(buf, f"<{rank}I"))))
    count, split = _read(buf, "<II")
    inverse = {v: k for k, v in LABELS.items()}
    widths = [math.prod(shape) for _, shape in modalities]
    interactions = []
    for _ in range(count):
        label, phi, T = _read(buf, "<BdI")
        if label not in inverse:
            raise DatasetFormatError(f"unknown action label {label}")
        width = 1 + sum(widths)
        raw = buf.read(4 * T * width)
        if len(raw) != 4 * T * width:
            raise DatasetFormatError("truncated dataset file")
        rows = np.frombuffer(raw, dtype="<f4").reshape(T, width).astype(np.float32)
        states, col = {}, 1
        for (name, shape), w in zip(modalities, widths):
            states[name] = np.ascontiguousarray(rows[:, col:col + w].reshape((T,) + shape))
            col += w
        interactions.append(Interaction(inverse[label], phi, np.ascontiguousarray(rows[:, 0]), states))
    if buf.read(1):
        raise DatasetFormatError("trailing bytes after last interaction")
    return Dataset(modalities, interactions, split)
