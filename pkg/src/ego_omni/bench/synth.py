"""Procedural toy motions with paired template descriptions.

Each class is a small parametric generator over local joint rotations; the
skeleton's forward kinematics turns them into positions. Randomness only
enters through per-clip parameters (amplitude, tempo, phase, heading, root
offset), drawn from a seeded generator, so datasets are reproducible.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..kinematics import MotionSequence, Skeleton, axis_angle_to_rotmat

CLASSES = ("walk", "wave_left", "wave_right", "squat", "head_turn", "still")

# every template of a class contains its keyword (token prefix), no other class's
KEYWORDS = {
    "walk": "walk",
    "wave_left": "left",
    "wave_right": "right",
    "squat": "squat",
    "head_turn": "head",
    "still": "still",
}

TEMPLATES = {
    "walk": ("a person walks in place", "the person walks on the spot", "someone walks in place slowly"),
    "wave_left": ("a person waves the left hand", "the person raises the left arm and waves",
                  "someone waves with the left hand"),
    "wave_right": ("a person waves the right hand", "the person raises the right arm and waves",
                   "someone waves with the right hand"),
    "squat": ("a person squats down and stands up", "the person does a squat", "someone squats slowly"),
    "head_turn": ("a person turns the head side to side", "the person shakes the head",
                  "someone turns the head around"),
    "still": ("a person stands still", "the person stays still", "someone stands still and does not move"),
}

QUESTIONS = (
    "what is the person doing ?",
    "describe the motion .",
    "describe what the person is doing .",
    "what motion is this ?",
    "can you describe the movement ?",
    "what action does the person perform ?",
    "explain the movement of the person .",
    "what is happening in this motion ?",
)

N_SCENES = 4

J = {name: i for i, name in enumerate(Skeleton().joint_names)}


def _rx(a):
    return axis_angle_to_rotmat(np.stack([a, np.zeros_like(a), np.zeros_like(a)], -1))


def _ry(a):
    return axis_angle_to_rotmat(np.stack([np.zeros_like(a), a, np.zeros_like(a)], -1))


def _rz(a):
    return axis_angle_to_rotmat(np.stack([np.zeros_like(a), np.zeros_like(a), a], -1))


def _base_pose(T, rng):
    """Arms down, a little per-clip lean; returns (T, 22, 3, 3)."""
    R = np.tile(np.eye(3), (T, 22, 1, 1))
    one = np.ones(T)
    R[:, J["L_shoulder"]] = _rz(-1.25 * one + rng.normal(0, 0.05))
    R[:, J["R_shoulder"]] = _rz(1.25 * one + rng.normal(0, 0.05))
    R[:, J["L_elbow"]] = _ry(-0.2 * one)
    R[:, J["R_elbow"]] = _ry(0.2 * one)
    R[:, J["spine1"]] = _rx(rng.normal(0, 0.04) * one)
    return R


def _walk(t, p, R, root):
    w, a = p["omega"], p["amp"]
    s = np.sin(w * t + p["phase"])
    R[:, J["L_hip"]] = _rx(-a * s)
    R[:, J["R_hip"]] = _rx(a * s)
    R[:, J["L_knee"]] = _rx(1.2 * a * np.maximum(0, s))
    R[:, J["R_knee"]] = _rx(1.2 * a * np.maximum(0, -s))
    R[:, J["L_shoulder"]] = R[:, J["L_shoulder"]] @ _rx(0.8 * a * s)
    R[:, J["R_shoulder"]] = R[:, J["R_shoulder"]] @ _rx(-0.8 * a * s)
    root[:, 1] += 0.02 * np.abs(s)


def _wave(side):
    def gen(t, p, R, root):
        sign = 1.0 if side == "L" else -1.0
        raise_ = np.clip(t / 8.0, 0, 1) * p["amp"]
        R[:, J[f"{side}_shoulder"]] = _rz(sign * (-1.25 + 2.4 * raise_))
        R[:, J[f"{side}_elbow"]] = _rz(sign * (0.9 * raise_ + 0.5 * raise_ * np.sin(2 * p["omega"] * t + p["phase"])))
    return gen


def _squat(t, p, R, root):
    s = 0.5 * p["amp"] * 1.4 * (1 - np.cos(p["omega"] * t + p["phase"]))
    R[:, J["L_hip"]] = _rx(-s)
    R[:, J["R_hip"]] = _rx(-s)
    R[:, J["L_knee"]] = _rx(2 * s)
    R[:, J["R_knee"]] = _rx(2 * s)
    R[:, J["L_ankle"]] = _rx(-s)
    R[:, J["R_ankle"]] = _rx(-s)
    R[:, J["L_shoulder"]] = _rz(np.full_like(s, -1.25)) @ _rx(-0.8 * s)
    R[:, J["R_shoulder"]] = _rz(np.full_like(s, 1.25)) @ _rx(-0.8 * s)
    root[:, 1] -= 0.78 * (1 - np.cos(s))


def _head_turn(t, p, R, root):
    y = 0.9 * p["amp"] * np.sin(p["omega"] * t + p["phase"])
    R[:, J["neck"]] = _ry(0.5 * y)
    R[:, J["head"]] = _ry(0.5 * y)
    R[:, J["spine3"]] = _ry(0.4 * y)  # shoulders follow the gaze a little


def _still(t, p, R, root):
    pass


GENERATORS = {
    "walk": _walk,
    "wave_left": _wave("L"),
    "wave_right": _wave("R"),
    "squat": _squat,
    "head_turn": _head_turn,
    "still": _still,
}


def generate_motion(label: str, T: int, fps: float, rng: np.random.Generator,
                    skeleton: Skeleton | None = None) -> MotionSequence:
    skeleton = skeleton or Skeleton()
    t = np.arange(T, dtype=np.float64)
    params = {
        "amp": rng.uniform(0.6, 1.0),
        "omega": 2 * np.pi * rng.uniform(0.8, 1.6) / fps,
        "phase": rng.uniform(0, 2 * np.pi),
    }
    R = _base_pose(T, rng)
    root = np.zeros((T, 3))
    root[:, 1] = 0.92
    root[:, [0, 2]] = rng.uniform(-1, 1, size=2)
    GENERATORS[label](t, params, R, root)
    heading = rng.uniform(-np.pi, np.pi)
    R[:, 0] = _ry(np.full(T, heading)) @ R[:, 0]
    return MotionSequence.from_local(skeleton, root, R, fps)


@dataclass
class Sample:
    seq: MotionSequence
    label: str
    description: str
    question: str
    image_id: str


@dataclass
class SynthDataset:
    samples: list = field(default_factory=list)
    seed: int = 0

    def __len__(self):
        return len(self.samples)

    def __getitem__(self, i):
        return self.samples[i]

    @property
    def labels(self):
        return [s.label for s in self.samples]


def synth_dataset(n: int, classes=CLASSES, seed: int = 0, T: int = 64, fps: float = 30.0) -> SynthDataset:
    """``n`` clips cycling through ``classes``, each with a template description."""
    if n < 1:
        raise ValueError("n must be >= 1")
    classes = tuple(classes)
    unknown = set(classes) - set(CLASSES)
    if unknown:
        raise ValueError(f"unknown classes {sorted(unknown)}")
    rng = np.random.default_rng(seed)
    skeleton = Skeleton()
    out = []
    for i in range(n):
        label = classes[i % len(classes)]
        seq = generate_motion(label, T, fps, rng, skeleton)
        desc = TEMPLATES[label][int(rng.integers(len(TEMPLATES[label])))]
        question = QUESTIONS[int(rng.integers(len(QUESTIONS)))]
        image_id = f"{label}_scene{int(rng.integers(N_SCENES))}"
        out.append(Sample(seq, label, desc, question, image_id))
    return SynthDataset(out, seed)


def wrist_speed_features(seq: MotionSequence) -> np.ndarray:
    """[mean L wrist speed, mean R wrist speed, max L, max R] in m/frame."""
    feats = []
    for name in ("L_wrist", "R_wrist"):
        v = np.linalg.norm(np.diff(seq.positions[:, J[name]], axis=0), axis=-1)
        feats.append((v.mean(), v.max()))
    return np.array([feats[0][0], feats[1][0], feats[0][1], feats[1][1]])
