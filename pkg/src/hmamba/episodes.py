"""Synthetic few-shot segmentation episodes and their on-disk form.

Every episode draws one shape family as its class. The query holds one
object of that family (the target) and, optionally, a distractor object of a
different family; each support holds another instance of the target family.
Query and support instances share a base appearance and differ by the
configured jitter, which is the knob for the intra-class gap.
"""
from __future__ import annotations

import colorsys
import os
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import tensorfile as tf

FAMILIES = ("ellipse", "rectangle", "cross", "ring", "triangle", "diamond", "crescent", "hexagon")
N_FOLDS = 4


class EpisodeError(Exception):
    pass


def split_families(fold: int = 0):
    """``(train_families, novel_families)`` for a fold; the two sets are disjoint."""
    if not 0 <= fold < N_FOLDS:
        raise EpisodeError(f"fold must be in [0, {N_FOLDS})")
    per = len(FAMILIES) // N_FOLDS
    novel = FAMILIES[fold * per:(fold + 1) * per]
    return tuple(f for f in FAMILIES if f not in novel), novel


def _inside(family: str, u, v):
    """Membership of object-frame coordinates (unit radius) in a family's shape."""
    au, av = np.abs(u), np.abs(v)
    r = np.hypot(u, v)
    if family == "ellipse":
        return r <= 1.0
    if family == "rectangle":
        return (au <= 1.0) & (av <= 0.7)
    if family == "cross":
        return ((au <= 1.0) & (av <= 0.34)) | ((au <= 0.34) & (av <= 1.0))
    if family == "ring":
        return (r <= 1.0) & (r >= 0.55)
    if family == "triangle":
        return (v >= -0.5) & (v <= 1.0 - np.sqrt(3.0) * au)
    if family == "diamond":
        return au + av <= 1.0
    if family == "crescent":
        return (r <= 1.0) & (np.hypot(u - 0.45, v) >= 0.75)
    if family == "hexagon":
        return (av <= 0.866) & (0.866 * au + 0.5 * av <= 0.866)
    raise EpisodeError(f"unknown family {family!r}")


@dataclass(frozen=True)
class Jitter:
    scale: float = 0.15  # relative, +-
    rotation: float = 0.6  # radians, +-
    aspect: float = 0.15  # relative, +-
    texture_phase: float = 1.5  # radians, +-
    hue: float = 0.03  # hue turns, +-

    @classmethod
    def none(cls) -> "Jitter":
        return cls(0.0, 0.0, 0.0, 0.0, 0.0)


@dataclass(frozen=True)
class SyntheticEpisodeSpec:
    image_size: int = 32
    families: tuple = split_families(0)[0]
    jitter: Jitter = Jitter()
    background: str = "sine"  # sine | noise | flat
    k: int = 1
    radius: float = 0.22  # base object radius as a fraction of the image size
    distractor_prob: float = 1.0
    fg_bounds: tuple = (0.05, 0.60)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["families"] = list(self.families)
        d["fg_bounds"] = list(self.fg_bounds)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticEpisodeSpec":
        d = dict(d)
        if "jitter" in d:
            d["jitter"] = Jitter(**d["jitter"])
        if "families" in d:
            d["families"] = tuple(d["families"])
        if "fg_bounds" in d:
            d["fg_bounds"] = tuple(d["fg_bounds"])
        return cls(**d)


@dataclass
class Episode:
    query_image: np.ndarray  # (H, W, 3) float32 in [0, 1]
    query_mask: np.ndarray  # (H, W) uint8
    supports: list  # K x (image, mask)
    class_id: int
    meta: dict = field(default_factory=dict)

    @property
    def family(self) -> str:
        return FAMILIES[self.class_id]


@dataclass(frozen=True)
class _Pose:
    cy: int
    cx: int
    radius: float
    aspect: float
    angle: float
    phase: float
    hue: float
    freq: float


def _object_frame(size, pose: _Pose):
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    dy, dx = yy - pose.cy, xx - pose.cx
    c, s = np.cos(pose.angle), np.sin(pose.angle)
    u = (c * dx + s * dy) / (pose.radius * pose.aspect)
    v = (-s * dx + c * dy) / (pose.radius / pose.aspect)
    return u, v


def _render(size, family, pose: _Pose):
    u, v = _object_frame(size, pose)
    mask = _inside(family, u, v)
    r, g, b = colorsys.hsv_to_rgb(pose.hue % 1.0, 0.8, 0.85)
    shade = 1.0 + 0.2 * np.sin(pose.freq * (u + 0.5 * v) + pose.phase)
    rgb = np.stack([r * shade, g * shade, b * shade], axis=-1)
    return mask, np.clip(rgb, 0.0, 1.0)


def _background(size, kind, rng):
    base = rng.uniform(0.3, 0.6)
    tint = np.array(colorsys.hsv_to_rgb(rng.uniform(), 0.15, 1.0))
    img = np.full((size, size, 3), base) * tint
    if kind == "sine":
        yy, xx = np.mgrid[0:size, 0:size]
        th = rng.uniform(0, np.pi)
        f = rng.uniform(0.2, 0.8)
        img += 0.08 * np.sin(f * (np.cos(th) * xx + np.sin(th) * yy) + rng.uniform(0, 2 * np.pi))[..., None]
        img += rng.normal(0, 0.02, img.shape)
    elif kind == "noise":
        img += rng.normal(0, 0.06, img.shape)
    elif kind != "flat":
        raise EpisodeError(f"unknown background {kind!r}")
    return np.clip(img, 0.0, 1.0)


def _jittered(base: _Pose, jit: Jitter, rng, size):
    def u(width):
        return rng.uniform(-width, width) if width > 0 else 0.0

    r = base.radius * (1.0 + u(jit.scale))
    aspect = base.aspect * (1.0 + u(jit.aspect))
    margin = int(np.ceil(r * max(aspect, 1.0 / aspect)))
    lo, hi = margin, max(margin + 1, size - margin)
    return replace(base, cy=int(rng.integers(lo, hi)), cx=int(rng.integers(lo, hi)), radius=r,
                   aspect=aspect, angle=base.angle + u(jit.rotation),
                   phase=base.phase + u(jit.texture_phase), hue=base.hue + u(jit.hue))


def _place(spec, family, base, rng, occupied=None):
    size = spec.image_size
    lo, hi = spec.fg_bounds
    for _ in range(100):
        pose = _jittered(base, spec.jitter, rng, size)
        mask, rgb = _render(size, family, pose)
        frac = mask.mean()
        if not lo <= frac <= hi:
            continue
        if occupied is not None and (mask & _dilate(occupied)).any():
            continue
        return mask, rgb, pose
    return None


def _dilate(m):
    out = m.copy()
    out[1:] |= m[:-1]
    out[:-1] |= m[1:]
    out[:, 1:] |= m[:, :-1]
    out[:, :-1] |= m[:, 1:]
    return out


def _compose(spec, family, base, rng, distractor):
    size = spec.image_size
    img = _background(size, spec.background, rng)
    placed = _place(spec, family, base, rng)
    if placed is None:
        raise EpisodeError(f"could not place a {family} within FG bounds {spec.fg_bounds} after 100 tries")
    mask, rgb, pose = placed
    if distractor is not None:
        d_family, d_base = distractor
        d = _place(replace(spec, fg_bounds=(0.0, 1.0)), d_family, d_base, rng, occupied=mask)
        if d is not None:
            img = np.where(d[0][..., None], d[1], img)
    img = np.where(mask[..., None], rgb, img)
    return img.astype(np.float32), mask.astype(np.uint8), pose


def _base_pose(spec, rng, hue=None):
    size = spec.image_size
    return _Pose(cy=size // 2, cx=size // 2, radius=spec.radius * size,
                 aspect=float(np.exp(rng.uniform(-0.25, 0.25))), angle=rng.uniform(0, np.pi),
                 phase=rng.uniform(0, 2 * np.pi), hue=rng.uniform() if hue is None else hue,
                 freq=rng.uniform(1.5, 4.0))


def _distractor(spec, family, hue, rng):
    others = [f for f in spec.families if f != family]
    if not others or rng.uniform() >= spec.distractor_prob:
        return None
    d_family = others[int(rng.integers(len(others)))]
    d_hue = (hue + rng.uniform(0.25, 0.75)) % 1.0
    return d_family, _base_pose(spec, rng, d_hue)


def generate_episode(spec: SyntheticEpisodeSpec, seed) -> Episode:
    """Deterministic episode for ``(spec, seed)``."""
    if spec.k < 1:
        raise EpisodeError("K must be at least 1")
    if not spec.families:
        raise EpisodeError("spec has no families")
    rng = np.random.default_rng(seed)
    family = spec.families[int(rng.integers(len(spec.families)))]
    base = _base_pose(spec, rng)
    distractor = _distractor(spec, family, base.hue, rng)
    q_img, q_mask, q_pose = _compose(spec, family, base, rng, distractor)
    supports, poses = [], []
    for _ in range(spec.k):
        s_img, s_mask, s_pose = _compose(spec, family, base, rng, _distractor(spec, family, base.hue, rng))
        supports.append((s_img, s_mask))
        poses.append(asdict(s_pose))
    return Episode(q_img, q_mask, supports, FAMILIES.index(family),
                   meta={"family": family, "seed": _seed_repr(seed), "pool": list(spec.families),
                         "distractor": distractor[0] if distractor else None,
                         "query_pose": asdict(q_pose), "support_poses": poses})


def _seed_repr(seed):
    if isinstance(seed, (int, np.integer)):
        return int(seed)
    return None


def episode_seed(base_seed: int, index: int) -> int:
    return int(np.random.SeedSequence([int(base_seed), int(index)]).generate_state(1)[0])


def generate_episodes(spec: SyntheticEpisodeSpec, count: int, seed: int) -> list:
    return [generate_episode(spec, episode_seed(seed, i)) for i in range(count)]


def audit_split(train_episodes, novel_episodes) -> set:
    """Families seen in both splits (targets or distractors); empty means disjoint."""
    def fams(eps):
        out = set()
        for e in eps:
            out.add(e.family)
            out.update(e.meta.get("pool", ()))
        return out
    return fams(train_episodes) & fams(novel_episodes)


# persistence -------------------------------------------------------------------

def save_episode(ep: Episode, path) -> None:
    tensors = {"query_image": ep.query_image, "query_mask": ep.query_mask}
    for i, (img, m) in enumerate(ep.supports):
        tensors[f"support_{i}_image"] = img
        tensors[f"support_{i}_mask"] = m
    tf.save_tensors(path, tensors, extra={"class_id": int(ep.class_id), "k": len(ep.supports),
                                          "meta": ep.meta, "kind": "episode"})


def load_episode(path) -> Episode:
    tensors, body = tf.load_tensors(path)
    try:
        k = int(body["k"])
        supports = [(tensors[f"support_{i}_image"], tensors[f"support_{i}_mask"].astype(np.uint8))
                    for i in range(k)]
        return Episode(tensors["query_image"], tensors["query_mask"].astype(np.uint8), supports,
                       int(body["class_id"]), body.get("meta", {}))
    except KeyError as exc:
        raise tf.MissingTensorError(f"episode manifest in {path} lacks {exc}") from None


def save_episodes(episodes, directory) -> list:
    paths = []
    for i, ep in enumerate(episodes):
        p = os.path.join(directory, f"episode_{i:05d}")
        save_episode(ep, p)
        paths.append(p)
    return paths


def load_episodes(directory) -> list:
    names = sorted(n for n in os.listdir(directory) if n.startswith("episode_"))
    return [load_episode(os.path.join(directory, n)) for n in names]
