"""HMNet-toy: stem -> support masking -> (SMB, HMB) x pairs -> decoder -> 2-class logits."""
from __future__ import annotations

import warnings
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np

from . import geometry as G
from . import layers as L
from . import tensorfile as tf
from .hmb import HmbConfig, HmbWeights, hmb_backward, hmb_forward_cached
from .smb import SmbWeights, smb_backward, smb_forward_cached
from .ssm import DomainError

ABLATIONS = {
    "smb-only": dict(hmb=False),
    "srm-basic": dict(srm=True, recap=False, qim=False),
    "srm-recap": dict(srm=True, recap=True, qim=False),
    "qim-basic": dict(srm=False, qim=True, share=False),
    "qim-share": dict(srm=False, qim=True, share=True),
    "full": dict(srm=True, recap=True, qim=True, share=True),
}


@dataclass(frozen=True)
class HmNetConfig:
    num_block_pairs: int = 2
    channels: int = 16
    state_size: int = 8
    alpha: int = 4
    input_resolution: int = 32
    stride: int = 2
    expand: int = 1
    ffn_mult: int = 2
    hmb: bool = True
    srm: bool = True
    recap: bool = True
    qim: bool = True
    share: bool = True

    def __post_init__(self):
        for f in ("num_block_pairs", "channels", "state_size", "alpha", "input_resolution",
                  "stride", "expand", "ffn_mult"):
            if getattr(self, f) < 1:
                raise DomainError(f"{f} must be positive")
        if self.input_resolution % self.stride:
            raise DomainError("input resolution must be divisible by the stem stride")
        if self.feature_size % self.alpha:
            raise DomainError(f"feature size {self.feature_size} not divisible by alpha={self.alpha}")
        if self.hmb and not (self.srm or self.qim):
            raise DomainError("HMB enabled without SRM or QIM")

    @property
    def feature_size(self) -> int:
        return self.input_resolution // self.stride

    @property
    def hmb_config(self) -> HmbConfig:
        return HmbConfig(alpha=self.alpha, srm=self.srm, recap=self.recap, qim=self.qim, share=self.share)

    @property
    def ablation(self) -> str:
        for name, flags in ABLATIONS.items():
            if all(getattr(self, k) == v for k, v in flags.items()) and (self.hmb or name == "smb-only"):
                return name
        return "custom"

    def with_ablation(self, name: str) -> "HmNetConfig":
        if name not in ABLATIONS:
            raise DomainError(f"unknown ablation {name!r}; choose from {sorted(ABLATIONS)}")
        base = dict(hmb=True, srm=True, recap=True, qim=True, share=True)
        base.update(ABLATIONS[name])
        return replace(self, **base)

    @classmethod
    def toy(cls, **kw) -> "HmNetConfig":
        return cls(**kw)

    @classmethod
    def paper_shape(cls, **kw) -> "HmNetConfig":
        """Full-size blocks (8 blocks, D=256, N=16); for shape and cost checks only."""
        base = dict(num_block_pairs=4, channels=256, state_size=16, alpha=4, input_resolution=480,
                    stride=8, expand=2)
        base.update(kw)
        return cls(**base)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "HmNetConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


@dataclass(frozen=True)
class NetWeights:
    stem1: L.Conv2d
    stem2: L.Conv2d
    smbs: tuple
    hmbs: tuple
    dec1: L.Linear
    dec2: L.Linear
    head: L.Linear

    @classmethod
    def init(cls, config: HmNetConfig, seed=0) -> "NetWeights":
        rng = np.random.default_rng(seed)
        d, n = config.channels, config.state_size
        stem1 = L.Conv2d.init(rng, 3, 3, d, stride=1, pad=1)
        stem2 = L.Conv2d.init(rng, config.stride, d, d, stride=config.stride)
        smbs = tuple(SmbWeights.init(rng, d, n, config.expand, config.ffn_mult)
                     for _ in range(config.num_block_pairs))
        hmbs = tuple(HmbWeights.init(rng, d, n, config.expand, config.ffn_mult)
                     for _ in range(config.num_block_pairs)) if config.hmb else ()
        return cls(stem1, stem2, smbs, hmbs, L.Linear.init(rng, d, d), L.Linear.init(rng, d, d),
                   L.Linear.init(rng, d, 2))


@dataclass
class Prediction:
    logits: np.ndarray  # (H, W, 2)
    binary_mask: np.ndarray  # (H, W) uint8
    warnings: list = field(default_factory=list)


# stem / decoder --------------------------------------------------------------

def stem_forward_cached(image, w: NetWeights):
    x = np.asarray(image, dtype=np.float64)
    a1 = L.conv2d(x, w.stem1)
    z1 = L.gelu(a1)
    return L.conv2d(z1, w.stem2), (x, a1, z1)


def stem_backward(g, cache, w: NetWeights):
    x, a1, z1 = cache
    gz1, g2 = L.conv2d_backward(g, z1, w.stem2)
    _, g1 = L.conv2d_backward(L.gelu_backward(gz1, a1), x, w.stem1)
    return g1, g2


def stem_forward(image, w: NetWeights):
    """Image ``(H, W, 3)`` -> features ``(H/stride, W/stride, D)``."""
    return stem_forward_cached(image, w)[0]


def feature_mask(mask, stride: int):
    """Pixel mask -> feature-grid mask (cells at least half covered; any coverage if none are)."""
    m = np.asarray(mask, dtype=np.float64)
    cover = m.reshape(m.shape[0] // stride, stride, m.shape[1] // stride, stride).mean(axis=(1, 3))
    fm = cover >= 0.5
    return fm if fm.any() else cover > 0


def kshot_merge(support_features, masks):
    """Average the masked support maps; the merged mask is the union."""
    support_features = list(support_features)
    masks = list(masks)
    if not support_features:
        raise DomainError("K-shot merge needs at least one support")
    if len(masks) != len(support_features):
        raise DomainError("one mask per support map is required")
    acc = np.zeros(np.shape(support_features[0]), dtype=np.float64)
    union = np.zeros(np.shape(masks[0]), dtype=bool)
    for f, m in zip(support_features, masks):
        m = np.asarray(m, dtype=bool)
        acc += np.asarray(f, dtype=np.float64) * m[..., None]
        union |= m
    return acc / len(support_features), union


def decoder_forward_cached(f, w: NetWeights):
    a1 = L.linear(f, w.dec1)
    z1 = L.gelu(a1)
    a2 = L.linear(z1, w.dec2)
    z2 = L.gelu(a2)
    return L.linear(z2, w.head), (f, a1, z1, a2, z2)


def decoder_backward(g, cache, w: NetWeights):
    f, a1, z1, a2, z2 = cache
    gz2, gh = L.linear_backward(g, z2, w.head)
    gz1, g2 = L.linear_backward(L.gelu_backward(gz2, a2), z1, w.dec2)
    gf, g1 = L.linear_backward(L.gelu_backward(gz1, a1), f, w.dec1)
    return gf, g1, g2, gh


def predict_mask(logits):
    """Foreground iff the FG logit is strictly larger (ties go to background)."""
    logits = np.asarray(logits)
    return (logits[..., 1] > logits[..., 0]).astype(np.uint8)


# full pipeline -----------------------------------------------------------------

def forward_cached(query_image, support_images, support_masks, w: NetWeights, config: HmNetConfig):
    """Forward pass keeping everything :func:`backward` needs.

    Returns ``(logits, cache)`` with logits at input resolution ``(H, W, 2)``.
    """
    s = config.stride
    fq, qstem = stem_forward_cached(query_image, w)
    sfeats, sstems, fmasks = [], [], []
    for img, m in zip(support_images, support_masks):
        f, c = stem_forward_cached(img, w)
        sfeats.append(f)
        sstems.append(c)
        fmasks.append(feature_mask(m, s))
    fs, mask = kshot_merge(sfeats, fmasks)
    block_caches = []
    for i, smb_w in enumerate(w.smbs):
        fq, fs, c1 = smb_forward_cached(fq, fs, smb_w)
        c2 = None
        if config.hmb:
            fq, fs, c2 = hmb_forward_cached(fq, fs, mask, w.hmbs[i], config.hmb_config)
        block_caches.append((c1, c2))
    logits_small, dcache = decoder_forward_cached(fq, w)
    logits = G.upsample(logits_small, s)
    return logits, dict(qstem=qstem, sstems=sstems, fmasks=fmasks, block_caches=block_caches,
                        dcache=dcache, mask=mask, final_q=fq)


def backward(g_logits, cache, w: NetWeights, config: HmNetConfig) -> NetWeights:
    """Gradient of the loss w.r.t. every weight, as a :class:`NetWeights` tree."""
    g_small = G.upsample_backward(g_logits, config.stride)
    g_fq, g_d1, g_d2, g_head = decoder_backward(g_small, cache["dcache"], w)
    g_fs = np.zeros_like(g_fq)
    g_smbs, g_hmbs = [], []
    for i in reversed(range(len(w.smbs))):
        c1, c2 = cache["block_caches"][i]
        if config.hmb:
            g_fq, g_fs, gh = hmb_backward(g_fq, g_fs, c2, w.hmbs[i], config.hmb_config)
            g_hmbs.append(gh)
        g_fq, g_fs, gs = smb_backward(g_fq, g_fs, c1, w.smbs[i])
        g_smbs.append(gs)
    g_stem1, g_stem2 = stem_backward(g_fq, cache["qstem"], w)
    k = len(cache["sstems"])
    for sc, fm in zip(cache["sstems"], cache["fmasks"]):
        g1, g2 = stem_backward(g_fs * fm[..., None] / k, sc, w)
        g_stem1 = L.tree_add(g_stem1, g1)
        g_stem2 = L.tree_add(g_stem2, g2)
    return NetWeights(g_stem1, g_stem2, tuple(reversed(g_smbs)), tuple(reversed(g_hmbs)),
                      g_d1, g_d2, g_head)


def hmnet_forward(episode, w: NetWeights, config: HmNetConfig) -> Prediction:
    """Segment ``episode.query_image`` given its supports."""
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        logits, _ = forward_cached(episode.query_image, [s[0] for s in episode.supports],
                                   [s[1] for s in episode.supports], w, config)
    return Prediction(logits, predict_mask(logits), [str(c.message) for c in caught])


def episode_loss(episode, w: NetWeights, config: HmNetConfig, with_grad=True):
    """Pixel cross-entropy of one episode; returns ``(loss, grads | None, logits)``."""
    logits, cache = forward_cached(episode.query_image, [s[0] for s in episode.supports],
                                   [s[1] for s in episode.supports], w, config)
    loss, g = L.softmax_cross_entropy(logits, np.asarray(episode.query_mask))
    grads = backward(g, cache, w, config) if with_grad else None
    return loss, grads, logits


def block_features(episode, w: NetWeights, config: HmNetConfig):
    """Query/support maps around every block of one forward pass.

    Returns ``(stages, support_mask, query_mask)``; ``stages`` is a list of
    ``(name, f_q, f_s)`` starting with ``("stem", ...)`` and then one entry
    after each SMB / HMB, e.g. ``"smb0"``, ``"hmb0"``. Masks are on the
    feature grid.
    """
    s = config.stride
    fq = stem_forward(episode.query_image, w)
    sfeats = [stem_forward(img, w) for img, _ in episode.supports]
    fs, mask = kshot_merge(sfeats, [feature_mask(m, s) for _, m in episode.supports])
    stages = [("stem", fq, fs)]
    for i, smb_w in enumerate(w.smbs):
        fq, fs, _ = smb_forward_cached(fq, fs, smb_w)
        stages.append((f"smb{i}", fq, fs))
        if config.hmb:
            fq, fs, _ = hmb_forward_cached(fq, fs, mask, w.hmbs[i], config.hmb_config)
            stages.append((f"hmb{i}", fq, fs))
    return stages, mask, feature_mask(episode.query_mask, s)


# checkpoints -------------------------------------------------------------------

def save_checkpoint(directory, w: NetWeights, config: HmNetConfig, extra: dict | None = None) -> None:
    """One tensor file per named weight plus a JSON manifest holding the config.

    Weights are stored as float32, so a reload matches the in-memory float64
    weights to single precision.
    """
    body = {"kind": "checkpoint", "config": config.to_dict()}
    if extra:
        body.update(extra)
    tf.save_tensors(directory, L.tree_flatten(w), extra=body)


def load_checkpoint(directory):
    """Inverse of :func:`save_checkpoint`; returns ``(weights, config, manifest)``."""
    tensors, body = tf.load_tensors(directory)
    if "config" not in body:
        raise tf.MalformedHeaderError(f"checkpoint manifest in {directory} has no config")
    config = HmNetConfig.from_dict(body["config"])
    template = NetWeights.init(config, seed=0)
    names = L.tree_flatten(template)
    missing = sorted(set(names) - set(tensors))
    if missing:
        raise tf.MissingTensorError(f"checkpoint {directory} lacks tensors {missing[:3]}")
    for k, v in names.items():
        if tensors[k].shape != v.shape:
            raise tf.DimensionMismatchError(f"{k}: checkpoint {tensors[k].shape} vs config {v.shape}")
    flat = {k: tensors[k].astype(np.float64) for k in names}
    return L.tree_unflatten(template, flat), config, body
