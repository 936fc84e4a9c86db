"""Oracle suites: parallel-vs-sequential scans and analytic-vs-numeric gradients."""
from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np

from .ssm import SsmParams, scan_parallel, scan_sequential, selective_scan, selective_scan_backward

DEFAULT_SIZES = (1, 2, 17, 256, 4096)
TOLERANCE = {np.dtype(np.float32): 1e-5, np.dtype(np.float64): 1e-10}


@dataclass
class CaseResult:
    suite: str
    case: str
    max_rel_error: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.max_rel_error) and self.max_rel_error <= self.tolerance)

    def row(self) -> dict:
        return dict(suite=self.suite, case=self.case, max_rel_error=self.max_rel_error,
                    tolerance=self.tolerance, passed=self.passed)


def rel_error(got, ref) -> float:
    """``max|got - ref| / max|ref|`` (absolute when the reference is all zero)."""
    got = np.asarray(got, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    diff = np.abs(got - ref).max(initial=0.0)
    scale = np.abs(ref).max(initial=0.0)
    return float(diff / scale) if scale > 0 else float(diff)


def random_problem(length: int, seed: int, channels: int = 4, state_size: int = 8, dtype=np.float64):
    rng = np.random.default_rng(seed)
    p = SsmParams.init(channels, state_size, rng=rng)
    # widen Δ and B so the recurrence is far from trivial
    p = p.replace(bias_delta=rng.uniform(-3.0, 1.0, channels), w_b=rng.normal(0, 1, (channels, state_size)))
    x = rng.normal(size=(length, channels))
    h0 = rng.normal(size=(channels, state_size))
    return x.astype(dtype), p.astype(dtype), h0.astype(dtype)


def scan_equivalence(sizes=DEFAULT_SIZES, seeds=20, dtypes=(np.float32, np.float64), inject_fault=False):
    """Compare the Hillis-Steele scan with the sequential reference on random problems."""
    out = []
    for dtype in dtypes:
        tol = TOLERANCE[np.dtype(dtype)]
        for n in sizes:
            worst = 0.0
            for s in range(seeds):
                x, p, h0 = random_problem(n, s, dtype=dtype)
                ref = scan_sequential(x, p, h0)
                got = scan_parallel(x, p, h0, inject_fault=inject_fault)
                worst = max(worst, rel_error(got.y, ref.y), rel_error(got.h_final, ref.h_final))
            out.append(CaseResult("parallel_vs_sequential", f"L={n} {np.dtype(dtype).name}", worst, tol))
    return out


def _scan_loss(x, p, h0, gy, method):
    y, _, _ = selective_scan(x, p, h0, method=method)
    return float((y * gy).sum())


def scan_gradient_check(length: int, seed: int, n_coords: int = 6, eps: float = 1e-6,
                        method: str = "sequential") -> float:
    """Norm-wise relative error between analytic and central-difference gradients.

    Checks ``n_coords`` random coordinates of every input and parameter.
    """
    rng = np.random.default_rng(10_000 + seed)
    x, p, h0 = random_problem(length, seed)
    gy = rng.normal(size=x.shape)
    _, _, cache = selective_scan(x, p, h0, method=method)
    gx, gp, gh0 = selective_scan_backward(gy, cache)
    named = {"x": (x, gx), "h0": (h0, gh0)}
    named.update({f.name: (getattr(p, f.name), getattr(gp, f.name)) for f in fields(p)})
    num, ana = [], []
    for name, (arr, grad) in named.items():
        for _ in range(n_coords):
            idx = tuple(int(rng.integers(d)) for d in arr.shape)
            vals = []
            for sgn in (1.0, -1.0):
                pert = arr.copy()
                pert[idx] += sgn * eps
                xx, hh, pp = x, h0, p
                if name == "x":
                    xx = pert
                elif name == "h0":
                    hh = pert
                else:
                    pp = p.replace(**{name: pert})
                vals.append(_scan_loss(xx, pp, hh, gy, method))
            num.append((vals[0] - vals[1]) / (2 * eps))
            ana.append(grad[idx])
    num, ana = np.array(num), np.array(ana)
    return float(np.linalg.norm(num - ana) / max(np.linalg.norm(num), np.linalg.norm(ana), 1e-300))


def gradient_suite(lengths=(1, 2, 17, 64), seeds=3, tol=1e-4):
    out = []
    for n in lengths:
        for method in ("sequential", "fused"):
            worst = max(scan_gradient_check(n, s, method=method) for s in range(seeds))
            out.append(CaseResult("gradient_vs_fd", f"L={n} {method}", worst, tol))
    return out


# operation and pipeline checks ---------------------------------------------------

def fd_relative_error(loss, arrays, grads, n_coords: int = 20, eps: float = 1e-6, seed: int = 0) -> float:
    """Norm-wise relative error over ``n_coords`` random coordinates of each array.

    ``loss`` is a no-argument callable; the arrays are perturbed in place and
    restored.
    """
    rng = np.random.default_rng(seed)
    num, ana = [], []
    for arr, g in zip(arrays, grads):
        flat = arr.reshape(-1)
        gflat = np.asarray(g).reshape(-1)
        for i in rng.choice(flat.size, size=min(n_coords, flat.size), replace=False):
            old = flat[i]
            flat[i] = old + eps
            lp = loss()
            flat[i] = old - eps
            lm = loss()
            flat[i] = old
            num.append((lp - lm) / (2 * eps))
            ana.append(gflat[i])
    num, ana = np.array(num), np.array(ana)
    scale = max(np.linalg.norm(num), np.linalg.norm(ana))
    return 0.0 if scale == 0 else float(np.linalg.norm(num - ana) / scale)


def _tree_check(loss, tree, gtree, n_coords, seed):
    from .layers import tree_flatten

    w, g = tree_flatten(tree), tree_flatten(gtree)
    names = sorted(w)
    return fd_relative_error(loss, [w[k] for k in names], [g[k] for k in names], n_coords, seed=seed)


def _layer_cases(rng):
    from . import layers as L

    x = rng.normal(size=(5, 4))
    gy = rng.normal(size=(5, 3))
    lin = L.Linear.init(rng, 4, 3)
    gx, gp = L.linear_backward(gy, x, lin)
    loss = lambda: float((L.linear(x, lin) * gy).sum())
    yield "linear", fd_relative_error(loss, [x, lin.w, lin.b], [gx, gp.w, gp.b])

    ln = L.LayerNorm(rng.normal(size=4), rng.normal(size=4))
    g4 = rng.normal(size=(5, 4))
    _, cache = L.layer_norm(x, ln)
    gx, gp = L.layer_norm_backward(g4, cache, ln)
    loss = lambda: float((L.layer_norm(x, ln)[0] * g4).sum())
    yield "layer_norm", fd_relative_error(loss, [x, ln.gamma, ln.beta], [gx, gp.gamma, gp.beta])

    for name, f, fb in (("gelu", L.gelu, L.gelu_backward), ("silu", L.silu, L.silu_backward)):
        yield name, fd_relative_error(lambda: float((f(x) * g4).sum()), [x], [fb(g4, x)])

    img = rng.normal(size=(6, 6, 2))
    conv = L.Conv2d.init(rng, 3, 2, 3, stride=2, pad=1)
    gc = rng.normal(size=L.conv2d(img, conv).shape)
    gx, gp = L.conv2d_backward(gc, img, conv)
    loss = lambda: float((L.conv2d(img, conv) * gc).sum())
    yield "conv2d", fd_relative_error(loss, [img, conv.w, conv.b], [gx, gp.w, gp.b])

    logits = rng.normal(size=(4, 4, 2))
    labels = rng.integers(0, 2, size=(4, 4))
    _, g = L.softmax_cross_entropy(logits, labels)
    yield "cross_entropy", fd_relative_error(lambda: L.softmax_cross_entropy(logits, labels)[0], [logits], [g])


def _geometry_cases(rng):
    from . import geometry as G

    f = rng.normal(size=(8, 8, 3))
    m = rng.random((8, 8)) > 0.5
    gy = rng.normal(size=(2, 2, 3))
    yield "downsample", fd_relative_error(lambda: float((G.downsample(f, m, 4)[0] * gy).sum()), [f],
                                          [G.downsample_backward(gy, m, 4)])
    small = rng.normal(size=(2, 2, 3))
    yield "upsample", fd_relative_error(lambda: float((G.upsample(small, 4) * f).sum()), [small],
                                        [G.upsample_backward(f, 4)])
    _, layout = G.assemble_srm_sequence(small, G.split_patches(f, 4, 3), 3)
    gs = rng.normal(size=(len(layout), 3))
    g_s, g_q = G.gather_sequence_backward(gs, layout)
    yield "srm_gather", fd_relative_error(lambda: float((G.gather_sequence(small, f, layout) * gs).sum()),
                                          [small, f], [g_s, g_q])
    y = rng.normal(size=(len(layout), 3))
    g_q, g_h = rng.normal(size=(8, 8, 3)), rng.normal(size=(2, 2, 3))

    def scatter_loss():
        a, b = G.scatter_srm_outputs(y, layout)
        return float((a * g_q).sum() + (b * g_h).sum())
    yield "srm_scatter", fd_relative_error(scatter_loss, [y], [G.scatter_srm_outputs_backward(g_q, g_h, layout)])


def _block_cases(rng):
    from .hmb import HmbConfig, HmbWeights, hmb_backward, hmb_forward, hmb_forward_cached
    from .hmb import qim_closed_form, qim_closed_form_backward
    from .smb import SmbWeights, self_scan_backward, self_scan_forward, smb_backward, smb_forward_cached

    x, p, h_s = random_problem(1, int(rng.integers(1 << 30)))
    xq = rng.normal(size=(6, x.shape[-1]))
    gy = rng.normal(size=xq.shape)
    _, cache = qim_closed_form(xq, h_s, p)
    gx, gp, gh = qim_closed_form_backward(gy, cache)
    loss = lambda: float((qim_closed_form(xq, h_s, p)[0] * gy).sum())
    yield "qim_closed_form", max(fd_relative_error(loss, [xq, h_s], [gx, gh]), _tree_check(loss, p, gp, 6, 0))

    smb = SmbWeights.init(rng, 4, 3, expand=1)
    maps = rng.normal(size=(4, 4, 4))
    gm = rng.normal(size=maps.shape)
    _, cache = self_scan_forward(maps, smb.ssm)
    g_maps, g_ssm = self_scan_backward(gm, cache)
    loss = lambda: float((self_scan_forward(maps, smb.ssm)[0] * gm).sum())
    yield "self_scan_4dir", max(fd_relative_error(loss, [maps], [g_maps]), _tree_check(loss, smb.ssm, g_ssm, 4, 0))

    fq, fs = rng.normal(size=(2, 4, 4, 4))
    gq, gs = rng.normal(size=(2, 4, 4, 4))
    _, _, cache = smb_forward_cached(fq, fs, smb)
    g_fq, g_fs, gw = smb_backward(gq, gs, cache, smb)

    def smb_loss():
        q, s, _ = smb_forward_cached(fq, fs, smb)
        return float((q * gq).sum() + (s * gs).sum())
    yield "smb", max(fd_relative_error(smb_loss, [fq, fs], [g_fq, g_fs]), _tree_check(smb_loss, smb, gw, 3, 0))

    hmb = HmbWeights.init(rng, 4, 3, expand=1)
    mask = rng.random((4, 4)) > 0.3
    for name, cfg in (("full", HmbConfig(alpha=2)), ("srm_recap", HmbConfig(alpha=2, qim=False)),
                      ("srm_basic", HmbConfig(alpha=2, recap=False, qim=False)),
                      ("qim_share", HmbConfig(alpha=2, srm=False)),
                      ("qim_basic", HmbConfig(alpha=2, srm=False, share=False))):
        _, _, cache = hmb_forward_cached(fq, fs, mask, hmb, cfg)
        g_fq, g_fs, gw = hmb_backward(gq, gs, cache, hmb, cfg)

        def hmb_loss():
            q, s = hmb_forward(fq, fs, mask, hmb, cfg)
            return float((q * gq).sum() + (s * gs).sum())
        yield f"hmb_{name}", max(fd_relative_error(hmb_loss, [fq, fs], [g_fq, g_fs]),
                                 _tree_check(hmb_loss, hmb, gw, 3, 0))


def operation_gradient_suite(seed: int = 0, tol: float = 1e-4):
    """Analytic-vs-central-difference checks of every backward in the package."""
    rng = np.random.default_rng(seed)
    out = [CaseResult("op_gradient", f"scan {r.case}", r.max_rel_error, tol) for r in gradient_suite(tol=tol)]
    for gen in (_layer_cases, _geometry_cases, _block_cases):
        out += [CaseResult("op_gradient", name, err, tol) for name, err in gen(rng)]
    return out


def pipeline_gradient_check(ablation: str = "full", seed: int = 0, n_coords: int = 20, tol: float = 1e-3):
    """End-to-end loss gradient of a small network against central differences."""
    from . import episodes as E
    from .layers import tree_flatten
    from .network import HmNetConfig, NetWeights, episode_loss

    cfg = HmNetConfig(num_block_pairs=1, channels=4, state_size=3, alpha=2,
                      input_resolution=16).with_ablation(ablation)
    w = NetWeights.init(cfg, seed=seed)
    ep = E.generate_episode(E.SyntheticEpisodeSpec(image_size=16), seed)
    _, grads, _ = episode_loss(ep, w, cfg)
    flat_w, flat_g = tree_flatten(w), tree_flatten(grads)
    names = sorted(flat_w)
    sizes = np.array([flat_w[k].size for k in names])
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    rng = np.random.default_rng(seed)
    num, ana = [], []
    eps = 1e-6
    for pick in rng.choice(int(sizes.sum()), size=n_coords, replace=False):
        i = int(np.searchsorted(offsets, pick, side="right") - 1)
        arr = flat_w[names[i]].reshape(-1)
        j = pick - offsets[i]
        old = arr[j]
        arr[j] = old + eps
        lp = episode_loss(ep, w, cfg, with_grad=False)[0]
        arr[j] = old - eps
        lm = episode_loss(ep, w, cfg, with_grad=False)[0]
        arr[j] = old
        num.append((lp - lm) / (2 * eps))
        ana.append(flat_g[names[i]].reshape(-1)[j])
    num, ana = np.array(num), np.array(ana)
    err = float(np.linalg.norm(num - ana) / max(np.linalg.norm(num), np.linalg.norm(ana)))
    return CaseResult("pipeline_gradient", ablation, err, tol)
