import numpy as np
import pytest

from hmamba import layers as L
from hmamba import network as N
from hmamba.episodes import SyntheticEpisodeSpec, generate_episode
from hmamba.hmb import EmptySupportWarning
from hmamba.ssm import DomainError
from hmamba.tensorfile import DimensionMismatchError, MissingTensorError

from conftest import fd_error


def small_config(**kw):
    base = dict(num_block_pairs=1, channels=4, state_size=3, alpha=2, input_resolution=16, stride=2)
    base.update(kw)
    return N.HmNetConfig(**base)


def small_episode(seed=0, size=16, k=1):
    return generate_episode(SyntheticEpisodeSpec(image_size=size, k=k), seed)


class TestConfig:
    def test_invalid(self):
        with pytest.raises(DomainError):
            N.HmNetConfig(channels=0)
        with pytest.raises(DomainError):
            N.HmNetConfig(input_resolution=30, stride=2, alpha=4)
        with pytest.raises(DomainError):
            N.HmNetConfig(srm=False, qim=False)
        with pytest.raises(DomainError):
            N.HmNetConfig().with_ablation("nope")

    @pytest.mark.parametrize("name", sorted(N.ABLATIONS))
    def test_ablation_round_trip(self, name):
        cfg = N.HmNetConfig().with_ablation(name)
        assert cfg.ablation == name
        assert N.HmNetConfig.from_dict(cfg.to_dict()) == cfg

    def test_paper_shape_constructs(self):
        cfg = N.HmNetConfig.paper_shape()
        assert (cfg.channels, cfg.state_size, 2 * cfg.num_block_pairs, cfg.feature_size) == (256, 16, 8, 60)
        w = N.NetWeights.init(cfg)
        assert len(w.smbs) == len(w.hmbs) == 4
        assert w.hmbs[0].theta.w_b.shape == (4, 512, 16)


class TestStem:
    def test_zero_image(self):
        cfg = small_config()
        w = N.NetWeights.init(cfg)
        zb = lambda c: L.Conv2d(c.w, np.zeros_like(c.b), c.stride, c.pad)
        w = N.NetWeights(zb(w.stem1), zb(w.stem2), w.smbs, w.hmbs, w.dec1, w.dec2, w.head)
        assert not N.stem_forward(np.zeros((16, 16, 3)), w).any()

    def test_shape(self):
        cfg = N.HmNetConfig(input_resolution=64, stride=4, channels=16)
        f = N.stem_forward(np.zeros((64, 64, 3)), N.NetWeights.init(cfg))
        assert f.shape == (16, 16, 16)

    def test_gradient(self, rng):
        cfg = small_config()
        w = N.NetWeights.init(cfg, seed=2)
        img = rng.random((16, 16, 3))
        g = rng.normal(size=(8, 8, 4))
        f, cache = N.stem_forward_cached(img, w)
        g1, g2 = N.stem_backward(g, cache, w)
        loss = lambda: float((N.stem_forward(img, w) * g).sum())
        for p, gp in ((w.stem1, g1), (w.stem2, g2)):
            assert fd_error(loss, p.w, gp.w) <= 1e-4
            assert fd_error(loss, p.b, gp.b) <= 1e-4


class TestMerge:
    def test_k1_identity(self, rng):
        f = rng.normal(size=(4, 4, 3))
        m = np.ones((4, 4), bool)
        out, mask = N.kshot_merge([f], [m])
        np.testing.assert_array_equal(out, f)
        assert mask.all()

    def test_k2_identical(self, rng):
        f = rng.normal(size=(4, 4, 3))
        m = rng.random((4, 4)) > 0.5
        a, ma = N.kshot_merge([f], [m])
        b, mb = N.kshot_merge([f, f], [m, m])
        np.testing.assert_allclose(b, a, rtol=1e-15)
        np.testing.assert_array_equal(ma, mb)

    def test_k5_oracle(self):
        rng = np.random.default_rng(9)
        fs = [rng.normal(size=(3, 3, 2)) for _ in range(5)]
        ms = [rng.random((3, 3)) > 0.5 for _ in range(5)]
        out, mask = N.kshot_merge(fs, ms)
        ref = np.zeros((3, 3, 2))
        for i in range(3):
            for j in range(3):
                for c in range(2):
                    for f, m in zip(fs, ms):
                        ref[i, j, c] += f[i, j, c] if m[i, j] else 0.0
        np.testing.assert_allclose(out, ref / 5, rtol=1e-14)
        np.testing.assert_array_equal(mask, np.logical_or.reduce(ms))

    def test_empty(self):
        with pytest.raises(DomainError):
            N.kshot_merge([], [])

    def test_feature_mask(self):
        m = np.zeros((4, 4), np.uint8)
        m[0, 0] = m[0, 1] = 1
        assert N.feature_mask(m, 2).tolist() == [[True, False], [False, False]]
        m2 = np.zeros((4, 4), np.uint8)
        m2[3, 3] = 1  # under half of every cell: fall back to any coverage
        assert N.feature_mask(m2, 2).tolist() == [[False, False], [False, True]]


class TestPredict:
    def test_all_fg(self):
        logits = np.zeros((3, 3, 2))
        logits[..., 1] = 1.0
        assert N.predict_mask(logits).all()

    def test_ties_bg(self):
        assert not N.predict_mask(np.full((3, 3, 2), 0.7)).any()

    def test_oracle(self, rng):
        logits = rng.normal(size=(5, 6, 2))
        ref = np.array([[1 if logits[i, j, 1] > logits[i, j, 0] else 0 for j in range(6)] for i in range(5)])
        np.testing.assert_array_equal(N.predict_mask(logits), ref)


class TestForward:
    @pytest.mark.parametrize("name", sorted(N.ABLATIONS))
    def test_lattice_shapes(self, name):
        cfg = small_config().with_ablation(name)
        w = N.NetWeights.init(cfg)
        p = N.hmnet_forward(small_episode(), w, cfg)
        assert p.logits.shape == (16, 16, 2) and p.binary_mask.shape == (16, 16)
        assert np.all(np.isfinite(p.logits))

    def test_toy_profile(self):
        cfg = N.HmNetConfig.toy()
        ep = generate_episode(SyntheticEpisodeSpec(), 3)
        p = N.hmnet_forward(ep, N.NetWeights.init(cfg), cfg)
        assert p.logits.shape == (32, 32, 2)

    def test_determinism(self):
        cfg = small_config()
        w = N.NetWeights.init(cfg, seed=4)
        ep = small_episode(2)
        assert N.hmnet_forward(ep, w, cfg).logits.tobytes() == N.hmnet_forward(ep, w, cfg).logits.tobytes()

    def test_support_sensitivity(self):
        cfg = small_config()
        w = N.NetWeights.init(cfg, seed=4)
        ep, other = small_episode(2), small_episode(5)
        swapped = type(ep)(ep.query_image, ep.query_mask, other.supports, ep.class_id)
        assert np.abs(N.hmnet_forward(ep, w, cfg).logits - N.hmnet_forward(swapped, w, cfg).logits).max() > 0

    def test_empty_support_warning_surfaced(self):
        cfg = small_config()
        ep = small_episode()
        empty = type(ep)(ep.query_image, ep.query_mask, [(ep.supports[0][0], np.zeros_like(ep.query_mask))],
                         ep.class_id)
        p = N.hmnet_forward(empty, N.NetWeights.init(cfg), cfg)
        assert p.warnings and "support" in p.warnings[0].lower()
        with pytest.warns(EmptySupportWarning):
            N.episode_loss(empty, N.NetWeights.init(cfg), cfg, with_grad=False)

    def test_kshot_episode(self):
        cfg = small_config()
        p = N.hmnet_forward(small_episode(k=3), N.NetWeights.init(cfg), cfg)
        assert p.logits.shape == (16, 16, 2)

    def test_block_features(self):
        cfg = small_config(num_block_pairs=2)
        stages, s_mask, q_mask = N.block_features(small_episode(), N.NetWeights.init(cfg), cfg)
        assert [s[0] for s in stages] == ["stem", "smb0", "hmb0", "smb1", "hmb1"]
        assert s_mask.shape == q_mask.shape == (8, 8)


class TestPipelineGradient:
    @pytest.mark.parametrize("name", ["full", "srm-basic", "qim-basic", "smb-only"])
    def test_end_to_end(self, name):
        cfg = small_config().with_ablation(name)
        w = N.NetWeights.init(cfg, seed=1)
        ep = small_episode(1)
        _, grads, _ = N.episode_loss(ep, w, cfg)
        flat_w, flat_g = L.tree_flatten(w), L.tree_flatten(grads)
        names = sorted(flat_w)
        sizes = np.array([flat_w[k].size for k in names])
        rng = np.random.default_rng(0)
        picks = rng.choice(sizes.sum(), size=20, replace=False)
        offsets = np.concatenate([[0], np.cumsum(sizes)])
        num, ana = [], []
        eps = 1e-6
        for p in picks:
            i = np.searchsorted(offsets, p, side="right") - 1
            arr = flat_w[names[i]].reshape(-1)
            j = p - offsets[i]
            old = arr[j]
            arr[j] = old + eps
            lp = N.episode_loss(ep, w, cfg, with_grad=False)[0]
            arr[j] = old - eps
            lm = N.episode_loss(ep, w, cfg, with_grad=False)[0]
            arr[j] = old
            num.append((lp - lm) / (2 * eps))
            ana.append(flat_g[names[i]].reshape(-1)[j])
        num, ana = np.array(num), np.array(ana)
        assert np.linalg.norm(num - ana) / max(np.linalg.norm(num), np.linalg.norm(ana)) <= 1e-3


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        cfg = small_config()
        w = N.NetWeights.init(cfg, seed=3)
        N.save_checkpoint(tmp_path / "ck", w, cfg, extra={"note": "x"})
        w2, cfg2, body = N.load_checkpoint(tmp_path / "ck")
        assert cfg2 == cfg and body["note"] == "x"
        a, b = L.tree_flatten(w), L.tree_flatten(w2)
        assert a.keys() == b.keys()
        for k in a:
            np.testing.assert_array_equal(b[k], a[k].astype(np.float32).astype(np.float64))

    def test_missing_tensor(self, tmp_path):
        cfg = small_config()
        N.save_checkpoint(tmp_path / "ck", N.NetWeights.init(cfg), cfg)
        next((tmp_path / "ck").glob("head*.tensor")).unlink()
        with pytest.raises(MissingTensorError):
            N.load_checkpoint(tmp_path / "ck")

    def test_config_mismatch(self, tmp_path):
        import json
        cfg = small_config()
        N.save_checkpoint(tmp_path / "ck", N.NetWeights.init(cfg), cfg)
        man = tmp_path / "ck" / "manifest.json"
        body = json.loads(man.read_text())
        body["config"]["channels"] = 8
        man.write_text(json.dumps(body))
        with pytest.raises(DimensionMismatchError):
            N.load_checkpoint(tmp_path / "ck")
