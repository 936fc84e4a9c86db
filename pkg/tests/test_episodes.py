import json
import os

import numpy as np
import pytest

from hmamba import episodes as E
from hmamba import tensorfile as tf

# hand-assembled: sorted-key JSON header, newline, little-endian float32 row-major payload
GOLDEN_2X2 = (b'{"byte_order":"little","dims":[2,2],"dtype":"float32","layout":"row-major"}\n'
              b"\x00\x00\x80\x3f"  # 1.0
              b"\x00\x00\x00\xc0"  # -2.0
              b"\x00\x00\x00\x3f"  # 0.5
              b"\x00\x00\x00\x00")  # 0.0


def same_episode(a, b):
    if a.query_image.tobytes() != b.query_image.tobytes() or a.query_mask.tobytes() != b.query_mask.tobytes():
        return False
    if a.class_id != b.class_id or len(a.supports) != len(b.supports):
        return False
    return all(x.tobytes() == y.tobytes() and m.tobytes() == n.tobytes()
               for (x, m), (y, n) in zip(a.supports, b.supports))


class TestTensorFile:
    def test_golden_bytes(self):
        x = np.array([[1.0, -2.0], [0.5, 0.0]])
        assert tf.encode(x) == GOLDEN_2X2
        np.testing.assert_array_equal(tf.decode(GOLDEN_2X2), x)

    def test_round_trip(self, tmp_path, rng):
        for shape in [(), (0,), (3,), (2, 3, 4)]:
            x = rng.normal(size=shape).astype(np.float32)
            tf.write_tensor(tmp_path / "x.tensor", x)
            y = tf.read_tensor(tmp_path / "x.tensor")
            assert y.shape == x.shape and y.tobytes() == x.tobytes()

    def test_payload_length(self):
        data = tf.encode(np.zeros((3, 5)))
        assert len(data) - data.index(b"\n") - 1 == 4 * 15

    def test_errors_are_distinct(self):
        with pytest.raises(tf.TruncatedPayloadError):
            tf.decode(GOLDEN_2X2[:-1])
        with pytest.raises(tf.DimensionMismatchError):
            tf.decode(GOLDEN_2X2 + b"\x00" * 4)
        with pytest.raises(tf.DimensionMismatchError):
            tf.decode(GOLDEN_2X2, expect_dims=(4,))
        with pytest.raises(tf.MalformedHeaderError):
            tf.decode(b"not json\n" + b"\x00" * 4)
        with pytest.raises(tf.MalformedHeaderError):
            tf.decode(GOLDEN_2X2.replace(b"little", b"big"))
        with pytest.raises(tf.MalformedHeaderError):
            tf.decode(b"\x00" * 16)
        codes = {c.code for c in (tf.MalformedHeaderError, tf.TruncatedPayloadError,
                                  tf.DimensionMismatchError, tf.MissingTensorError)}
        assert len(codes) == 4

    def test_missing_file(self, tmp_path):
        with pytest.raises(tf.MissingTensorError):
            tf.read_tensor(tmp_path / "nope.tensor")
        with pytest.raises(tf.MissingTensorError):
            tf.load_tensors(tmp_path)


class TestGenerate:
    def test_determinism(self):
        spec = E.SyntheticEpisodeSpec(k=2)
        assert same_episode(E.generate_episode(spec, 11), E.generate_episode(spec, 11))
        assert not same_episode(E.generate_episode(spec, 11), E.generate_episode(spec, 12))

    @pytest.mark.parametrize("seed", range(10))
    def test_mask_consistency(self, seed):
        spec = E.SyntheticEpisodeSpec()
        ep = E.generate_episode(spec, seed)
        poses = [ep.meta["query_pose"]] + ep.meta["support_poses"]
        masks = [ep.query_mask] + [m for _, m in ep.supports]
        images = [ep.query_image] + [i for i, _ in ep.supports]
        for pose, mask, img in zip(poses, masks, images):
            shape, rgb = E._render(spec.image_size, ep.family, E._Pose(**pose))
            np.testing.assert_array_equal(mask.astype(bool), shape)
            np.testing.assert_array_equal(img[shape], rgb[shape].astype(np.float32))
            lo, hi = spec.fg_bounds
            assert lo <= mask.mean() <= hi

    def test_masks_binary(self):
        ep = E.generate_episode(E.SyntheticEpisodeSpec(k=3), 5)
        for m in [ep.query_mask] + [m for _, m in ep.supports]:
            assert m.dtype == np.uint8 and set(np.unique(m)) <= {0, 1}
        assert ep.query_image.dtype == np.float32 and ep.query_image.min() >= 0 and ep.query_image.max() <= 1

    @pytest.mark.parametrize("seed", range(5))
    def test_zero_jitter_translation(self, seed):
        spec = E.SyntheticEpisodeSpec(jitter=E.Jitter.none())
        ep = E.generate_episode(spec, seed)

        def crop(img, mask):
            rows, cols = np.nonzero(mask)
            sl = (slice(rows.min(), rows.max() + 1), slice(cols.min(), cols.max() + 1))
            m = mask[sl].astype(bool)
            return m, np.where(m[..., None], img[sl], 0)

        qm, qi = crop(ep.query_image, ep.query_mask)
        sm, si = crop(*ep.supports[0])
        np.testing.assert_array_equal(qm, sm)
        np.testing.assert_array_equal(qi, si)

    def test_fg_bounds_error(self):
        with pytest.raises(E.EpisodeError):
            E.generate_episode(E.SyntheticEpisodeSpec(fg_bounds=(0.95, 1.0)), 0)
        with pytest.raises(E.EpisodeError):
            E.generate_episode(E.SyntheticEpisodeSpec(k=0), 0)

    def test_spec_round_trip(self):
        spec = E.SyntheticEpisodeSpec(k=3, jitter=E.Jitter(scale=0.3), families=("ring",))
        assert E.SyntheticEpisodeSpec.from_dict(json.loads(json.dumps(spec.to_dict()))) == spec


class TestSplits:
    @pytest.mark.parametrize("fold", range(E.N_FOLDS))
    def test_disjoint(self, fold):
        train, novel = E.split_families(fold)
        assert not set(train) & set(novel) and set(train) | set(novel) == set(E.FAMILIES)
        tr = E.generate_episodes(E.SyntheticEpisodeSpec(families=train), 30, 0)
        nv = E.generate_episodes(E.SyntheticEpisodeSpec(families=novel), 30, 1)
        assert E.audit_split(tr, nv) == set()
        assert {e.family for e in nv} <= set(novel)

    def test_audit_detects_overlap(self):
        a = E.generate_episodes(E.SyntheticEpisodeSpec(families=("ring", "cross")), 5, 0)
        b = E.generate_episodes(E.SyntheticEpisodeSpec(families=("ring", "ellipse")), 5, 0)
        assert "ring" in E.audit_split(a, b)

    def test_bad_fold(self):
        with pytest.raises(E.EpisodeError):
            E.split_families(4)


class TestPersistence:
    def test_round_trip(self, tmp_path):
        ep = E.generate_episode(E.SyntheticEpisodeSpec(k=2), 7)
        E.save_episode(ep, tmp_path / "ep")
        back = E.load_episode(tmp_path / "ep")
        assert same_episode(ep, back) and back.meta == ep.meta

    def test_many(self, tmp_path):
        eps = E.generate_episodes(E.SyntheticEpisodeSpec(), 3, 0)
        E.save_episodes(eps, tmp_path)
        back = E.load_episodes(tmp_path)
        assert all(same_episode(a, b) for a, b in zip(eps, back)) and len(back) == 3

    def test_truncated(self, tmp_path):
        E.save_episode(E.generate_episode(E.SyntheticEpisodeSpec(), 0), tmp_path / "ep")
        path = tmp_path / "ep" / "query_image.tensor"
        data = path.read_bytes()
        path.write_bytes(data[:-10])
        with pytest.raises(tf.TruncatedPayloadError):
            E.load_episode(tmp_path / "ep")

    def test_missing_file(self, tmp_path):
        E.save_episode(E.generate_episode(E.SyntheticEpisodeSpec(), 0), tmp_path / "ep")
        os.remove(tmp_path / "ep" / "support_0_mask.tensor")
        with pytest.raises(tf.MissingTensorError):
            E.load_episode(tmp_path / "ep")

    def test_malformed_header(self, tmp_path):
        E.save_episode(E.generate_episode(E.SyntheticEpisodeSpec(), 0), tmp_path / "ep")
        path = tmp_path / "ep" / "query_mask.tensor"
        path.write_bytes(b"{broken\n" + path.read_bytes().split(b"\n", 1)[1])
        with pytest.raises(tf.MalformedHeaderError):
            E.load_episode(tmp_path / "ep")
