import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hmamba import geometry as G
from hmamba.ssm import DomainError

from conftest import fd_error

# Hand-enumerated SRM sequences for a 4x4 query. "Qrc" is query pixel (r, c);
# "Src" is pixel (r, c) of the (4/alpha x 4/alpha) support map.
S2 = {0: "S00 S01 S10 S11", 1: "S11 S10 S01 S00", 2: "S00 S10 S01 S11", 3: "S11 S01 S10 S00"}
TABLES = {
    (2, 0): [S2[0], "Q00 Q01 Q10 Q11", S2[0], "Q02 Q03 Q12 Q13", S2[0], "Q20 Q21 Q30 Q31", S2[0], "Q22 Q23 Q32 Q33"],
    (2, 1): [S2[1], "Q33 Q32 Q23 Q22", S2[1], "Q31 Q30 Q21 Q20", S2[1], "Q13 Q12 Q03 Q02", S2[1], "Q11 Q10 Q01 Q00"],
    (2, 2): [S2[2], "Q00 Q10 Q01 Q11", S2[2], "Q20 Q30 Q21 Q31", S2[2], "Q02 Q12 Q03 Q13", S2[2], "Q22 Q32 Q23 Q33"],
    (2, 3): [S2[3], "Q33 Q23 Q32 Q22", S2[3], "Q13 Q03 Q12 Q02", S2[3], "Q31 Q21 Q30 Q20", S2[3], "Q11 Q01 Q10 Q00"],
    (1, 0): ["S00 S01 S02 S03 S10 S11 S12 S13 S20 S21 S22 S23 S30 S31 S32 S33",
             "Q00 Q01 Q02 Q03 Q10 Q11 Q12 Q13 Q20 Q21 Q22 Q23 Q30 Q31 Q32 Q33"],
    (1, 1): ["S33 S32 S31 S30 S23 S22 S21 S20 S13 S12 S11 S10 S03 S02 S01 S00",
             "Q33 Q32 Q31 Q30 Q23 Q22 Q21 Q20 Q13 Q12 Q11 Q10 Q03 Q02 Q01 Q00"],
    (1, 2): ["S00 S10 S20 S30 S01 S11 S21 S31 S02 S12 S22 S32 S03 S13 S23 S33",
             "Q00 Q10 Q20 Q30 Q01 Q11 Q21 Q31 Q02 Q12 Q22 Q32 Q03 Q13 Q23 Q33"],
    (1, 3): ["S33 S23 S13 S03 S32 S22 S12 S02 S31 S21 S11 S01 S30 S20 S10 S00",
             "Q33 Q23 Q13 Q03 Q32 Q22 Q12 Q02 Q31 Q21 Q11 Q01 Q30 Q20 Q10 Q00"],
}


def labels(layout):
    """Render a layout as 'S..'/'Q..' labels using global query coordinates."""
    h, w = layout.support_shape
    n_s = h * w
    W = layout.query_shape[1]
    out = []
    for i in layout.index:
        if i < n_s:
            out.append(f"S{i // w}{i % w}")
        else:
            q = i - n_s
            out.append(f"Q{q // W}{q % W}")
    return out


def coded_maps(alpha, h=4, w=4):
    """Support/query maps whose single channel encodes the pixel label."""
    q = np.array([[[1000 + 10 * r + c] for c in range(w)] for r in range(h)], dtype=float)
    hs, ws = h // alpha, w // alpha
    s = np.array([[[10 * r + c] for c in range(ws)] for r in range(hs)], dtype=float)
    return s, q


def decode(seq):
    return [("Q%02d" % (v - 1000)) if v >= 1000 else ("S%02d" % v) for v in seq[:, 0].astype(int)]


class TestSrmLayout:
    @pytest.mark.parametrize("alpha", [1, 2])
    @pytest.mark.parametrize("d", [0, 1, 2, 3])
    def test_hand_tables(self, alpha, d):
        s, q = coded_maps(alpha)
        seq, layout = G.assemble_srm_sequence(s, G.split_patches(q, alpha, d), d)
        expected = " ".join(TABLES[(alpha, d)]).split()
        assert labels(layout) == expected
        assert decode(seq) == expected
        assert len(seq) == 2 * 16

    @pytest.mark.parametrize("alpha", [1, 2])
    @pytest.mark.parametrize("d", [0, 1, 2, 3])
    def test_support_repeated_alpha_squared(self, alpha, d):
        s, q = coded_maps(alpha)
        _, layout = G.assemble_srm_sequence(s, G.split_patches(q, alpha, d), d)
        n_s = layout.support_len
        counts = np.bincount(layout.index, minlength=n_s + 16)
        assert np.all(counts[:n_s] == alpha * alpha)
        assert np.all(counts[n_s:] == 1)

    @settings(max_examples=30, deadline=None)
    @given(st.sampled_from([1, 2, 4]), st.integers(1, 3), st.integers(1, 3), st.sampled_from([0, 1, 2, 3]))
    def test_length_always_2hw(self, alpha, ph, pw, d):
        h, w = ph * alpha, pw * alpha
        s = np.zeros((ph, pw, 2))
        q = np.zeros((h, w, 2))
        seq, layout = G.assemble_srm_sequence(s, G.split_patches(q, alpha, d), d)
        assert len(seq) == 2 * h * w
        assert len(layout.boundaries()) == 2 * alpha * alpha

    def test_no_recap_has_single_head(self):
        s, q = coded_maps(2)
        seq, layout = G.assemble_srm_sequence(s, G.split_patches(q, 2, 0), 0, recap=False)
        assert decode(seq)[:4] == S2[0].split()
        assert sum(1 for v in decode(seq) if v.startswith("S")) == 4
        assert len(seq) == 4 + 16

    def test_scatter_inverts_gather(self, rng):
        s = rng.normal(size=(2, 2, 3))
        q = rng.normal(size=(8, 8, 3))
        for d in range(4):
            seq, layout = G.assemble_srm_sequence(s, G.split_patches(q, 4, d), d)
            q_back, head = G.scatter_srm_outputs(seq, layout)
            np.testing.assert_array_equal(q_back, q)
            np.testing.assert_array_equal(head, s)

    def test_mismatched_patch_shape(self):
        with pytest.raises(DomainError):
            G.assemble_srm_sequence(np.zeros((2, 2, 1)), [np.zeros((3, 3, 1))] * 4, 0)
        with pytest.raises(DomainError):
            G.assemble_srm_sequence(np.zeros((2, 2, 1)), [np.zeros((2, 2, 1))] * 3, 0)

    def test_extract_requires_trace(self):
        from hmamba.ssm import ScanResult
        s, q = coded_maps(2)
        seq, layout = G.assemble_srm_sequence(s, G.split_patches(q, 2, 0), 0)
        with pytest.raises(G.LayoutError):
            G.extract_srm_outputs(ScanResult(seq, seq[-1]), layout)
        trace = np.arange(len(seq))[:, None, None] * np.ones((1, 1, 2))
        _, _, h_s = G.extract_srm_outputs(ScanResult(seq, seq[-1], trace), layout)
        assert h_s[0, 0] == 3  # state after the 4-pixel head support block


class TestFlatten:
    @pytest.mark.parametrize("d", [0, 1, 2, 3])
    def test_round_trip(self, d, rng):
        f = rng.normal(size=(3, 5, 2))
        seq, layout = G.flatten_direction(f, d)
        np.testing.assert_array_equal(G.unflatten_direction(seq, layout, layout.checksum), f)

    def test_directions(self):
        f = np.arange(6).reshape(2, 3, 1)
        assert G.flatten_direction(f, 0)[0][:, 0].tolist() == [0, 1, 2, 3, 4, 5]
        assert G.flatten_direction(f, 1)[0][:, 0].tolist() == [5, 4, 3, 2, 1, 0]
        assert G.flatten_direction(f, 2)[0][:, 0].tolist() == [0, 3, 1, 4, 2, 5]
        assert G.flatten_direction(f, 3)[0][:, 0].tolist() == [5, 2, 4, 1, 3, 0]

    def test_checksum_mismatch(self, rng):
        f = rng.normal(size=(3, 3, 1))
        seq, l0 = G.flatten_direction(f, 0)
        _, l2 = G.flatten_direction(f, 2)
        with pytest.raises(G.LayoutError):
            G.unflatten_direction(seq, l2, l0.checksum)

    def test_bad_direction(self):
        with pytest.raises(DomainError):
            G.flatten_direction(np.zeros((2, 2, 1)), 4)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(1, 6), st.integers(1, 6), st.sampled_from([0, 1, 2, 3]))
    def test_bijection(self, h, w, d):
        order = G.direction_order(h, w, d)
        assert sorted(order.tolist()) == list(range(h * w))


class TestPooling:
    def test_split_patches_order(self):
        f = np.arange(16).reshape(4, 4, 1)
        p = G.split_patches(f, 2, 0)
        assert p[1][:, :, 0].tolist() == [[2, 3], [6, 7]]
        p2 = G.split_patches(f, 2, 2)
        assert p2[1][:, :, 0].tolist() == [[8, 9], [12, 13]]

    def test_indivisible(self):
        with pytest.raises(DomainError):
            G.split_patches(np.zeros((5, 4, 1)), 2)
        with pytest.raises(DomainError):
            G.downsample(np.zeros((5, 4, 1)), None, 2)

    def test_masked_mean(self):
        f = np.arange(16, dtype=float).reshape(4, 4, 1)
        m = np.zeros((4, 4), bool)
        m[0, 0] = m[1, 1] = True
        pooled, pm = G.downsample(f, m, 2)
        assert pooled[0, 0, 0] == (0 + 5) / 2
        assert pooled[1, 1, 0] == 0 and not pm[1, 1] and pm[0, 0]

    def test_unmasked_mean(self):
        f = np.arange(16, dtype=float).reshape(4, 4, 1)
        pooled, pm = G.downsample(f, None, 2)
        assert pooled[0, 1, 0] == (2 + 3 + 6 + 7) / 4 and pm.all()

    def test_upsample(self):
        f = np.array([[[1.0], [2.0]]])
        assert G.upsample(f, 2)[:, :, 0].tolist() == [[1, 1, 2, 2], [1, 1, 2, 2]]


class TestGradients:
    def test_downsample(self, rng):
        f = rng.normal(size=(8, 8, 3))
        m = rng.random((8, 8)) > 0.5
        gy = rng.normal(size=(2, 2, 3))
        ana = G.downsample_backward(gy, m, 4)
        assert fd_error(lambda: (G.downsample(f, m, 4)[0] * gy).sum(), f, ana) <= 1e-4
        ana = G.downsample_backward(gy, None, 4)
        assert fd_error(lambda: (G.downsample(f, None, 4)[0] * gy).sum(), f, ana) <= 1e-4

    def test_upsample(self, rng):
        f = rng.normal(size=(3, 3, 2))
        gy = rng.normal(size=(6, 6, 2))
        assert fd_error(lambda: (G.upsample(f, 2) * gy).sum(), f, G.upsample_backward(gy, 2)) <= 1e-4

    def test_gather_scatter(self, rng):
        s = rng.normal(size=(2, 2, 3))
        q = rng.normal(size=(8, 8, 3))
        _, layout = G.assemble_srm_sequence(s, G.split_patches(q, 4, 1), 1)
        gy = rng.normal(size=(len(layout), 3))
        gs, gq = G.gather_sequence_backward(gy, layout)
        assert fd_error(lambda: (G.gather_sequence(s, q, layout) * gy).sum(), s, gs) <= 1e-4
        assert fd_error(lambda: (G.gather_sequence(s, q, layout) * gy).sum(), q, gq) <= 1e-4
        y = rng.normal(size=(len(layout), 3))
        g_q, g_h = rng.normal(size=(8, 8, 3)), rng.normal(size=(2, 2, 3))
        ana = G.scatter_srm_outputs_backward(g_q, g_h, layout)

        def f():
            a, b = G.scatter_srm_outputs(y, layout)
            return (a * g_q).sum() + (b * g_h).sum()
        assert fd_error(f, y, ana) <= 1e-4
