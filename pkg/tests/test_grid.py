import itertools

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from oracles import enumerate_collisions_sum, rope_reference
from t4dg.autodiff import Linear
from t4dg.grid import (
    GridShape,
    TokenGrid,
    collapse_position,
    collapse_position_sum,
    compress_temporal,
    flatten_index,
    grid_positions,
    patchify_temporal,
    rope_pair_groups,
    rope_rotate,
    unflatten_index,
    unpatchify_temporal,
)


class TestFlatten:
    def test_origin(self):
        assert flatten_index(0, 0, 0, 0, GridShape(2, 2, 3, 4)) == 0

    def test_view_stride(self):
        assert flatten_index(1, 0, 0, 0, GridShape(2, 2, 3, 4)) == 24

    def test_out_of_range(self):
        with pytest.raises(IndexError):
            flatten_index(0, 2, 0, 0, GridShape(2, 2, 3, 4))
        with pytest.raises(IndexError):
            unflatten_index(48, GridShape(2, 2, 3, 4))

    def test_bijection(self):
        s = GridShape(3, 2, 2, 3)
        idx = [flatten_index(*c, s) for c in itertools.product(range(3), range(2), range(2), range(3))]
        assert sorted(idx) == list(range(s.n_tokens))

    @given(st.integers(1, 6), st.integers(1, 6), st.integers(1, 6), st.integers(1, 6), st.data())
    def test_round_trip(self, V, T, H, W, data):
        s = GridShape(V, T, H, W, T_max=max(T, 1))
        i = data.draw(st.integers(0, s.n_tokens - 1))
        assert flatten_index(*unflatten_index(i, s), s) == i

    def test_token_grid_unflatten(self):
        arr = np.random.default_rng(0).standard_normal((2, 3, 2, 2, 4)).astype(np.float32)
        g = TokenGrid.from_array(arr)
        np.testing.assert_array_equal(g.unflatten(), arr)
        assert g.tokens.data[flatten_index(1, 2, 0, 1, g.shape)].tolist() == arr[1, 2, 0, 1].tolist()


class TestCollapse:
    def test_origin(self):
        assert collapse_position(0, 0, 0, 0, 8)[0] == 0

    def test_offset(self):
        assert collapse_position(2, 3, 0, 0, 29) == (61, 0, 0)

    def test_t_beyond_tmax(self):
        with pytest.raises(ValueError):
            collapse_position(0, 8, 0, 0, 8)

    @pytest.mark.parametrize("T_max", [8, 29])
    def test_injective_over_grid(self, T_max):
        ps = {collapse_position(v, t, 0, 0, T_max)[0] for v in range(16) for t in range(T_max)}
        assert len(ps) == 16 * T_max

    def test_sum_variant_collides(self):
        assert collapse_position_sum(1, 2, 0, 0)[0] == collapse_position_sum(2, 1, 0, 0)[0] == 3
        assert collapse_position_sum(0, 0, 0, 0)[0] == 0

    def test_sum_collision_count_matches_enumeration(self):
        cells = list(itertools.product(range(4), range(4)))
        count = sum(1 for a, b in itertools.combinations(cells, 2) if collapse_position_sum(*a, 0, 0) == collapse_position_sum(*b, 0, 0))
        assert count == enumerate_collisions_sum(4, 4) == 14

    def test_grid_positions_modes(self):
        s = GridShape(2, 3, 1, 1, T_max=4)
        np.testing.assert_array_equal(grid_positions(s)[:, 0], [0, 1, 2, 4, 5, 6])
        np.testing.assert_array_equal(grid_positions(s, "sum")[:, 0], [0, 1, 2, 1, 2, 3])


class TestRope:
    def test_zero_position_identity(self):
        x = np.random.default_rng(0).standard_normal((5, 12))
        np.testing.assert_array_equal(rope_rotate(x, np.zeros((5, 3))).data, x.astype(np.float32))

    @given(st.integers(0, 1000), st.sampled_from([6, 8, 12, 16, 64]))
    def test_norm_preserved(self, seed, d):
        rng = np.random.default_rng(seed)
        x = rng.standard_normal((4, d))
        pos = rng.integers(0, 50, (4, 3))
        out = rope_rotate(x, pos).data
        np.testing.assert_allclose(np.linalg.norm(out, axis=-1), np.linalg.norm(x, axis=-1), rtol=1e-5)

    @pytest.mark.parametrize("d", [6, 8, 16, 64])
    def test_matches_reference(self, d):
        rng = np.random.default_rng(d)
        x = rng.standard_normal((7, d))
        pos = rng.integers(0, 40, (7, 3)).astype(float)
        np.testing.assert_allclose(rope_rotate(x, pos).data, rope_reference(x, pos), atol=1e-5)

    def test_pair_groups_cover_width(self):
        for d in range(2, 130, 2):
            counts, _ = rope_pair_groups(d)
            assert sum(counts) == d // 2

    @given(st.integers(0, 10_000))
    def test_logits_depend_on_offset_only(self, seed):
        rng = np.random.default_rng(seed)
        d = 16
        q, k = rng.standard_normal((2, d))
        p1, p2 = rng.integers(0, 30, 3), rng.integers(0, 30, 3)
        shift = rng.integers(-20, 20, 3)

        def logit(a, b):
            rq = rope_rotate(q[None].astype(np.float64), a[None].astype(float)).data[0]
            rk = rope_rotate(k[None].astype(np.float64), b[None].astype(float)).data[0]
            return float(rq @ rk)

        assert abs(logit(p1, p2) - logit(p1 + shift, p2 + shift)) <= 1e-4


class TestCompress:
    def test_latent_steps(self):
        frames = np.zeros((2, 8, 8, 8, 3))
        assert patchify_temporal(frames, 4).shape[:2] == (2, 2)

    def test_round_trip(self):
        frames = np.random.default_rng(0).uniform(size=(2, 8, 8, 12, 3))
        np.testing.assert_array_equal(unpatchify_temporal(patchify_temporal(frames, 4), 4), frames)

    def test_factor_one_is_per_frame(self):
        frames = np.random.default_rng(1).uniform(size=(1, 3, 4, 4, 3))
        tok = patchify_temporal(frames, 1)
        assert tok.shape == (1, 3, 1, 1, 48)
        np.testing.assert_array_equal(tok[0, 2, 0, 0], frames[0, 2].reshape(-1))

    def test_channel_order(self):
        frames = np.random.default_rng(2).uniform(size=(1, 4, 4, 4, 3))
        tok = patchify_temporal(frames, 4)[0, 0, 0, 0].reshape(4, 4, 4, 3)
        np.testing.assert_array_equal(tok, frames[0])

    def test_non_divisible(self):
        with pytest.raises(ValueError):
            patchify_temporal(np.zeros((1, 6, 8, 8, 3)), 4)
        with pytest.raises(ValueError):
            patchify_temporal(np.zeros((1, 4, 6, 8, 3)), 4)

    def test_zero_frames_give_bias(self):
        rng = np.random.default_rng(0)
        proj = Linear(4 * 16 * 3, 8, rng)
        proj.bias.data[:] = rng.standard_normal(8)
        grid = compress_temporal(np.zeros((2, 8, 8, 8, 3)), 4, proj)
        assert grid.shape == GridShape(2, 2, 2, 2, 8, 2)
        np.testing.assert_array_equal(grid.tokens.data, np.broadcast_to(proj.bias.data, grid.tokens.shape))


def test_shape_validation():
    with pytest.raises(ValueError):
        GridShape(0, 1, 1, 1)
    with pytest.raises(ValueError):
        GridShape(1, 9, 1, 1, T_max=8)
    with pytest.raises(ValueError):
        GridShape(1, 1, 1, 1, d=7)
