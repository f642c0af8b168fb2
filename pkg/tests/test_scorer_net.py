import math

import numpy as np
import pytest

from chronos.scorer_net import (
    CheckpointError,
    ChronosConfig,
    count_flops,
    default_grid,
    forward,
    init_params,
    load_checkpoint,
    load_ensemble,
    multiscale_block,
    project,
    save_checkpoint,
    score_trajectories,
)
from chronos.signal import Standardizer
from chronos.synthgen import SynthSpec, generate
from oracles import scalar_forward

MINIMAL = ChronosConfig(l_tail=32, n_proj=2, n_conv=2, kernel_lengths=(3, 5), n_blk=2)


def zero_weights(params):
    for _, t in params.tensors():
        t[...] = 0.0
    return params


class TestConfig:
    def test_channel_width(self):
        cfg = ChronosConfig(n_proj=16, n_conv=8, kernel_lengths=(10, 20, 40))
        assert cfg.channels == 16 + 3 * 8 == 40

    def test_kernels_must_increase(self):
        with pytest.raises(ValueError, match="strictly increasing"):
            ChronosConfig(kernel_lengths=(40, 20, 80))

    def test_kernel_vs_l_tail(self):
        with pytest.raises(ValueError, match="exceeds l_tail"):
            ChronosConfig(l_tail=32, kernel_lengths=(20, 40, 80))

    def test_default_grid_cardinality(self):
        assert len(default_grid()) == 18

    def test_dict_round_trip(self):
        cfg = ChronosConfig(l_tail=64, n_proj=4, kernel_lengths=(3, 5), mlp_hidden=7, seed=9)
        assert ChronosConfig.from_dict(cfg.to_dict()) == cfg


class TestInit:
    def test_deterministic(self):
        a = init_params(MINIMAL, seed=4)
        b = init_params(MINIMAL, seed=4)
        for (na, ta), (nb, tb) in zip(a.tensors(), b.tensors()):
            assert na == nb
            assert np.array_equal(ta, tb)

    def test_seed_changes_weights(self):
        a = init_params(MINIMAL, seed=4)
        b = init_params(MINIMAL, seed=5)
        assert not np.array_equal(a.proj_w, b.proj_w)

    def test_biases_exactly_zero(self):
        p = init_params(MINIMAL, seed=0)
        for name, t in p.tensors():
            if name.endswith("_b"):
                assert np.all(t == 0.0), name

    def test_zero_weight_model_scores_half(self):
        p = zero_weights(init_params(MINIMAL, seed=0))
        scores, _ = forward(p, np.random.default_rng(0).normal(size=(3, 32)))
        assert np.all(scores == 0.5)


class TestProject:
    def test_scalar_example(self):
        cfg = ChronosConfig(l_tail=2, n_proj=1, n_conv=1, kernel_lengths=(1,), n_blk=1)
        p = init_params(cfg, seed=0)
        p.proj_w[:] = [2.0]
        p.proj_b[:] = [0.0]
        out = project(np.array([[1.0, 3.0]]), p)
        assert out.tolist() == [[[2.0, 6.0]]]

    def test_zero_input_broadcasts_bias(self):
        p = init_params(MINIMAL, seed=1)
        p.proj_b[:] = [0.5, -1.5]
        out = project(np.zeros((1, 32)), p)
        assert np.all(out[0, 0] == 0.5)
        assert np.all(out[0, 1] == -1.5)

    def test_row_count_matches_n_proj(self):
        cfg = ChronosConfig(n_proj=8)
        p = init_params(cfg, seed=0)
        out = project(np.zeros((1, cfg.l_tail)), p)
        assert out.shape == (1, 8, cfg.l_tail)

    def test_length_mismatch(self):
        p = init_params(MINIMAL, seed=0)
        with pytest.raises(ValueError, match="length"):
            project(np.zeros((1, 31)), p)


class TestMultiscaleBlock:
    def test_output_channel_count(self):
        p = init_params(MINIMAL, seed=2)
        x = np.random.default_rng(0).normal(size=(2, MINIMAL.channels, 32))
        out, _ = multiscale_block(x, p.blocks[0])
        assert out.shape == (2, MINIMAL.n_proj + MINIMAL.k_ker * MINIMAL.n_conv, 32)

    def test_zero_input_gives_relu_of_bias(self):
        p = init_params(MINIMAL, seed=2)
        blk = p.blocks[0]
        blk.conv_bs[0][:] = [0.7, -0.3]
        blk.conv_bs[1][:] = [-0.2, 0.4]
        out, _ = multiscale_block(np.zeros((1, MINIMAL.channels, 32)), blk)
        n = MINIMAL.n_proj
        assert np.all(out[0, :n] == 0.0)  # bottleneck bias is zero
        assert np.all(out[0, n] == 0.7)
        assert np.all(out[0, n + 1] == 0.0)
        assert np.all(out[0, n + 2] == 0.0)
        assert np.all(out[0, n + 3] == 0.4)

    def test_length_preserved_at_full_scale(self):
        cfg = ChronosConfig()  # l_tail 2048
        p = init_params(cfg, seed=0)
        x = np.zeros((1, cfg.channels, cfg.l_tail))
        out, _ = multiscale_block(x, p.blocks[0])
        assert out.shape[-1] == 2048

    def test_channel_mismatch(self):
        p = init_params(MINIMAL, seed=2)
        with pytest.raises(ValueError, match="channels"):
            multiscale_block(np.zeros((1, 3, 32)), p.blocks[0])


class TestForward:
    def test_hand_computed_minimal_network(self):
        # l_tail 4, one projection channel, one width-1 conv, one block: small
        # enough to recompute with plain scalar arithmetic below.
        cfg = ChronosConfig(l_tail=4, n_proj=1, n_conv=1, kernel_lengths=(1,), n_blk=1)
        p = init_params(cfg, seed=0)
        p.proj_w[:] = [0.5]
        p.proj_b[:] = [0.1]
        p.input_shortcut_w[:] = [[1.0], [-0.5]]
        p.input_shortcut_b[:] = [0.0, 0.2]
        blk = p.blocks[0]
        blk.bottleneck_w[:] = [[0.3, 0.6]]
        blk.bottleneck_b[:] = [0.05]
        blk.conv_ws[0][:] = [[[2.0]]]
        blk.conv_bs[0][:] = [-0.1]
        blk.shortcut_w[:] = [[0.1, 0.2], [0.3, 0.4]]
        blk.shortcut_b[:] = [0.0, -0.2]
        p.mlp_hidden_w[:] = [[1.0, -1.0], [0.5, 0.5]]
        p.mlp_hidden_b[:] = [0.0, 0.1]
        p.mlp_out_w[:] = [1.5, -0.5]
        p.mlp_out_b[:] = [0.05]

        sig = [0.4, -1.2, 2.0, 0.0]
        z = [0.5 * s + 0.1 for s in sig]
        o0 = [[1.0 * v + 0.0 for v in z], [-0.5 * v + 0.2 for v in z]]
        bn = [0.3 * a + 0.6 * b + 0.05 for a, b in zip(*o0)]
        h1 = [max(0.0, 2.0 * v - 0.1) for v in bn]
        sc = [
            [0.1 * a + 0.2 * b + 0.0 for a, b in zip(*o0)],
            [0.3 * a + 0.4 * b - 0.2 for a, b in zip(*o0)],
        ]
        o1 = [[m + s for m, s in zip(bn, sc[0])], [m + s for m, s in zip(h1, sc[1])]]
        acc = [[a + b for a, b in zip(o0[c], o1[c])] for c in range(2)]
        feats = [sum(row) / 4.0 for row in acc]
        h = [
            max(0.0, 1.0 * feats[0] - 1.0 * feats[1] + 0.0),
            max(0.0, 0.5 * feats[0] + 0.5 * feats[1] + 0.1),
        ]
        logit = 1.5 * h[0] - 0.5 * h[1] + 0.05
        expected = 1.0 / (1.0 + math.exp(-logit))

        score, _ = forward(p, np.array([sig]))
        assert score[0] == pytest.approx(expected, rel=1e-12)

    def test_matches_scalar_oracle(self):
        p = init_params(MINIMAL, seed=6)
        rng = np.random.default_rng(12)
        for _, t in p.tensors():
            t += rng.normal(scale=0.1, size=t.shape)
        xs = rng.normal(size=(5, 32))
        valid = np.array([32, 7, 19, 32, 1])
        scores, _ = forward(p, xs, valid)
        for i in range(5):
            ref = scalar_forward(p, xs[i], int(valid[i]))
            assert abs(scores[i] - ref) / ref < 1e-10

    def test_scores_strictly_inside_unit_interval(self):
        p = init_params(MINIMAL, seed=3)
        rng = np.random.default_rng(0)
        scores, _ = forward(p, rng.normal(size=(16, 32)) * 50)
        assert np.all(scores > 0.0) and np.all(scores < 1.0)

    def test_batch_permutation_equivariance(self):
        p = init_params(MINIMAL, seed=3)
        rng = np.random.default_rng(5)
        xs = rng.normal(size=(6, 32))
        valid = rng.integers(1, 33, size=6)
        scores, _ = forward(p, xs, valid)
        perm = rng.permutation(6)
        permuted, _ = forward(p, xs[perm], valid[perm])
        assert np.array_equal(permuted, scores[perm])

    def test_deterministic_across_batch_composition(self):
        p = init_params(MINIMAL, seed=3)
        rng = np.random.default_rng(5)
        xs = rng.normal(size=(4, 32))
        full, _ = forward(p, xs)
        solo, _ = forward(p, xs[2:3])
        assert solo[0] == full[2]

    def test_tail_window_dependence(self):
        # steps older than the final l_tail positions cannot affect the score
        spec = SynthSpec(n_questions=1, pool_size=2, length_range=(50, 60), seed=1)
        trajs = generate(spec)
        cfg = ChronosConfig(l_tail=16, n_proj=2, n_conv=2, kernel_lengths=(3, 5), n_blk=1)
        p = init_params(cfg, seed=0, standardizer=Standardizer(1.0, 0.5), k_stat=spec.k_stat)
        base = score_trajectories(p, trajs)
        mutated = []
        for t in trajs:
            steps = list(t.steps)
            steps[0] = type(steps[0])((0.0,) * spec.k_stat)  # rewrite far-past history
            mutated.append(type(t)(t.question_id, t.trajectory_id, t.answer, tuple(steps), t.label))
        again = score_trajectories(p, mutated)
        assert [s.score for s in again] == [s.score for s in base]


class TestFlops:
    def test_zero_batch(self):
        assert count_flops(ChronosConfig(), 0) == 0

    def test_linear_in_batch(self):
        cfg = ChronosConfig()
        assert count_flops(cfg, 60) == 2 * count_flops(cfg, 30)

    def test_default_config_order_of_magnitude(self):
        flops = count_flops(ChronosConfig(), 30)
        assert 1e9 <= flops <= 1e10


class TestCheckpoint:
    def test_round_trip_scores_identical(self, tmp_path):
        p = init_params(MINIMAL, seed=8, standardizer=Standardizer(0.3, 1.7), k_stat=4)
        path = tmp_path / "model.chrs"
        save_checkpoint(p, path)
        loaded = load_checkpoint(path)
        assert loaded.config == p.config
        assert loaded.standardizer == p.standardizer
        assert loaded.k_stat == 4
        xs = np.random.default_rng(0).normal(size=(3, 32))
        a, _ = forward(p, xs)
        b, _ = forward(loaded, xs)
        assert np.array_equal(a, b)

    def test_corrupted_magic(self, tmp_path):
        p = init_params(MINIMAL, seed=8)
        path = tmp_path / "model.chrs"
        save_checkpoint(p, path)
        raw = bytearray(path.read_bytes())
        raw[:4] = b"XXXX"
        path.write_bytes(bytes(raw))
        with pytest.raises(CheckpointError, match="magic"):
            load_checkpoint(path)

    def test_truncated_file(self, tmp_path):
        p = init_params(MINIMAL, seed=8)
        path = tmp_path / "model.chrs"
        save_checkpoint(p, path)
        path.write_bytes(path.read_bytes()[:-16])
        with pytest.raises(CheckpointError, match="truncated"):
            load_checkpoint(path)

    def test_wrong_shaped_query_rejected(self, tmp_path):
        p = init_params(MINIMAL, seed=8)
        path = tmp_path / "model.chrs"
        save_checkpoint(p, path)
        loaded = load_checkpoint(path)
        with pytest.raises(ValueError, match="length"):
            forward(loaded, np.zeros((1, 64)))  # config-B-shaped input

    def test_ensemble_round_trip(self, tmp_path):
        models = [init_params(MINIMAL, seed=s) for s in (1, 2, 3)]
        path = tmp_path / "ens.chrs"
        save_checkpoint(models, path)
        loaded = load_ensemble(path)
        assert len(loaded) == 3
        for orig, back in zip(models, loaded):
            for (_, a), (_, b) in zip(orig.tensors(), back.tensors()):
                assert np.array_equal(a, b)
        with pytest.raises(CheckpointError, match="load_ensemble"):
            load_checkpoint(path)
