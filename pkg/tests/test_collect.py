import numpy as np
import pytest

import strikelab.env as cyber
from strikelab import nn
from strikelab.collect import collect_dataset, load_dataset, save_dataset
from strikelab.policies import FrozenPolicy, select_action


@pytest.fixture(scope="module")
def toy_policy(config):
    """An untrained (random-weight) policy; collection mechanics do not care
    about play quality."""
    net = nn.init_net(config.obs_length, 36, hidden_dim=32, seed=5)
    return FrozenPolicy(net, "dqn", "deterministic", (9, 9, 9, 9))


@pytest.fixture(scope="module")
def small_dataset(config, toy_policy):
    return collect_dataset(toy_policy, config, n=300, random_frac=0.05, seed=3)


class TestCollectDataset:
    def test_zero_random_frac_matches_policy(self, config, toy_policy):
        ds = collect_dataset(toy_policy, config, n=60, random_frac=0.0, seed=1)
        for rec in ds.records:
            assert not rec.was_forced_random
            assert rec.action == select_action(toy_policy, rec.obs)

    def test_reaches_requested_count_with_full_episodes(self, config, toy_policy, small_dataset):
        ds = small_dataset
        assert len(ds.records) >= 300
        # Records of each episode are contiguous, steps count from 0.
        for ep, (a, b, final) in ds.episodes.items():
            steps = [r.step for r in ds.records[a:b]]
            assert steps == list(range(len(steps)))
            assert final.win in ("win", "loss")
            assert final.trajectory_length == len(steps)
        assert sum(b - a for a, b, _ in ds.episodes.values()) == len(ds.records)

    def test_forced_random_fraction_within_binomial_bounds(self, config, toy_policy):
        ds = collect_dataset(toy_policy, config, n=4000, random_frac=0.05, seed=2)
        forced = sum(r.was_forced_random for r in ds.records)
        n = len(ds.records)
        sigma = np.sqrt(n * 0.05 * 0.95)
        assert abs(forced - 0.05 * n) <= 4 * sigma

    def test_snapshot_restores_to_recorded_obs(self, config, small_dataset):
        for rec in small_dataset.records[::7]:
            state = cyber.restore(rec.snapshot)
            np.testing.assert_array_equal(
                cyber.encode_observation(config, state), rec.obs
            )

    def test_determinism(self, config, toy_policy):
        a = collect_dataset(toy_policy, config, n=100, random_frac=0.05, seed=9)
        b = collect_dataset(toy_policy, config, n=100, random_frac=0.05, seed=9)
        assert len(a.records) == len(b.records)
        for ra, rb in zip(a.records, b.records):
            assert ra.action == rb.action
            assert ra.was_forced_random == rb.was_forced_random
            np.testing.assert_array_equal(ra.obs, rb.obs)

    def test_episode_replays_to_final_log(self, config, small_dataset):
        # Restore the first record of one episode and replay its actions.
        ds = small_dataset
        ep = max(ds.episodes)
        a, b, final = ds.episodes[ep]
        state = cyber.restore(ds.records[a].snapshot)
        done = False
        for rec in ds.records[a:b]:
            assert not done
            state, _, _, done, plog = cyber.step(config, state, rec.action)
        assert done
        assert plog.to_dict() == final.to_dict()

    def test_invalid_random_frac(self, config, toy_policy):
        with pytest.raises(ValueError):
            collect_dataset(toy_policy, config, n=10, random_frac=1.0, seed=0)

    def test_activation_and_saliency_shapes(self, config, small_dataset):
        rec = small_dataset.records[0]
        assert rec.activations.shape == (32,)  # toy policy hidden width
        assert rec.saliency.shape == (config.obs_length,)


class TestSaliency:
    def test_zero_weight_policy_zero_saliency(self, config):
        from strikelab.collect import compute_saliency

        net = nn.init_net(config.obs_length, 36, hidden_dim=8, seed=0)
        for p in net.params().values():
            p[:] = 0.0
        policy = FrozenPolicy(net, "dqn", "x", (9, 9, 9, 9))
        s = compute_saliency(policy, np.ones(config.obs_length))
        assert np.all(s == 0.0)

    def test_matches_finite_differences_of_greedy_value(self, config):
        from strikelab.collect import compute_saliency
        from strikelab.nn import MaxOutput, forward, loss_output_gradient

        net = nn.init_net(10, 6, hidden_dim=12, activation="tanh", seed=4)
        policy = FrozenPolicy(net, "dqn", "x", (3, 3))
        x = np.random.default_rng(8).normal(size=10)
        s = compute_saliency(policy, x)

        def greedy_value(v):
            out = forward(net, v).output
            return loss_output_gradient(out, MaxOutput((3, 3)))[0]

        h = 1e-4
        for i in range(10):
            xp, xm = x.copy(), x.copy()
            xp[i] += h
            xm[i] -= h
            fd = (greedy_value(xp) - greedy_value(xm)) / (2 * h)
            assert abs(abs(fd) - s[i]) <= 1e-4 * max(1.0, abs(fd))

    def test_permutation_symmetry(self):
        from strikelab.collect import compute_saliency

        net = nn.init_net(6, 4, hidden_dim=8, seed=6)
        policy = FrozenPolicy(net, "dqn", "x", (4,))
        x = np.random.default_rng(3).normal(size=6)
        s = compute_saliency(policy, x)

        # Swap inputs 1 and 4 along with the matching first-layer rows.
        net2 = net.copy()
        net2.w1[[1, 4]] = net2.w1[[4, 1]]
        policy2 = FrozenPolicy(net2, "dqn", "x", (4,))
        x2 = x.copy()
        x2[[1, 4]] = x2[[4, 1]]
        s2 = compute_saliency(policy2, x2)
        expected = s.copy()
        expected[[1, 4]] = expected[[4, 1]]
        np.testing.assert_allclose(s2, expected, rtol=1e-10)


class TestDatasetIO:
    def test_roundtrip(self, tmp_path, config, small_dataset):
        path = tmp_path / "ds.jsonl"
        save_dataset(small_dataset, path)
        loaded = load_dataset(path)
        assert loaded.policy_tag == small_dataset.policy_tag
        assert loaded.scenario_hash == config.scenario_hash()
        assert len(loaded.records) == len(small_dataset.records)
        for ra, rb in zip(loaded.records, small_dataset.records):
            assert ra.action == rb.action
            np.testing.assert_array_equal(ra.obs, rb.obs)
            np.testing.assert_array_equal(ra.activations, rb.activations)
            assert ra.snapshot == rb.snapshot
        assert loaded.episodes.keys() == small_dataset.episodes.keys()

    def test_save_is_byte_deterministic(self, tmp_path, small_dataset):
        p1, p2 = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
        save_dataset(small_dataset, p1)
        save_dataset(small_dataset, p2)
        assert p1.read_bytes() == p2.read_bytes()
        assert (tmp_path / "a.jsonl.snapshots").read_bytes() == (
            tmp_path / "b.jsonl.snapshots"
        ).read_bytes()

    def test_version_check(self, tmp_path, small_dataset):
        path = tmp_path / "ds.jsonl"
        save_dataset(small_dataset, path)
        lines = path.read_text().splitlines()
        import json

        header = json.loads(lines[0])
        header["version"] = 99
        path.write_text("\n".join([json.dumps(header)] + lines[1:]) + "\n")
        with pytest.raises(ValueError, match="version"):
            load_dataset(path)
