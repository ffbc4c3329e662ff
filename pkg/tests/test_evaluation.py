import csv
import json

import numpy as np
import pytest

from gridplan.dataset import DatasetManifest, generate_samples_for_map
from gridplan.evaluation import (
    Episode,
    SweepSpec,
    _batched_rollouts,
    evaluate,
    model_policy,
    oracle_policy,
    rollout,
    run_sweep,
    single_step_accuracy,
    sweep_summary,
    trajectory_difference,
    write_sweep_csv,
)
from gridplan.gridworld import ACTION_NAMES, GridMap
from gridplan.models import ModelConfig, init_params, scaled_k
from gridplan.training import TrainConfig, train


def make_samples(seed, num_maps, pairs, size=8):
    manifest = DatasetManifest(seed=seed, map_height=size, map_width=size,
                               num_maps=num_maps, pairs_per_map=pairs)
    return [s for i in range(num_maps) for s in generate_samples_for_map(manifest, i)]


@pytest.fixture(scope="module")
def eval_samples():
    return make_samples(43, 25, 4)


@pytest.fixture(scope="module")
def overfit_model(eval_samples):
    subset = eval_samples[:32]
    # full-propagation depth so every goal is inside the receptive cone
    config = ModelConfig("VIN", f=3, k=6, reward_hidden_channels=12)
    model, record = train(config, subset, subset,
                          TrainConfig(epochs=200, batch_size=32, learning_rate=0.01, seed=4))
    assert record.epochs[-1].train_accuracy == 1.0
    return model, subset


class TestSingleStepAccuracy:
    def test_label_reproducing_model_scores_one(self, overfit_model):
        model, subset = overfit_model
        assert single_step_accuracy(model, subset) == 1.0

    def test_unrelated_predictor_scores_at_chance(self):
        # labels are symmetric over 8 actions, so any label-independent
        # predictor matches with probability 1/8
        samples = make_samples(47, 125, 6)
        model = init_params(ModelConfig("VIN", f=3, k=2, reward_hidden_channels=8), 999)
        for t in model.named_parameters().values():
            t.data *= 100  # arbitrary fixed policy, far from the labels
        acc = single_step_accuracy(model, samples)
        assert abs(acc - 0.125) < 0.05

    def test_empty_set_rejected(self, overfit_model):
        model, _ = overfit_model
        with pytest.raises(ValueError):
            single_step_accuracy(model, [])


class TestRollout:
    def test_adjacent_start_with_expert_policy(self):
        grid = GridMap(np.zeros((6, 6), dtype=bool), (3, 3))
        episode = rollout(oracle_policy(grid), grid, (2, 2), optimal_length=1)
        assert episode.success and episode.steps == 1
        assert episode.path == [(2, 2), (3, 3)]

    def test_wall_bumping_policy_times_out(self):
        grid = GridMap(np.zeros((5, 5), dtype=bool), (4, 4))
        north = ACTION_NAMES.index("N")
        episode = rollout(lambda g, c: north, grid, (0, 0))
        assert not episode.success
        assert episode.steps == 25  # m*n default budget, blocked moves consume steps
        assert all(cell == (0, 0) for cell in episode.path)

    def test_teacher_forcing_is_optimal_on_every_sample(self, eval_samples):
        episodes = []
        for sample in eval_samples:
            policy = oracle_policy(sample.grid)
            episode = rollout(policy, sample.grid, sample.agent,
                              optimal_length=sample.optimal_length)
            assert episode.success
            assert episode.steps == sample.optimal_length
            episodes.append(episode)
        assert trajectory_difference(episodes) == 0.0

    def test_batched_rollouts_match_single_rollouts(self, overfit_model, eval_samples):
        model, _ = overfit_model
        subset = eval_samples[:40]
        batched = _batched_rollouts(model, subset, step_budget=64)
        policy = model_policy(model)
        for sample, got in zip(subset, batched):
            want = rollout(policy, sample.grid, sample.agent, step_budget=64,
                           optimal_length=sample.optimal_length)
            assert got.success == want.success
            assert got.steps == want.steps or not got.success


class TestTrajectoryDifference:
    def test_all_optimal_is_zero(self):
        episodes = [Episode(True, 5, 5), Episode(True, 3, 3)]
        assert trajectory_difference(episodes) == 0.0

    def test_relative_excess(self):
        assert trajectory_difference([Episode(True, 11, 10)]) == pytest.approx(0.1)

    def test_failures_are_excluded(self):
        episodes = [Episode(True, 12, 10), Episode(False, 99, 10)]
        assert trajectory_difference(episodes) == pytest.approx(0.2)

    def test_no_successes_is_undefined(self):
        assert trajectory_difference([Episode(False, 9, 3)]) is None
        assert trajectory_difference([]) is None


class TestEvaluate:
    def test_report_fields_and_determinism(self, overfit_model):
        model, subset = overfit_model
        first = evaluate(model, subset)
        second = evaluate(model, subset)
        assert first == second  # same params, data, order: identical report
        assert first.accuracy == 1.0
        # memorizing the labels does not guarantee good behaviour on the
        # unseen states a rollout passes through
        assert 0.0 <= first.success_rate <= 1.0
        assert first.n_episodes == len(subset)
        assert first.n_successes == round(first.success_rate * first.n_episodes)
        assert first.step_budget == 64

    def test_episode_cap(self, overfit_model, eval_samples):
        model, _ = overfit_model
        report = evaluate(model, eval_samples, max_episodes=10)
        assert report.n_episodes == 10
        assert report.n_samples == len(eval_samples)


@pytest.fixture(scope="module")
def sweep_data():
    samples = make_samples(51, 12, 2, size=8)
    return samples[:16], samples[16:]


class TestSweep:
    def test_grid_runs_and_k_values(self, sweep_data, tmp_path):
        train_samples, test_samples = sweep_data
        spec = SweepSpec(
            variant="VIN", map_height=8, map_width=8,
            f_values=(3, 5), kprime_values=(0.5, 1.0),
            train_config=TrainConfig(epochs=1, batch_size=16),
            base_seed=13, eval_episodes=4, reward_hidden_channels=6,
        )
        cells = run_sweep(spec, train_samples, test_samples)
        assert len(cells) == 4
        for cell in cells:
            assert cell.k == scaled_k(8, 8, cell.f, cell.k_prime)
            assert cell.status == "completed"
            assert 0.0 <= cell.accuracy <= 1.0

        csv_path = tmp_path / "sweep.csv"
        write_sweep_csv(csv_path, cells)
        with open(csv_path, newline="") as handle:
            rows = list(csv.DictReader(handle))
        assert [r["k"] for r in rows] == [str(c.k) for c in cells]
        summary = sweep_summary(spec, cells)
        assert len(summary["cells"]) == 4

    def test_divergent_cell_marked_star_never_numeric(self, sweep_data, tmp_path):
        train_samples, test_samples = sweep_data
        spec = SweepSpec(
            variant="GSVIN", map_height=8, map_width=8,
            f_values=(3,), kprime_values=(1.0,),
            train_config=TrainConfig(epochs=3, batch_size=16, learning_rate=1e3),
            base_seed=1, eval_episodes=4, reward_hidden_channels=6,
        )
        cells = run_sweep(spec, train_samples, test_samples)
        assert cells[0].status == "diverged"
        assert cells[0].accuracy is None
        csv_path = tmp_path / "sweep.csv"
        write_sweep_csv(csv_path, cells)
        with open(csv_path, newline="") as handle:
            rows = list(csv.DictReader(handle))
        assert rows[0]["status"] == "diverged"
        assert rows[0]["accuracy"] == "*"
        assert rows[0]["success_rate"] == ""
        summary = sweep_summary(spec, cells)
        assert summary["cells"][0]["diverged"] == 1
        assert summary["cells"][0]["accuracy_mean"] is None

    def test_replicates_get_distinct_seeds_and_aggregate(self, sweep_data):
        train_samples, test_samples = sweep_data
        spec = SweepSpec(
            variant="VIN", map_height=8, map_width=8,
            f_values=(3,), kprime_values=(0.5,),
            train_config=TrainConfig(epochs=1, batch_size=16),
            replicates=2, base_seed=5, eval_episodes=4, reward_hidden_channels=6,
        )
        cells = run_sweep(spec, train_samples, test_samples)
        assert len(cells) == 2
        assert cells[0].seed != cells[1].seed
        summary = sweep_summary(spec, cells)["cells"][0]
        accs = [c.accuracy for c in cells]
        assert summary["replicates"] == 2
        assert summary["accuracy_mean"] == pytest.approx(np.mean(accs))
        assert summary["accuracy_min"] == min(accs)
        assert summary["accuracy_max"] == max(accs)
