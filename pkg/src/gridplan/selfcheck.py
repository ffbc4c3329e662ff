"""Built-in verification suites: gradients, oracle agreement, determinism.

These are the checks a fresh checkout is expected to pass; the CLI exposes
them as ``gridplan selfcheck``. Each suite returns a :class:`CheckResult`
so callers can print one pass/fail line per check.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dataset import DatasetManifest, encode_samples, generate_samples_for_map, one_hot
from .evaluation import oracle_policy, rollout, trajectory_difference
from .gridworld import astar_shortest, dijkstra_field, generate_map, tabular_vi
from .models import (
    ModelConfig,
    deterministic_move_kernel,
    forward,
    init_params,
    propagation_probe_kernel,
    scaled_k,
    vi_module,
)
from .tensor import Tape, Tensor, backward, finite_diff_check, softmax_cross_entropy, total_sum
from .training import TrainConfig, train


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str


def gradcheck_fixture(variant: str, seed: int, batch: int = 4, size: int = 8,
                      weight_scale: float = 30.0):
    """A small model plus a deterministic loss closure for gradient checking.

    Weights are scaled well above the training init so that sampled
    gradients sit far from the finite-difference noise floor.
    """
    config = ModelConfig(variant, f=5, k=3)
    model = init_params(config, seed)
    for tensor in model.named_parameters().values():
        tensor.data *= weight_scale
    rng = np.random.default_rng([seed, batch, size])
    x = np.zeros((batch, 2, size, size))
    x[:, 0] = rng.random((batch, size, size)) < 0.2
    goals = rng.integers(0, size, size=(batch, 2))
    x[np.arange(batch), 1, goals[:, 0], goals[:, 1]] = 10.0
    coords = rng.integers(0, size, size=(batch, 2))
    labels = one_hot(rng.integers(0, 8, size=batch))

    def loss_fn():
        return softmax_cross_entropy(forward(model, x, coords), labels)

    return model.named_parameters(), loss_fn


def check_gradients(seed: int = 0, num_samples: int = 60,
                    tolerance: float = 1e-4, step: float = 1e-4) -> list[CheckResult]:
    results = []
    for variant in ("VIN", "VIRN", "GSVIN"):
        params, loss_fn = gradcheck_fixture(variant, seed)
        report = finite_diff_check(params, loss_fn, step=step, tolerance=tolerance,
                                   num_samples=num_samples, rng=seed)
        results.append(CheckResult(
            f"gradient-check/{variant}",
            report.passed,
            f"{report.checked} checked, {report.skipped} skipped, "
            f"max rel err {report.max_rel_error:.2e}",
        ))
    return results


def check_astar_against_dijkstra(seed: int = 0, maps_per_size: int = 40,
                                 sizes=(8, 16)) -> CheckResult:
    rng = np.random.default_rng(seed)
    tested = 0
    for size in sizes:
        for _ in range(maps_per_size):
            grid = generate_map(size, size, (0.1, 0.3), rng)
            dist = dijkstra_field(grid, grid.goal)
            for cell in map(tuple, grid.free_cells()):
                if cell == grid.goal or not np.isfinite(dist[cell]):
                    continue
                _, cost = astar_shortest(grid, cell)
                if cost != int(dist[cell]):
                    return CheckResult("oracle/astar-vs-dijkstra", False,
                                       f"cost mismatch at {cell} on a {size}x{size} map")
                tested += 1
    return CheckResult("oracle/astar-vs-dijkstra", True, f"{tested} starts agreed")


def check_vi_equivalence(seed: int = 0, num_maps: int = 6, size: int = 8,
                         gamma: float = 0.9) -> CheckResult:
    """Crafted-kernel planner sweeps must match the exact Bellman oracle."""
    rng = np.random.default_rng(seed)
    k = scaled_k(size, size, 3, 1.0)
    kernel = deterministic_move_kernel(3, gamma)
    worst = 0.0
    for _ in range(num_maps):
        grid = generate_map(size, size, (0.1, 0.3), rng)
        reward = np.where(grid.obstacles, -1.0, 0.0)
        reward[grid.goal] = 10.0
        _, _, sequence = vi_module(Tensor(reward[None, None]), kernel, k)
        oracle = tabular_vi(grid, reward, gamma, max_iters=k, tol=0.0,
                            transition="freespace", reward_on="source",
                            terminal_goal=False, return_history=True)
        for step_map, oracle_map in zip(sequence, oracle):
            worst = max(worst, float(np.abs(step_map.data[0, 0] - oracle_map).max()))
    passed = worst < 1e-9
    return CheckResult("oracle/vi-module-vs-tabular", passed,
                       f"max deviation {worst:.2e} over {num_maps} maps, k={k}")


def check_propagation_radius(size: int = 16) -> CheckResult:
    """Positive support after k sweeps is the Chebyshev ball of radius k*(f-1)/2."""
    for f in (3, 5, 7):
        kernel = propagation_probe_kernel(f)
        reward = np.zeros((1, 1, size, size))
        source = (size // 2, size // 2)
        reward[0, 0, source[0], source[1]] = 1.0
        for k in (1, 2, 3):
            _, _, sequence = vi_module(Tensor(reward), kernel, k)
            support = sequence[-1].data[0, 0] > 0
            rows, cols = np.mgrid[0:size, 0:size]
            radius = k * (f - 1) // 2
            ball = np.maximum(np.abs(rows - source[0]), np.abs(cols - source[1])) <= radius
            if not np.array_equal(support, ball):
                return CheckResult("oracle/propagation-radius", False,
                                   f"support mismatch at f={f}, k={k}")
    return CheckResult("oracle/propagation-radius", True, "f in {3,5,7} x k in {1,2,3}")


def check_teacher_forcing(seed: int = 0, num_maps: int = 10) -> CheckResult:
    manifest = DatasetManifest(seed=seed, map_height=8, map_width=8,
                               num_maps=num_maps, pairs_per_map=4)
    episodes = []
    for i in range(num_maps):
        for sample in generate_samples_for_map(manifest, i):
            policy = oracle_policy(sample.grid)
            episodes.append(rollout(policy, sample.grid, sample.agent,
                                    optimal_length=sample.optimal_length))
            if not episodes[-1].success or episodes[-1].steps != sample.optimal_length:
                return CheckResult("oracle/teacher-forcing", False,
                                   f"expert replay missed the goal or took a detour on map {i}")
    diff = trajectory_difference(episodes)
    passed = diff == 0.0
    return CheckResult("oracle/teacher-forcing", passed,
                       f"{len(episodes)} episodes, success 1.0, traj diff {diff}")


def check_dataset_determinism(seed: int = 0, num_maps: int = 8) -> CheckResult:
    manifest = DatasetManifest(seed=seed, map_height=8, map_width=8,
                               num_maps=num_maps, pairs_per_map=3)
    first = [generate_samples_for_map(manifest, i) for i in range(num_maps)]
    second = [generate_samples_for_map(manifest, i) for i in range(num_maps)]
    for a_list, b_list in zip(first, second):
        for a, b in zip(a_list, b_list):
            same = (np.array_equal(a.grid.obstacles, b.grid.obstacles)
                    and a.grid.goal == b.grid.goal and a.agent == b.agent
                    and a.expert_action == b.expert_action
                    and a.optimal_length == b.optimal_length)
            if not same:
                return CheckResult("determinism/dataset", False, "regeneration differed")
    return CheckResult("determinism/dataset", True, f"{num_maps} maps regenerated identically")


def check_training_determinism(seed: int = 0) -> CheckResult:
    manifest = DatasetManifest(seed=seed, map_height=8, map_width=8,
                               num_maps=30, pairs_per_map=4)
    samples = [s for i in range(30) for s in generate_samples_for_map(manifest, i)]
    split = int(0.8 * len(samples))
    config = ModelConfig("VIN", f=3, k=2, reward_hidden_channels=16)
    tc = TrainConfig(epochs=2, batch_size=32, seed=seed)
    _, rec1 = train(config, samples[:split], samples[split:], tc)
    _, rec2 = train(config, samples[:split], samples[split:], tc)
    losses1 = [e.train_loss for e in rec1.epochs]
    losses2 = [e.train_loss for e in rec2.epochs]
    passed = losses1 == losses2
    return CheckResult("determinism/training", passed,
                       "identical loss sequences" if passed else f"{losses1} != {losses2}")


def check_tape_replay(seed: int = 0) -> CheckResult:
    params, loss_fn = gradcheck_fixture("GSVIN", seed, batch=2)
    with Tape() as tape:
        loss = loss_fn()
    backward(loss, tape)
    grads = {name: t.grad.copy() for name, t in params.items() if t.grad is not None}
    tape.zero_grads()
    loss.grad = None
    backward(loss, tape)
    for name, t in params.items():
        if not np.array_equal(grads[name], t.grad):
            return CheckResult("determinism/tape-replay", False, f"{name} gradients differ")
    return CheckResult("determinism/tape-replay", True,
                       f"{len(grads)} parameter gradients bitwise identical")


def run_selfcheck(seed: int = 0, full: bool = False) -> list[CheckResult]:
    num_fd = 200 if full else 60
    maps_per_size = 100 if full else 30
    sizes = (8, 16, 32) if full else (8, 16)
    results = []
    results.extend(check_gradients(seed, num_samples=num_fd))
    results.append(check_astar_against_dijkstra(seed, maps_per_size, sizes))
    results.append(check_vi_equivalence(seed, num_maps=20 if full else 6))
    results.append(check_propagation_radius())
    results.append(check_teacher_forcing(seed))
    results.append(check_dataset_determinism(seed))
    results.append(check_training_determinism(seed))
    results.append(check_tape_replay(seed))
    return results
