"""Evaluation metrics and the kernel-size x iteration-coefficient sweep.

Three metrics: single-step accuracy (argmax action equals the expert
label), success rate (rollouts reaching the goal within the step budget),
and trajectory difference (mean relative excess path length over the
optimal, among successful rollouts only). Diverged training runs appear in
sweep tables as ``*``, never as a number.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from .dataset import encode_samples
from .gridworld import GridMap, PlanningSample, dijkstra_field, step_cell
from .models import Model, ModelConfig, init_params, predict_logits, scaled_k
from .training import RunRecord, TrainConfig, train

Policy = Callable[[GridMap, tuple[int, int]], int]


@dataclass
class EvalReport:
    """Metric bundle for one parameter set on one sample set."""

    accuracy: float
    success_rate: Optional[float]
    traj_diff: Optional[float]
    n_samples: int
    n_episodes: int
    n_successes: int
    step_budget: Optional[int]

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass
class Episode:
    success: bool
    steps: int
    optimal_length: int
    path: list = field(default_factory=list)


def single_step_accuracy(model: Model, samples: Sequence[PlanningSample],
                         batch_size: int = 512) -> float:
    """Fraction of samples whose argmax logit matches the expert action."""
    if not samples:
        raise ValueError("accuracy is undefined on an empty sample set")
    x, coords, labels, _ = encode_samples(samples)
    hits = 0
    for start in range(0, len(samples), batch_size):
        sl = slice(start, start + batch_size)
        logits = predict_logits(model, x[sl], coords[sl])
        hits += int((logits.argmax(axis=1) == labels[sl]).sum())  # ties: lowest index
    return hits / len(samples)


def model_policy(model: Model) -> Policy:
    """Wrap a model as a one-state-at-a-time policy for rollouts."""

    def policy(grid: GridMap, cell: tuple[int, int]) -> int:
        sample = PlanningSample(grid, cell, 0, 1)  # label fields unused here
        x, coords, _, _ = encode_samples([sample])
        return int(predict_logits(model, x, coords).argmax(axis=1)[0])

    return policy


def oracle_policy(grid: GridMap) -> Policy:
    """Expert replay: greedy descent on the exact distance-to-goal field."""
    dist = dijkstra_field(grid, grid.goal)

    def policy(_: GridMap, cell: tuple[int, int]) -> int:
        d = dist[cell]
        for action in range(8):
            nxt = step_cell(grid, cell, action)
            if dist[nxt] == d - 1:
                return action
        raise ValueError(f"cell {cell} has no descending neighbour (unreachable start?)")

    return policy


def rollout(policy: Policy, grid: GridMap, start: tuple[int, int],
            step_budget: Optional[int] = None, optimal_length: int = 0) -> Episode:
    """Run a policy until the goal or the budget; blocked moves stay and count.

    The default budget is m*n steps, which no simple path can exceed. Pass
    ``optimal_length`` when the episode will feed trajectory statistics.
    """
    budget = grid.m * grid.n if step_budget is None else step_budget
    cell = (int(start[0]), int(start[1]))
    path = [cell]
    for step in range(budget):
        cell = step_cell(grid, cell, policy(grid, cell))
        path.append(cell)
        if cell == grid.goal:
            return Episode(True, step + 1, optimal_length, path)
    return Episode(False, budget, optimal_length, path)


def trajectory_difference(episodes: Sequence[Episode]) -> Optional[float]:
    """Mean of (steps - optimal) / optimal over successful episodes; None if no successes."""
    rel = [(e.steps - e.optimal_length) / e.optimal_length for e in episodes if e.success]
    if not rel:
        return None
    return float(np.mean(rel))


def _batched_rollouts(model: Model, samples: Sequence[PlanningSample],
                      step_budget: Optional[int]) -> list[Episode]:
    """Roll out every sample in lockstep so each step is one batched forward."""
    episodes = [Episode(False, 0, s.optimal_length) for s in samples]
    x, coords, _, _ = encode_samples(samples)
    budget = samples[0].grid.m * samples[0].grid.n if step_budget is None else step_budget
    position = [s.agent for s in samples]
    active = [i for i, s in enumerate(samples) if s.agent != s.grid.goal]
    for step in range(budget):
        if not active:
            break
        idx = np.array(active)
        actions = predict_logits(model, x[idx], coords[idx]).argmax(axis=1)
        still = []
        for j, i in enumerate(active):
            nxt = step_cell(samples[i].grid, position[i], int(actions[j]))
            position[i] = nxt
            coords[i] = nxt
            if nxt == samples[i].grid.goal:
                episodes[i] = Episode(True, step + 1, samples[i].optimal_length)
            else:
                still.append(i)
        active = still
    for i in active:
        episodes[i] = Episode(False, budget, samples[i].optimal_length)
    return episodes


def evaluate(model: Model, samples: Sequence[PlanningSample],
             step_budget: Optional[int] = None,
             max_episodes: Optional[int] = None) -> EvalReport:
    """Accuracy over all samples plus rollout metrics over (a subset of) them."""
    accuracy = single_step_accuracy(model, samples)
    episode_samples = list(samples if max_episodes is None else samples[:max_episodes])
    if not episode_samples:
        return EvalReport(accuracy, None, None, len(samples), 0, 0, None)
    budget = episode_samples[0].grid.m * episode_samples[0].grid.n if step_budget is None else step_budget
    episodes = _batched_rollouts(model, episode_samples, budget)
    successes = sum(e.success for e in episodes)
    return EvalReport(
        accuracy=accuracy,
        success_rate=successes / len(episodes),
        traj_diff=trajectory_difference(episodes),
        n_samples=len(samples),
        n_episodes=len(episodes),
        n_successes=successes,
        step_budget=budget,
    )


# ---------------------------------------------------------------------------
# sweep harness


@dataclass
class SweepSpec:
    """Grid of (kernel size, iteration coefficient) cells, each a fresh run."""

    variant: str
    map_height: int
    map_width: int
    f_values: tuple
    kprime_values: tuple
    train_config: TrainConfig
    replicates: int = 1
    base_seed: int = 0
    eval_episodes: Optional[int] = 512
    reward_hidden_channels: int = 150
    gs_kernel_size: int = 3


@dataclass
class SweepCell:
    variant: str
    m: int
    n: int
    f: int
    k_prime: float
    k: int
    status: str
    accuracy: Optional[float]
    success_rate: Optional[float]
    traj_diff: Optional[float]
    seed: int
    wall_seconds: float


def _cell_seed(base_seed: int, f_index: int, kp_index: int, replicate: int) -> int:
    ss = np.random.SeedSequence([base_seed, f_index, kp_index, replicate])
    return int(ss.generate_state(1)[0])


def run_sweep_cell(spec: SweepSpec, f_index: int, kp_index: int, replicate: int,
                   train_samples, test_samples) -> SweepCell:
    f = spec.f_values[f_index]
    k_prime = spec.kprime_values[kp_index]
    k = scaled_k(spec.map_height, spec.map_width, f, k_prime)
    seed = _cell_seed(spec.base_seed, f_index, kp_index, replicate)
    config = ModelConfig(spec.variant, f, k,
                         reward_hidden_channels=spec.reward_hidden_channels,
                         gs_kernel_size=spec.gs_kernel_size)
    cell_train = dataclasses.replace(spec.train_config, seed=seed)
    t0 = time.perf_counter()
    model, record = train(config, train_samples, test_samples, cell_train)
    if record.status == "diverged":
        return SweepCell(spec.variant, spec.map_height, spec.map_width, f, k_prime, k,
                         "diverged", None, None, None, seed, time.perf_counter() - t0)
    report = evaluate(model, test_samples, max_episodes=spec.eval_episodes)
    return SweepCell(spec.variant, spec.map_height, spec.map_width, f, k_prime, k,
                     "completed", report.accuracy, report.success_rate, report.traj_diff,
                     seed, time.perf_counter() - t0)


def run_sweep(spec: SweepSpec, train_samples, test_samples,
              log: Optional[Callable[[SweepCell], None]] = None) -> list[SweepCell]:
    """Train and evaluate every (f, k') cell; divergence never aborts the grid."""
    cells = []
    for kp_index in range(len(spec.kprime_values)):
        for f_index in range(len(spec.f_values)):
            for replicate in range(spec.replicates):
                cell = run_sweep_cell(spec, f_index, kp_index, replicate,
                                      train_samples, test_samples)
                cells.append(cell)
                if log:
                    log(cell)
    return cells


CSV_COLUMNS = ("variant", "m", "n", "f", "k_prime", "k", "status",
               "accuracy", "success_rate", "traj_diff", "seed", "wall_seconds")


def write_sweep_csv(path, cells: Sequence[SweepCell]) -> None:
    """One row per run; diverged rows carry ``*`` in the accuracy column."""
    with open(path, "w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(CSV_COLUMNS)
        for c in cells:
            diverged = c.status == "diverged"
            writer.writerow([
                c.variant, c.m, c.n, c.f, c.k_prime, c.k, c.status,
                "*" if diverged else f"{c.accuracy:.6f}",
                "" if diverged else f"{c.success_rate:.6f}",
                "" if diverged or c.traj_diff is None else f"{c.traj_diff:.6f}",
                c.seed, f"{c.wall_seconds:.3f}",
            ])


def sweep_summary(spec: SweepSpec, cells: Sequence[SweepCell]) -> dict:
    """Per-cell aggregate across replicates: mean accuracy with its range."""
    grid = {}
    for c in cells:
        grid.setdefault((c.f, c.k_prime), []).append(c)
    summary = []
    for (f, kp), group in sorted(grid.items(), key=lambda kv: (kv[0][1], kv[0][0])):
        accs = [g.accuracy for g in group if g.status == "completed"]
        summary.append({
            "f": f,
            "k_prime": kp,
            "k": group[0].k,
            "replicates": len(group),
            "diverged": sum(g.status == "diverged" for g in group),
            "accuracy_mean": float(np.mean(accs)) if accs else None,
            "accuracy_min": float(np.min(accs)) if accs else None,
            "accuracy_max": float(np.max(accs)) if accs else None,
        })
    return {
        "variant": spec.variant,
        "map": [spec.map_height, spec.map_width],
        "cells": summary,
    }


def write_sweep_summary(path, spec: SweepSpec, cells: Sequence[SweepCell]) -> None:
    Path(path).write_text(json.dumps(sweep_summary(spec, cells), indent=2, sort_keys=True))
