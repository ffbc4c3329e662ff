"""Convolutional planners over grid maps: VIN, VIRN, and GS-VIN variants.

All three share the same trunk: two reward-head convolutions produce a
reward map, a bias-free convolution plus channel-max loop performs value
iteration, and a 1x1 linear decode turns the action-value vector at the
agent's cell into 8 action logits. The variants differ only in how the
per-iteration value maps are summarized before the decode:

* ``VIN``    uses the final action-value map directly;
* ``VIRN``   blends the value-map sequence with softmax weights, one
             learned scalar per iteration;
* ``GSVIN``  runs the sequence through a bias-free convolutional gated
             recurrent cell and uses its last hidden map.

The iteration count comes from the map diagonal and the kernel's
propagation radius: one application of an f x f kernel spreads information
(f-1)/2 cells, so k = ceil(sqrt(m^2 + n^2) / ((f-1)/2)) sweeps let any
cell's value reach any other.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .gridworld import ACTION_OFFSETS, NUM_ACTIONS
from .tensor import (
    ConvKernel,
    Tensor,
    add,
    channel_max,
    conv2d_head,
    conv2d_same,
    extract_at,
    hadamard,
    leaky_relu,
    narrow_channels,
    sigmoid,
    softmax_blend,
    stack_channels,
    stack_rows,
)

VARIANTS = ("VIN", "VIRN", "GSVIN")


def heuristic_k(m: int, n: int, f: int) -> int:
    """Iteration count for full value propagation across an m x n map.

    k = ceil(sqrt(m^2 + n^2) / ((f - 1) / 2)): the map diagonal divided by
    the propagation radius of one f x f convolution.
    """
    if m < 1 or n < 1:
        raise ValueError(f"map size {m}x{n} must be positive")
    if f < 3 or f % 2 == 0:
        raise ValueError(f"kernel size {f} invalid: must be odd and >= 3 for a nonzero propagation radius")
    return math.ceil(math.hypot(m, n) / ((f - 1) / 2))


def scaled_k(m: int, n: int, f: int, k_prime: float) -> int:
    """Iteration count scaled by the coefficient ``k_prime`` (at least 1)."""
    if k_prime <= 0:
        raise ValueError(f"iteration coefficient {k_prime} must be positive")
    if f < 3 or f % 2 == 0:
        raise ValueError(f"kernel size {f} invalid: must be odd and >= 3 for a nonzero propagation radius")
    return max(1, math.ceil(k_prime * math.hypot(m, n) / ((f - 1) / 2)))


def iteration_table(m: int, n: int, f_values: Sequence[int],
                    kprime_values: Sequence[float]) -> dict[tuple[int, float], int]:
    return {(f, kp): scaled_k(m, n, f, kp) for kp in kprime_values for f in f_values}


# Independently tabulated iteration counts for a 32x32 map, used by the CLI
# verification mode as a frozen cross-check of scaled_k.
REFERENCE_F_VALUES = (3, 5, 7, 9, 11, 13, 15)
REFERENCE_KPRIME_VALUES = (0.5, 0.75, 1.0, 1.25, 1.5, 2.0)
REFERENCE_K_32X32 = {
    0.5: (23, 12, 8, 6, 5, 4, 4),
    0.75: (34, 17, 12, 9, 7, 6, 5),
    1.0: (46, 23, 16, 12, 10, 8, 7),
    1.25: (57, 29, 19, 15, 12, 10, 9),
    1.5: (68, 34, 23, 17, 14, 12, 10),
    2.0: (91, 46, 31, 23, 19, 16, 13),
}


@dataclass
class ModelConfig:
    """Architecture hyperparameters shared by all variants."""

    variant: str
    f: int
    k: int
    reward_hidden_channels: int = 150
    action_channels: int = NUM_ACTIONS
    leaky_slope: float = 0.01
    gs_kernel_size: int = 3

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}, expected one of {VARIANTS}")
        if self.f < 1 or self.f % 2 == 0:
            raise ValueError(f"kernel size f={self.f} must be odd and positive")
        if self.k < 1:
            raise ValueError(f"iteration count k={self.k} must be at least 1")
        if self.action_channels != NUM_ACTIONS:
            raise ValueError(f"the grid domain uses {NUM_ACTIONS} actions, got {self.action_channels}")
        if self.gs_kernel_size < 1 or self.gs_kernel_size % 2 == 0:
            raise ValueError(f"gate kernel size {self.gs_kernel_size} must be odd and positive")

    def to_dict(self) -> dict:
        return {
            "variant": self.variant, "f": self.f, "k": self.k,
            "reward_hidden_channels": self.reward_hidden_channels,
            "action_channels": self.action_channels,
            "leaky_slope": self.leaky_slope,
            "gs_kernel_size": self.gs_kernel_size,
        }

    @staticmethod
    def from_dict(raw: dict) -> "ModelConfig":
        return ModelConfig(**raw)


@dataclass
class GsParams:
    """Eight bias-free gate kernels: W_* read the value map, U_* the hidden map."""

    w_f: ConvKernel
    w_i: ConvKernel
    w_c: ConvKernel
    w_o: ConvKernel
    u_f: ConvKernel
    u_i: ConvKernel
    u_c: ConvKernel
    u_o: ConvKernel

    FIELDS = ("w_f", "w_i", "w_c", "w_o", "u_f", "u_i", "u_c", "u_o")

    def kernels(self):
        return [(name, getattr(self, name)) for name in self.FIELDS]


@dataclass
class GsState:
    """The gated cell's recurrent pair: cell map ``c`` and hidden map ``h``."""

    c: Tensor
    h: Tensor

    @staticmethod
    def zeros(batch: int, m: int, n: int) -> "GsState":
        return GsState(Tensor.zeros((batch, 1, m, n)), Tensor.zeros((batch, 1, m, n)))


class Model:
    """Parameter container for one planner variant.

    ``vi`` holds the (A, 2, f, f) value-iteration kernel whose input
    channels split as (reward column, value column). ``fc`` is the 1x1
    linear decode applied to the extracted action vector.
    """

    def __init__(self, config: ModelConfig, reward1: ConvKernel, reward2: ConvKernel,
                 vi: ConvKernel, fc: ConvKernel,
                 gs: Optional[GsParams] = None,
                 summary_logits: Optional[Tensor] = None):
        if vi.in_channels != 2 or vi.out_channels != config.action_channels:
            raise ValueError(
                f"value-iteration kernel must be ({config.action_channels}, 2, f, f), got {vi.weights.dims}"
            )
        if config.variant == "GSVIN" and gs is None:
            raise ValueError("GSVIN needs gate parameters")
        if config.variant == "VIRN":
            if summary_logits is None:
                raise ValueError("VIRN needs one summary logit per iteration")
            if summary_logits.dims != (config.k, 1, 1, 1):
                raise ValueError(
                    f"summary logits dims {summary_logits.dims} do not match k={config.k}"
                )
        self.config = config
        self.reward1 = reward1
        self.reward2 = reward2
        self.vi = vi
        self.fc = fc
        self.gs = gs
        self.summary_logits = summary_logits

    def named_parameters(self) -> dict[str, Tensor]:
        params = {
            "reward/conv1": self.reward1.weights,
            "reward/conv2": self.reward2.weights,
            "vi/kernel": self.vi.weights,
            "head/fc": self.fc.weights,
        }
        if self.gs is not None:
            for name, kernel in self.gs.kernels():
                params[f"gs/{name}"] = kernel.weights
        if self.summary_logits is not None:
            params["summary/logits"] = self.summary_logits
        return params

    def parameter_count(self) -> int:
        return sum(t.data.size for t in self.named_parameters().values())


def init_params(config: ModelConfig, seed) -> Model:
    """Draw every weight from Normal(0, 0.01^2), deterministically per seed."""
    rng = np.random.default_rng(seed)

    def draw(*shape) -> Tensor:
        return Tensor(0.01 * rng.standard_normal(shape), requires_grad=True)

    a = config.action_channels
    hidden = config.reward_hidden_channels
    reward1 = ConvKernel(draw(hidden, 2, 3, 3))
    reward2 = ConvKernel(draw(1, hidden, 1, 1))
    vi = ConvKernel(draw(a, 2, config.f, config.f))
    fc = ConvKernel(draw(a, a, 1, 1))
    gs = None
    summary_logits = None
    if config.variant == "GSVIN":
        g = config.gs_kernel_size
        gs = GsParams(*[ConvKernel(draw(1, 1, g, g)) for _ in GsParams.FIELDS])
    elif config.variant == "VIRN":
        summary_logits = draw(config.k, 1, 1, 1)
    return Model(config, reward1, reward2, vi, fc, gs=gs, summary_logits=summary_logits)


def vi_module(reward: Tensor, kernel: ConvKernel, k: int):
    """Run k value-iteration sweeps from a zero value map.

    Each sweep stacks (reward, value), convolves into one action-value map
    per action, and takes the per-cell channel max as the next value map.
    Returns (final value map, final action-value map, [V_1 .. V_k]).
    """
    if kernel.in_channels != 2:
        raise ValueError(f"value-iteration kernel needs 2 input channels, got {kernel.in_channels}")
    if k < 1:
        raise ValueError(f"iteration count {k} must be at least 1")
    batch, _, m, n = reward.dims
    value = Tensor.zeros((batch, 1, m, n))
    sequence = []
    q = None
    for _ in range(k):
        q = conv2d_same(stack_channels(reward, value), kernel)
        value, _ = channel_max(q)
        sequence.append(value)
    return value, q, sequence


def gs_module(v_sequence: Sequence[Tensor], params: GsParams, slope: float = 0.01) -> Tensor:
    """Summarize a value-map sequence with the gated convolutional cell.

    Starting from zero cell and hidden maps, each step computes
    forget/input/output gates and a LeakyReLU candidate from (V_k, h_{k-1}),
    gates the previous cell map, and emits the next hidden map; the final
    hidden map is the summarized value function. The eight gate kernels are
    concatenated into one (4, 2, f, f) kernel so each step is a single
    convolution over the stacked (V_k, h_{k-1}) pair, which is algebraically
    identical to eight separate single-channel convolutions.
    """
    if len(v_sequence) == 0:
        raise ValueError("gs_module needs a non-empty value-map sequence")
    batch, _, m, n = v_sequence[0].dims
    pairs = [stack_channels(params.w_f.weights, params.u_f.weights),
             stack_channels(params.w_i.weights, params.u_i.weights),
             stack_channels(params.w_c.weights, params.u_c.weights),
             stack_channels(params.w_o.weights, params.u_o.weights)]
    fused = ConvKernel(stack_rows(stack_rows(pairs[0], pairs[1]),
                                  stack_rows(pairs[2], pairs[3])))
    state = GsState.zeros(batch, m, n)
    for v in v_sequence:
        pre = conv2d_same(stack_channels(v, state.h), fused)
        forget = sigmoid(narrow_channels(pre, 0, 1))
        gate_in = sigmoid(narrow_channels(pre, 1, 1))
        candidate = leaky_relu(narrow_channels(pre, 2, 1), slope)
        gate_out = sigmoid(narrow_channels(pre, 3, 1))
        cell = add(hadamard(forget, state.c), hadamard(gate_in, candidate))
        state = GsState(cell, hadamard(gate_out, leaky_relu(cell, slope)))
    return state.h


def attention_summarize(v_sequence: Sequence[Tensor], logits: Tensor) -> Tensor:
    """Softmax-weighted average of the value-map sequence (one logit each)."""
    return softmax_blend(v_sequence, logits)


def forward(model: Model, x, coords) -> Tensor:
    """Action logits for a batch of (obstacle, goal) maps and agent coordinates.

    ``x`` is (batch, 2, m, n) with the obstacle channel first and the goal
    channel second; ``coords`` is (batch, 2) agent positions. Returns logits
    with dims (batch, actions, 1, 1).
    """
    cfg = model.config
    x = x if isinstance(x, Tensor) else Tensor(x)
    coords = np.asarray(coords, dtype=np.intp)
    if coords.ndim != 2 or coords.shape != (x.dims[0], 2):
        raise ValueError(f"coords must be ({x.dims[0]}, 2), got {coords.shape}")

    reward = conv2d_head(x, model.reward1, model.reward2, cfg.leaky_slope)
    _, q_final, v_sequence = vi_module(reward, model.vi, cfg.k)

    if cfg.variant == "VIN":
        q_head = q_final
    else:
        if cfg.variant == "GSVIN":
            summary = gs_module(v_sequence, model.gs, cfg.leaky_slope)
        else:
            summary = attention_summarize(v_sequence, model.summary_logits)
        # Re-derive action values from the summarized map with the shared
        # VI kernel so every variant decodes through an identical head.
        q_head = conv2d_same(stack_channels(reward, summary), model.vi)

    vec = extract_at(q_head, coords[:, 0], coords[:, 1])
    return conv2d_same(vec, model.fc)


def predict_logits(model: Model, x, coords) -> np.ndarray:
    """Forward pass without gradient tracking, flattened to (batch, actions)."""
    out = forward(model, x, coords)
    return out.data.reshape(out.dims[0], -1)


# ---------------------------------------------------------------------------
# crafted kernels used as analytic probes


def deterministic_move_kernel(f: int, gamma: float) -> ConvKernel:
    """VI kernel encoding deterministic unit moves.

    Action a's plane reads the reward at the current cell (centre tap 1 on
    the reward column) and gamma times the value at the cell one step in
    direction a, so one sweep equals one exact Bellman backup with zero
    value beyond the borders.
    """
    if f < 3 or f % 2 == 0:
        raise ValueError(f"kernel size {f} must be odd and >= 3 to reach the 8 neighbours")
    pad = (f - 1) // 2
    w = np.zeros((NUM_ACTIONS, 2, f, f))
    w[:, 0, pad, pad] = 1.0
    for action, (dr, dc) in enumerate(ACTION_OFFSETS):
        w[action, 1, pad + dr, pad + dc] = gamma
    return ConvKernel(w)


def propagation_probe_kernel(f: int) -> ConvKernel:
    """All-ones VI kernel: positive support grows by exactly (f-1)/2 per sweep."""
    if f < 3 or f % 2 == 0:
        raise ValueError(f"kernel size {f} must be odd and >= 3")
    return ConvKernel(np.ones((NUM_ACTIONS, 2, f, f)))
