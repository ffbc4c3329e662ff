"""gridplan: differentiable grid-world planners with exact oracles.

The package bundles a minimal rank-4 autodiff core, a grid-world dataset
generator with A*/Dijkstra/value-iteration oracles, three convolutional
planner variants, an imitation-learning trainer, and an evaluation and
sweep harness. See the demos/ directory for narrative walk-throughs and
the ``gridplan`` command for the batch interface.
"""

from .dataset import DatasetManifest, build_dataset, encode_samples, load_dataset, one_hot
from .evaluation import (
    EvalReport,
    Episode,
    SweepSpec,
    evaluate,
    model_policy,
    oracle_policy,
    rollout,
    run_sweep,
    single_step_accuracy,
    trajectory_difference,
    write_sweep_csv,
)
from .gridworld import (
    ACTION_NAMES,
    ACTION_OFFSETS,
    NUM_ACTIONS,
    GenerationError,
    GridMap,
    PlanningSample,
    Unreachable,
    astar_shortest,
    chebyshev,
    dijkstra_field,
    generate_map,
    label_sample,
    step_cell,
    tabular_vi,
)
from .models import (
    Model,
    ModelConfig,
    attention_summarize,
    deterministic_move_kernel,
    forward,
    gs_module,
    heuristic_k,
    init_params,
    iteration_table,
    predict_logits,
    propagation_probe_kernel,
    scaled_k,
    vi_module,
)
from .tensor import (
    ConvKernel,
    GradientError,
    ShapeError,
    Tape,
    Tensor,
    add,
    backward,
    channel_max,
    conv2d_same,
    extract_at,
    finite_diff_check,
    hadamard,
    leaky_relu,
    sigmoid,
    softmax_blend,
    softmax_cross_entropy,
    stack_channels,
    total_sum,
)
from .training import (
    DivergenceRules,
    LossHistory,
    RunRecord,
    TrainConfig,
    detect_divergence,
    resume_training,
    train,
)

__version__ = "0.1.0"
