"""Min-max multi-agent routing toolkit.

Solutions are permutations of city indices 1..N and per-agent depot tokens
N+1..N+M generated sequentially under feasibility masks; the objective is the
maximum tour length over agents. The package bundles instance tooling, the
sequential environment, a transformer policy with multi-agent positional
encoding and an equity-oriented decoding context, REINFORCE training with
symmetric shared baselines, exact/heuristic reference solvers, and a CLI.
"""

from .env import (
    SequenceState,
    Solution,
    apply_action,
    decompose,
    feasible_actions,
    initial_state,
    minmax_cost,
    tour_length,
    validate,
)
from .instances import (
    GeometricTransform,
    Instance,
    TaskKind,
    TransformKind,
    apply_transform,
    dihedral_transform,
    generate_uniform,
    load_instance,
    parse_tsplib,
    save_instance,
    to_routing_instance,
)
from .model import DecodeMode, ModelConfig, RoutingPolicy, load_checkpoint, positional_encoding, save_checkpoint
from .oracles import brute_force, greedy_makespan, random_policy
from .training import (
    FinetuneConfig,
    TrainConfig,
    finetune,
    paper_profile,
    reinforce_step,
    shared_baseline,
    symmetric_batch,
    toy_profile,
    train,
)
from .bench import EvalReport, evaluate, solve_augmented, throughput_bench

__version__ = "0.1.0"

__all__ = [
    "DecodeMode",
    "EvalReport",
    "FinetuneConfig",
    "GeometricTransform",
    "Instance",
    "ModelConfig",
    "RoutingPolicy",
    "SequenceState",
    "Solution",
    "TaskKind",
    "TrainConfig",
    "TransformKind",
    "apply_action",
    "apply_transform",
    "brute_force",
    "decompose",
    "dihedral_transform",
    "evaluate",
    "feasible_actions",
    "finetune",
    "generate_uniform",
    "greedy_makespan",
    "initial_state",
    "load_checkpoint",
    "load_instance",
    "minmax_cost",
    "paper_profile",
    "parse_tsplib",
    "positional_encoding",
    "random_policy",
    "reinforce_step",
    "save_checkpoint",
    "save_instance",
    "shared_baseline",
    "solve_augmented",
    "symmetric_batch",
    "throughput_bench",
    "to_routing_instance",
    "tour_length",
    "toy_profile",
    "train",
    "validate",
]
