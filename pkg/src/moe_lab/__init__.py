from .tensor import Tensor, TensorError, ShapeError, SpecError, einsum, softmax, top_k, rms_norm
from .autograd import GradGraph, GraphError, Var, backward, grad_check, GradCheckReport
from .routing import (
    RouterConfig, RoutingError, RoutingOutcome, RoutingStats,
    route, expert_capacity, load_balance_loss, router_z_loss,
)
from .model import (
    ModelConfig, ModelParams, ParamCount, build_model, count_params,
    forward, lm_loss, evaluate_loss, moe_layer_indices, moe_ffn_oracle,
)
from .mesh import (
    MeshAxis, MeshSpec, ShardingSpec, ShardingError, DeviceProfile,
    default_specs, shard_shape, plan_step, brute_force_comm,
    memory_per_device, estimate_step_time, validate_mesh, compare_strategies,
    sharding_report, preset_config,
)
from .budget import chinchilla_tokens, dense_budget, moe_token_allocation, plan_references
from .corpus import DataConfig, build_corpus, gen_corpus, markov_entropy_rate
from .optim import OptimizerConfig, ScheduleConfig, AdamWState, adamw_step, lr_at, NonFiniteGradientError
from .config import RunConfig, load_run_config, validate_environment, get_data_dir, get_fs
from .trainer import train, TrainingDivergedError, tradeoff_table
from .orchestrator import DAG, load_nodes
from .testing import validate
from . import debug

__all__ = [
    # Tensors & autodiff
    'Tensor', 'TensorError', 'ShapeError', 'SpecError', 'einsum', 'softmax', 'top_k', 'rms_norm',
    'GradGraph', 'GraphError', 'Var', 'backward', 'grad_check', 'GradCheckReport',
    # Routing
    'RouterConfig', 'RoutingError', 'RoutingOutcome', 'RoutingStats',
    'route', 'expert_capacity', 'load_balance_loss', 'router_z_loss',
    # Model
    'ModelConfig', 'ModelParams', 'ParamCount', 'build_model', 'count_params',
    'forward', 'lm_loss', 'evaluate_loss', 'moe_layer_indices', 'moe_ffn_oracle',
    # Sharding simulator
    'MeshAxis', 'MeshSpec', 'ShardingSpec', 'ShardingError', 'DeviceProfile',
    'default_specs', 'shard_shape', 'plan_step', 'brute_force_comm',
    'memory_per_device', 'estimate_step_time', 'validate_mesh', 'compare_strategies',
    'sharding_report', 'preset_config',
    # Budget planner
    'chinchilla_tokens', 'dense_budget', 'moe_token_allocation', 'plan_references',
    # Training
    'DataConfig', 'build_corpus', 'gen_corpus', 'markov_entropy_rate',
    'OptimizerConfig', 'ScheduleConfig', 'AdamWState', 'adamw_step', 'lr_at', 'NonFiniteGradientError',
    'train', 'TrainingDivergedError', 'tradeoff_table',
    # Config
    'RunConfig', 'load_run_config', 'validate_environment', 'get_data_dir', 'get_fs',
    # Other
    'validate', 'DAG', 'load_nodes', 'debug',
]
