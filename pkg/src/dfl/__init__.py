"""Self-distillation from a pool of trajectory teachers combined with periodic head resets."""

from .engine import (
    DflConfig,
    MetricsRecord,
    TeacherPool,
    compute_total_loss,
    forward_all,
    init_pool,
    maybe_update_teachers,
    reset_student,
    train,
    update_meaningfulness,
)
from .experiment import RunConfig, aggregate_seeds, combine_group_stats, parse_config, run_single
from .model import HeadSnapshot, Model, apply_head, build_model, load_head, snapshot_head

__version__ = "0.1.0"
