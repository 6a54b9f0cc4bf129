"""Desk-scale VLA fine-tuning bench: gridworld simulator, rationale teachers,
a from-scratch transformer policy, joint-loss training, and evaluation tooling."""

import os as _os

for _var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
    _os.environ.setdefault(_var, "1")

# The workload is thousands of small float64 matrices; multi-threaded BLAS
# only adds synchronization cost (measured ~1.3x slower), so pin it to one
# thread even when numpy loaded before this package.
try:
    import threadpoolctl as _threadpoolctl

    _threadpoolctl.threadpool_limits(limits=1, user_api="blas")
except Exception:  # perf-only; fine to run without the limit
    pass

from .autodiff import Tape, Tensor, fd_gradient
from .model import ModelConfig, init_params
from .sim import TASKS, Action, Scene, Task, VariantSpec
from .trainer import TrainConfig, train_loop
from .vocab import Vocabulary, build_vocab

__all__ = [
    "Action",
    "ModelConfig",
    "Scene",
    "TASKS",
    "Tape",
    "Task",
    "Tensor",
    "TrainConfig",
    "VariantSpec",
    "Vocabulary",
    "build_vocab",
    "fd_gradient",
    "init_params",
    "train_loop",
]
