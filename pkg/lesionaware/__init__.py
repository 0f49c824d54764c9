import os

# BLAS/OpenMP read their thread counts once, when numpy loads
_threads = os.environ.get('LESIONAWARE_THREADS')
if _threads:
    for _name in ('OMP_NUM_THREADS', 'OPENBLAS_NUM_THREADS', 'MKL_NUM_THREADS'):
        os.environ.setdefault(_name, _threads)

from .config import ModelConfig, RunConfig, TrainConfig  # noqa: E402
from .data import Dataset, Sample, generate_synthetic, load_dataset, save_dataset  # noqa: E402
from .errors import *  # noqa: E402,F401,F403
from .errors import __all__ as _error_names  # noqa: E402
from .metrics import evaluate  # noqa: E402
from .model import LesionAwareModel, build_model  # noqa: E402
from .training import train, train_stage1, train_stage2  # noqa: E402

__all__ = [
    'Dataset',
    'LesionAwareModel',
    'ModelConfig',
    'RunConfig',
    'Sample',
    'TrainConfig',
    'build_model',
    'evaluate',
    'generate_synthetic',
    'load_dataset',
    'save_dataset',
    'train',
    'train_stage1',
    'train_stage2',
] + list(_error_names)
