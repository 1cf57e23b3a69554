"""Free-energy blind spots of linear classifier heads: attacks, spectral
regularisers, and a desk-scale experiment harness."""

from .energy import ClassifierHead, free_energy, head_forward, logsumexp
from .errors import (
    ConfigError,
    DegenerateSpectrum,
    EmptyInput,
    NoNullSpace,
    NumericalFailure,
    ShapeError,
    TrainingDiverged,
)
from .linalg import SubspaceBasis, SvdResult, decompose, null_space_of_transpose, rank, sigma_extremes, svd
from .regularizers import cn_penalty, finite_diff_check, lsv_penalty
from .vulnerability import AttackKind, AttackResult, lsv_attack, nsv_attack, random_perp_attack, verify_min_direction

__version__ = "0.1.0"

__all__ = [
    "AttackKind", "AttackResult", "ClassifierHead", "ConfigError", "DegenerateSpectrum",
    "EmptyInput", "NoNullSpace", "NumericalFailure", "ShapeError", "SubspaceBasis",
    "SvdResult", "TrainingDiverged", "cn_penalty", "decompose", "finite_diff_check",
    "free_energy", "head_forward", "logsumexp", "lsv_attack", "lsv_penalty",
    "null_space_of_transpose", "nsv_attack", "random_perp_attack", "rank",
    "sigma_extremes", "svd", "verify_min_direction",
]
