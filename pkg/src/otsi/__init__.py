"""
Learning the ground cost of entropic optimal transport from subset
correspondences, by differentiating through Sinkhorn iterations.
"""

from .core import (AlignmentProblem, CostMatrix, PointCloud, TransportPlan, dual_objective,
                   entropy, sinkhorn, transport_objective)
from .costs import (MlpCostModel, PolyCostModel, cost_matrix, default_init, euclidean_init,
                    load_model, save_model)
from .data import (CsvSchema, LabeledDataset, MoonSpec, load_csv, make_two_moons, pca_project,
                   save_csv, split, two_moons_splits)
from .errors import (ConfigError, DegenerateGeometryError, InfeasibleMaskError, InputError,
                     InstanceError, NumericalError, OTSIError, ParseError, SchemaError)
from .mimic import constrained_sinkhorn, mimic_init, mimic_loss
from .side_info import (Correspondence, ForbiddenSet, build_forbidden, hard_assignment,
                        pair_accuracy, side_info_loss, subset_accuracy)
from .trainer import EarlyStopping, MimicConfig, TrainConfig, TrainReport, evaluate, train
from .unrolled import loss_grad, plan_vjp, sinkhorn_forward

__all__ = [
    "AlignmentProblem",
    "CostMatrix",
    "PointCloud",
    "TransportPlan",
    "dual_objective",
    "entropy",
    "sinkhorn",
    "transport_objective",
    "MlpCostModel",
    "PolyCostModel",
    "cost_matrix",
    "default_init",
    "euclidean_init",
    "load_model",
    "save_model",
    "CsvSchema",
    "LabeledDataset",
    "MoonSpec",
    "load_csv",
    "make_two_moons",
    "pca_project",
    "save_csv",
    "split",
    "two_moons_splits",
    "ConfigError",
    "DegenerateGeometryError",
    "InfeasibleMaskError",
    "InputError",
    "InstanceError",
    "NumericalError",
    "OTSIError",
    "ParseError",
    "SchemaError",
    "constrained_sinkhorn",
    "mimic_init",
    "mimic_loss",
    "Correspondence",
    "ForbiddenSet",
    "build_forbidden",
    "hard_assignment",
    "pair_accuracy",
    "side_info_loss",
    "subset_accuracy",
    "EarlyStopping",
    "MimicConfig",
    "TrainConfig",
    "TrainReport",
    "evaluate",
    "train",
    "loss_grad",
    "plan_vjp",
    "sinkhorn_forward",
]

__version__ = "0.1.0"
