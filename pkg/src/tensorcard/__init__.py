"""Cardinality estimation from a covering of low-rank count tensors."""

__version__ = "0.1.0"

from .catalog import Schema, SchemaOptions, encode_columns, ingest_csv
from .covering import AttributeJoinPlan, Block, CoveringDesign, greedy_covering, load_design, plan_joins, verify_covering
from .estimator import EstimatorIndex, Predicate, Query, estimate, train_index, update_weights, warm_start_retrain
from .tensor_core import ALSOptions, CPModel, DenseTensor, cp_als_fit
from .workbench import generate_workload, oracle_count, qerror, run_benchmark, zero_accuracy

__all__ = [
    "ALSOptions",
    "AttributeJoinPlan",
    "Block",
    "CPModel",
    "CoveringDesign",
    "DenseTensor",
    "EstimatorIndex",
    "Predicate",
    "Query",
    "Schema",
    "SchemaOptions",
    "cp_als_fit",
    "encode_columns",
    "estimate",
    "generate_workload",
    "greedy_covering",
    "ingest_csv",
    "load_design",
    "oracle_count",
    "plan_joins",
    "qerror",
    "run_benchmark",
    "train_index",
    "update_weights",
    "verify_covering",
    "warm_start_retrain",
    "zero_accuracy",
]
