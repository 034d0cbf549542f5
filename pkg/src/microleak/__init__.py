"""Deterministic microarchitectural timing-channel simulator and analyzer."""

from .machine import (
    CacheGeometry,
    CsReport,
    Domain,
    DomainViolationError,
    FenceVariant,
    InvalidMaskError,
    KernelCosts,
    Latencies,
    Machine,
    MicroArchConfig,
    OpKind,
    PadExceededError,
    WorkloadOp,
    code_base,
    data_base,
    encode_ops,
    measure_worst_case_pad,
    worst_case_total,
)
from .attacks import AttackDriver, AttackKind, AttackSpec, get_driver
from .leakage import (
    ChannelMatrix,
    LeakageReport,
    SampleSet,
    analyze,
    channel_matrix,
    mutual_information,
    rank_correlation,
    zero_leakage_bound,
)
from .harness import (
    ConfigError,
    ExperimentConfig,
    ParseError,
    SchemaError,
    config_fingerprint,
    load_config,
    load_config_file,
    run_experiment,
    sweep,
)
from .render import render_heatmap

__version__ = "0.1.0"

__all__ = [
    "AttackDriver",
    "AttackKind",
    "AttackSpec",
    "CacheGeometry",
    "ChannelMatrix",
    "ConfigError",
    "CsReport",
    "Domain",
    "DomainViolationError",
    "ExperimentConfig",
    "FenceVariant",
    "InvalidMaskError",
    "KernelCosts",
    "Latencies",
    "LeakageReport",
    "Machine",
    "MicroArchConfig",
    "OpKind",
    "PadExceededError",
    "ParseError",
    "SampleSet",
    "SchemaError",
    "WorkloadOp",
    "analyze",
    "channel_matrix",
    "code_base",
    "config_fingerprint",
    "data_base",
    "encode_ops",
    "get_driver",
    "load_config",
    "load_config_file",
    "measure_worst_case_pad",
    "mutual_information",
    "rank_correlation",
    "render_heatmap",
    "run_experiment",
    "sweep",
    "worst_case_total",
    "zero_leakage_bound",
    "__version__",
]
