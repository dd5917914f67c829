"""Vision-token compression projectors with cost accounting and gradient checks."""

from .fusion import (
    FeatureStack,
    FusionConfig,
    ModuleParams,
    TokenSequence,
    avgpool_projector,
    init_params,
    mbtf_forward,
    projector_forward,
    select_block_indices,
    stf_forward,
    tokenconcat_projector,
)
from .flops import FlopsReport, llm_prefill_flops, projector_flops, table_grid, token_count
from .gradcheck import GradReport, check_module
from .pipeline import RunConfig, bench, gen_features, run_forward, toy_train

__version__ = "0.1.0"

__all__ = [
    "FeatureStack",
    "FusionConfig",
    "FlopsReport",
    "GradReport",
    "ModuleParams",
    "RunConfig",
    "TokenSequence",
    "avgpool_projector",
    "bench",
    "check_module",
    "gen_features",
    "init_params",
    "llm_prefill_flops",
    "mbtf_forward",
    "projector_forward",
    "projector_flops",
    "run_forward",
    "select_block_indices",
    "stf_forward",
    "table_grid",
    "token_count",
    "tokenconcat_projector",
    "toy_train",
]
