"""Quantized-draft speculative decoding at desk scale.

MXFP4 block floating-point codec, weight-quantized GEMM kernels, a
deterministic toy decoder-only transformer, a recursive multi-level
draft/verify orchestrator, and the closed-form speedup / roofline models.
"""

from .analytics import (
    MultiLevelParams,
    RooflinePoint,
    SpeedupParams,
    effective_draft_speed,
    intensity_of_gemm,
    roofline,
    simulate_rounds,
    speedup_multilevel,
    speedup_sd,
)
from .mxfp4 import (
    MxfpTensor,
    dequantize,
    fp4_decode,
    fp4_encode,
    fp4_to_int8_lut,
    quantize_direct_cast,
)
from .qgemm import (
    GemmShape,
    QuantizedActivationPanel,
    gemm_mxfp4_int8,
    gemm_mxfp4_latescale_f32,
    gemm_reference,
    quantize_activations,
)
from .specdec import (
    AcceptanceStats,
    LevelSpec,
    SpecTree,
    greedy_generate,
    run_benchmark,
    speculative_generate,
)
from .tinylm import (
    KvCache,
    LmConfig,
    TinyLmModel,
    direct_cast_mxfp4,
    forward,
    greedy_next,
    init_seeded,
    rollback,
)

__version__ = "0.1.0"
