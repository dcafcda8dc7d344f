"""Super-token attention: token clustering + attention over cluster centers.

The package implements, on a small numpy autodiff core, the sparse
token-to-region association pipeline (sample regions, attend over region
descriptors, broadcast back to tokens), the hierarchical vision backbone
built from it, an analytic parameter/MAC accountant, a reference training
harness on synthetic data, and a CLI (`stattn`) exposing all of it.
"""

from stattn.errors import (
    ConfigError,
    DataError,
    NonFiniteError,
    ShapeError,
    StattnError,
    VerificationError,
)
from stattn.tensor import (
    Tensor,
    adaptive_avg_pool,
    batch_norm,
    conv2d,
    depthwise_conv3x3,
    finite_difference,
    fold3x3,
    gelu,
    gradient_check,
    layer_norm,
    matmul,
    no_grad,
    softmax_lastdim,
    swish,
    unfold3x3,
)
from stattn.sta import (
    AssociationMap,
    StaConfig,
    StaWeights,
    SuperTokens,
    gsa_forward,
    sta_dense_oracle,
    sta_forward,
    sts,
    token_upsample,
)
from stattn.blocks import ArchConfig, Model, PRESET_NAMES, build_model, preset
from stattn.flops import (
    FlopsReport,
    count_model,
    flops_gsa,
    flops_sta,
    flops_sts_dense,
    flops_sts_sparse,
)
from stattn.checkpoint import load_checkpoint, save_checkpoint
from stattn.config import read_config, read_sidecar, write_sidecar

__version__ = "0.1.0"
