"""attnforge: describe an attention variant as a handful of expression
fragments, execute it densely or blockwise in float64, differentiate it,
schedule it onto a device description, and emit a portable kernel."""

from .attention import (AttentionSpec, DirectRowNorm, Dims, ExtraInput,
                        ModificationFn, OnlineRowNorm, Pattern,
                        BUILTIN_NAMES, builtin, build_parallel,
                        build_recurrent, derive_backward, with_causal_mask)
from .errors import (ForgeError, InputError, NanError, NoFeasiblePlanError,
                     ParseError, SemanticError, UnknownVariantError,
                     UnsupportedError)

__version__ = "0.1.0"

__all__ = [
    "AttentionSpec", "DirectRowNorm", "Dims", "ExtraInput",
    "ModificationFn", "OnlineRowNorm", "Pattern", "BUILTIN_NAMES",
    "builtin", "build_parallel", "build_recurrent", "derive_backward",
    "with_causal_mask",
    "ForgeError", "InputError", "NanError", "NoFeasiblePlanError",
    "ParseError", "SemanticError", "UnknownVariantError",
    "UnsupportedError", "__version__",
]
