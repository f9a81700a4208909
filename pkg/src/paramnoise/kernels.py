"""Backend selection for the fused MLP kernels.

The compiled extension is used when it imports; setting
``PARAMNOISE_KERNELS=numpy`` forces the pure numpy fallback.
"""

import os

from . import _kernels_py

BACKEND = "numpy"
_impl = _kernels_py

if os.environ.get("PARAMNOISE_KERNELS", "").lower() != "numpy":
    try:
        from . import _kernels as _impl  # type: ignore[no-redef]

        BACKEND = "compiled"
    except ImportError:
        pass

mlp_forward = _impl.mlp_forward
td_grad = _impl.td_grad
input_grad = _impl.input_grad
noisy_weights = _impl.noisy_weights
