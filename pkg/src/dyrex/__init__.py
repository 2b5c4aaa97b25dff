"""Extractive QA with dynamically refined start/end span queries.

Core layout: ``numkit`` (matrices, elementary ops, gradients), ``attention``
(multi-head attention, query-interaction masks), ``encoder`` (token
representations), ``qahead`` (query decoder + span scoring/decoding),
``data`` (MRQA-format IO, synthetic task, batching), ``metrics`` (EM/F1),
``trainer`` (Adam + schedule, training, grad checks, ablations), ``cli``.

The hot numeric kernels run on a compiled extension when built, with a pure
numpy fallback (see ``dyrex.backend``).
"""

from . import backend

__version__ = "0.1.0"

__all__ = ["backend", "__version__"]
