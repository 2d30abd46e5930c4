"""Shared contrastive kernel: -log softmax of the positive logit.

Every contrastive loss in the toolkit (next-frame, retrieval, masked-segment,
twin-branch) reduces to classifying the positive at column 0 of a logit row.
"""

from __future__ import annotations

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ShapeError


def contrastive_from_logits(logits: Tensor) -> Tensor:
    """Mean over rows of -log(exp(l_0) / sum_c exp(l_c)).

    `logits` is (rows, candidates) with the positive in column 0, or a single
    1-D candidate row.  Stable for temperature-sharpened logits.
    """
    if logits.data.ndim == 1:
        logits = ad.reshape(logits, (1, logits.shape[0]))
    if logits.data.ndim != 2 or logits.shape[1] < 1:
        raise ShapeError("contrastive_from_logits", logits.shape)
    rows = logits.shape[0]
    positive = ad.reshape(ad.narrow(logits, 1, 0, 1), (rows,))
    return ad.tmean(ad.sub(ad.logsumexp_last(logits), positive))
