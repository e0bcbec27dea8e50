"""Input checks shared by the estimators and the CLI."""

import os

import numpy as np
from sklearn.utils.validation import check_array

from .errors import ShapeError

THREADS_ENV = "FOCALCODEC_THREADS"


def check_utterances(X, n_features=None):
    """Normalise ``X`` to a list of finite float32 ``[T, D]`` arrays.

    ``X`` may be one 2-d array (a single utterance) or a sequence of them.
    Returns ``(utterances, was_single)``.
    """
    single = isinstance(X, np.ndarray) and X.ndim == 2
    items = [X] if single else list(X)
    if not items:
        raise ValueError("no utterances given")
    out = []
    for i, x in enumerate(items):
        x = check_array(x, dtype=np.float32, ensure_all_finite=True, ensure_min_samples=1)
        if n_features is not None and x.shape[1] != n_features:
            raise ShapeError(f"utterance {i} has {x.shape[1]} features, expected {n_features}",
                             dim="D", expected=n_features, actual=x.shape[1])
        out.append(x)
    return out, single


def check_token_sequences(tokens, codebook_size):
    """Normalise to a list of int64 token arrays, rejecting out-of-range values."""
    single = isinstance(tokens, np.ndarray) and tokens.ndim == 1
    items = [tokens] if single else list(tokens)
    out = []
    for i, t in enumerate(items):
        t = np.asarray(t)
        if t.ndim != 1 or (t.size and not np.issubdtype(t.dtype, np.integer)):
            raise ValueError(f"token sequence {i} must be a 1-d integer array")
        bad = np.flatnonzero((t < 0) | (t >= codebook_size))
        if bad.size:
            raise ValueError(f"sequence {i}: token {int(t[bad[0]])} at position {int(bad[0])} "
                             f"is outside [0, {codebook_size})")
        out.append(t.astype(np.int64))
    return out, single


def worker_count(default=1):
    """Worker cap from the ``FOCALCODEC_THREADS`` environment variable."""
    raw = os.environ.get(THREADS_ENV)
    if not raw:
        return default
    try:
        n = int(raw)
    except ValueError:
        raise ValueError(f"{THREADS_ENV} must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise ValueError(f"{THREADS_ENV} must be a positive integer, got {raw!r}")
    return n
