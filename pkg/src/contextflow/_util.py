import hashlib
import json

import numpy as np

_CHUNK_ELEMS = 4_000_000


def pairwise_sqdist(A, B):
    """Squared Euclidean distances between rows of ``A`` and rows of ``B``.

    Computed from explicit differences (not the ``|a|^2 + |b|^2 - 2ab``
    expansion) so identical rows give exactly zero and ``D(A, B).T`` equals
    ``D(B, A)`` bitwise.
    """
    A = np.asarray(A, dtype=float)
    B = np.asarray(B, dtype=float)
    if A.ndim != 2 or B.ndim != 2:
        raise ValueError("expected 2-D arrays")
    if A.shape[1] != B.shape[1]:
        raise ValueError(f"feature dimension mismatch: {A.shape[1]} vs {B.shape[1]}")
    n_a, n_b, d = A.shape[0], B.shape[0], A.shape[1]
    out = np.empty((n_a, n_b))
    rows = max(1, _CHUNK_ELEMS // max(1, n_b * d))
    for start in range(0, n_a, rows):
        diff = A[start:start + rows, None, :] - B[None, :, :]
        out[start:start + rows] = np.einsum("ijk,ijk->ij", diff, diff)
    return out


def pairwise_dist(A, B):
    return np.sqrt(pairwise_sqdist(A, B))


def config_hash(obj) -> str:
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()[:16]
