"""Fast invariant checks behind ``focalcodec selfcheck``.

Each check returns ``(name, passed, detail)``; together they run in a few seconds.
"""

from __future__ import annotations

import numpy as np

from . import bsq
from . import numerics as nx
from .codec import CodecConfig, CodecModel, encode
from .focalnet import snake
from .io import TokenStream, pack_tokens
from .metrics import codebook_stats
from .vocoder import istft, stft


def _bsq_geometry(rng):
    v = rng.normal(size=(10000, 13))
    code = bsq.binary_quantize(bsq.project_to_sphere(v))
    norm_err = np.max(np.abs(np.linalg.norm(code, axis=1) - 1.0))
    return norm_err < 1e-6, f"max_norm_err={norm_err:.2e}"


def _codebook_oracle(rng):
    L = 8
    codes = bsq.index_to_code(np.arange(2 ** L), L, dtype=np.float64)
    u = bsq.project_to_sphere(rng.normal(size=(200, L)))
    brute = np.argmax(u @ codes.T, axis=1)
    fast = bsq.code_index(bsq.binary_quantize(u))
    return bool(np.array_equal(brute, fast)), f"L={L} n=200"


def _packing(_rng):
    blob = pack_tokens([0, 8191], 13)
    bits = "0" * 13 + "1" * 13 + "0" * 6
    ok = blob == int(bits, 2).to_bytes(4, "big")
    tokens = np.arange(0, 8192, 7)
    back = TokenStream.from_bytes(TokenStream("fc50", 13, 16000, tokens).to_bytes()).tokens
    return ok and bool(np.array_equal(back, tokens)), f"payload={blob.hex()}"


def _stft_roundtrip(rng):
    x = rng.normal(size=16000)
    y = istft(stft(x), length=x.size)
    err = np.max(np.abs(x - y)[1024:-1024])
    return err < 1e-4, f"interior_err={err:.2e}"


def _snake_gradient(rng):
    alpha = rng.uniform(0.5, 2.0, size=4)
    err = nx.finite_diff_check(lambda t: snake(t, alpha).sum(), rng.normal(size=(5, 4)), eps=1e-5)
    return err < 1e-3, f"rel_err={err:.2e}"


def _rate_law(_rng):
    model = CodecModel.init(CodecConfig(variant="fc12_5", input_dim=8, hidden_dims=(8, 8, 4),
                                        latent_dim=4))
    feats = np.random.default_rng(1).normal(size=(23, 8))
    n = encode(feats, model).size
    return n == -(-23 // 4), f"T=23 tokens={n}"


def _metrics(_rng):
    usage, ent = codebook_stats(np.arange(4096), 8192)
    return abs(usage - 0.5) < 1e-12 and abs(ent - 12 / 13) < 1e-9, f"usage={usage} entropy={ent:.4f}"


CHECKS = [
    ("bsq_geometry", _bsq_geometry),
    ("codebook_oracle", _codebook_oracle),
    ("token_packing", _packing),
    ("stft_roundtrip", _stft_roundtrip),
    ("snake_gradient", _snake_gradient),
    ("rate_law", _rate_law),
    ("codebook_metrics", _metrics),
]


def run_all(seed=0):
    results = []
    for name, fn in CHECKS:
        try:
            ok, detail = fn(np.random.default_rng(seed))
        except Exception as exc:  # noqa: BLE001 - a crash is a failed check
            ok, detail = False, f"{type(exc).__name__}: {exc}"
        results.append((name, bool(ok), detail))
    return results
