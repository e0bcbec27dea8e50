"""End-to-end acceptance criteria A1-A11.

Each test prints one ``A<n> PASS|FAIL <detail>`` line; the lines are repeated
in the terminal summary so they survive output capture.
"""

import math
import time

import numpy as np
import pytest

from conftest import ACCEPTANCE_LINES
from focalcodec import bsq, io
from focalcodec import numerics as nx
from focalcodec import trainer as tr
from focalcodec.codec import CodecConfig, CodecModel, bitrate, compress, encode, knn_convert
from focalcodec.errors import FormatError
from focalcodec.focalnet import (FocalBlockParams, FocalModulationConfig, focal_block,
                                 focal_modulation, snake)
from focalcodec.metrics import codebook_stats, measure_rtf
from focalcodec.vocoder import (StreamConfig, VocoderConfig, VocoderParams, crossfade_weights,
                                decode_wave, istft, stft, stream_decode, synthesize)


def report(tag, ok, detail):
    line = f"{tag} {'PASS' if ok else 'FAIL'} {detail}"
    print(line)
    ACCEPTANCE_LINES.append(line)
    assert ok, line


def bitstring_oracle(tokens, bits):
    s = "".join(format(t, f"0{bits}b") for t in tokens)
    s += "0" * (-len(s) % 8)
    return int(s, 2).to_bytes(len(s) // 8, "big")


def test_a1_bsq_geometry():
    t0 = time.perf_counter()
    v = np.random.default_rng(1).normal(size=(100_000, 13))
    u = bsq.project_to_sphere(v)
    q = bsq.binary_quantize(u)
    norm_err = np.max(np.abs(np.linalg.norm(q, axis=1) - 1))
    exact = bool(np.all(np.abs(q) == 1 / math.sqrt(13)))
    sq_err = np.max(np.sum((u - q) ** 2, axis=1))
    bound = 2 - 2 / math.sqrt(13)
    elapsed = time.perf_counter() - t0
    ok = norm_err <= 1e-6 and exact and sq_err <= bound and elapsed < 10
    report("A1", ok, f"max_norm_err={norm_err:.1e} components_exact={exact} max_sq_err={sq_err:.4f} bound={bound:.4f} "
                     f"time={elapsed:.2f}s")


def test_a2_codebook_oracle():
    t0 = time.perf_counter()
    rng = np.random.default_rng(2)
    mismatches = {}
    for L in (4, 8, 13):
        codes = bsq.index_to_code(np.arange(2 ** L), L, dtype=np.float64)
        u = bsq.project_to_sphere(rng.normal(size=(1000, L)))
        brute = np.argmax(u @ codes.T, axis=1)
        fast = bsq.code_index(bsq.binary_quantize(u))
        roundtrip = np.array_equal(bsq.code_index(codes), np.arange(2 ** L))
        mismatches[L] = int(np.sum(brute != fast)) + (0 if roundtrip else 1)
    elapsed = time.perf_counter() - t0
    ok = not any(mismatches.values()) and elapsed < 60
    report("A2", ok, f"mismatches={mismatches} time={elapsed:.2f}s")


def _randomized_block(dim, rng):
    cfg = FocalModulationConfig(dim=dim, layer_scale_init=0.5)
    p = FocalBlockParams.init(cfg, rng)
    for _, t in nx.named_parameters(p):
        t.data = rng.normal(size=t.shape) * 0.3
    return cfg, p


def test_a3_gradient_suite():
    t0 = time.perf_counter()
    rng = np.random.default_rng(3)
    errs = {}
    alpha = rng.uniform(0.3, 2.0, size=4)
    probe = rng.normal(size=(9, 4))
    errs["snake"] = nx.finite_diff_check(lambda t: (snake(t, alpha) * probe).sum(),
                                         rng.normal(size=(9, 4)))
    cfg, p = _randomized_block(4, rng)
    errs["focal_modulation"] = nx.finite_diff_check(
        lambda t: (focal_modulation(t, p, cfg) * probe).sum(), rng.normal(size=(9, 4)))
    errs["focal_block"] = nx.finite_diff_check(
        lambda t: (focal_block(t, p, cfg) * probe).sum(), rng.normal(size=(9, 4)))
    errs["entropy_loss"] = nx.finite_diff_check(
        lambda t: bsq.entropy_loss(t, temperature=0.5), bsq.project_to_sphere(rng.normal(size=(6, 5))))

    model = CodecModel.init(CodecConfig(input_dim=6, hidden_dims=(5, 4, 3), latent_dim=3), seed=3)
    x = rng.normal(size=(6, 6))
    w = model.compressor[0].proj_w
    frozen = bsq.FrozenQuantization()

    def f(t):
        model.compressor[0].proj_w = t
        with frozen:
            return tr.stage1_loss(x, model)[0]

    errs["stage1_loss"] = nx.finite_diff_check(f, w.data.astype(np.float64), eps=1e-5)
    model.compressor[0].proj_w = w
    elapsed = time.perf_counter() - t0
    ok = max(errs.values()) < 1e-3 and elapsed < 120
    report("A3", ok, " ".join(f"{k}={v:.1e}" for k, v in errs.items()) + f" time={elapsed:.1f}s")


def test_a4_rates():
    got = {}
    for variant, rate, bps in [("fc50", 50, 650), ("fc25", 25, 325), ("fc12_5", 12.5, 162.5)]:
        cfg = CodecConfig(variant=variant)
        got[variant] = (cfg.token_rate_hz, bitrate(cfg))
        assert cfg.codebook_size == 8192
        assert got[variant] == (rate, bps)
    violations = 0
    for variant in ("fc50", "fc25", "fc12_5"):
        model = CodecModel.init(CodecConfig(variant=variant, input_dim=4, hidden_dims=(4, 4, 2),
                                            latent_dim=2))
        factor = model.config.total_factor
        feats = np.random.default_rng(4).normal(size=(1000, 4))
        violations += sum(encode(feats[:t], model).size != -(-t // factor) for t in range(1, 1001))
    ok = violations == 0
    report("A4", ok, "rates=" + ",".join(f"{v}:{r}Hz/{b / 1000:g}kbps" for v, (r, b) in got.items())
           + f" length_law_violations={violations}")


@pytest.fixture(scope="module")
def trained():
    data = tr.generate_synthetic_features(tr.SyntheticFeatureSpec())
    cfg = CodecConfig(hidden_dims=(64, 32, 16), latent_dim=8)
    t0 = time.perf_counter()
    model, hist = tr.train_stage1(data, CodecModel.init(cfg), tr.TrainConfig(steps=200))
    return data, model, hist, time.perf_counter() - t0


@pytest.mark.slow
def test_a5_toy_training(trained):
    data, model, hist, elapsed = trained
    usage, _ = codebook_stats(tr.encode_dataset(data, model), 256)
    first, last = hist[0]["total"], hist[-1]["total"]
    ok = last < 0.5 * first and usage > 8 / 256 and elapsed < 300
    report("A5", ok, f"initial_total={first:.4f} final_total={last:.4f} "
                     f"code_usage={usage * 256:.0f}/256 time={elapsed:.1f}s")


def test_a6_entropy_cases():
    const = bsq.entropy_loss(np.tile(bsq.project_to_sphere(np.ones((1, 4))), (8, 1)),
                             temperature=1e-3).item()
    balanced = bsq.entropy_loss(np.array([[1.0], [-1.0]] * 4), temperature=1e-3).item()
    u = bsq.project_to_sphere(np.random.default_rng(6).normal(size=(32, 13)))
    perm = np.random.default_rng(7).permutation(32)
    a = bsq.entropy_loss(u).item()
    b = bsq.entropy_loss(u[perm]).item()
    ok = abs(const) < 1e-3 and abs(balanced + math.log(2)) < 1e-3 and a == b
    report("A6", ok, f"constant={const:.2e} balanced={balanced:.6f} (-ln2={-math.log(2):.6f}) "
                     f"permutation_bitwise={a == b}")


def test_a7_dsp():
    x = np.random.default_rng(8).normal(size=32000)
    err = np.max(np.abs(istft(stft(x), length=x.size) - x)[1024:-1024])
    vcfg = VocoderConfig(n_blocks=1, hidden=16, ffn=32, input_dim=8)
    params = VocoderParams.init(vcfg)
    lengths_ok = all(synthesize(np.zeros((t, 8)), params, vcfg).size == 320 * t for t in (1, 7, 50))
    sums_ok = all(np.allclose(sum(crossfade_weights(n)), 1, atol=1e-12) for n in (1, 250, 251))
    model = CodecModel.init(CodecConfig(variant="fc25", input_dim=8, hidden_dims=(8, 8, 4),
                                        latent_dim=4))
    tokens = np.random.default_rng(9).integers(0, 16, size=31)
    offline = decode_wave(tokens, model, params, vcfg).size
    streamed = [stream_decode(tokens, model, params, StreamConfig(c, 4000, 250), vcfg).size
                for c in (2000, 3333, 8000)]
    ok = err < 1e-4 and lengths_ok and sums_ok and all(s == offline for s in streamed)
    report("A7", ok, f"istft_interior_err={err:.1e} samples_per_frame=320:{lengths_ok} "
                     f"crossfade_sum:{sums_ok} stitched={streamed} offline={offline}")


def test_a8_formats(tmp_path):
    tokens = np.random.default_rng(10).integers(0, 8192, size=10_000)
    rt = np.array_equal(io.unpack_tokens(io.pack_tokens(tokens, 13), tokens.size, 13), tokens)
    pair = io.pack_tokens([0, 8191], 13)
    pair_ok = pair == bitstring_oracle([0, 8191], 13)

    feats = np.random.default_rng(11).normal(size=(17, 1024)).astype(np.float32)
    io.write_features(tmp_path / "f.fcf", feats)
    io.write_features(tmp_path / "g.fcf", io.read_features(tmp_path / "f.fcf"))
    fcf_ok = (tmp_path / "f.fcf").read_bytes() == (tmp_path / "g.fcf").read_bytes()

    io.write_wav(tmp_path / "a.wav", np.random.default_rng(12).uniform(-1, 1, 8000))
    io.write_wav(tmp_path / "b.wav", io.read_wav(tmp_path / "a.wav"))
    wav_ok = (tmp_path / "a.wav").read_bytes() == (tmp_path / "b.wav").read_bytes()

    blob = io.TokenStream("fc50", 13, 16000, tokens[:100]).to_bytes()
    try:
        io.TokenStream.from_bytes(blob[:-3])
        trunc = "accepted"
    except FormatError as exc:
        trunc = str(exc)
    ok = rt and pair_ok and fcf_ok and wav_ok and "expected" in trunc
    report("A8", ok, f"roundtrip_1e4={rt} [0,8191]->{pair.hex()} fcf_bit_exact={fcf_ok} "
                     f"wav_bit_exact={wav_ok} truncated='{trunc}'")


@pytest.mark.xfail(strict=True, reason="the quoted bytes are not the MSB-first layout of "
                   "[0, 8191]; 13 zero bits, 13 one bits and 6 pad bits give 00 07 FF C0")
def test_a8_literal_quoted_bytes():
    assert io.pack_tokens([0, 8191], 13) == bytes([0x00, 0x07, 0xFF, 0xE0])


def test_a9_metrics():
    single = codebook_stats(np.array([42]), 8192)
    full = codebook_stats(np.arange(8192), 8192)
    half = codebook_stats(np.arange(4096), 8192)
    rtf = [measure_rtf(10, 5), measure_rtf(1, 1), measure_rtf(3.2, 0.8)]
    ok = (single == (1 / 8192, 0.0) and np.allclose(full, (1, 1))
          and abs(half[0] - 0.5) < 1e-12 and abs(half[1] - 12 / 13) < 1e-4
          and rtf == [2.0, 1.0, 4.0])
    report("A9", ok, f"single={single} full={full} half=({half[0]}, {half[1]:.4f}) rtf={rtf}")


def _brute_knn(src, ref, k):
    out = np.empty((len(src), src.shape[1]))
    for i, q in enumerate(src):
        sims = [float(q @ r / (np.linalg.norm(q) * np.linalg.norm(r))) for r in ref]
        order = sorted(range(len(ref)), key=lambda j: (-sims[j], j))
        out[i] = ref[order[:k]].mean(axis=0)
    return out


def test_a10_knn():
    rng = np.random.default_rng(13)
    src, base = rng.normal(size=(40, 16)), rng.normal(size=(30, 16))
    ref = np.concatenate([base, 2 * base[:10]])  # exact cosine ties with distinct rows
    src[:5] = base[:5]
    err = max(np.max(np.abs(knn_convert(src, ref, k) - _brute_knn(src, ref, k))) for k in (1, 2, 4))
    ident = np.max(np.abs(knn_convert(base, base, 1) - base))
    ok = err < 1e-6 and ident < 1e-6
    report("A10", ok, f"max_err_vs_bruteforce={err:.1e} k1_self_identity_err={ident:.1e}")


@pytest.mark.slow
def test_a11_streaming_ordering(trained):
    data, model, _, _ = trained
    feats = np.concatenate(data[:5])  # 200 frames = 4 s
    tokens = encode(feats, model)
    vcfg = VocoderConfig(n_blocks=2, hidden=64, ffn=192, input_dim=1024)
    params = VocoderParams.init(vcfg, seed=0)
    offline = decode_wave(tokens, model, params, vcfg)
    edge = vcfg.n_fft
    dev = {}
    for chunk in (2000, 4000, 8000):
        streamed = stream_decode(tokens, model, params, StreamConfig(chunk, 48000, 250), vcfg)
        dev[chunk] = float(np.mean(np.abs(streamed - offline)[edge:-edge]))
    vals = list(dev.values())
    ok = all(b <= a for a, b in zip(vals, vals[1:]))
    report("A11", ok, " ".join(f"chunk{c}={d:.3e}" for c, d in dev.items()))
