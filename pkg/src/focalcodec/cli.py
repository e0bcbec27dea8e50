"""Command-line entry point: ``focalcodec <command> [flags]``.

Failures print exactly one line to stderr of the form
``error: type=<Name> message="<text>"`` and exit nonzero
(2 for usage errors, 1 for everything else).
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import io as fio
from .codec import CodecConfig, CodecModel, bitrate, decode_features, encode, knn_convert
from .errors import ConfigError, FormatError
from .metrics import codebook_stats, measure_rtf
from .trainer import SyntheticFeatureSpec, TrainConfig, generate_synthetic_features, train_stage1
from .validation import worker_count
from .vocoder import StreamConfig, VocoderConfig, VocoderParams, log_mel, stream_decode, synthesize

TOY_CODEC = {"hidden_dims": [64, 32, 16], "latent_dim": 8}
TOY_VOCODER = {"n_blocks": 2, "hidden": 64, "ffn": 192}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _emit(**fields):
    for key, value in fields.items():
        if isinstance(value, float):
            value = f"{value:.4f}"
        print(f"{key}={value}")


def _existing(path):
    p = Path(path)
    if not p.is_file():
        raise FileNotFoundError(f"no such file: {path}")
    return p


def _load_codec(path):
    return fio.load_codec(_existing(path))


def _load_vocoder(path, codec):
    params, cfg = fio.load_vocoder(_existing(path))
    if cfg.input_dim != codec.config.input_dim:
        raise ConfigError(f"vocoder expects {cfg.input_dim}-dim features but the codec "
                          f"produces {codec.config.input_dim}")
    return params, cfg


def _check_stream(stream, model):
    cfg = model.config
    if stream.variant != cfg.variant:
        raise FormatError(f"token stream is variant {stream.variant} but the model is "
                          f"{cfg.variant}")
    if stream.latent_dim != cfg.latent_dim:
        raise FormatError(f"token stream has latent_dim {stream.latent_dim} but the model "
                          f"has {cfg.latent_dim}")


def _parallel(fn, items):
    n = min(worker_count(), len(items))
    if n <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=n) as pool:
        return list(pool.map(fn, items))


def _stream_config(args):
    return StreamConfig(chunk_size=args.chunk, left_context=args.left_context,
                        overlap=args.overlap)


# ----------------------------------------------------------------------------
# commands


def cmd_encode(args):
    model = _load_codec(args.model)
    if args.variant and args.variant != model.config.variant:
        raise ConfigError(f"--variant {args.variant} does not match the model's variant "
                          f"{model.config.variant}")
    inputs = [_existing(p) for p in args.features]
    if len(inputs) > 1:
        out_dir = Path(args.out)
        if not out_dir.is_dir():
            raise FileNotFoundError(f"with several inputs --out must be an existing directory: "
                                    f"{args.out}")
        outs = [out_dir / (p.stem + ".fct") for p in inputs]
    else:
        outs = [Path(args.out)]

    def job(pair):
        src, dst = pair
        tokens = encode(fio.read_features(src), model)
        fio.write_tokens(dst, fio.TokenStream(model.config.variant, model.config.latent_dim,
                                              fio.SAMPLE_RATE, tokens))
        return tokens.size

    counts = _parallel(job, list(zip(inputs, outs)))
    _emit(files=len(outs), tokens=int(sum(counts)))


def cmd_decode(args):
    model = _load_codec(args.model)
    params, vcfg = _load_vocoder(args.vocoder, model)
    stream = fio.read_tokens(_existing(args.tokens))
    _check_stream(stream, model)
    if args.stream:
        wave = stream_decode(stream.tokens, model, params, _stream_config(args), vcfg)
    else:
        wave = synthesize(decode_features(stream.tokens, model), params, vcfg)
    fio.write_wav(args.out, wave)
    _emit(samples=wave.size, seconds=wave.size / vcfg.sample_rate)


def cmd_resynth(args):
    model = _load_codec(args.model)
    params, vcfg = _load_vocoder(args.vocoder, model)
    feats = fio.read_features(_existing(args.features))
    start = time.perf_counter()
    tokens = encode(feats, model)
    if args.stream:
        wave = stream_decode(tokens, model, params, _stream_config(args), vcfg)
    else:
        wave = synthesize(decode_features(tokens, model), params, vcfg)
    wall = time.perf_counter() - start
    fio.write_wav(args.out, wave)
    seconds = wave.size / vcfg.sample_rate
    _emit(tokens=tokens.size, seconds=seconds, wall_seconds=wall,
          rtf=measure_rtf(seconds, max(wall, 1e-9)))


def cmd_analyze(args):
    stream = fio.read_tokens(_existing(args.tokens))
    cfg = CodecConfig(variant=stream.variant, latent_dim=stream.latent_dim)
    fields = {"variant": stream.variant, "count": stream.tokens.size,
              "token_rate": cfg.token_rate_hz, "bitrate": bitrate(cfg),
              "bitrate_kbps": bitrate(cfg) / 1000.0}
    if stream.tokens.size:
        usage, ent = codebook_stats(stream.tokens, cfg.codebook_size)
        fields.update(code_usage=usage, normalized_entropy=ent)
    else:
        fields.update(code_usage=0.0, normalized_entropy=0.0)
    if args.wav:
        mel = log_mel(fio.read_wav(_existing(args.wav)))
        fields.update(mel_frames=mel.shape[0], mel_mean=float(mel.mean()),
                      mel_std=float(mel.std()))
    _emit(**fields)


def cmd_convert(args):
    if args.k < 1:
        raise ConfigError(f"--k must be >= 1, got {args.k}")
    model = _load_codec(args.model)
    params, vcfg = _load_vocoder(args.vocoder, model)
    source = fio.read_features(_existing(args.source))
    pool = fio.read_features(_existing(args.reference))
    decoded = decode_features(encode(source, model), model)[:source.shape[0]]
    converted = knn_convert(decoded, pool, k=args.k)
    wave = synthesize(converted, params, vcfg)
    fio.write_wav(args.out, wave)
    _emit(frames=converted.shape[0], samples=wave.size)


def _read_config(path):
    if path is None:
        return {}
    with open(_existing(path)) as fh:
        cfg = json.load(fh)
    if not isinstance(cfg, dict):
        raise ConfigError("--config must hold a JSON object")
    unknown = set(cfg) - {"codec", "train", "synthetic", "vocoder"}
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")
    return cfg


def cmd_train(args):
    cfg = _read_config(args.config)
    codec_kw = {**TOY_CODEC, **cfg.get("codec", {})}
    if args.variant:
        codec_kw["variant"] = args.variant
    train_kw = dict(cfg.get("train", {}))
    if args.steps is not None:
        train_kw["steps"] = args.steps
    train_kw.setdefault("seed", args.seed)
    if args.synthetic:
        syn = SyntheticFeatureSpec(**{"dim": codec_kw.get("input_dim", 1024),
                                      "seed": args.seed, **cfg.get("synthetic", {})})
        data = generate_synthetic_features(syn)
    else:
        data_dir = Path(args.data)
        if not data_dir.is_dir():
            raise FileNotFoundError(f"no such directory: {args.data}")
        files = sorted(data_dir.glob("*.fcf"))
        if not files:
            raise FileNotFoundError(f"no .fcf files in {args.data}")
        data = [fio.read_features(f) for f in files]
        codec_kw.setdefault("input_dim", data[0].shape[1])
    codec_cfg = CodecConfig(**codec_kw)
    train_cfg = TrainConfig(**train_kw)
    model = CodecModel.init(codec_cfg, seed=train_cfg.seed)
    model, history = train_stage1(data, model, train_cfg)
    fio.save_codec(args.out, model, extra={"train": train_cfg.to_dict(),
                                           "final_total": history[-1]["total"]})
    fields = {"steps": len(history), "initial_total": history[0]["total"],
              "final_total": history[-1]["total"]}
    if args.vocoder_out:
        vcfg = VocoderConfig(**{**TOY_VOCODER, "input_dim": codec_cfg.input_dim,
                                **cfg.get("vocoder", {})})
        fio.save_vocoder(args.vocoder_out, VocoderParams.init(vcfg, seed=train_cfg.seed), vcfg)
        fields["vocoder"] = args.vocoder_out
    _emit(**fields)


def cmd_selfcheck(args):
    from . import selfcheck

    results = selfcheck.run_all()
    for name, ok, detail in results:
        print(f"{name}={'ok' if ok else 'FAIL'} {detail}".rstrip())
    failed = [name for name, ok, _ in results if not ok]
    if failed:
        raise AssertionError(f"selfcheck failed: {','.join(failed)}")


# ----------------------------------------------------------------------------


def build_parser():
    p = _Parser(prog="focalcodec", description="Low-bitrate speech codec toolkit.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def streaming(sp):
        sp.add_argument("--stream", action="store_true", help="chunk-wise decoding")
        sp.add_argument("--chunk", type=int, default=8000, help="chunk size in samples")
        sp.add_argument("--left-context", type=int, default=48000)
        sp.add_argument("--overlap", type=int, default=250)

    sp = sub.add_parser("encode", help="features (FCF1) -> token stream (FCT1)")
    sp.add_argument("--features", nargs="+", required=True)
    sp.add_argument("--model", required=True)
    sp.add_argument("--variant", choices=["fc50", "fc25", "fc12_5"])
    sp.add_argument("--out", required=True, help="output file, or directory for several inputs")
    sp.set_defaults(func=cmd_encode)

    sp = sub.add_parser("decode", help="token stream -> WAV")
    sp.add_argument("--tokens", required=True)
    sp.add_argument("--model", required=True)
    sp.add_argument("--vocoder", required=True)
    sp.add_argument("--out", required=True)
    streaming(sp)
    sp.set_defaults(func=cmd_decode)

    sp = sub.add_parser("resynth", help="encode + decode, reporting the real-time factor")
    sp.add_argument("--features", required=True)
    sp.add_argument("--model", required=True)
    sp.add_argument("--vocoder", required=True)
    sp.add_argument("--out", required=True)
    streaming(sp)
    sp.set_defaults(func=cmd_resynth)

    sp = sub.add_parser("analyze", help="codebook statistics of a token stream")
    sp.add_argument("--tokens", required=True)
    sp.add_argument("--wav", help="also report log-Mel statistics of this file")
    sp.set_defaults(func=cmd_analyze)

    sp = sub.add_parser("convert", help="kNN voice conversion")
    sp.add_argument("--source", required=True)
    sp.add_argument("--reference", required=True)
    sp.add_argument("--model", required=True)
    sp.add_argument("--vocoder", required=True)
    sp.add_argument("--k", type=int, default=4)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_convert)

    sp = sub.add_parser("train", help="stage-1 codec training")
    src = sp.add_mutually_exclusive_group(required=True)
    src.add_argument("--synthetic", action="store_true")
    src.add_argument("--data", help="directory of .fcf files")
    sp.add_argument("--config", help="JSON with optional codec/train/synthetic/vocoder sections")
    sp.add_argument("--variant", choices=["fc50", "fc25", "fc12_5"])
    sp.add_argument("--steps", type=int)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out", required=True)
    sp.add_argument("--vocoder-out", help="also write a seeded, untrained toy vocoder")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("selfcheck", help="run the fast invariant checks")
    sp.set_defaults(func=cmd_selfcheck)
    return p


def _fail(exc, code):
    message = " ".join(str(exc).split()).replace('"', "'")
    print(f'error: type={type(exc).__name__} message="{message}"', file=sys.stderr)
    return code


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        return _fail(exc, 2)
    try:
        args.func(args)
    except KeyboardInterrupt:
        return _fail(RuntimeError("interrupted"), 130)
    except Exception as exc:  # noqa: BLE001 - every failure becomes one parsable line
        return _fail(exc, 1)
    return 0


if __name__ == "__main__":
    sys.exit(main())
