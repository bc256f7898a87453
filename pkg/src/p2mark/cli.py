"""Command-line entry point: ``p2mark <command> [options]``.

Exit codes: 0 success, 1 verification failure, 2 usage, 3 payload or shape,
4 ingestion, 5 divergence.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np
import torch

from .attacks import KINDS, AttackSpec, apply_attack, battery_specs
from .errors import ConfigurationError, IngestionError, P2MarkError, PayloadShapeError
from .pipeline.config import TrainingConfig, load_config, toy_config
from .pipeline.data import ingest_audio, read_wav, synthetic_corpus, write_wav
from .watermark import Watermark, bit_accuracy, decode_watermark

log = logging.getLogger("p2mark")

MERGE_TOLERANCE = 1e-5
PROG = "p2mark"


# --- shared helpers ---------------------------------------------------------------


def _resolve_config(args) -> TrainingConfig:
    cfg = load_config(args.config) if args.config else toy_config()
    changes = {}
    if args.seed is not None:
        changes["seed"] = args.seed
    if getattr(args, "iterations", None) is not None:
        key = "pretrain_iterations" if args.command == "pretrain" else "max_iterations"
        changes[key] = args.iterations
    if getattr(args, "wgopo", None) is not None:
        changes["wgopo_enabled"] = args.wgopo == "on"
    cfg = cfg.replace(**changes) if changes else cfg
    cfg.validate()
    return cfg


def _validate_optional_config(args):
    # commands driven by checkpoints still reject a broken --config up front
    if args.config:
        _resolve_config(args)


def _check_out(path, force: bool):
    if path is not None and Path(path).exists() and not force:
        raise ConfigurationError(f"{path} exists; pass --force to overwrite")


def _corpus(args, cfg: TrainingConfig):
    if args.data:
        files = sorted(Path(args.data).glob("*.wav"))
        return ingest_audio(files, cfg.segment_length, cfg.seed, cfg.mel.sample_rate)
    return synthetic_corpus(args.synthetic_clips, sample_rate=cfg.mel.sample_rate, seed=cfg.seed)


def _watermark(text: str) -> Watermark:
    # malformed strings raise DomainError, which maps to the usage exit code
    return Watermark.from_string(text)


def _fmt_bits(probs) -> str:
    return " ".join(f"{float(p):.3f}" for p in probs)


# --- commands ---------------------------------------------------------------------------


def cmd_pretrain(args) -> int:
    from .pipeline.training import pretrain_base

    cfg = _resolve_config(args)
    _check_out(args.out, args.force)
    base = pretrain_base(cfg, _corpus(args, cfg), args.metrics)
    digest = base.save(args.out, force=args.force)
    print(f"base {args.out} hash {digest} iterations {base.iteration}")
    return 0


def cmd_train(args) -> int:
    from .pipeline.training import load_base, train_p2mark

    cfg = _resolve_config(args)
    _check_out(args.out, args.force)
    base = load_base(args.base)
    system = train_p2mark(cfg, _corpus(args, cfg), base, args.metrics)
    digest = system.save(args.out, force=args.force)
    last = system.metrics[-1] if system.metrics else {}
    print(
        f"adapter {args.out} hash {digest} iterations {system.iteration} "
        f"projections_fired {system.projections_fired} train_acc {last.get('train_acc', float('nan')):.4f}"
    )
    return 0


def cmd_mint(args) -> int:
    from .adapter import verify_merge_equivalence
    from .pipeline.training import load_base, load_system, mint_instance

    _validate_optional_config(args)
    w = _watermark(args.watermark)
    _check_out(args.out, args.force)
    base = load_base(args.base)
    system = load_system(args.adapter, base)
    if len(w) != system.cfg.l:
        raise PayloadShapeError(f"watermark has {len(w)} bits; the adapter expects exactly {system.cfg.l}")
    instance = mint_instance(system, w)
    probes = _probes(system.cfg, args.probes, args.seed if args.seed is not None else 0)
    diff = verify_merge_equivalence(system.adapted, instance.generator, probes, system.scaling(w))
    digest = instance.save(args.out, force=args.force)
    print(f"watermark {w}")
    print(f"instance {args.out} hash {digest}")
    print(f"merge max abs diff over {args.probes} probes: {diff:.3e}")
    return 0 if diff < MERGE_TOLERANCE else 1


def _probes(cfg: TrainingConfig, n: int, seed: int) -> torch.Tensor:
    g = torch.Generator().manual_seed(seed)
    return [x.unsqueeze(0) for x in torch.randn(n, cfg.generator.in_channels, 8, generator=g)]


def cmd_extract(args) -> int:
    from .pipeline.training import load_decoder

    _validate_optional_config(args)
    expected = _watermark(args.expected) if args.expected else None
    decoder, cfg = load_decoder(args.decoder)
    if expected is not None and len(expected) != cfg.l:
        raise PayloadShapeError(f"--expected has {len(expected)} bits; the decoder reads {cfg.l}")
    wave, sr = read_wav(args.instance_audio)
    if sr != cfg.mel.sample_rate:
        raise IngestionError(f"{args.instance_audio}: sample rate {sr} != {cfg.mel.sample_rate}")
    from .models.spectral import mel_spectrogram

    probs, bits = decode_watermark(mel_spectrogram(wave, cfg.mel), decoder)
    print(f"bits {bits}")
    print(f"probabilities {_fmt_bits(probs)}")
    if expected is not None:
        print(f"acc {bit_accuracy(expected, bits):.4f}")
    return 0


def _parse_params(items) -> dict:
    params = {}
    for item in items or []:
        if "=" not in item:
            raise ConfigurationError(f"--param expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        try:
            params[key] = json.loads(value)
        except ValueError:
            params[key] = value
        if isinstance(params[key], list):
            params[key] = tuple(params[key])
    return params


def cmd_attack(args) -> int:
    _validate_optional_config(args)
    spec = AttackSpec(args.kind, _parse_params(args.param), args.seed if args.seed is not None else 0)
    _check_out(args.out, args.force)
    wave, sr = read_wav(args.input)
    out = apply_attack(wave, sr, spec)
    write_wav(args.out, out, sr)
    print(f"{args.kind} {spec.describe()} -> {args.out} ({len(out)} samples)")
    return 0


def cmd_evaluate(args) -> int:
    from .evaluation import evaluate_instance
    from .pipeline.training import load_base, load_decoder, load_instance

    cfg = _resolve_config(args)
    instance = load_instance(args.instance)
    decoder, _ = load_decoder(args.decoder)
    base = load_base(args.base)
    if args.data:
        corpus = ingest_audio(sorted(Path(args.data).glob("*.wav")), cfg.segment_length, cfg.seed)
    else:
        corpus = synthetic_corpus(args.items, sample_rate=instance.cfg.mel.sample_rate, seed=cfg.seed + 1)
    clips = corpus.clips[: args.items]
    length = min(len(c) for c in clips)
    eval_set = torch.from_numpy(np.stack([c[:length] for c in clips]))
    attacks = None
    if args.attacks:
        attacks = True if args.attacks == ["all"] else args.attacks
    report = evaluate_instance(instance, decoder, eval_set, base, attacks, seed=cfg.seed)
    stem_paths = [Path(args.out) / f"{report.stem()}{suffix}" for suffix in (".csv", "-attacks.csv", ".txt")]
    for p in stem_paths:
        _check_out(p, args.force)
    paths = report.write(args.out)
    sys.stdout.write(report.summary())
    print(f"report {paths['summary']}")
    return 0


def cmd_verify_merge(args) -> int:
    from .adapter import verify_merge_equivalence
    from .pipeline.training import load_base, load_instance, load_system

    base = load_base(args.base)
    system = load_system(args.adapter, base)
    instance = load_instance(args.instance)
    if len(instance.watermark) != system.cfg.l:
        raise PayloadShapeError(f"instance carries {len(instance.watermark)} bits, adapter expects {system.cfg.l}")
    probes = _probes(system.cfg, args.probes, args.seed if args.seed is not None else 0)
    diff = verify_merge_equivalence(system.adapted, instance.generator, probes, system.scaling(instance.watermark))
    ok = diff < MERGE_TOLERANCE
    print(f"merge max abs diff over {args.probes} probes: {diff:.3e} ({'ok' if ok else 'MISMATCH'})")
    return 0 if ok else 1


# --- parser ----------------------------------------------------------------------------------


def _common(p: argparse.ArgumentParser, out_help: str | None = None):
    p.add_argument("--config", metavar="PATH", help="YAML run configuration (default: built-in toy setup)")
    p.add_argument("--seed", type=int, default=None, help="override the configured random seed")
    p.add_argument("--force", action="store_true", help="overwrite existing outputs")
    if out_help:
        p.add_argument("--out", required=True, metavar="PATH", help=out_help)


def _data_args(p: argparse.ArgumentParser):
    p.add_argument("--data", metavar="DIR", help="directory of mono WAV files (default: synthetic corpus)")
    p.add_argument("--synthetic-clips", type=int, default=200, metavar="N", help="synthetic corpus size (default: 200)")
    p.add_argument("--metrics", metavar="CSV", help="per-iteration metrics log")
    p.add_argument("--iterations", type=int, default=None, metavar="N", help="override the iteration count")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog=PROG, description="Parameter-level audio watermarking toolkit.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")

    p = sub.add_parser("pretrain", help="pretrain the base vocoder or codec")
    _common(p, "base checkpoint directory")
    _data_args(p)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("train", help="fine-tune the watermark adapter on a frozen base")
    _common(p, "adapter checkpoint directory")
    p.add_argument("--base", required=True, metavar="PATH", help="pretrained base checkpoint")
    _data_args(p)
    p.add_argument("--wgopo", choices=("on", "off"), default=None, help="gradient projection (default: config)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("mint", help="merge a watermark into a standalone instance")
    _common(p, "instance checkpoint directory")
    p.add_argument("--adapter", required=True, metavar="PATH", help="trained adapter checkpoint")
    p.add_argument("--base", required=True, metavar="PATH", help="pretrained base checkpoint")
    p.add_argument("--watermark", required=True, metavar="BITS", help="bit string such as 10110010")
    p.add_argument("--probes", type=int, default=16, metavar="N", help="merge-check probes (default: 16)")
    p.set_defaults(func=cmd_mint)

    p = sub.add_parser("extract", help="decode the watermark from a WAV file")
    _common(p)
    p.add_argument("--instance-audio", required=True, metavar="WAV", help="audio generated by an instance")
    p.add_argument("--decoder", required=True, metavar="PATH", help="adapter checkpoint holding the decoder")
    p.add_argument("--expected", metavar="BITS", help="expected bit string; prints bit accuracy")
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("attack", help="apply one attack to a WAV file")
    _common(p, "attacked WAV file")
    p.add_argument("--in", dest="input", required=True, metavar="WAV", help="input WAV file")
    p.add_argument("--kind", required=True, choices=KINDS, metavar="KIND", help=f"one of: {', '.join(KINDS)}")
    p.add_argument("--param", action="append", metavar="KEY=VALUE", help="override an attack parameter (repeatable)")
    p.set_defaults(func=cmd_attack)

    p = sub.add_parser("evaluate", help="score an instance for quality and robustness")
    _common(p, "report directory")
    p.add_argument("--instance", required=True, metavar="PATH", help="minted instance checkpoint")
    p.add_argument("--decoder", required=True, metavar="PATH", help="adapter checkpoint holding the decoder")
    p.add_argument("--base", required=True, metavar="PATH", help="pretrained base checkpoint (quality reference)")
    p.add_argument("--data", metavar="DIR", help="directory of evaluation WAV files (default: synthetic)")
    p.add_argument("--items", type=int, default=16, metavar="N", help="evaluation items (default: 16)")
    names = [n for n, _ in battery_specs()]
    p.add_argument(
        "--attacks", nargs="+", metavar="NAME", choices=["all", *names],
        help="battery rows to run, or 'all' (default: clean only)",
    )
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("verify-merge", help="check instance output against the adapter-conditioned output")
    _common(p)
    p.add_argument("--adapter", required=True, metavar="PATH", help="trained adapter checkpoint")
    p.add_argument("--base", required=True, metavar="PATH", help="pretrained base checkpoint")
    p.add_argument("--instance", required=True, metavar="PATH", help="minted instance checkpoint")
    p.add_argument("--probes", type=int, default=16, metavar="N", help="random feature probes (default: 16)")
    p.set_defaults(func=cmd_verify_merge)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except P2MarkError as exc:
        print(f"{PROG} {args.command}: error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())

