"""``pairvc`` command-line interface.

Every subcommand takes ``--config`` (falling back to ``$PAIRVC_CONFIG``, then
built-in defaults) and writes ``resolved_config.toml`` beside its outputs.
Failures print one JSON line on stderr and exit non-zero (2 for config
problems).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .config import ConfigError, RunConfig, load_config, write_snapshot

logger = logging.getLogger("pairvc")


class CommandError(RuntimeError):
    pass


def _config(args) -> RunConfig:
    cfg = load_config(args.config)
    if getattr(args, "seed", None) is not None:
        cfg = cfg.with_overrides(seed=args.seed)
    return cfg


def _load_model(args, cfg):
    from .trainer import CheckpointMismatch, load_checkpoint

    try:
        model, state = load_checkpoint(args.checkpoint, cfg, force=args.force)
    except CheckpointMismatch as exc:
        raise CommandError(f"{exc}; pass --force to load anyway") from exc
    return model, state


# --------------------------------------------------------------------------


def cmd_synth_pairs(args) -> dict:
    from .audio import write_wav
    from .manifest import ManifestWriter, Record
    from .synth import PairSynthesizer

    cfg = _config(args)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_snapshot(cfg, out)
    if args.n_pairs < 0:
        raise CommandError("--n-pairs must be >= 0")
    seeds = [int(s) for s in np.random.default_rng([cfg.seed, 17]).integers(0, 2 ** 31, args.n_pairs)]
    manifest = out / "manifest.jsonl"
    with ManifestWriter(manifest) as writer:
        if args.real:
            synth = PairSynthesizer.real_corpus(cfg.audio, cfg.synth)
            for i, seed in enumerate(seeds):
                wav, spk = synth.random_utterance(seed)
                rid = f"r{i:05d}"
                write_wav(out / f"{rid}.wav", wav)
                # speaker ids of the held-out corpus are kept for evaluation only
                writer.append(Record(rid, "real", f"{rid}.wav", speaker_id=spk.id, seed=seed))
        else:
            synth = PairSynthesizer(cfg.audio, cfg.synth)
            for i, seed in enumerate(seeds):
                pair = synth.random_pair(seed)
                pid = f"p{i:05d}"
                for role, wav, spk in (("src", pair.source, pair.src_speaker),
                                       ("tgt", pair.target, pair.tgt_speaker)):
                    rid = f"{pid}_{role}"
                    write_wav(out / f"{rid}.wav", wav)
                    writer.append(Record(rid, role, f"{rid}.wav", speaker_id=spk.id,
                                         text_ids=list(pair.text.tokens), pair_id=pid, seed=seed,
                                         n_frames=pair.plan.n_frames))
    return {"manifest": str(manifest), "n": args.n_pairs}


def cmd_train(args) -> dict:
    from .manifest import read_manifest
    from .trainer import run

    cfg = _config(args)
    out = Path(args.out)
    write_snapshot(cfg, out)
    manifest = read_manifest(args.manifest)
    final = run(cfg, args.phase, manifest, out, init=args.init, resume=args.resume,
                steps=args.steps, force=args.force)
    return {"checkpoint": str(final), "phase": args.phase}


def cmd_convert(args) -> dict:
    from .audio import read_wav, write_wav
    from .inference import batch_convert, convert

    cfg = _config(args)
    model, _ = _load_model(args, cfg)
    seed = cfg.seed if args.seed is None else args.seed
    if args.manifest:
        if not args.out_dir:
            raise CommandError("--manifest needs --out-dir")
        write_snapshot(cfg, args.out_dir)
        summary = batch_convert(model, args.manifest, args.out_dir, args.eps, seed)
        return {"converted": len(summary["converted"]), "failed": summary["failed"],
                "out_dir": summary["out_dir"]}
    if not (args.source and args.reference and args.out):
        raise CommandError("single conversion needs --source, --reference and --out")
    result = convert(model, read_wav(args.source), read_wav(args.reference), args.eps, seed)
    out = Path(args.out)
    write_wav(out, result.audio)
    write_snapshot(cfg, out.parent)
    return {"output": str(out), "shifted": result.shifted}


def cmd_evaluate(args) -> dict:
    from .audio import extract_f0, read_wav
    from .evalkit import (EvalError, MetricReport, alignment, b_mos, clustering_probes, f0_pcc,
                          file_hash, plot_similarity, pooled, speaker_cosine)
    from .manifest import read_manifest

    cfg = _config(args)
    model, _ = _load_model(args, cfg)
    manifest = read_manifest(args.manifest)
    conv_dir = Path(args.conversions)
    out = Path(args.out)
    write_snapshot(cfg, out.parent)

    secs, pccs, diags = [], [], []
    first_alignment = None
    for src, ref in manifest.pairs():
        cv_path = conv_dir / f"{src.pair_id}_cv.wav"
        if not cv_path.is_file():
            logger.warning("no conversion for %s", src.pair_id)
            continue
        source, reference, converted = (read_wav(manifest.resolve(src)), read_wav(manifest.resolve(ref)),
                                        read_wav(cv_path))
        secs.append(speaker_cosine(converted, reference, model.speaker_embed))
        try:
            pccs.append(f0_pcc(extract_f0(source, cfg.audio.f0), extract_f0(converted, cfg.audio.f0)))
        except EvalError as exc:
            logger.warning("f0_pcc skipped for %s: %s", src.pair_id, exc)
        al = alignment(model.frontend_features(source), model.frontend_features(converted))
        diags.append(al.diagonal_fraction)
        first_alignment = first_alignment or al
    if not secs:
        raise CommandError("no converted pairs found to evaluate")
    if not pccs:
        raise CommandError("f0_pcc undefined for every pair")

    # leakage probe on mean-pooled content means of every labelled utterance
    vectors, labels = [], []
    for rec in manifest.records:
        if rec.speaker_id is None:
            continue
        wav = read_wav(manifest.resolve(rec))
        vectors.append(pooled(model.extract_content(model.frontend_features(wav)).mu))
        labels.append(rec.speaker_id)
    ids, counts = np.unique(labels, return_counts=True)
    single = set(ids[counts < 2].tolist())
    if single:
        # one utterance says nothing about clustering; drop those speakers
        logger.warning("leakage probe skips %d speaker(s) with a single utterance", len(single))
        keep = [i for i, lab in enumerate(labels) if lab not in single]
        vectors, labels = [vectors[i] for i in keep], [labels[i] for i in keep]
    ari, nmi, sil = clustering_probes(vectors, labels, seed=cfg.seed)

    ckpt = Path(args.checkpoint)
    report = MetricReport(
        secs=float(np.mean(secs)), f0_pcc=float(np.mean(pccs)), ari=ari, nmi=nmi, silhouette=sil,
        b_mos=b_mos(args.mos, args.smos), diagonal_fraction=float(np.mean(diags)),
        manifest_hash=file_hash(manifest.path), checkpoint_id=f"{ckpt.name}:{file_hash(ckpt)}",
        seed=cfg.seed, counts={"pairs": len(secs), "f0_pcc": len(pccs), "probe_items": len(labels)})
    report.save(out)
    if args.plot:
        plot_similarity(first_alignment, args.plot)
    return json.loads(report.to_json())


def cmd_inspect_alignment(args) -> dict:
    from .audio import read_wav
    from .evalkit import alignment, plot_similarity
    from .model import VoiceConversionModel

    cfg = _config(args)
    if args.checkpoint:
        model, _ = _load_model(args, cfg)
    else:
        model = VoiceConversionModel(cfg)  # the front-end is fixed by config alone
    al = alignment(model.frontend_features(read_wav(args.a)), model.frontend_features(read_wav(args.b)))
    result = {"diagonal_fraction": al.diagonal_fraction, "frames": list(al.similarity.shape),
              "top1_path": al.top1_path.tolist()}
    if args.out:
        out = Path(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(json.dumps(result))
        write_snapshot(cfg, out.parent)
    if args.plot:
        plot_similarity(al, args.plot)
    return {k: result[k] for k in ("diagonal_fraction", "frames")}


def cmd_validate_manifest(args) -> dict:
    from .manifest import validate_manifest

    violations = validate_manifest(args.manifest)
    for v in violations:
        print(v)
    if violations:
        raise CommandError(f"{len(violations)} manifest violation(s)")
    return {"valid": True}


# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="pairvc", description="Voice conversion trained on synthetic speaker pairs.")
    p.add_argument("--log-level", default="WARNING", help="logging level (default: WARNING)")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, seed=True):
        sp.add_argument("--config", help="TOML run config (default: $PAIRVC_CONFIG or built-in)")
        if seed:
            sp.add_argument("--seed", type=int, help="override the config seed")

    sp = sub.add_parser("synth-pairs", help="generate a synthetic paired corpus")
    common(sp)
    sp.add_argument("--n-pairs", type=int, required=True, help="number of pairs (or utterances with --real)")
    sp.add_argument("--out-dir", required=True)
    sp.add_argument("--real", action="store_true",
                    help="write unpaired role=real utterances from held-out speakers instead")
    sp.set_defaults(func=cmd_synth_pairs)

    sp = sub.add_parser("train", help="run one training phase")
    common(sp)
    sp.add_argument("--phase", type=int, choices=(1, 2), required=True)
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--out", required=True, help="run directory for checkpoints and logs")
    sp.add_argument("--init", help="checkpoint to start from (required for phase 2)")
    sp.add_argument("--resume", help="training checkpoint to resume")
    sp.add_argument("--steps", type=int, help="override the configured step count")
    sp.add_argument("--force", action="store_true", help="ignore config-hash mismatch")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("convert", help="convert one utterance or a manifest of pairs")
    common(sp)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--source")
    sp.add_argument("--reference")
    sp.add_argument("--out", help="output WAV for a single conversion")
    sp.add_argument("--manifest", help="convert every src/tgt pair of this manifest")
    sp.add_argument("--out-dir", help="output directory for --manifest")
    sp.add_argument("--eps", choices=("zero", "sample"), default="zero", help="prior sampling policy")
    sp.add_argument("--force", action="store_true", help="ignore config-hash mismatch")
    sp.set_defaults(func=cmd_convert)

    sp = sub.add_parser("evaluate", help="compute a MetricReport for converted pairs")
    common(sp)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--manifest", required=True, help="manifest with the src/tgt pairs and speaker ids")
    sp.add_argument("--conversions", required=True, help="directory holding {pair_id}_cv.wav")
    sp.add_argument("--out", required=True, help="report JSON path")
    sp.add_argument("--mos", type=float, required=True, help="externally collected naturalness MOS")
    sp.add_argument("--smos", type=float, required=True, help="externally collected similarity MOS")
    sp.add_argument("--plot", help="write a similarity heatmap of the first pair here (PNG)")
    sp.add_argument("--force", action="store_true", help="ignore config-hash mismatch")
    sp.set_defaults(func=cmd_evaluate)

    sp = sub.add_parser("inspect-alignment", help="front-end frame alignment between two utterances")
    common(sp, seed=False)
    sp.add_argument("--a", required=True, help="first WAV")
    sp.add_argument("--b", required=True, help="second WAV")
    sp.add_argument("--checkpoint")
    sp.add_argument("--out", help="JSON with the full top-1 path")
    sp.add_argument("--plot", help="similarity heatmap PNG")
    sp.add_argument("--force", action="store_true", help="ignore config-hash mismatch")
    sp.set_defaults(func=cmd_inspect_alignment)

    sp = sub.add_parser("validate-manifest", help="check a manifest without modifying it")
    sp.add_argument("manifest")
    sp.set_defaults(func=cmd_validate_manifest)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=args.log_level.upper(), format="%(levelname)s %(name)s: %(message)s")
    try:
        result = args.func(args)
    except ConfigError as exc:
        print(json.dumps({"error": str(exc), "kind": "config"}), file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001  (one machine-readable line for any failure)
        logger.debug("command failed", exc_info=True)
        print(json.dumps({"error": str(exc).replace("\n", " "), "kind": type(exc).__name__}), file=sys.stderr)
        return 1
    print(json.dumps(result))
    return 0


if __name__ == "__main__":
    sys.exit(main())
