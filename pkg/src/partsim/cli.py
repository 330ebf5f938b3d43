"""Command-line entry point tying the pipeline together.

Subcommands: ``synth`` (synthetic corpus), ``teachers`` / ``pretrain`` /
``train`` (the three training stages), ``eval`` (the evaluation suites),
and ``embed`` (batch embedding to a table file). Every command that
writes an artifact directory drops exactly one ``manifest.json`` there;
report files themselves carry no timestamps, so seeded reruns match byte
for byte.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import os
import sys
from datetime import datetime, timezone
from pathlib import Path

import numpy as np
import yaml

from . import INSTRUMENTS, __version__, evalsuite, features, trainer
from .corpus import (
    StemTrack,
    corpus_fingerprint,
    generate_synthetic_corpus,
    scan_corpus,
    split_tracks,
)
from .encoder import N_CONDITIONS, load_checkpoint, subspace

log = logging.getLogger(__name__)

CACHE_ENV_VAR = "PARTSIM_CACHE_DIR"
EVAL_SUITES = ("music-id", "pseudo-knn", "inst-id", "correlation", "pair")


def cache_dir() -> Path | None:
    value = os.environ.get(CACHE_ENV_VAR)
    return Path(value) if value else None


def _config_hash(config: trainer.TrainConfig) -> str:
    blob = yaml.safe_dump(config.to_dict(), sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def write_manifest(
    out_dir,
    command: str,
    args: dict,
    config: trainer.TrainConfig | None = None,
    corpus_root=None,
    seed: int | None = None,
) -> Path:
    """One manifest per artifact directory; reruns overwrite it."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = {
        "command": command,
        "args": {k: str(v) if isinstance(v, Path) else v for k, v in args.items()},
        "config_hash": _config_hash(config) if config is not None else None,
        "corpus_hash": corpus_fingerprint(corpus_root) if corpus_root else None,
        "seed": seed,
        "version": __version__,
        "created_utc": datetime.now(timezone.utc).isoformat(),
    }
    path = out_dir / "manifest.json"
    with open(path, "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path


def _load_config(args) -> trainer.TrainConfig:
    config = trainer.load_config(args.config) if args.config else trainer.TrainConfig()
    overrides = list(args.set or [])
    seen = {}
    for item in overrides:
        key = item.split("=", 1)[0]
        if key in seen:
            log.warning("duplicate --set for %r, the last value wins", key)
        seen[key] = item
    config = trainer.apply_overrides(config, list(seen.values()))
    updates = {}
    if getattr(args, "no_norm", False):
        updates["use_norm_loss"] = False
    if getattr(args, "no_pseudo", False):
        updates["use_pseudo"] = False
    if getattr(args, "no_additional", False):
        updates["use_additional"] = False
    if getattr(args, "no_pretrain", False):
        updates["use_pretrain"] = False
    if getattr(args, "seed", None) is not None:
        updates["seed"] = args.seed
    if updates:
        config = dataclasses.replace(config, **updates)
    if getattr(args, "workers", 1) != 1:
        log.warning("parallel realization is not available; running single-threaded")
    return config


def _feature_params(meta: dict) -> features.FeatureParams:
    stored = (meta.get("config") or {}).get("features")
    return features.FeatureParams(**stored) if stored else features.FeatureParams()


def _check_sample_rate(tracks: list[StemTrack], params: features.FeatureParams) -> None:
    rates = {t.sample_rate for t in tracks}
    if rates != {params.sample_rate}:
        raise ValueError(
            f"corpus sample rates {sorted(rates)} do not match the checkpoint's "
            f"feature rate {params.sample_rate}"
        )


def _load_encoder(path):
    encoder, extra, meta = load_checkpoint(path)
    encoder.trained = True
    return encoder, extra, meta


# ---------------------------------------------------------------------------
# Subcommands


def cmd_synth(args) -> int:
    out = Path(args.out)
    generate_synthetic_corpus(args.tracks, args.seed, out)
    write_manifest(
        out, "synth", {"tracks": args.tracks, "out": out}, corpus_root=out, seed=args.seed
    )
    print(f"wrote {args.tracks} tracks to {out}")
    return 0


def cmd_teachers(args) -> int:
    config = _load_config(args)
    tracks = scan_corpus(args.corpus)
    out = Path(args.out)
    paths = trainer.train_teachers(tracks, config, out)
    write_manifest(
        out, "teachers", {"corpus": args.corpus, "out": out},
        config=config, corpus_root=args.corpus, seed=config.seed,
    )
    print(f"wrote {len(paths)} teacher checkpoints to {out}")
    return 0


def cmd_pretrain(args) -> int:
    config = _load_config(args)
    tracks = scan_corpus(args.corpus)
    teacher_paths = {
        name: Path(args.teachers) / f"teacher_{name}.ckpt" for name in INSTRUMENTS
    }
    missing = [str(p) for p in teacher_paths.values() if not p.exists()]
    if missing:
        raise FileNotFoundError(f"missing teacher checkpoints: {missing}")
    teachers = trainer.load_teachers(teacher_paths)
    out = Path(args.out)
    path = trainer.pretrain(tracks, teachers, config, out)
    write_manifest(
        out, "pretrain", {"corpus": args.corpus, "teachers": args.teachers, "out": out},
        config=config, corpus_root=args.corpus, seed=config.seed,
    )
    print(f"wrote {path}")
    return 0


def cmd_train(args) -> int:
    config = _load_config(args)
    tracks = scan_corpus(args.corpus)
    initial = args.initial
    if config.use_pretrain and initial is None:
        raise ValueError(
            "config enables pretraining but no --initial checkpoint was given; "
            "run the pretrain command first or pass --no-pretrain"
        )
    if not config.use_pretrain:
        initial = None
    best = trainer.train(tracks, config, args.out, run_id=args.run_id, initial=initial)
    write_manifest(
        Path(args.out) / args.run_id, "train",
        {"corpus": args.corpus, "out": args.out, "run_id": args.run_id,
         "initial": initial},
        config=config, corpus_root=args.corpus, seed=config.seed,
    )
    print(f"best checkpoint: {best}")
    return 0


def _eval_embedder(args):
    encoder, _, meta = _load_encoder(args.ckpt)
    params = _feature_params(meta)
    tracks = scan_corpus(args.corpus)
    test_tracks = split_tracks(tracks)["test"]
    if not test_tracks:
        raise ValueError("corpus has no test-split tracks")
    _check_sample_rate(test_tracks, params)
    return encoder, params, test_tracks


def _suite_music_id(args, embed, test_tracks, out: Path) -> None:
    lengths = tuple(float(x) for x in args.lengths.split(","))
    report = evalsuite.eval_music_id(embed, test_tracks, lengths=lengths, k=args.k)
    rows = [
        {"length_s": length, "instrument": name, "accuracy": acc}
        for length, per_inst in sorted(report.items())
        for name, acc in per_inst.items()
    ]
    evalsuite.write_csv_report(
        out / "music_id.csv", rows, ["length_s", "instrument", "accuracy"]
    )
    summary = {
        "suite": "music-id",
        "k": args.k,
        "accuracy": {str(length): per for length, per in report.items()},
        "mean_accuracy": float(np.mean([a for per in report.values() for a in per.values()])),
    }
    evalsuite.write_json_summary(out / "music_id.json", summary)


def _suite_pseudo_knn(args, embed, test_tracks, out: Path) -> None:
    rng = np.random.default_rng(args.seed)
    plan = evalsuite.build_pseudo_eval_plan(test_tracks, rng)
    by_id = {t.track_id: t for t in test_tracks}
    report = evalsuite.eval_pseudo_knn(embed, plan, by_id, k=args.k)
    chance = 1.0 / evalsuite.PSEUDO_N_LABELS
    rows = [
        {"instrument": name, "accuracy": acc, "chance": chance}
        for name, acc in report.items()
    ]
    evalsuite.write_csv_report(
        out / "pseudo_knn.csv", rows, ["instrument", "accuracy", "chance"]
    )
    evalsuite.write_json_summary(
        out / "pseudo_knn.json",
        {
            "suite": "pseudo-knn",
            "k": args.k,
            "accuracy": report,
            "mean_accuracy": float(np.mean(list(report.values()))),
            "chance": chance,
        },
    )


def _suite_inst_id(args, embed, test_tracks, out: Path) -> None:
    report = evalsuite.eval_instrument_id(embed, test_tracks, length_s=args.length)
    rows = [
        {
            "instrument": name,
            "accuracy": report.accuracy[name],
            "n_evaluated": report.n_evaluated[name],
            "n_excluded": report.n_excluded[name],
        }
        for name in INSTRUMENTS
    ]
    evalsuite.write_csv_report(
        out / "instrument_id.csv",
        rows,
        ["instrument", "accuracy", "n_evaluated", "n_excluded"],
    )
    evalsuite.write_json_summary(
        out / "instrument_id.json",
        {
            "suite": "inst-id",
            "accuracy": report.accuracy,
            "n_evaluated": report.n_evaluated,
            "n_excluded": report.n_excluded,
            "mean_accuracy": report.mean_accuracy,
        },
    )


def _suite_correlation(args, embed, test_tracks, out: Path) -> None:
    report_a, report_b = evalsuite.eval_correlations(embed, test_tracks, length_s=args.length)
    rows = [
        {"kind": "stem_vs_mix", "pair": name, "r": r} for name, r in report_a.items()
    ]
    cross = {}
    for c1 in range(N_CONDITIONS):
        for c2 in range(c1 + 1, N_CONDITIONS):
            key = f"{INSTRUMENTS[c1]}|{INSTRUMENTS[c2]}"
            cross[key] = float(report_b[c1, c2])
            rows.append({"kind": "cross_subspace", "pair": key, "r": report_b[c1, c2]})
    evalsuite.write_csv_report(out / "correlation.csv", rows, ["kind", "pair", "r"])
    evalsuite.write_json_summary(
        out / "correlation.json",
        {
            "suite": "correlation",
            "stem_vs_mix": report_a,
            "cross_subspace": cross,
            "mean_abs_cross": float(np.mean([abs(v) for v in cross.values()])),
        },
    )


def build_pair_fixtures(test_tracks, rng, n_pairs):
    """(X, A, B, c, expected) tuples: A shares X's condition-instrument
    source, B shares X's backing instead, so A is the right answer."""
    if len(test_tracks) < 4:
        raise ValueError("pair fixtures need at least 4 test tracks")
    fixtures = []
    for i in range(n_pairs):
        c = i % N_CONDITIONS
        t1, t2, t3, t4 = (
            test_tracks[j] for j in rng.choice(len(test_tracks), size=4, replace=False)
        )

        def assemble(tag, c_src, else_src):
            n = min(c_src.n_samples, else_src.n_samples)
            stems = {
                name: (c_src if j == c else else_src).stem(name)[:n]
                for j, name in enumerate(INSTRUMENTS)
            }
            return StemTrack.from_arrays(
                f"pair{i}_{tag}", 120.0, "test", stems, c_src.sample_rate
            )

        fixtures.append(
            (assemble("x", t1, t2), assemble("a", t1, t3), assemble("b", t4, t2), c, "A")
        )
    return fixtures


def _suite_pair(args, embed, test_tracks, out: Path) -> None:
    rng = np.random.default_rng(args.seed)
    fixtures = build_pair_fixtures(test_tracks, rng, args.pairs)
    rows = []
    correct = 0
    for i, (x, a, b, c, expected) in enumerate(fixtures):
        result = evalsuite.pair_compare(embed, x, a, b, c, length_s=args.length)
        hit = result.choice == expected
        correct += hit
        rows.append(
            {
                "index": i,
                "instrument": INSTRUMENTS[c],
                "expected": expected,
                "choice": result.choice,
                "tie": int(result.tie),
                "d_a": result.d_a,
                "d_b": result.d_b,
                "correct": int(hit),
            }
        )
    evalsuite.write_csv_report(
        out / "pair.csv",
        rows,
        ["index", "instrument", "expected", "choice", "tie", "d_a", "d_b", "correct"],
    )
    n = len(fixtures)
    p = correct / n
    evalsuite.write_json_summary(
        out / "pair.json",
        {
            "suite": "pair",
            "n_pairs": n,
            "accuracy": p,
            "stderr": float(np.sqrt(p * (1.0 - p) / n)),
        },
    )


def cmd_eval(args) -> int:
    if args.length is None:
        args.length = 5.0 if args.suite == "pair" else 3.0
    encoder, params, test_tracks = _eval_embedder(args)
    embed = evalsuite.make_embedder(encoder, params)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    suite = {
        "music-id": _suite_music_id,
        "pseudo-knn": _suite_pseudo_knn,
        "inst-id": _suite_inst_id,
        "correlation": _suite_correlation,
        "pair": _suite_pair,
    }[args.suite]
    suite(args, embed, test_tracks, out)
    write_manifest(
        out, "eval",
        {"suite": args.suite, "ckpt": args.ckpt, "corpus": args.corpus, "out": args.out},
        corpus_root=args.corpus, seed=args.seed,
    )
    print(f"wrote {args.suite} reports to {out}")
    return 0


def cmd_embed(args) -> int:
    encoder, _, meta = _load_encoder(args.ckpt)
    params = _feature_params(meta)
    tracks = scan_corpus(args.corpus)
    selected = split_tracks(tracks)[args.split] if args.split else tracks
    if not selected:
        raise ValueError(f"no tracks in split {args.split!r}")
    _check_sample_rate(selected, params)

    from .corpus import mix_stems, segment_starts

    cache, cache_path = None, None
    if cache_dir() is not None:
        fingerprint = corpus_fingerprint(args.corpus)
        cache = features.FeatureCache(params, corpus_hash=fingerprint)
        cache_path = cache_dir() / f"grams-{params.key()}-{fingerprint[:16]}.npz"
        if cache_path.exists():
            cache.load(cache_path)

    table = evalsuite.EmbeddingTable()
    windows = []
    for track in selected:
        for start in segment_starts(track.duration_s, args.length, 0.0):
            audio, _ = mix_stems(
                {j: (track, start) for j in range(N_CONDITIONS)}, args.length
            )
            windows.append((f"{track.track_id}:{start:g}", track.track_id, audio))

    def gram_of(seg_id, audio):
        if cache is None:
            return features.segment_gram(audio, params)
        return cache.get_or_compute(
            f"{seg_id}:{args.length:g}",
            lambda: features.segment_gram(audio, params),
        )

    grams = [gram_of(seg_id, audio) for seg_id, _, audio in windows]
    chunks = [
        encoder.forward(np.stack(grams[lo : lo + 32]), train=False).astype(np.float64)
        for lo in range(0, len(grams), 32)
    ]
    embeddings = np.vstack(chunks)
    if cache is not None:
        cache_path.parent.mkdir(parents=True, exist_ok=True)
        cache.save(cache_path)
    if args.mask is not None:
        embeddings = subspace(embeddings, args.mask)
    for (seg_id, track_id, _), emb in zip(windows, embeddings):
        table.add(seg_id, track_id, (track_id,) * N_CONDITIONS, emb)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    table.save(out)
    if args.plot is not None:
        if args.mask is not None:
            raise ValueError("--plot needs the full embedding; drop --mask")
        evalsuite.emit_embedding_plot(table, args.plot, out.with_suffix(".png"))
    write_manifest(
        out.parent, "embed",
        {"ckpt": args.ckpt, "corpus": args.corpus, "out": args.out,
         "mask": args.mask, "split": args.split},
        corpus_root=args.corpus,
    )
    print(f"wrote {len(table)} rows to {out}")
    return 0


# ---------------------------------------------------------------------------
# Parser


def _add_config_flags(sub: argparse.ArgumentParser) -> None:
    sub.add_argument("--config", type=Path, default=None, help="YAML config file")
    sub.add_argument(
        "--set", action="append", metavar="KEY=VALUE",
        help="override a config key (repeatable, dots reach nested keys)",
    )
    sub.add_argument("--seed", type=int, default=None, help="override the config seed")
    sub.add_argument("--workers", type=int, default=1,
                     help="worker count; only 1 (single-threaded) is implemented")
    sub.add_argument("--no-norm", action="store_true", help="disable the norm loss term")
    sub.add_argument("--no-pseudo", action="store_true",
                     help="sample triplets from dataset pieces instead of pseudo pieces")
    sub.add_argument("--no-additional", action="store_true",
                     help="disable the role-swapped additional triplets")
    sub.add_argument("--no-pretrain", action="store_true",
                     help="start from random weights instead of a distilled encoder")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="partsim",
        description="Instrument-part similarity embeddings: data, training, evaluation.",
    )
    parser.add_argument("--version", action="version", version=f"partsim {__version__}")
    commands = parser.add_subparsers(dest="command", required=True)

    synth = commands.add_parser("synth", help="generate a synthetic stem corpus")
    synth.add_argument("--tracks", type=int, default=24)
    synth.add_argument("--seed", type=int, default=0)
    synth.add_argument("--out", type=Path, required=True)
    synth.set_defaults(func=cmd_synth)

    teachers = commands.add_parser("teachers", help="train per-instrument teacher encoders")
    teachers.add_argument("--corpus", type=Path, required=True)
    teachers.add_argument("--out", type=Path, required=True)
    _add_config_flags(teachers)
    teachers.set_defaults(func=cmd_teachers)

    pretrain = commands.add_parser("pretrain", help="distill teachers into the main encoder")
    pretrain.add_argument("--corpus", type=Path, required=True)
    pretrain.add_argument("--teachers", type=Path, required=True,
                          help="directory holding teacher_<instrument>.ckpt files")
    pretrain.add_argument("--out", type=Path, required=True)
    _add_config_flags(pretrain)
    pretrain.set_defaults(func=cmd_pretrain)

    train = commands.add_parser("train", help="run main conditional training")
    train.add_argument("--corpus", type=Path, required=True)
    train.add_argument("--out", type=Path, required=True)
    train.add_argument("--run-id", default="run")
    train.add_argument("--initial", type=Path, default=None,
                       help="checkpoint to start from (usually pretrain.ckpt)")
    _add_config_flags(train)
    train.set_defaults(func=cmd_train)

    evalp = commands.add_parser("eval", help="run an evaluation suite on the test split")
    evalp.add_argument("--suite", choices=EVAL_SUITES, required=True)
    evalp.add_argument("--ckpt", type=Path, required=True)
    evalp.add_argument("--corpus", type=Path, required=True)
    evalp.add_argument("--out", type=Path, required=True)
    evalp.add_argument("--lengths", default="3,5,10",
                       help="comma-separated segment lengths for music-id")
    evalp.add_argument("--length", type=float, default=None,
                       help="segment length in seconds "
                            "(default 3 for inst-id/correlation, 5 for pair)")
    evalp.add_argument("--k", type=int, default=evalsuite.DEFAULT_K)
    evalp.add_argument("--pairs", type=int, default=20)
    evalp.add_argument("--seed", type=int, default=0)
    evalp.set_defaults(func=cmd_eval)

    embed = commands.add_parser("embed", help="embed corpus segments to a table file")
    embed.add_argument("--ckpt", type=Path, required=True)
    embed.add_argument("--corpus", type=Path, required=True)
    embed.add_argument("--out", type=Path, required=True)
    embed.add_argument("--split", choices=("train", "val", "test"), default=None,
                       help="restrict to one split (default: all tracks)")
    embed.add_argument("--length", type=float, default=3.0)
    embed.add_argument("--mask", type=int, default=None, choices=range(N_CONDITIONS),
                       help="store only this instrument subspace")
    embed.add_argument("--plot", type=int, default=None, choices=range(N_CONDITIONS),
                       help="also write a 2-D scatter for this subspace")
    embed.set_defaults(func=cmd_embed)

    return parser


def main(argv=None) -> int:
    logging.basicConfig(
        level=logging.INFO, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr
    )
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except Exception as exc:
        log.debug("command failed", exc_info=True)
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
