"""Command-line pipelines: synth, features, crossval, estimate.

Exit codes: 0 success, 2 configuration error, 3 I/O error, 4 partial
per-file failures, 5 flagged cross-validation report, 6 inference shape
mismatch. Every command writes a run.lock with its resolved parameters so
reruns are reproducible.

Seed priority: --seed flag, then the config file, then the DOPPLERGA_SEED
environment variable, then 0.
"""

from __future__ import annotations

import argparse
import hashlib
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import clstm, model_io, signal_io, synthgen, tf_features, training
from .errors import DopplerGAError, ShapeError

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_PARTIAL = 4
EXIT_FLAGGED = 5
EXIT_INFER = 6

SEED_ENV_VAR = "DOPPLERGA_SEED"


def _read_config_file(path: str) -> dict[str, str]:
    """`key = value` lines; `#` starts a comment."""
    values: dict[str, str] = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected key = value")
        key, value = line.split("=", 1)
        values[key.strip().replace("-", "_")] = value.strip()
    return values


def _write_run_lock(out_dir: Path, args: argparse.Namespace) -> None:
    lines = []
    for key in sorted(vars(args)):
        if key in ("func", "config"):
            continue
        lines.append(f"{key} = {getattr(args, key)}")
    (out_dir / "run.lock").write_text("\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# synth


def cmd_synth(args) -> int:
    out_dir = Path(args.out)
    try:
        synthgen.generate_dataset(
            out_dir,
            n_patients=args.patients,
            base_seed=args.seed,
            duration_s=args.duration,
            snr_db=args.snr_db,
            eta_std_months=args.eta_std,
            max_recordings_per_visit=args.max_recordings,
        )
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    _write_run_lock(out_dir, args)
    print(f"corpus written to {out_dir}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# features


def _feature_params_tag(args) -> str:
    return (
        f"truncate={args.truncate}:window={args.window}:hop={args.hop}"
        f":band=25-600:fs=4000"
    )


def _extract_one(wav_path: str, out_path: str, max_seconds: float,
                 window: int, hop: int) -> None:
    rec = signal_io.load_wav(wav_path)
    rec = signal_io.preprocess(rec, max_seconds=max_seconds)
    cfg = tf_features.WindowConfig(length_samples=window, hop_samples=hop)
    seq = tf_features.extract_features(rec, cfg)
    tf_features.write_feature_cache(out_path, seq)


def cmd_features(args) -> int:
    try:
        manifest = signal_io.load_manifest(args.manifest)
    except DopplerGAError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    base = Path(args.manifest).parent
    tag = _feature_params_tag(args)

    jobs = []
    skipped = 0
    for entry in manifest.entries:
        wav_path = base / entry.file_path
        stem = Path(entry.file_path).stem
        out_path = out_dir / f"{stem}.dgf"
        meta_path = out_dir / f"{stem}.dgf.meta"
        try:
            digest = hashlib.sha256(
                wav_path.read_bytes() + tag.encode()
            ).hexdigest()
        except OSError as exc:
            print(f"{wav_path}: {exc}", file=sys.stderr)
            digest = None
        if (
            digest is not None
            and out_path.exists()
            and meta_path.exists()
            and meta_path.read_text().strip() == digest
        ):
            skipped += 1
            continue
        jobs.append((str(wav_path), str(out_path), str(meta_path), digest))

    failures = 0
    def finish(meta_path, digest):
        if digest is not None:
            Path(meta_path).write_text(digest + "\n")

    if args.jobs > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            futures = [
                (j, pool.submit(_extract_one, j[0], j[1], args.truncate,
                                args.window, args.hop))
                for j in jobs
            ]
            for (wav_path, out_path, meta_path, digest), fut in futures:
                try:
                    fut.result()
                    finish(meta_path, digest)
                except Exception as exc:
                    failures += 1
                    print(f"{wav_path}: {exc}", file=sys.stderr)
    else:
        for wav_path, out_path, meta_path, digest in jobs:
            try:
                _extract_one(wav_path, out_path, args.truncate, args.window, args.hop)
                finish(meta_path, digest)
            except Exception as exc:
                failures += 1
                print(f"{wav_path}: {exc}", file=sys.stderr)

    _write_run_lock(out_dir, args)
    done = len(jobs) - failures
    print(f"features: {done} written, {skipped} cached, {failures} failed")
    return EXIT_PARTIAL if failures else EXIT_OK


# ---------------------------------------------------------------------------
# crossval


def _load_examples(manifest_path: str, features_dir: str) -> list[training.LabeledExample]:
    manifest = signal_io.load_manifest(manifest_path)
    examples = []
    for entry in manifest.entries:
        stem = Path(entry.file_path).stem
        cache = Path(features_dir) / f"{stem}.dgf"
        if not cache.exists():
            raise FileNotFoundError(f"feature cache missing: {cache}")
        seq = tf_features.read_feature_cache(cache)
        examples.append(
            training.LabeledExample(
                patient_id=entry.patient_id,
                visit_id=entry.visit_id,
                recording_id=stem,
                sequence=seq,
                ga_months_lmp=entry.ga_months_lmp,
            )
        )
    return examples


def cmd_crossval(args) -> int:
    if args.folds < 2:
        print("error: --folds must be at least 2", file=sys.stderr)
        return EXIT_CONFIG
    try:
        examples = _load_examples(args.manifest, args.features)
    except (DopplerGAError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)

    cfg = clstm.NetworkConfig(
        timesteps=args.timesteps,
        width=args.width,
        hidden_channels=(args.hidden1, args.hidden2),
        dropout_rate=args.dropout,
        l2_lambda=args.l2,
        seed=args.seed,
    )
    report = training.run_trials(
        examples,
        cfg,
        n_trials=args.trials,
        k=args.folds,
        base_seed=args.seed,
        epochs=args.epochs,
        batch_size=args.batch,
        n_jobs=args.jobs,
    )
    (out_dir / "report.json").write_text(training.report_to_json(report) + "\n")
    (out_dir / "report.txt").write_text(training.report_to_text(report) + "\n")
    _write_run_lock(out_dir, args)
    print(training.report_to_text(report))
    return EXIT_FLAGGED if report.flagged else EXIT_OK


# ---------------------------------------------------------------------------
# train (single model, used to produce a model file for `estimate`)


def cmd_train(args) -> int:
    try:
        examples = _load_examples(args.manifest, args.features)
    except (DopplerGAError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    cfg = clstm.NetworkConfig(
        timesteps=args.timesteps,
        width=args.width,
        hidden_channels=(args.hidden1, args.hidden2),
        dropout_rate=args.dropout,
        l2_lambda=args.l2,
        seed=args.seed,
    )
    state, history = training.train_model(
        examples, None, cfg, epochs=args.epochs, batch_size=args.batch,
        rng=np.random.default_rng(args.seed),
    )
    model_io.save_model(out_dir / "model.dgm", state)
    _write_run_lock(out_dir, args)
    print(f"model written to {out_dir / 'model.dgm'}; "
          f"final training MAE {history[-1]:.3f}" if history else "model written")
    return EXIT_OK


# ---------------------------------------------------------------------------
# estimate


def cmd_estimate(args) -> int:
    try:
        state = model_io.load_model(args.model)
    except (DopplerGAError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    if state.norm_stats is None:
        print("error: model file carries no normalization stats", file=sys.stderr)
        return EXIT_INFER

    rows = []  # (recording_id, visit_id, estimate)
    for wav in args.recordings:
        try:
            rec = signal_io.load_wav(wav)
            rec = signal_io.preprocess(rec, max_seconds=args.truncate)
            seq = tf_features.extract_features(rec)
        except DopplerGAError as exc:
            print(f"error: {wav}: {exc}", file=sys.stderr)
            return EXIT_IO
        seq = tf_features.normalize_features(seq, state.norm_stats)
        try:
            tensor = clstm.shape_input(seq, state.config)
        except ShapeError as exc:
            print(f"error: {wav}: {exc}", file=sys.stderr)
            return EXIT_INFER
        pred = clstm.network_forward(tensor[None], state, mode="infer")[0]
        visit = args.visit_id or Path(wav).stem
        rows.append((Path(wav).stem, visit, float(pred)))

    by_visit: dict[str, list[float]] = {}
    for _, visit, pred in rows:
        by_visit.setdefault(visit, []).append(pred)

    for rec_id, visit, pred in rows:
        print(f"{rec_id}: {pred:.1f} months")
    for visit in sorted(by_visit):
        print(f"visit {visit}: {np.mean(by_visit[visit]):.1f} months")

    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write("recording_id,visit_id,ga_estimate\n")
            for rec_id, visit, pred in rows:
                fh.write(f"{rec_id},{visit},{pred:.1f}\n")
    return EXIT_OK


# ---------------------------------------------------------------------------
# Parser


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dopplerga",
        description="Gestational-age estimation from 1D Doppler audio.",
    )
    parser.add_argument("--config", help="key = value config file", default=None)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic labeled corpus")
    p.add_argument("--patients", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--duration", type=float, default=300.0, help="seconds per recording")
    p.add_argument("--snr-db", type=float, default=6.0)
    p.add_argument("--eta-std", type=float, default=0.25)
    p.add_argument("--max-recordings", type=int, default=2)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("features", help="extract and cache TF features")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--truncate", type=float, default=300.0)
    p.add_argument("--window", type=int, default=400)
    p.add_argument("--hop", type=int, default=40)
    p.add_argument("--jobs", type=int, default=os.cpu_count() or 1)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_features)

    def add_net_flags(p):
        p.add_argument("--timesteps", type=int, default=299)
        p.add_argument("--width", type=int, default=100)
        p.add_argument("--hidden1", type=int, default=8)
        p.add_argument("--hidden2", type=int, default=4)
        p.add_argument("--dropout", type=float, default=0.3)
        p.add_argument("--l2", type=float, default=0.01)
        p.add_argument("--epochs", type=int, default=300)
        p.add_argument("--batch", type=int, default=32)
        p.add_argument("--seed", type=int, default=None)

    p = sub.add_parser("crossval", help="multi-trial stratified cross-validation")
    p.add_argument("--manifest", required=True)
    p.add_argument("--features", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--trials", type=int, default=50)
    p.add_argument("--folds", type=int, default=5)
    p.add_argument("--jobs", type=int, default=1)
    add_net_flags(p)
    p.set_defaults(func=cmd_crossval)

    p = sub.add_parser("train", help="train one model on a full manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--features", required=True)
    p.add_argument("--out", required=True)
    add_net_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("estimate", help="estimate GA for recordings")
    p.add_argument("--model", required=True)
    p.add_argument("recordings", nargs="+")
    p.add_argument("--visit-id", default=None,
                   help="treat all recordings as one visit with this id")
    p.add_argument("--truncate", type=float, default=300.0)
    p.add_argument("--out", default=None, help="write a CSV of estimates")
    p.set_defaults(func=cmd_estimate)
    return parser


def _coerce(value: str):
    for cast in (int, float):
        try:
            return cast(value)
        except ValueError:
            continue
    return value


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = _build_parser()

    # config file and environment act as overridable defaults
    file_config: dict[str, str] = {}
    if "--config" in argv:
        try:
            file_config = _read_config_file(argv[argv.index("--config") + 1])
        except (OSError, ValueError, IndexError) as exc:
            print(f"error: bad config file: {exc}", file=sys.stderr)
            return EXIT_CONFIG
    defaults = {k: _coerce(v) for k, v in file_config.items()}
    if "seed" not in defaults:
        env_seed = os.environ.get(SEED_ENV_VAR)
        if env_seed:
            defaults["seed"] = int(env_seed)
    defaults.setdefault("seed", 0)

    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code not in (0, None) else 0

    # flags beat the config file, which beats built-in defaults
    for key, value in defaults.items():
        flag = "--" + key.replace("_", "-")
        if hasattr(args, key) and flag not in argv:
            setattr(args, key, value)
    if getattr(args, "seed", None) is None:
        args.seed = 0

    try:
        return args.func(args)
    except DopplerGAError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
