"""Command-line entry point.

    modalheart fixtures  --preset cardiac-toy --out corpus/
    modalheart decompose --manifest corpus/manifest.csv --out dec/
    modalheart dataset   --manifest corpus/manifest.csv --case 13 --out ds/
    modalheart dataset   --dry-run --case 14
    modalheart train     --data ds/ --config train.json --out run/
    modalheart predict   --checkpoint run/checkpoint.mdck --manifest ds/test_manifest.csv --kind hodmd-modes-abs --out pred/
    modalheart eval      --predictions pred/predictions.csv --out report/
    modalheart bench     --manifest corpus/manifest.csv --checkpoint run/checkpoint.mdck --out bench/

Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path


log = logging.getLogger("modalheart")

KIND_CHOICES = ("original", "svd1-recon", "svd1-modes", "hodmd-recon", "hodmd-modes-abs")
PART_KINDS = ("hodmd-modes-real", "hodmd-modes-imag")


class UsageError(Exception):
    pass


def _existing(path, what: str) -> Path:
    if path is None:
        raise UsageError(f"--{what} is required")
    p = Path(path)
    if not p.exists():
        raise UsageError(f"{what} not found: {p}")
    return p


def _out_dir(args) -> Path:
    if args.out is None:
        raise UsageError("--out is required")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _case_id(text: str) -> int:
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"case must be an integer in 1..14, got {text!r}")
    if not 1 <= v <= 14:
        raise argparse.ArgumentTypeError(f"case must be in 1..14, got {v}")
    return v


def _gen_config(args):
    from .dataset import GenerationConfig
    cfg = GenerationConfig.load(args.config) if args.config else GenerationConfig()
    from dataclasses import replace
    return replace(cfg, seed=args.seed)


def _load_corpus(manifest: Path, dt: float, homogenized: bool = True):
    from .dataset import homogenize_sequence
    from .tensor import load_sequence, read_manifest
    seqs = []
    for path, ann in read_manifest(manifest):
        seq = load_sequence(path, ann, dt)
        seqs.append(homogenize_sequence(seq) if homogenized else seq)
    return seqs


def _set_threads(n):
    if n is None:
        env = os.environ.get("MDK_THREADS")
        n = int(env) if env else None
    if n is not None:
        if n < 1:
            raise UsageError("--threads must be >= 1")
        import torch
        torch.set_num_threads(n)


# -- subcommands ------------------------------------------------------------

def cmd_fixtures(args) -> int:
    from .fixtures import preset_corpus, write_corpus
    out = _out_dir(args)
    path = write_corpus(out, preset_corpus(args.preset, args.seed))
    print(f"wrote {path}")
    return 0


def cmd_decompose(args) -> int:
    from .dataset import DataKind, decompose_sequence
    from .hodmd import write_spectrum_file
    from .plotting import spectrum_plot
    from .tensor import write_tensor_file
    manifest = _existing(args.manifest, "manifest")
    cfg = _gen_config(args)
    out = _out_dir(args)
    for sub in ("spectra", "recon", "figures"):
        (out / sub).mkdir(exist_ok=True)
    rows = []
    for seq in _load_corpus(manifest, cfg.dt_seconds):
        sid = seq.sequence_id
        k = seq.n_snapshots
        dec = decompose_sequence(seq, cfg, {DataKind.HODMD_MODE})
        write_tensor_file(out / "recon" / f"{sid}_svd1.mdt", dec.svd1.reconstructions)
        if dec.hodmd is None:
            print(f"warning: sequence too short: {sid} has {k} snapshots, need {cfg.min_snapshots}",
                  file=sys.stderr)
            rows.append([sid, k, len(dec.svd1.sigma_retained), 0, 0, "", "skipped"])
            continue
        spec = dec.hodmd.spectrum
        write_spectrum_file(out / "spectra" / f"{sid}.mdsp", spec)
        write_tensor_file(out / "recon" / f"{sid}_hodmd.mdt", dec.hodmd.reconstruction)
        spectrum_plot(spec, out / "figures" / f"{sid}_spectrum.png", sid)
        rows.append([sid, k, len(dec.svd1.sigma_retained), len(spec.modes), dec.hodmd.iterations,
                     repr(spec.dominant_frequency_hz()), "ok"])
    with open(out / "summary.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["sequence_id", "snapshots", "svd_modes", "hodmd_modes", "iterations",
                    "dominant_hz", "status"])
        w.writerows(rows)
    print(f"decomposed {sum(r[-1] == 'ok' for r in rows)} of {len(rows)} sequences into {out}")
    return 0


def _print_counts(per_kind: dict, total: int, case: int) -> None:
    print(f"case {case}")
    for kind, n in per_kind.items():
        print(f"  {kind.value:<12} {n:>8}")
    print(f"  {'total':<12} {total:>8}")


def cmd_dataset(args) -> int:
    from .dataset import (DataKind, TrainingCase, dry_run_counts, generate_case,
                          read_corpus_counts, reference_corpus_counts, split_dataset,
                          write_archive)
    from .tensor import write_manifest
    if args.case is None:
        raise UsageError("--case is required")
    if args.dry_run:
        rows = read_corpus_counts(_existing(args.metadata, "metadata")) if args.metadata \
            else reference_corpus_counts()
        res = dry_run_counts(rows, args.case, args.split)
        _print_counts(res["per_kind"], res["total"], args.case)
        if args.out:
            out = _out_dir(args)
            with open(out / "counts.csv", "w", newline="") as fh:
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(["case", "kind", "count"])
                for kind, n in res["per_kind"].items():
                    w.writerow([args.case, kind.value, n])
                w.writerow([args.case, "total", res["total"]])
        return 0

    manifest = _existing(args.manifest, "manifest")
    cfg = _gen_config(args)
    out = _out_dir(args)
    from .tensor import read_manifest
    entries = read_manifest(manifest)
    seqs = _load_corpus(manifest, cfg.dt_seconds)
    case = TrainingCase.get(args.case)
    records = generate_case(seqs, case, cfg)
    split = split_dataset(records, cfg.fractions, cfg.seed,
                          labels={s.sequence_id: s.annotation for s in seqs})
    write_archive(out, records, split.assignment)
    for name in ("train", "val", "test"):
        rows = []
        for path, ann in entries:
            if split.assignment.get(ann.sequence_id) == name:
                rows.append((Path(os.path.relpath(path.resolve(), out.resolve())).as_posix(), ann))
        write_manifest(out / f"{name}_manifest.csv", rows)
    per_kind = {k: 0 for k in DataKind}
    for r in split.train:
        per_kind[r.kind] += 1
    _print_counts(per_kind, len(split.train), args.case)
    return 0


def cmd_train(args) -> int:
    from .dataset import read_archive
    from .plotting import loss_curves
    from .training import TrainConfig, train
    data = _existing(args.data, "data")
    index = data / "index.csv" if data.is_dir() else data
    cfg = TrainConfig.load(args.config) if args.config else TrainConfig()
    from dataclasses import replace
    cfg = replace(cfg, seed=args.seed)
    out = _out_dir(args)
    records = read_archive(index, split="train")
    res = train(records, cfg, out / "checkpoint.mdck")
    with open(out / "loss_history.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "total", "l_reg", "l_ssat", "masked_patches"])
        for i, h in enumerate(res.history):
            w.writerow([i, repr(h.total), repr(h.l_reg), repr(h.l_ssat), h.masked_patch_count])
    loss_curves(res.history, out / "loss.png")
    last = res.history[-1]
    print(f"trained {len(res.history)} steps on {len(records)} images; final loss {last.total:.6f}")
    return 0


def _load_params(args):
    from .model import ModelConfig, load_checkpoint
    ckpt = _existing(args.checkpoint, "checkpoint")
    expect = None
    if args.model_config:
        with open(args.model_config) as fh:
            raw = json.load(fh)
        expect = ModelConfig.from_dict(raw.get("model", raw))
    params, _, _ = load_checkpoint(ckpt, expect)
    return params


def cmd_predict(args) -> int:
    from .evaluation import TestKind, predict_sequence, write_predictions
    from .hodmd import SequenceTooShort
    if args.kind in PART_KINDS and not args.complex_parts:
        raise UsageError(f"--kind {args.kind} needs --complex-parts")
    manifest = _existing(args.manifest, "manifest")
    params = _load_params(args)
    cfg = _gen_config(args)
    out = _out_dir(args)
    kind = TestKind.parse(args.kind)
    preds = []
    for seq in _load_corpus(manifest, cfg.dt_seconds):
        try:
            preds.append(predict_sequence(params, seq, kind, cfg))
        except SequenceTooShort:
            print(f"warning: sequence too short: {seq.sequence_id}, skipped", file=sys.stderr)
    if not preds:
        raise RuntimeError("no sequence produced a prediction")
    write_predictions(out / "predictions.csv", preds)
    print(f"wrote {len(preds)} predictions to {out / 'predictions.csv'}")
    return 0


def cmd_eval(args) -> int:
    from .evaluation import evaluate, format_table, read_predictions
    from .plotting import predicted_vs_true
    preds = read_predictions(_existing(args.predictions, "predictions"))
    out = _out_dir(args)
    report = evaluate(preds)
    (out / "metrics.json").write_text(report.to_json() + "\n")
    table = format_table(report)
    (out / "metrics.txt").write_text(table)
    predicted_vs_true(preds, out / "predicted_vs_true.png", report.test_kind)
    print(table, end="")
    return 0


def cmd_bench(args) -> int:
    from .evaluation import bench
    from .model import ModelConfig, init_params
    import torch
    manifest = _existing(args.manifest, "manifest")
    cfg = _gen_config(args)
    out = _out_dir(args)
    params = _load_params(args) if args.checkpoint else init_params(ModelConfig(), args.seed)
    torch.set_num_threads(1)
    timing = bench(_load_corpus(manifest, cfg.dt_seconds), params, cfg)
    (out / "timing.json").write_text(json.dumps(timing, indent=2, sort_keys=True) + "\n")
    for key in ("t_svd_ms", "t_hosvd_ms", "t_hodmd_ms", "t_pred_ms"):
        print(f"{key:<12} {timing[key]:10.4f}")
    print(f"{'throughput':<12} {timing['throughput_fps']:10.2f} fps")
    return 0


# -- parser -----------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    from .fixtures import PRESETS
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--out", help="output directory")
    common.add_argument("--config", help="JSON config file")
    common.add_argument("--seed", type=int, default=42)
    common.add_argument("--threads", type=int, help="cap torch threads (default: MDK_THREADS)")
    common.add_argument("-v", "--verbose", action="count", default=0)

    ap = argparse.ArgumentParser(prog="modalheart", description=__doc__.split("\n")[0])
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fixtures", parents=[common], help="write a synthetic corpus")
    p.add_argument("--preset", choices=PRESETS, default="cardiac-toy")
    p.set_defaults(func=cmd_fixtures)

    p = sub.add_parser("decompose", parents=[common], help="SVD + HODMD of every sequence")
    p.add_argument("--manifest")
    p.set_defaults(func=cmd_decompose)

    p = sub.add_parser("dataset", parents=[common], help="generate a training case archive")
    p.add_argument("--manifest")
    p.add_argument("--case", type=_case_id)
    p.add_argument("--dry-run", action="store_true", help="count from metadata only")
    p.add_argument("--metadata", help="per-state/split counts CSV for --dry-run")
    p.add_argument("--split", default="train", choices=("train", "val", "test"))
    p.set_defaults(func=cmd_dataset)

    p = sub.add_parser("train", parents=[common], help="joint training from a dataset archive")
    p.add_argument("--data", help="dataset directory or its index.csv")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", parents=[common], help="fused per-sequence predictions")
    p.add_argument("--manifest")
    p.add_argument("--checkpoint")
    p.add_argument("--kind", choices=KIND_CHOICES + PART_KINDS, default="hodmd-modes-abs")
    p.add_argument("--complex-parts", action="store_true",
                   help="allow the real/imag HODMD mode test kinds")
    p.add_argument("--model-config", help="refuse checkpoints whose model config differs")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("eval", parents=[common], help="metrics from a predictions CSV")
    p.add_argument("--predictions")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench", parents=[common], help="per-phase timing harness")
    p.add_argument("--manifest")
    p.add_argument("--checkpoint")
    p.add_argument("--model-config")
    p.set_defaults(func=cmd_bench)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        _set_threads(args.threads)
        return args.func(args)
    except UsageError as exc:
        print(f"modalheart {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001
        print(f"modalheart {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        if args.verbose:
            raise
        return 1


if __name__ == "__main__":
    sys.exit(main())
