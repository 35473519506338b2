"""Command-line entry point: ``mpvoc <subcommand> [--config FILE] [--set key=value ...] --out DIR``.

Exit status is 0 on success, 1 for usage errors and 2 for runtime failures.
``MPVOC_THREADS`` caps worker parallelism; 0 or unset keeps every stage
single-threaded and deterministic.
"""
import argparse
import json
import logging
import os
import sys

import numpy as np

from . import __version__
from . import autodiff as ad
from . import config as config_mod
from . import dsp, mel, metrics, trainer

logger = logging.getLogger("mpvoc")

MANIFEST = "run_manifest.json"
PGM_LOG_FLOOR = 1e-5


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def worker_count():
    raw = os.environ.get("MPVOC_THREADS", "").strip()
    if not raw:
        return 0
    try:
        n = int(raw)
    except ValueError:
        raise UsageError(f"MPVOC_THREADS must be an integer, got {raw!r}") from None
    return max(n, 0)


# ---------------------------------------------------------------------------
# shared helpers
# ---------------------------------------------------------------------------

def _load_cfg(args):
    return config_mod.load_config(args.config, args.set or ())


def _out_dir(args):
    os.makedirs(args.out, exist_ok=True)
    return args.out


def write_manifest(out, command, cfg, extra=None):
    payload = {
        "command": command,
        "version": __version__,
        "seed": cfg.trainer.seed,
        "model_seed": cfg.model.seed,
        "config": config_mod.to_flat(cfg),
    }
    if extra:
        payload.update(extra)
    with open(os.path.join(out, MANIFEST), "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _write_text(path, text):
    with open(path, "w", newline="") as fh:
        fh.write(text)


def write_pgm(path, grid):
    """Binary graymap of a (F, T) grid with row 0 of the grid at the bottom.

    The grid is scaled to [0, 255] by its own min and max; a constant grid
    becomes an all-zero image. Returns the (min, max) used.
    """
    grid = np.asarray(grid, dtype=np.float64)
    if grid.ndim != 2:
        raise ValueError(f"expected a 2-D grid, got shape {grid.shape}")
    lo, hi = float(grid.min()), float(grid.max())
    if hi > lo:
        img = np.rint((grid - lo) / (hi - lo) * 255.0)
    else:
        img = np.zeros_like(grid)
    img = img[::-1].astype(np.uint8)
    rows, cols = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{cols} {rows}\n255\n".encode("ascii"))
        fh.write(img.tobytes())
    return lo, hi


def read_pgm(path):
    with open(path, "rb") as fh:
        data = fh.read()
    parts = data.split(b"\n", 3)
    if parts[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM")
    cols, rows = (int(v) for v in parts[1].split())
    return np.frombuffer(parts[3], dtype=np.uint8).reshape(rows, cols)


def _wav_files(path):
    if os.path.isdir(path):
        names = sorted(f for f in os.listdir(path) if f.lower().endswith(".wav"))
        return [os.path.join(path, n) for n in names]
    return [path]


def _stem(path):
    return os.path.splitext(os.path.basename(path))[0]


def _model_dtype(model):
    return model.params[model.params.names()[0]].dtype


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_gen_corpus(args):
    cfg = _load_cfg(args)
    out = _out_dir(args)
    spec = cfg.corpus.synthetic_spec()
    corpus = trainer.make_synthetic_corpus(spec)
    wav_dir = os.path.join(out, "wavs")
    os.makedirs(wav_dir, exist_ok=True)
    entries = []
    for utt in corpus:
        dsp.write_wav(os.path.join(wav_dir, utt.utt_id + ".wav"), utt.wave, "float32")
        entries.append({"utt_id": utt.utt_id, "f0": utt.f0, "samples": len(utt.wave.samples)})
    with open(os.path.join(out, "corpus.json"), "w") as fh:
        json.dump({"checksum": trainer.corpus_checksum(corpus), "utterances": entries}, fh, indent=2)
        fh.write("\n")
    write_manifest(out, "gen-corpus", cfg)
    print(f"wrote {len(corpus)} utterances to {wav_dir}")
    return 0


def cmd_train(args):
    out = _out_dir(args)
    if args.resume:
        tr = trainer.Trainer.from_checkpoint(args.resume)
        cfg = tr.cfg
        if args.set or args.config:
            raise UsageError("--resume takes its configuration from the checkpoint; drop --config/--set")
    else:
        cfg = _load_cfg(args)
        tr = trainer.Trainer(cfg)
    write_manifest(out, "train", cfg, {"params": tr.model.param_count()})
    target = cfg.trainer.steps
    every = cfg.trainer.checkpoint_interval

    def on_step(t, _report):
        if every and t.step % every == 0 and t.step < target:
            t.save_checkpoint(os.path.join(out, f"ckpt_{t.step:07d}.mpv"))

    remaining = max(target - tr.step, 0)
    tr.train(remaining, callback=on_step)
    tr.save_checkpoint(os.path.join(out, "checkpoint.mpv"))
    _write_text(os.path.join(out, "loss_log.csv"), tr.loss_log_csv())
    report = tr.evaluate(workers=worker_count())
    report.write_csv(os.path.join(out, "metrics.csv"))
    final = tr.history[-1].total if tr.history else float("nan")
    print(f"trained {tr.step} steps, final loss {final:.6f}; params {tr.model.param_count()}")
    return 0


def _features_from_file(model, path):
    """Model input grid and output length for a WAV or a .npy mel/prior grid."""
    cfg = model.cfg
    if path.lower().endswith(".npy"):
        grid = np.load(path)
        if grid.ndim != 2:
            raise ValueError(f"{path}: expected a 2-D (bins, frames) array, got {grid.shape}")
        if np.any(grid < 0):
            raise ValueError(f"{path}: mel/prior grids hold linear amplitudes and must be nonnegative")
        rows = grid.shape[0]
        if rows == cfg.mel.n_mels:
            feats = model.features_from_mel(grid)
        elif rows == cfg.stft.n_freqs and cfg.input_kind == "prior":
            feats = mel.log_compress(grid) if cfg.mel.log_prior else grid
        else:
            raise ValueError(
                f"{path}: {rows} rows matches neither n_mels={cfg.mel.n_mels} nor a prior grid "
                f"of {cfg.stft.n_freqs} rows for this {cfg.input_kind} model"
            )
        length = (grid.shape[1] - 1) * cfg.stft.hop
        return feats, length
    wave = dsp.read_wav(path)
    if wave.sample_rate != cfg.sample_rate:
        raise ValueError(f"{path}: sample rate {wave.sample_rate} != model rate {cfg.sample_rate}")
    return model.features_from_wave(wave.samples), len(wave.samples)


def _load_model(path):
    tr = trainer.Trainer.from_checkpoint(path, corpus=[])
    return tr


def cmd_synth(args):
    out = _out_dir(args)
    tr = _load_model(args.checkpoint)
    model = tr.model
    written = 0
    with ad.no_grad():
        for src in args.inputs:
            files = _wav_files(src) if not src.lower().endswith(".npy") else [src]
            for path in files:
                feats, length = _features_from_file(model, path)
                y, _ = model.synthesize(feats[None].astype(_model_dtype(model)), length)
                dst = os.path.join(out, _stem(path) + ".wav")
                dsp.write_wav(dst, dsp.Waveform(y.data[0], model.cfg.sample_rate), "float32")
                written += 1
    write_manifest(out, "synth", tr.cfg, {"checkpoint": os.path.abspath(args.checkpoint)})
    print(f"wrote {written} files to {out}")
    return 0


def cmd_eval(args):
    out = _out_dir(args)
    workers = worker_count()
    if args.checkpoint:
        if args.ref or args.hyp:
            raise UsageError("use either --checkpoint or --ref/--hyp, not both")
        tr = trainer.Trainer.from_checkpoint(args.checkpoint)
        cfg = tr.cfg
        report = tr.evaluate(workers=workers)
    else:
        if not (args.ref and args.hyp):
            raise UsageError("eval needs --checkpoint or both --ref and --hyp")
        cfg = _load_cfg(args)
        refs = {_stem(p): p for p in _wav_files(args.ref)}
        hyps = {_stem(p): p for p in _wav_files(args.hyp)}
        common = sorted(set(refs) & set(hyps))
        if not common:
            raise FileNotFoundError(f"no matching file names between {args.ref} and {args.hyp}")
        missing = sorted(set(refs) ^ set(hyps))
        if missing:
            logger.warning("skipping unmatched files: %s", ", ".join(missing[:10]))
        triples = [(k, dsp.read_wav(refs[k]), dsp.read_wav(hyps[k])) for k in common]
        report = metrics.evaluate_corpus(triples, cfg.metrics, workers)
    report.write_csv(os.path.join(out, "metrics.csv"))
    write_manifest(out, "eval", cfg)
    mean = report.mean()
    print(" ".join(f"{k}={'n/a' if v is None else format(v, '.4f')}" for k, v in mean.items()))
    return 0


def cmd_ablate(args):
    cfg = _load_cfg(args)
    out = _out_dir(args)
    cells = trainer.parse_cells(args.cells or cfg.ablate.cells)
    seeds = trainer.parse_seeds(args.seeds if args.seeds is not None else cfg.ablate.seeds)
    corpus = trainer.load_corpus(cfg.corpus)
    rows = trainer.run_ablation(cfg, cells, seeds, corpus, worker_count())
    _write_text(os.path.join(out, "ablation.csv"), trainer.ablation_csv(rows))
    write_manifest(out, "ablate", cfg, {"cells": [c.label for c in cells], "seeds": seeds})
    failed = [r for r in rows if r.get("status") != "ok"]
    print(f"{len(rows)} cells, {len(failed)} failed; table in {os.path.join(out, 'ablation.csv')}")
    return 0


def _dump_grid(out, name, grid):
    path = os.path.join(out, name + ".pgm")
    lo, hi = write_pgm(path, np.log(np.asarray(grid) + PGM_LOG_FLOOR))
    print(f"{name}.pgm {grid.shape[1]}x{grid.shape[0]} log-magnitude range [{lo:.6f}, {hi:.6f}]")


def cmd_dump_spec(args):
    out = _out_dir(args)
    if args.checkpoint:
        if not args.input:
            raise UsageError("dump-spec with --checkpoint needs --input (WAV or .npy)")
        tr = _load_model(args.checkpoint)
        model, cfg = tr.model, tr.cfg
        feats, _ = _features_from_file(model, args.input)
        with ad.no_grad():
            res = model(feats[None].astype(_model_dtype(model)))
        if model.cfg.head.kind == "miri":
            _dump_grid(out, "A_M", res.mag_m.data[0])
            _dump_grid(out, "A_p", res.mag_p.data[0])
        _dump_grid(out, "A", res.magnitude.data[0])
    else:
        if not args.input:
            raise UsageError("dump-spec needs --input")
        cfg = _load_cfg(args)
        wave = dsp.read_wav(args.input)
        mag = np.abs(dsp.stft_array(wave.samples, cfg.model.stft))
        _dump_grid(out, "spectrogram", mag)
    write_manifest(out, "dump-spec", cfg)
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def build_parser():
    p = _Parser(prog="mpvoc", description="Toy magnitude/phase vocoder experiments.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True

    def common(sp):
        sp.add_argument("--config", help="flat key = value config file")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="config override (repeatable)")
        sp.add_argument("--out", required=True, help="output directory")

    sp = sub.add_parser("gen-corpus", help="write the synthetic corpus as WAV files")
    common(sp)
    sp.set_defaults(func=cmd_gen_corpus)

    sp = sub.add_parser("train", help="train one model, then evaluate it on the held-out set")
    common(sp)
    sp.add_argument("--resume", help="continue from a checkpoint")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("synth", help="generate WAVs from mel (.npy) or reference WAV inputs")
    common(sp)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("inputs", nargs="+", help=".npy grids, WAV files or directories of WAVs")
    sp.set_defaults(func=cmd_synth)

    sp = sub.add_parser("eval", help="score generated audio against references")
    common(sp)
    sp.add_argument("--checkpoint", help="evaluate a trained model on its held-out utterances")
    sp.add_argument("--ref", help="reference WAV file or directory")
    sp.add_argument("--hyp", help="generated WAV file or directory")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("ablate", help="train and score a grid of topology/source/head cells")
    common(sp)
    sp.add_argument("--cells", help="comma list of topology[:R]/source/head (default: ablate.cells)")
    sp.add_argument("--seeds", help="comma list of seeds (default: ablate.seeds)")
    sp.set_defaults(func=cmd_ablate)

    sp = sub.add_parser("dump-spec", help="write log-magnitude spectrograms as PGM images")
    common(sp)
    sp.add_argument("--input", help="WAV file (or .npy grid with --checkpoint)")
    sp.add_argument("--checkpoint", help="dump the model's magnitude grids instead")
    sp.set_defaults(func=cmd_dump_spec)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"mpvoc: error: {exc}", file=sys.stderr)
        return 1
    except (config_mod.ConfigError, trainer.CheckpointError, trainer.TrainingError,
            OSError, ValueError, KeyError) as exc:
        print(f"mpvoc: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
