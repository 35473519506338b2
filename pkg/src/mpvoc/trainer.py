"""Corpora, the training loop, checkpoints and the ablation harness."""
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
import csv
import io
import json
import logging
import os
import struct
import zlib
from typing import Optional

import numpy as np

from . import __version__
from . import autodiff as ad
from . import dsp, losses, metrics, vocoder
from .metrics import MetricsConfig

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"MPVOCKPT"
CHECKPOINT_VERSION = 1
_REC_ARRAY = 0
_REC_BYTES = 1


class TrainingError(RuntimeError):
    pass


class CheckpointError(ValueError):
    pass


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LossConfig:
    preset: str = "vl_approx"
    log_magnitude: Optional[float] = None
    phase_aw: Optional[float] = None
    stft_consistency: Optional[float] = None
    mel_l1: Optional[float] = None
    mrstft: Optional[float] = None
    resolutions: tuple = losses.DEFAULT_RESOLUTIONS

    def weights(self):
        return losses.resolve_weights(self.preset, {t: getattr(self, t) for t in losses.TERMS})


@dataclass(frozen=True)
class OptimConfig:
    lr: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    batch_size: int = 4
    steps: int = 2000
    segment_frames: int = 64
    seed: int = 0
    eval_interval: int = 0
    checkpoint_interval: int = 0
    log_interval: int = 100
    dtype: str = "float64"

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.segment_frames < 8:
            raise ValueError("segment length must be >= 8 frames")
        if self.lr < 0:
            raise ValueError("lr must be nonnegative")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.dtype not in ("float64", "float32"):
            raise ValueError("dtype must be float64 or float32")


@dataclass(frozen=True)
class SyntheticCorpusSpec:
    n_utterances: int = 50
    duration: float = 1.0
    sample_rate: int = dsp.DEFAULT_SAMPLE_RATE
    f0_min: float = 100.0
    f0_max: float = 300.0
    n_harmonics: int = 8
    noise_floor: float = 1e-3
    seed: int = 0

    def __post_init__(self):
        if self.n_utterances < 1 or self.duration <= 0 or self.sample_rate <= 0:
            raise ValueError("corpus needs n_utterances >= 1, duration > 0, sample_rate > 0")
        if not 0 < self.f0_min <= self.f0_max < self.sample_rate / 2:
            raise ValueError(f"invalid f0 range [{self.f0_min}, {self.f0_max}]")
        if self.n_harmonics < 1 or self.noise_floor < 0:
            raise ValueError("n_harmonics must be >= 1 and noise_floor >= 0")


@dataclass(frozen=True)
class CorpusConfig(SyntheticCorpusSpec):
    path: str = ""
    n_eval: int = 8

    def synthetic_spec(self):
        return SyntheticCorpusSpec(self.n_utterances, self.duration, self.sample_rate, self.f0_min,
                                   self.f0_max, self.n_harmonics, self.noise_floor, self.seed)


@dataclass(frozen=True)
class AblateConfig:
    cells: str = "separate/raw/direct,separate/prior/direct,separate/raw/miri,separate/prior/miri"
    seeds: str = "0"


@dataclass(frozen=True)
class TrainConfig:
    model: vocoder.ModelConfig = field(default_factory=vocoder.ModelConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    trainer: OptimConfig = field(default_factory=OptimConfig)
    corpus: CorpusConfig = field(default_factory=CorpusConfig)
    metrics: MetricsConfig = field(default_factory=MetricsConfig)
    ablate: AblateConfig = field(default_factory=AblateConfig)

    def __post_init__(self):
        if self.corpus.sample_rate != self.model.sample_rate:
            raise ValueError(
                f"corpus.sample_rate={self.corpus.sample_rate} differs from "
                f"model.sample_rate={self.model.sample_rate}; resampling is not supported"
            )


# ---------------------------------------------------------------------------
# corpora
# ---------------------------------------------------------------------------

@dataclass
class Utterance:
    utt_id: str
    wave: dsp.Waveform
    f0: Optional[float] = None


def make_synthetic_corpus(spec):
    """Harmonic complexes with vibrato and a Gaussian noise floor, fixed by ``spec.seed``."""
    rng = np.random.default_rng(spec.seed)
    sr = spec.sample_rate
    n = int(round(spec.duration * sr))
    t = np.arange(n) / sr
    fade = np.minimum(1.0, np.minimum(t, t[::-1]) / 0.01)
    out = []
    for u in range(spec.n_utterances):
        f0 = rng.uniform(spec.f0_min, spec.f0_max)
        rate = rng.uniform(2.0, 5.0)
        depth = 0.01
        vib_phase = rng.uniform(0, 2 * np.pi)
        inst_f = f0 * (1.0 + depth * np.sin(2 * np.pi * rate * t + vib_phase))
        base_phase = 2 * np.pi * np.cumsum(inst_f) / sr
        x = np.zeros(n)
        for k in range(1, spec.n_harmonics + 1):
            phi = rng.uniform(0, 2 * np.pi)
            if k * f0 * (1 + depth) >= sr / 2:
                continue
            x += np.sin(k * base_phase + phi) / k
        x *= 0.5 / np.max(np.abs(x))
        x = x * fade + spec.noise_floor * rng.standard_normal(n)
        out.append(Utterance(f"syn{u:04d}", dsp.Waveform(x, sr), f0))
    return out


def corpus_checksum(corpus):
    h = 0
    for utt in corpus:
        h = zlib.crc32(utt.utt_id.encode(), h)
        h = zlib.crc32(np.ascontiguousarray(utt.wave.samples, dtype="<f8").tobytes(), h)
    return h


def load_wav_corpus(path, sample_rate):
    names = sorted(f for f in os.listdir(path) if f.lower().endswith(".wav"))
    if not names:
        raise FileNotFoundError(f"no .wav files in {path}")
    out = []
    for name in names:
        w = dsp.read_wav(os.path.join(path, name))
        if w.sample_rate != sample_rate:
            raise ValueError(f"{name}: sample rate {w.sample_rate} != configured {sample_rate}")
        out.append(Utterance(os.path.splitext(name)[0], w))
    return out


def load_corpus(cfg):
    if cfg.path:
        return load_wav_corpus(cfg.path, cfg.sample_rate)
    return make_synthetic_corpus(cfg.synthetic_spec())


def split_corpus(corpus, n_eval):
    """Hold out the last ``n_eval`` utterances for evaluation."""
    n_eval = min(n_eval, len(corpus) - 1) if len(corpus) > 1 else 0
    if n_eval <= 0:
        return corpus, corpus
    return corpus[:-n_eval], corpus[-n_eval:]


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

class Trainer:
    def __init__(self, cfg, corpus=None):
        self.cfg = cfg
        self.model = vocoder.build_model(cfg.model)
        self.dtype = np.dtype(cfg.trainer.dtype)
        for _, p in self.model.params.items():
            p.data = p.data.astype(self.dtype)
        self.model.params.zero_grad()
        self.opt = ad.AdamState()
        self.rng = np.random.Generator(np.random.PCG64(cfg.trainer.seed))
        self.step = 0
        self.history = []
        self.weights = cfg.loss.weights()
        self.corpus = corpus if corpus is not None else load_corpus(cfg.corpus)
        self.train_set, self.eval_set = split_corpus(self.corpus, cfg.corpus.n_eval)

    @property
    def segment_samples(self):
        return (self.cfg.trainer.segment_frames - 1) * self.cfg.model.stft.hop

    def sample_batch(self):
        n = self.segment_samples
        picks = self.rng.integers(len(self.train_set), size=self.cfg.trainer.batch_size)
        batch = np.zeros((len(picks), n))
        for row, idx in enumerate(picks):
            x = self.train_set[idx].wave.samples
            if len(x) < n:
                x = np.pad(x, (0, n - len(x)))
            off = int(self.rng.integers(0, len(x) - n + 1))
            batch[row] = x[off:off + n]
        return batch.astype(self.dtype)

    def loss(self, batch):
        """Forward pass and loss on a (B, L) batch; returns (total Tensor, LossReport)."""
        model = self.model
        cfg = self.cfg.model
        spec = dsp.stft_array(batch, cfg.stft)
        mag, phase = np.abs(spec), np.angle(spec)
        feats = model.features_from_magnitude(mag).astype(self.dtype)
        wave_hat, out = model.synthesize(feats, batch.shape[-1])
        return losses.compute_loss(self.weights, out, wave_hat, batch, mag, phase, cfg.stft,
                                   model.filterbank, self.cfg.loss.resolutions)

    def train_step(self, batch=None):
        if batch is None:
            batch = self.sample_batch()
        opt = self.cfg.trainer
        try:
            total, report = self.loss(batch)
        except FloatingPointError as exc:
            raise TrainingError(f"non-finite value at step {self.step + 1}: {exc}") from exc
        if not np.isfinite(report.total):
            bad = [k for k, v in report.terms.items() if not np.isfinite(v)]
            raise TrainingError(f"non-finite loss at step {self.step + 1} in terms {bad}")
        ad.backward(total)
        ad.adamw_step(self.model.params, self.opt, opt.lr, (opt.beta1, opt.beta2), opt.eps,
                      opt.weight_decay)
        self.model.params.zero_grad()
        self.step += 1
        self.history.append(report)
        return report

    def train(self, steps=None, callback=None):
        steps = self.cfg.trainer.steps if steps is None else steps
        log_every = self.cfg.trainer.log_interval
        for _ in range(steps):
            report = self.train_step()
            if log_every and self.step % log_every == 0:
                logger.info("step %d loss %.5f", self.step, report.total)
            if callback is not None:
                callback(self, report)
        return self.history

    def evaluate(self, utterances=None, workers=0):
        return evaluate(self.model, self.eval_set if utterances is None else utterances,
                        self.cfg.metrics, workers)

    def loss_log_csv(self):
        buf = io.StringIO()
        buf.write("step,total," + ",".join(losses.TERMS) + "\n")
        for i, rep in enumerate(self.history, start=1):
            vals = [rep.terms.get(t) for t in losses.TERMS]
            buf.write(f"{i},{rep.total!r}," + ",".join("" if v is None else repr(v) for v in vals) + "\n")
        return buf.getvalue()

    # -- checkpoints --------------------------------------------------------
    def save_checkpoint(self, path):
        from . import config as config_mod
        records = [
            ("meta/config", json.dumps(config_mod.to_flat(self.cfg), sort_keys=True).encode()),
            ("meta/version", __version__.encode()),
            ("meta/step", str(self.step).encode()),
            ("meta/rng", json.dumps(self.rng.bit_generator.state, sort_keys=True).encode()),
            ("meta/loss_log", np.array([r.total for r in self.history], dtype=np.float64)),
            ("adam/step", str(self.opt.step).encode()),
        ]
        for name, p in self.model.params.items():
            records.append((f"param/{name}", p.data))
        for name in self.model.params.names():
            if name in self.opt.m:
                records.append((f"adam/m/{name}", self.opt.m[name]))
                records.append((f"adam/v/{name}", self.opt.v[name]))
        write_checkpoint(path, records)

    @classmethod
    def from_checkpoint(cls, path, corpus=None):
        from . import config as config_mod
        rec = dict(read_checkpoint(path))
        cfg = config_mod.from_flat(json.loads(rec["meta/config"].decode()))
        tr = cls(cfg, corpus)
        state = {k[len("param/"):]: v for k, v in rec.items() if k.startswith("param/")}
        tr.model.params.load_state_dict({k: v.astype(tr.dtype) for k, v in state.items()})
        tr.model.params.zero_grad()
        tr.step = int(rec["meta/step"].decode())
        tr.rng.bit_generator.state = json.loads(rec["meta/rng"].decode())
        tr.opt.step = int(rec["adam/step"].decode())
        for k, v in rec.items():
            if k.startswith("adam/m/"):
                tr.opt.m[k[len("adam/m/"):]] = v.astype(tr.dtype)
            elif k.startswith("adam/v/"):
                tr.opt.v[k[len("adam/v/"):]] = v.astype(tr.dtype)
        tr.history = [losses.LossReport({}, {}, float(v)) for v in rec["meta/loss_log"]]
        return tr


def evaluate(model, utterances, metrics_cfg=MetricsConfig(), workers=0):
    """Resynthesize every utterance from its own mel and score it against the original."""
    triples = []
    with ad.no_grad():
        for utt in utterances:
            x = utt.wave.samples
            feats = model.features_from_wave(x)
            y, _ = model.synthesize(feats[None].astype(model.params[model.params.names()[0]].dtype),
                                    len(x))
            triples.append((utt.utt_id, utt.wave, dsp.Waveform(y.data[0], utt.wave.sample_rate)))
    return metrics.evaluate_corpus(triples, metrics_cfg, workers)


# ---------------------------------------------------------------------------
# checkpoint file format
# ---------------------------------------------------------------------------
# magic(8) | version u32 | count u32 | records... | crc32 u32, little-endian.
# record: name_len u16 | name utf-8 | kind u8 | payload
#   kind 0 (array): ndim u8 | dims u32 * ndim | float64 data
#   kind 1 (bytes): length u32 | data

def write_checkpoint(path, records):
    buf = bytearray()
    buf += CHECKPOINT_MAGIC
    buf += struct.pack("<II", CHECKPOINT_VERSION, len(records))
    for name, value in records:
        nb = name.encode("utf-8")
        buf += struct.pack("<H", len(nb)) + nb
        if isinstance(value, (bytes, bytearray)):
            buf += struct.pack("<BI", _REC_BYTES, len(value)) + bytes(value)
        else:
            arr = np.ascontiguousarray(value, dtype="<f8")
            buf += struct.pack("<BB", _REC_ARRAY, arr.ndim)
            buf += struct.pack(f"<{arr.ndim}I", *arr.shape)
            buf += arr.tobytes()
    buf += struct.pack("<I", zlib.crc32(bytes(buf)))
    with open(path, "wb") as fh:
        fh.write(bytes(buf))


def read_checkpoint(path):
    """Return the ordered list of (name, value) records; arrays come back as float64."""
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < 20 or data[:8] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    (crc,) = struct.unpack("<I", data[-4:])
    if zlib.crc32(data[:-4]) != crc:
        raise CheckpointError(f"{path}: checksum mismatch (file corrupted)")
    version, count = struct.unpack_from("<II", data, 8)
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"{path}: checkpoint version {version} is not supported (expected {CHECKPOINT_VERSION})"
        )
    pos = 16
    out = []
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", data, pos)
        pos += 2
        name = data[pos:pos + nlen].decode("utf-8")
        pos += nlen
        kind = data[pos]
        pos += 1
        if kind == _REC_BYTES:
            (length,) = struct.unpack_from("<I", data, pos)
            pos += 4
            out.append((name, data[pos:pos + length]))
            pos += length
        elif kind == _REC_ARRAY:
            ndim = data[pos]
            pos += 1
            shape = struct.unpack_from(f"<{ndim}I", data, pos)
            pos += 4 * ndim
            n = int(np.prod(shape)) if ndim else 1
            arr = np.frombuffer(data, dtype="<f8", count=n, offset=pos).reshape(shape).copy()
            pos += 8 * n
            out.append((name, arr))
        else:
            raise CheckpointError(f"{path}: unknown record kind {kind} for {name!r}")
    return out


# ---------------------------------------------------------------------------
# ablation harness
# ---------------------------------------------------------------------------

ABLATION_COLUMNS = ("cell", "topology", "shared_layers", "source", "head", "seed", "params",
                    "steps", "final_loss") + metrics.CSV_COLUMNS + ("status",)


@dataclass(frozen=True)
class Cell:
    topology: str
    source: str
    head: str
    shared_layers: int = 0

    @property
    def label(self):
        topo = self.topology + (f":{self.shared_layers}" if self.topology == "partially_shared" else "")
        return f"{topo}/{self.source}/{self.head}"

    @classmethod
    def parse(cls, text):
        parts = text.strip().split("/")
        if len(parts) != 3:
            raise ValueError(f"cell {text!r} must look like topology[:R]/source/head")
        topo, source, head = (p.strip() for p in parts)
        r = 0
        if ":" in topo:
            topo, r_text = topo.split(":", 1)
            r = int(r_text)
        vocoder.TopologyConfig(topo, max(r + 1, 1), r)  # validates kind
        if source not in vocoder.INPUT_KINDS or head not in vocoder.HEADS:
            raise ValueError(f"cell {text!r}: bad source or head")
        return cls(topo, source, head, r)

    def apply(self, cfg, seed):
        m = cfg.model
        topo = replace(m.topology, kind=self.topology,
                       shared_layers=self.shared_layers if self.topology == "partially_shared"
                       else m.topology.shared_layers)
        model = replace(m, topology=topo, input_kind=self.source,
                        head=replace(m.head, kind=self.head), seed=seed)
        return replace(cfg, model=model, trainer=replace(cfg.trainer, seed=seed))


def parse_cells(text):
    return [Cell.parse(c) for c in text.split(",") if c.strip()]


def parse_seeds(text):
    return [int(s) for s in str(text).split(",") if s.strip()]


def run_cell(cfg, cell, seed, corpus=None):
    """Train and evaluate one grid cell; failures become a status string."""
    row = {"cell": cell.label, "topology": cell.topology, "shared_layers": cell.shared_layers,
           "source": cell.source, "head": cell.head, "seed": seed}
    try:
        cell_cfg = cell.apply(cfg, seed)
        tr = Trainer(cell_cfg, corpus)
        row["params"] = tr.model.param_count()
        tr.train()
        report = tr.evaluate()
        row.update(steps=tr.step, final_loss=tr.history[-1].total, **report.mean(), status="ok")
    except Exception as exc:  # recorded per cell, not fatal to the grid
        logger.exception("cell %s seed %d failed", cell.label, seed)
        row["status"] = f"failed: {type(exc).__name__}: {exc}"
    return row


def _run_cell_job(args):
    return run_cell(*args)


def run_ablation(cfg, cells=None, seeds=None, corpus=None, workers=0):
    """Train every (cell, seed) pair under the same budget; rows follow grid order."""
    cells = parse_cells(cfg.ablate.cells) if cells is None else cells
    seeds = parse_seeds(cfg.ablate.seeds) if seeds is None else seeds
    jobs = [(cfg, cell, seed, corpus) for cell in cells for seed in seeds]
    if workers and workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(_run_cell_job, jobs))
    return [run_cell(*job) for job in jobs]


def ablation_csv(rows):
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(ABLATION_COLUMNS)
    for r in rows:
        writer.writerow([_cell_value(r.get(c)) for c in ABLATION_COLUMNS])
    return buf.getvalue()


def _cell_value(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return f"{v:.6f}"
    return str(v)
