"""Acceptance gate: the nine primary criteria at their stated tolerances.

Each test records one PASS/FAIL line; ``conftest.py`` prints them in the
terminal summary. Run standalone with ``python tests/test_acceptance.py``.

The two directional criteria train 15 models at the default budget (2000
steps each). ``MPVOC_THREADS`` runs cells in parallel processes.
"""
import os
import sys
import time

import numpy as np
import pytest

from mpvoc import autodiff as ad
from mpvoc import config, dsp, losses, mel, metrics, trainer
from mpvoc import vocoder as vc

RESULTS = {}

ABLATION_CELLS = (
    "separate/raw/direct",
    "separate/prior/direct",
    "separate/prior/miri",
    "shared/raw/direct",
    "partially_shared:2/raw/direct",
)
ABLATION_SEEDS = (0, 1, 2)


def record(key, ok, detail):
    RESULTS[key] = (bool(ok), detail)
    return ok


def _workers():
    raw = os.environ.get("MPVOC_THREADS", "").strip()
    return int(raw) if raw else 0


# ---------------------------------------------------------------------------
# 1. equation suite
# ---------------------------------------------------------------------------

def criterion_1():
    t0 = time.perf_counter()
    notes = []
    ok = True
    # pseudo-inverse: the four Penrose identities on the default filterbank and two others
    for n_fft, n_mels in ((1024, 100), (1024, 80), (512, 64)):
        w = mel.build_mel_filterbank(n_fft, n_mels, 16000).weights
        p = mel.pseudo_inverse(w)
        err = max(np.abs(w @ p @ w - w).max(), np.abs(p @ w @ p - p).max(),
                  np.abs((w @ p).T - w @ p).max(), np.abs((p @ w).T - p @ w).max())
        ok &= err <= 1e-8
        notes.append(f"penrose({n_fft},{n_mels})={err:.1e}")
    # blend: the 3-4-5 case, and the alpha -> 1 endpoint
    mag, _, mag_p = vc.combine_miri(np.array(2.0), np.array(3.0), np.array(4.0), 0.5)
    e345 = max(abs(mag_p.item() - 5.0), abs(mag.item() - 3.5))
    ok &= e345 <= 1e-12
    notes.append(f"345 err={e345:.1e}")
    rng = np.random.default_rng(0)
    m = rng.random((6, 5)) + 0.1
    a1, _, _ = vc.combine_miri(m, rng.standard_normal((6, 5)), rng.standard_normal((6, 5)), 1.0)
    ok &= np.array_equal(a1.data, m)
    # gradient partition under a magnitude-only loss
    cfg = vc.ModelConfig(stft=dsp.StftConfig(256, 64), mel=vc.MelConfig(n_mels=32),
                         topology=vc.TopologyConfig("separate", 4))
    x = rng.standard_normal((1, 32, 8))
    target = rng.random((1, 129, 8))

    def phase_grad_mass(head):
        model = vc.build_model(vc.ModelConfig(**{**cfg.__dict__, "head": vc.OutputHead(head)}))
        out = model(x)
        ad.backward(ad.reduce_mean(ad.square(ad.sub(out.magnitude, target))))
        g = model.params.grads()
        return (sum(float(np.abs(g[n]).sum()) for n in model.params.partition("P")),
                sum(float(np.abs(g[n]).sum()) for n in model.params.partition("M")))

    p_direct, m_direct = phase_grad_mass("direct")
    p_miri, m_miri = phase_grad_mass("miri")
    ok &= p_direct == 0.0 and m_direct > 0 and p_miri > 0 and m_miri > 0
    notes.append(f"|dL/dPhi_P| direct={p_direct:g} miri={p_miri:.3g}")
    elapsed = time.perf_counter() - t0
    ok &= elapsed < 60
    notes.append(f"{elapsed:.1f}s")
    return ok, ", ".join(notes)


# ---------------------------------------------------------------------------
# 2. autodiff oracle
# ---------------------------------------------------------------------------

def _weighted(out, seed=99):
    w = np.random.default_rng(seed).uniform(-1, 1, out.shape)
    return ad.reduce_sum(ad.mul(out, w))


def _op_suite():
    r = np.random.default_rng(1)
    u = lambda *s: r.uniform(-1, 1, s)
    pos = lambda *s: r.uniform(0.5, 2.0, s)
    cfg = dsp.StftConfig(16, 4)
    spec = dsp.stft_array(u(40), cfg)
    re, im = spec.real, spec.imag
    b = pos(1, 4)
    x3, w3, b3 = u(2, 4, 9), u(6, 2, 3), u(6)
    wd = u(4, 1, 5)
    c24, m42, w34, b3b = u(2, 4), u(4, 2), u(3, 4), u(3)
    g4, be4 = pos(4), u(4)
    cases = {
        "add": (lambda t: ad.add(t, b), pos(3, 4)),
        "sub": (lambda t: ad.sub(b, t), pos(3, 4)),
        "mul": (lambda t: ad.mul(t, b), pos(3, 4)),
        "div": (lambda t: ad.div(b, t), pos(3, 4)),
        "exp": (ad.exp, u(3, 4)),
        "log": (ad.log, pos(3, 4)),
        "sqrt": (ad.sqrt, pos(3, 4)),
        "square": (ad.square, u(3, 4)),
        "abs": (ad.abs_, pos(3, 4)),
        "sin": (ad.sin, u(3, 4)),
        "cos": (ad.cos, u(3, 4)),
        "sigmoid": (ad.sigmoid, u(3, 4)),
        "gelu": (ad.gelu, u(3, 4)),
        "leaky_relu": (ad.leaky_relu, pos(3, 4)),
        "clamp_min": (lambda t: ad.clamp_min(t, -5.0), u(3, 4)),
        "atan2_y": (lambda t: ad.atan2(t, b), u(3, 4)),
        "atan2_x": (lambda t: ad.atan2(b, t), pos(3, 4)),
        "wrap": (ad.wrap, u(3, 4) * 3),
        "periodic_residual": (ad.periodic_residual, u(3, 4) * 3),
        "reduce_sum": (lambda t: ad.reduce_sum(t, axis=1), u(3, 4)),
        "reduce_mean": (lambda t: ad.reduce_mean(t, axis=0, keepdims=True), u(3, 4)),
        "reshape": (lambda t: ad.reshape(t, (2, 6)), u(3, 4)),
        "transpose": (ad.transpose, u(3, 4)),
        "slice": (lambda t: t[1:, ::2], u(3, 4)),
        "concat": (lambda t: ad.concat([t, ad.Tensor(c24)], axis=0), u(3, 4)),
        "matmul": (lambda t: ad.matmul(t, m42), u(3, 4)),
        "conv1d_input": (lambda t: ad.conv1d(t, w3, b3, groups=2), x3),
        "conv1d_weight": (lambda t: ad.conv1d(x3, t, b3, groups=2), w3),
        "conv1d_depthwise": (lambda t: ad.conv1d(x3, t, None, groups=4), wd),
        "linear": (lambda t: ad.linear(t, w34, b3b), u(2, 4, 5)),
        "layer_norm": (lambda t: ad.layer_norm(t, g4, be4), u(2, 4, 5)),
        "stft": (lambda t: ad.stft(t, cfg), u(40)),
        "istft_real": (lambda t: ad.istft(t, im, cfg), re),
        "istft_imag": (lambda t: ad.istft(re, t, cfg), im),
    }
    return cases


def _block_suite():
    r = np.random.default_rng(2)
    out = {}
    for label, make in (
        ("convnext_block", lambda init: vc.ConvNeXtBlock(init, "b", 4, 3, 2, "S")),
        ("stem", lambda init: vc.Stem(init, "s", 4, 4, 7, "S")),
    ):
        ps = ad.ParameterSet()
        mod = make(vc._Init(ps, 0))
        for _, p in ps.items():
            p.data = p.data + r.normal(0, 0.3, p.shape)
        x = r.standard_normal((1, 4, 6))
        out[label] = (ps, lambda mod=mod, x=x: _weighted(mod(x)))
    # every topology under every head, on a tiny model
    stft = dsp.StftConfig(32, 8)
    for topo in vc.TOPOLOGIES:
        for head in vc.HEADS:
            cfg = vc.ModelConfig(stft=stft, mel=vc.MelConfig(n_mels=6), block=vc.BlockConfig(4, 3, 2),
                                 topology=vc.TopologyConfig(topo, 2, 1), head=vc.OutputHead(head))
            model = vc.build_model(cfg)
            for _, p in model.params.items():
                p.data = p.data + r.normal(0, 0.1, p.shape)
            x = r.standard_normal((1, 6, 3))
            tgt = r.random((1, 17, 3))

            def loss(model=model, x=x, tgt=tgt):
                o = model(x)
                return ad.add(ad.reduce_mean(ad.square(ad.sub(o.magnitude, tgt))),
                              ad.reduce_mean(ad.square(ad.sin(o.phase))))

            out[f"model[{topo}/{head}]"] = (model.params, loss)
    return out


def _loss_suite():
    r = np.random.default_rng(3)
    cfg = dsp.StftConfig(32, 8)
    fb = mel.build_mel_filterbank(32, 4, 16000)
    ref = r.standard_normal(64)
    tgt_phase = r.uniform(-1, 1, (4, 5))
    ph = r.uniform(-3, 3, (17, 5))
    mag_t = r.random((4, 5)) + 0.1
    return {
        "loss_log_magnitude": (lambda t: losses.log_magnitude_loss(t, mag_t), r.random((4, 5)) + 0.2),
        "loss_phase_aw": (lambda t: losses.anti_wrapping_phase_loss(t, tgt_phase),
                          tgt_phase + r.uniform(0.2, 0.6, (4, 5))),
        "loss_consistency": (lambda t: losses.stft_consistency_loss(t, ph, cfg), r.random((17, 5)) + 0.1),
        "loss_mel_l1": (lambda t: losses.mel_l1_loss(t, ref, fb, cfg), ref + 0.5 * r.standard_normal(64)),
        "loss_mrstft": (lambda t: losses.multi_res_stft_loss(t, ref, ((32, 8), (16, 4))),
                        ref + 0.5 * r.standard_normal(64)),
    }


def criterion_2():
    t0 = time.perf_counter()
    worst, worst_name = 0.0, ""
    checked = 0
    for name, (fn, x) in _op_suite().items():
        err = ad.grad_check(lambda t, fn=fn: _weighted(fn(t)), x)
        checked += 1
        if err > worst:
            worst, worst_name = err, name
    for name, (fn, x) in _loss_suite().items():
        err = ad.grad_check(fn, x, h=1e-6)
        checked += 1
        if err > worst:
            worst, worst_name = err, name
    for name, (params, loss) in _block_suite().items():
        err = ad.grad_check_params(loss, params)
        checked += 1
        if err > worst:
            worst, worst_name = err, name
    elapsed = time.perf_counter() - t0
    ok = worst < 1e-4 and elapsed < 120
    return ok, f"{checked} checks, max rel err {worst:.2e} ({worst_name}), {elapsed:.1f}s"


# ---------------------------------------------------------------------------
# 3. analysis-synthesis
# ---------------------------------------------------------------------------

def criterion_3():
    r = np.random.default_rng(4)
    worst = 0.0
    configs = []
    while len(configs) < 24:
        n_fft = int(2 * r.integers(8, 257))
        hop = int(r.integers(1, n_fft + 1))
        window = str(r.choice(["hann", "hamming", "rect"]))
        center = bool(r.integers(0, 2))
        try:
            cfg = dsp.StftConfig(n_fft, hop, window, center)
        except ValueError:
            continue  # overlap condition not met
        configs.append(cfg)
    for cfg in configs:
        length = cfg.n_fft * 4 + int(r.integers(0, 5 * cfg.hop + 1))
        x = r.standard_normal(length)
        y = dsp.istft(dsp.stft(x, cfg), length=length if cfg.center else None).samples
        # interior: at least one full frame away from either end
        lo, hi = cfg.n_fft, min(len(y), length) - cfg.n_fft
        err = np.abs(y[lo:hi] - x[lo:hi]).max()
        worst = max(worst, err)
    return worst < 1e-6, f"{len(configs)} configs, max interior error {worst:.2e}"


# ---------------------------------------------------------------------------
# 4. parameter-count relations
# ---------------------------------------------------------------------------

def criterion_4():
    def count(topo, head, depth=4, r=2):
        cfg = vc.ModelConfig(topology=vc.TopologyConfig(topo, depth, r), head=vc.OutputHead(head))
        return vc.build_model(cfg).param_count()

    ok = True
    notes = []
    for head in vc.HEADS:
        sep, shf = count("separate", head), count("shuffle", head)
        ok &= sep == shf
    notes.append(f"separate=shuffle={count('separate', 'miri')}")
    ps = [count("partially_shared", "miri", 8, r) for r in (2, 4, 6)]
    ok &= ps[0] < ps[1] < ps[2]
    notes.append(f"PS(R=2,4,6)={ps}")
    for topo in vc.TOPOLOGIES:
        d, m = count(topo, "direct"), count(topo, "miri")
        ok &= m > d
    notes.append(f"separate direct={count('separate', 'direct')} < miri={count('separate', 'miri')}")
    return ok, ", ".join(notes)


# ---------------------------------------------------------------------------
# 5. forward equivalence of the detached branch
# ---------------------------------------------------------------------------

def criterion_5():
    base = vc.ModelConfig(head=vc.OutputHead("miri"), seed=3)
    full = vc.build_model(base)
    det = vc.build_model(vc.ModelConfig(**{**base.__dict__, "head": vc.OutputHead("miri", mb_mode="detach")}))
    r = np.random.default_rng(5)
    same = 0
    with ad.no_grad():
        for _ in range(100):
            x = r.standard_normal((1, full.input_channels, 12))
            a, b = full(x), det(x)
            if (np.array_equal(a.magnitude.data, b.magnitude.data)
                    and np.array_equal(a.phase.data, b.phase.data)):
                same += 1
    return same == 100, f"{same}/100 bit-identical forward outputs"


# ---------------------------------------------------------------------------
# 6 and 7. directional ablation on the synthetic corpus
# ---------------------------------------------------------------------------

_ABLATION = {}


def ablation_rows():
    if "rows" not in _ABLATION:
        cfg = config.load_config()
        steps = os.environ.get("MPVOC_ACCEPT_STEPS")
        if steps:
            cfg = config.load_config(overrides=[f"trainer.steps={int(steps)}"])
        corpus = trainer.load_corpus(cfg.corpus)
        cells = trainer.parse_cells(",".join(ABLATION_CELLS))
        t0 = time.perf_counter()
        rows = trainer.run_ablation(cfg, cells, list(ABLATION_SEEDS), corpus, _workers())
        _ABLATION.update(rows=rows, elapsed=time.perf_counter() - t0, steps=cfg.trainer.steps)
        RESULTS["_table"] = trainer.ablation_csv(rows)
    return _ABLATION["rows"]


def _by_cell(rows, key):
    out = {}
    for r in rows:
        out.setdefault(r["cell"], {})[r["seed"]] = r.get(key)
    return out


def _wins(a, b, strict=True):
    """Seeds on which a > b (or a >= b when not strict); missing values never win."""
    n = 0
    for s in ABLATION_SEEDS:
        x, y = a.get(s), b.get(s)
        if x is None or y is None:
            continue
        n += (x > y) if strict else (x >= y)
    return n


def criterion_6():
    rows = ablation_rows()
    ms = _by_cell(rows, "mstft")
    raw_d, pri_d, pri_m = ms["separate/raw/direct"], ms["separate/prior/direct"], ms["separate/prior/miri"]
    gap1 = _wins(raw_d, pri_d)
    gap2 = _wins(pri_d, pri_m, strict=False)
    fmt = lambda d: "/".join(f"{d[s]:.3f}" if d.get(s) is not None else "nan" for s in ABLATION_SEEDS)
    detail = (f"M-STFT raw/direct {fmt(raw_d)} vs prior/direct {fmt(pri_d)} vs prior/miri {fmt(pri_m)}; "
              f"raw>prior on {gap1}/3, prior/direct>=prior/miri on {gap2}/3; "
              f"{_ABLATION['steps']} steps, grid {_ABLATION['elapsed'] / 60:.1f} min")
    return gap1 >= 2 and gap2 >= 2, detail


def criterion_7():
    rows = ablation_rows()
    ms, mc = _by_cell(rows, "mstft"), _by_cell(rows, "mcd")
    sep = "separate/raw/direct"
    counts = {}
    for other in ("shared/raw/direct", "partially_shared:2/raw/direct"):
        both = 0
        for s in ABLATION_SEEDS:
            vals = (ms[sep].get(s), ms[other].get(s), mc[sep].get(s), mc[other].get(s))
            if None in vals:
                continue
            both += vals[0] > vals[1] and vals[2] > vals[3]
        counts[other] = both
    detail = ", ".join(f"separate worse than {k.split('/')[0]} on both metrics for {v}/3 seeds"
                       for k, v in counts.items())
    return all(v >= 2 for v in counts.values()), detail


# ---------------------------------------------------------------------------
# 8. metric sanity
# ---------------------------------------------------------------------------

def criterion_8():
    notes = []
    ok = True
    corpus = trainer.make_synthetic_corpus(trainer.SyntheticCorpusSpec(n_utterances=3))
    for utt in corpus:
        m = metrics.evaluate_pair(utt.wave, utt.wave)
        ok &= (m["mcd"] == 0 and m["mstft"] == 0 and m["vuv_f1"] == 1
               and m["pitch_rmse"] == 0 and m["periodicity_rmse"] == 0)
    notes.append("identity ok" if ok else "identity FAILED")
    worst = 0.0
    t = np.arange(16000) / 16000
    for f in range(80, 501, 10):
        tr = metrics.pitch_track(0.5 * np.sin(2 * np.pi * f * t), sample_rate=16000)
        med = np.nanmedian(tr.f0) if tr.voiced.any() else np.inf
        worst = max(worst, abs(med - f))
    ok &= worst <= 2.0
    notes.append(f"tone median error <= {worst:.3f} Hz")
    x = corpus[0].wave.samples
    gain = max(metrics.mcd(x, g * x) for g in (0.1, 0.5, 2.0, 8.0))
    ok &= gain < 1e-6
    notes.append(f"MCD under gain {gain:.1e}")
    pairs = [(u.utt_id, u.wave, dsp.Waveform(0.8 * u.wave.samples[::-1].copy(), 16000)) for u in corpus]
    a = metrics.evaluate_corpus(pairs).to_csv()
    b = metrics.evaluate_corpus(pairs).to_csv()
    c = metrics.evaluate_corpus(pairs, workers=3).to_csv()
    stable = a == b == c
    ok &= stable
    notes.append("CSV byte-stable" if stable else "CSV differs across reruns")
    return ok, ", ".join(notes)


# ---------------------------------------------------------------------------
# 9. training mechanics
# ---------------------------------------------------------------------------

def criterion_9(tmp_dir):
    notes = []
    cfg = config.load_config(overrides=["corpus.n_utterances=1", "corpus.n_eval=0", "trainer.steps=200"])
    tr = trainer.Trainer(cfg)
    hist = tr.train()
    ratio = hist[-1].total / hist[0].total
    ok = ratio < 0.5
    notes.append(f"overfit loss {hist[0].total:.3f} -> {hist[-1].total:.3f} (x{ratio:.3f})")
    # resume
    small = config.load_config(overrides=["corpus.n_utterances=6", "corpus.n_eval=1"])
    corpus = trainer.load_corpus(small.corpus)
    a = trainer.Trainer(small, corpus)
    for _ in range(3):
        a.train_step()
    path = os.path.join(tmp_dir, "resume.mpv")
    a.save_checkpoint(path)
    cont = [a.train_step().total for _ in range(10)]
    b = trainer.Trainer.from_checkpoint(path, corpus)
    resumed = [b.train_step().total for _ in range(10)]
    exact = resumed == cont
    ok &= exact
    notes.append("resume bit-exact" if exact else "resume diverged")
    # lr = 0
    frozen = trainer.Trainer(config.load_config(overrides=["trainer.lr=0", "corpus.n_utterances=6",
                                                           "corpus.n_eval=1"]), corpus)
    before = frozen.model.params.state_dict()
    for _ in range(5):
        frozen.train_step()
    after = frozen.model.params.state_dict()
    still = all(np.array_equal(before[k], after[k]) for k in before)
    ok &= still
    notes.append("lr=0 frozen" if still else "lr=0 moved parameters")
    return ok, ", ".join(notes)


# ---------------------------------------------------------------------------
# pytest wrappers
# ---------------------------------------------------------------------------

LABELS = {
    "C1": "equation suite",
    "C2": "autodiff oracle",
    "C3": "analysis-synthesis",
    "C4": "parameter-count relations",
    "C5": "detached-branch forward equivalence",
    "C6": "directional ablation (source/output)",
    "C7": "directional topology check",
    "C8": "metric sanity",
    "C9": "training mechanics",
}


def _run(key, fn, *args):
    ok, detail = fn(*args)
    record(key, ok, detail)
    assert ok, f"{key} {LABELS[key]}: {detail}"


def test_c1_equation_suite():
    _run("C1", criterion_1)


def test_c2_autodiff_oracle():
    _run("C2", criterion_2)


def test_c3_analysis_synthesis():
    _run("C3", criterion_3)


def test_c4_parameter_relations():
    _run("C4", criterion_4)


def test_c5_detached_forward_equivalence():
    _run("C5", criterion_5)


@pytest.mark.slow
def test_c6_directional_ablation():
    _run("C6", criterion_6)


@pytest.mark.slow
def test_c7_directional_topology():
    _run("C7", criterion_7)


def test_c8_metric_sanity():
    _run("C8", criterion_8)


def test_c9_training_mechanics(tmp_path):
    _run("C9", criterion_9, str(tmp_path))


def summary_lines():
    lines = []
    for key, label in LABELS.items():
        if key in RESULTS:
            ok, detail = RESULTS[key]
            lines.append(f"[{'PASS' if ok else 'FAIL'}] {key} {label}: {detail}")
        else:
            lines.append(f"[----] {key} {label}: not run")
    return lines


if __name__ == "__main__":
    import tempfile

    fns = [criterion_1, criterion_2, criterion_3, criterion_4, criterion_5, criterion_6, criterion_7,
           criterion_8]
    for key, fn in zip(LABELS, fns):
        record(key, *fn())
        print(summary_lines()[list(LABELS).index(key)], flush=True)
    with tempfile.TemporaryDirectory() as d:
        record("C9", *criterion_9(d))
    print(summary_lines()[-1])
    print("\nablation table:\n" + RESULTS.get("_table", ""))
    sys.exit(0 if all(RESULTS[k][0] for k in LABELS) else 1)
