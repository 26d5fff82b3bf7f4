"""End-to-end acceptance checks, one test per criterion.

Each test records a single PASS/FAIL line (printed immediately and again in
the pytest terminal summary) before asserting, so a full ``pytest -v`` run
shows every criterion's measured numbers next to its threshold.
"""
import time

import numpy as np
import pytest

from wdtl import data, dsp, nn, wdgrl
from wdtl import tensor as T
from wdtl.data import BatchIterator, FormatError, SynthConfig
from wdtl.evaluation import evaluate
from wdtl.nn import OptimizerState, cross_entropy, gradients, optimizer_step, softmax
from wdtl.tensor import Tensor, finite_diff_check
from wdtl.training import (AdaptConfig, ModelCheckpoint, WDTLModel, adapt, critic_step,
                           load_checkpoint, pretrain, save_checkpoint)
from wdtl import training

RESULTS = []


def _record(n, title, ok, detail, elapsed, limit):
    ok = bool(ok) and elapsed < limit
    line = f"ACCEPTANCE {n} {'PASS' if ok else 'FAIL'}  {title}: {detail} [{elapsed:.1f}s < {limit:.0f}s]"
    RESULTS.append(line)
    print(line, flush=True)
    return ok


# ---------------------------------------------------------------- 1 gradients

def _kink_free(rng, shape_h, hidden, margin=1e-3):
    while True:
        p = {"h": rng.normal(size=shape_h), "w1": rng.normal(size=(hidden, shape_h[1])),
             "b1": rng.normal(size=hidden) * 0.5, "w2": rng.normal(size=(1, hidden)),
             "b2": rng.normal(size=1)}
        if np.abs(p["h"] @ p["w1"].T + p["b1"]).min() > margin:
            return p


def test_1_gradient_correctness():
    t0 = time.time()
    rng = np.random.default_rng(101)
    errs = {}

    pt = {"x": rng.normal(size=(2, 2, 23)), "w": rng.normal(size=(3, 2, 5)), "b": rng.normal(size=3)}
    proj = rng.normal(size=(2, 3, 10))
    errs["conv"] = finite_diff_check(
        lambda p: (T.conv1d(p["x"], p["w"], p["b"], stride=2) * proj).sum(), pt).max_rel_error

    pt = {"x": rng.normal(size=(2, 3, 14))}
    proj = rng.normal(size=(2, 3, 7))
    errs["pool"] = finite_diff_check(lambda p: (T.maxpool1d(p["x"], 2, 2) * proj).sum(),
                                     pt).max_rel_error

    pt = {"x": rng.normal(size=(5, 7)), "w": rng.normal(size=(4, 7)), "b": rng.normal(size=4)}
    proj = rng.normal(size=(5, 4))
    errs["dense"] = finite_diff_check(lambda p: (T.linear(p["x"], p["w"], p["b"]) * proj).sum(),
                                      pt).max_rel_error

    labels = np.array([2, 0, 3, 1, 1])
    errs["softmax+ce"] = finite_diff_check(
        lambda p: T.cross_entropy(T.softmax(T.linear(p["x"], p["w"], p["b"])), labels),
        pt).max_rel_error

    # full small CNN through the real layer wrappers
    ext = nn.FeatureExtractor(rng, input_len=120)
    head = nn.Discriminator(ext.out_features, rng, hidden=5)
    layers = {"conv1": ext.conv1, "conv2": ext.conv2, "fc1": head.fc1, "fc2": head.fc2}
    x = rng.random((2, 1, 120))

    def cnn(p):
        for name, t in p.items():
            layer, attr = name.split(".")
            setattr(layers[layer], attr, t)
        return nn.cross_entropy(head.predict_proba(ext(Tensor(x))), [1, 3])
    errs["cnn"] = finite_diff_check(
        cnn, {k: v.data.copy() for k, v in {**ext.params(), **head.params()}.items()}).max_rel_error

    crit = _kink_free(rng, (6, 5), 7)
    proj = rng.normal(size=6)

    def critic_score(p):
        hid = T.relu(T.linear(p["h"], p["w1"], p["b1"]))
        return (T.linear(hid, p["w2"], p["b2"]).reshape(6) * proj).sum()
    errs["critic"] = finite_diff_check(critic_score, crit).max_rel_error

    h = crit["h"]
    theta_c = {k: crit[k] for k in ("w1", "b1", "w2")}
    pen = finite_diff_check(
        lambda p: T.relu_mlp_gradient_penalty(Tensor(h), p["w1"], p["b1"], p["w2"]), theta_c)
    worst = max(errs.values())
    ok = worst < 1e-4 and pen.max_rel_error < 1e-3
    detail = ", ".join(f"{k} {v:.1e}" for k, v in errs.items()) + \
        f" (< 1e-4); penalty {pen.max_rel_error:.1e} (< 1e-3)"
    assert _record(1, "gradient correctness", ok, detail, time.time() - t0, 60)


# ---------------------------------------------------------------- 2 FFT

def test_2_fft_oracle():
    t0 = time.time()
    rng = np.random.default_rng(202)
    worst = 0.0
    for _ in range(50):
        x = rng.normal(size=2000)
        worst = max(worst, np.abs(dsp.fft_magnitude(x) - np.abs(dsp.dft(x))).max())
    n = np.arange(2000)
    mag = dsp.fft_magnitude(np.cos(2 * np.pi * 60 * n / 12000))
    peak = int(np.argmax(mag[:1000]))
    ok = worst < 1e-8 and peak == 10 and abs(mag[10] - 1000) <= 1e-6
    detail = f"max |fft - dft| {worst:.1e} (< 1e-8); peak bin {peak}, |X| {mag[10]:.9f}"
    assert _record(2, "FFT oracle", ok, detail, time.time() - t0, 30)


# ---------------------------------------------------------------- 3 duality

@pytest.mark.parametrize("d", [0.5, 1.0, 2.0])
def test_3_wasserstein_duality(d):
    t0 = time.time()
    rng = np.random.default_rng(int(d * 100))
    xs, ys = rng.normal(size=(1024, 1)), rng.normal(d, 1.0, size=(1024, 1))
    c = wdgrl.Critic(1, wdgrl.CRITIC_HIDDEN, rng=np.random.default_rng(1), dtype=np.float64)
    opt = OptimizerState("adam", 1e-3)
    for _ in range(2000):
        hr = wdgrl.interpolates(ys, xs, rng)
        *_, grads = wdgrl.critic_objective_grads(ys, xs, hr, c, wdgrl.DEFAULT_RHO)
        optimizer_step(opt, c.params(), grads, "ascent")
    est = wdgrl.empirical_wasserstein(ys, xs, c).item()
    w1 = wdgrl.w1_empirical_1d(xs, ys)
    rel_emp, rel_true = abs(est - w1) / w1, abs(est - d) / d
    ok = rel_emp <= 0.20 and rel_true <= 0.25
    detail = (f"d={d}: l_wd {est:.4f}, empirical W1 {w1:.4f} ({rel_emp:.1%} <= 20%), "
              f"analytic ({rel_true:.1%} <= 25%)")
    assert _record(3, "Wasserstein duality", ok, detail, time.time() - t0, 120)


# ---------------------------------------------------------------- 4 mechanics

def _source_only(src, cfg, init):
    m = init.to_model()
    it = BatchIterator(len(src), cfg.batch_size, seed=[cfg.seed, training._SRC])
    opt_d = OptimizerState(cfg.optimizer, cfg.lr_main)
    opt_f = OptimizerState(cfg.optimizer, cfg.lr_main)
    for _ in range(cfg.max_iterations):
        idx = next(it)
        h = m.extractor(m._input(src.features[idx]))
        g = gradients(cross_entropy(softmax(m.discriminator(h)), src.labels[idx]),
                      {**m.theta_f, **m.theta_d})
        optimizer_step(opt_d, m.theta_d, {k: g[k] for k in m.theta_d})
        optimizer_step(opt_f, m.theta_f, {k: g[k] for k in m.theta_f})
    return m


def test_4_algorithm_mechanics():
    t0 = time.time()
    src = data.synth_generate(SynthConfig(n_per_class=16, shaft_hz=30, seed=1, domain_tag="s"))
    tgt = data.synth_generate(SynthConfig(n_per_class=16, shaft_hz=29, seed=2, domain_tag="t"))
    cfg = AdaptConfig(batch_size=16, critic_steps=5, max_iterations=4, eval_every=2)

    # isolation: every update event changes exactly its own parameter group
    events, prev = [], {}

    def trace(event, model):
        now = {g: model.param_hash(g) for g in "fdc"}
        events.append((event, {g for g in "fdc" if now[g] != prev[g]}))
        prev.update(now)
    model = WDTLModel(0)
    prev.update({g: model.param_hash(g) for g in "fdc"})
    adapt(src, tgt, cfg, ModelCheckpoint.from_model(model, cfg), trace=trace)
    own = {"critic": {"c"}, "discriminator": {"d"}, "extractor": {"f"}}
    isolated = len(events) == 4 * 7 and all(ch == own[ev] for ev, ch in events)

    # monotone critic objective over C plain ascent steps at alpha1 = 1e-3
    m = WDTLModel(3, "float64")
    h_s, h_t = m.features(src.features[:32]), m.features(tgt.features[:32])
    opt = OptimizerState("plain", 1e-3)

    def objective():
        return wdgrl.critic_objective(h_s, h_t, m.critic, cfg.rho,
                                      rng=np.random.default_rng(5))[0].item()
    traj = [objective()]
    for _ in range(cfg.critic_steps * 2):
        critic_step(m, opt, h_s, h_t, cfg.rho, np.random.default_rng(5))
        traj.append(objective())
    monotone = all(b >= a for a, b in zip(traj, traj[1:])) and traj[-1] > traj[0]

    # reduction: lambda = 0, C = 0 is plain source-only training
    rcfg = cfg.replace(lam=0.0, critic_steps=0, max_iterations=8, dtype="float64")
    init = ModelCheckpoint.from_model(WDTLModel(0, "float64"), rcfg)
    res = adapt(src, tgt.unlabeled(), rcfg, init)
    ref = _source_only(src, rcfg, init)
    gap = max(float(np.abs(res.model.all_params()[k].data - ref.all_params()[k].data).max())
              for k in list(ref.theta_f) + list(ref.theta_d))
    reduces = gap < 1e-10 and res.model.param_hash("c") == init.to_model().param_hash("c")

    detail = (f"isolation {isolated} ({len(events)} events); monotone {monotone} "
              f"({traj[0]:.4f} -> {traj[-1]:.4f}); reduction {reduces} (max diff {gap:.1e})")
    assert _record(4, "algorithm mechanics", isolated and monotone and reduces, detail,
                   time.time() - t0, 120)


# ---------------------------------------------------------------- 5 speed shift

def test_5_speed_transfer_reduced_profile():
    """Reduced profile: 500 pretraining + 1500 adaptation iterations per seed."""
    src = data.synth_generate(SynthConfig(n_per_class=256, shaft_hz=30, seed=1, domain_tag="s30"))
    tgt = data.synth_generate(SynthConfig(n_per_class=256, shaft_hz=29, seed=2, domain_tag="t29"))
    wd, base, wd_time, base_time = [], [], 0.0, 0.0
    for seed in range(5):
        cfg = AdaptConfig(pretrain_iterations=500, max_iterations=1500, seed=seed)
        t = time.time()
        pre = pretrain(src, cfg)
        wd.append(adapt(src, tgt, cfg, pre.checkpoint).report.best_accuracy)
        wd_time += time.time() - t
        # no-transfer baseline: same budget and best-of-run selection, no Wasserstein term
        t = time.time()
        base.append(adapt(src, tgt, cfg.replace(lam=0.0, critic_steps=0),
                          pre.checkpoint).report.best_accuracy)
        base_time += time.time() - t
    gain = np.mean(wd) - np.mean(base)
    detail = (f"WD-DTL {np.mean(wd):.4f} {np.round(wd, 3).tolist()} vs baseline "
              f"{np.mean(base):.4f} {np.round(base, 3).tolist()}, gain {100 * gain:.1f} pts "
              f"(>= 5); baseline took {base_time:.0f}s extra")
    assert _record(5, "speed-shift transfer", gain >= 0.05, detail, wd_time, 480)


# ---------------------------------------------------------------- 6 supervised

def test_6_supervised_location_shift():
    t0 = time.time()
    # location-like shift: the fault signature reaches the far sensor at 30% strength
    src = data.synth_generate(SynthConfig(seed=1, domain_tag="near"))
    tgt = data.synth_generate(SynthConfig(seed=2, sensor_attenuation=0.3, domain_tag="far"))
    sup, unsup = [], []
    for seed in range(5):
        cfg = AdaptConfig(pretrain_iterations=500, max_iterations=800, seed=seed)
        pre = pretrain(src, cfg)
        labeled, idx = data.label_subset(tgt, 25, seed=seed)
        held_out = tgt.subset(np.setdiff1d(np.arange(len(tgt)), idx))
        pool = tgt.unlabeled()
        unsup.append(adapt(src, pool, cfg, pre.checkpoint, eval_set=held_out).report.best_accuracy)
        sup.append(adapt(src, pool, cfg, pre.checkpoint, target_labeled=labeled,
                         eval_set=held_out).report.best_accuracy)
    ok = np.mean(sup) >= np.mean(unsup)
    detail = (f"supervised {np.mean(sup):.4f} {np.round(sup, 3).tolist()} vs unsupervised "
              f"{np.mean(unsup):.4f} {np.round(unsup, 3).tolist()}")
    assert _record(6, "supervised location shift", ok, detail, time.time() - t0, 1200)


# ---------------------------------------------------------------- 7 reproducibility

def test_7_bitwise_reproducibility():
    t0 = time.time()
    src = data.synth_generate(SynthConfig(n_per_class=16, seed=1, domain_tag="s"))
    tgt = data.synth_generate(SynthConfig(n_per_class=16, shaft_hz=29, seed=2, domain_tag="t"))
    cfg = AdaptConfig(batch_size=16, critic_steps=3, max_iterations=10, eval_every=5,
                      pretrain_iterations=10, seed=4)
    runs = []
    for _ in range(2):
        pre = pretrain(src, cfg)
        res = adapt(src, tgt, cfg, pre.checkpoint)
        runs.append((pre.losses, pre.report.to_json(), res.report.to_json(), res.model.param_hash()))
    same = all(np.array_equal(a, b) if isinstance(a, list) else a == b
               for a, b in zip(*runs))
    detail = f"loss logs, reports and parameter hashes identical: {same}"
    assert _record(7, "bitwise reproducibility", same, detail, time.time() - t0, 60)


# ---------------------------------------------------------------- 8 formats

def test_8_format_round_trips(tmp_path):
    t0 = time.time()
    ds = data.synth_generate(SynthConfig(n_per_class=5, seed=8, domain_tag="rt"))
    ds_ok = all(data.load_dataset(data.save_dataset(d, tmp_path / f"d{i}.bin")) == d
                for i, d in enumerate((ds, ds.unlabeled())))
    ck = ModelCheckpoint.from_model(WDTLModel(5), AdaptConfig(seed=5), 7, 0.5)
    back = load_checkpoint(save_checkpoint(ck, tmp_path / "m.ckpt"))
    ck_ok = all(np.array_equal(ck.params[k], back.params[k]) and
                ck.params[k].dtype == back.params[k].dtype for k in ck.params) \
        and set(back.params) == set(ck.params) and back.config == ck.config

    raw = (tmp_path / "d0.bin").read_bytes()
    messages = []
    for at, patch in ((0, b"XXXX"), (4, b"\x09\x00\x00\x00"), (12, b"\x01\x00\x00\x00")):
        p = tmp_path / f"bad{at}.bin"
        p.write_bytes(raw[:at] + patch + raw[at + len(patch):])
        try:
            data.load_dataset(p)
            messages.append((at, None))
        except FormatError as exc:
            messages.append((at, str(exc)))
    craw = (tmp_path / "m.ckpt").read_bytes()
    p = tmp_path / "bad.ckpt"
    p.write_bytes(b"NOPE" + craw[4:])
    try:
        load_checkpoint(p)
        messages.append((0, None))
    except FormatError as exc:
        messages.append((0, str(exc)))
    positioned = all(m is not None and f"byte {at}" in m for at, m in messages)
    detail = f"dataset {ds_ok}, checkpoint {ck_ok}, corrupted headers positioned {positioned}"
    assert _record(8, "format round trips", ds_ok and ck_ok and positioned, detail,
                   time.time() - t0, 10)
