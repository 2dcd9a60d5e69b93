"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run on its own with ``pytest tests/test_acceptance.py -s`` (the lines are also
collected into the terminal summary). Criterion 10 trains two toy models and
takes roughly a quarter of an hour on one CPU core.
"""

import math
import time

import numpy as np
import pytest

from fitv2 import numerics as nx
from fitv2 import positional as pe
from fitv2.accounting import block_main_weights, count_parameters, estimate_flops, fit_v1_block_weights, preset
from fitv2.adapt import build_freeze_plan, posttrain
from fitv2.blocks import FiTv2, ModelConfig, block_forward, condition, default_table, forward
from fitv2.checkpoint import load_checkpoint, save_checkpoint
from fitv2.evaluate import evaluate_generator, model_generator
from fitv2.flow import (
    FlowConfig,
    TimestepSampler,
    TrainConfig,
    ema_model,
    euler,
    flow_loss,
    ode_sample,
    rk4,
    train_loop,
    validation_loss,
)
from fitv2.numerics import Tensor, no_grad
from fitv2.pipeline import DatasetSpec, TokenDataset, pack_tokens, synth_dataset
from fitv2.positional import RopeConfig

import conftest

F64 = np.float64


def verdict(key: str, title: str, ok: bool, detail: str = "") -> None:
    line = f"ACCEPTANCE {key:>2} {'PASS' if ok else 'FAIL'}  {title}" + (f"  [{detail}]" if detail else "")
    conftest.ACCEPTANCE[key] = line
    print(line)
    assert ok, line


def leaf(shape, seed, name=None, scale=1.0):
    rng = np.random.default_rng(seed)
    return Tensor(scale * rng.standard_normal(shape), requires_grad=True, dtype=F64, name=name)


def projected(out: Tensor, seed=99) -> Tensor:
    w = np.random.default_rng(seed).standard_normal(out.shape)
    return nx.sum_(out * Tensor(w, dtype=F64))


def random_batch(cfg, grids, max_len, rng):
    items = [(rng.standard_normal((gh * gw, cfg.token_dim)), (gh, gw)) for gh, gw in grids]
    return pack_tokens(items, max_len)


# -- 1 ---------------------------------------------------------------------------------


def test_acceptance_1_gradients():
    start = time.perf_counter()
    errs = {}

    def check(name, f, leaves):
        e = nx.gradcheck(lambda: projected(f()), leaves)
        errs[name] = max(e.values())

    a, b, c = leaf((3, 4), 1, "a"), leaf((4,), 2, "b"), leaf((3, 1), 3, "c")
    check("add", lambda: a + b, [a, b])
    check("sub", lambda: a - c, [a, c])
    check("mul", lambda: a * b * c, [a, b, c])
    check("scale", lambda: nx.scale(a, -1.5), [a])
    check("sigmoid", lambda: nx.sigmoid(a), [a])
    check("silu", lambda: nx.silu(a), [a])
    check("square", lambda: nx.square(a), [a])
    x3 = leaf((2, 3, 4), 4)
    check("sum", lambda: nx.sum_(x3, axis=1, keepdims=True), [x3])
    check("mean", lambda: nx.mean(x3, axis=-1), [x3])
    check("reshape", lambda: x3.reshape(6, 4), [x3])
    check("transpose", lambda: x3.transpose(2, 0, 1), [x3])
    p, q = leaf((2, 3), 5, "p"), leaf((2, 5), 6, "q")
    check("concat", lambda: nx.concat_lastdim([p, q]), [p, q])
    s = leaf((2, 8), 7)
    check("split", lambda: nx.split_lastdim(s, [3, 5])[1] * 2.0, [s])
    table = leaf((5, 3), 8)
    check("take_rows", lambda: nx.take_rows(table, np.array([0, 2, 2, 4])), [table])
    m1, m2 = leaf((2, 3, 4), 9, "m1"), leaf((2, 4, 5), 10, "m2")
    check("matmul", lambda: m1 @ m2, [m1, m2])
    x, w, bias = leaf((3, 2, 4), 11, "x"), leaf((4, 6), 12, "w"), leaf((6,), 13, "bias")
    check("linear", lambda: nx.linear(x, w, bias), [x, w, bias])
    logits = leaf((2, 3, 5), 14)
    mask = np.zeros((2, 3, 5))
    mask[..., 3:] = -np.inf
    check("softmax", lambda: nx.softmax_lastdim(logits + Tensor(mask, dtype=F64)), [logits])
    ln, g, beta = leaf((3, 6), 15, "x"), leaf((6,), 16, "g"), leaf((6,), 17, "b")
    check("layernorm", lambda: nx.layernorm(ln, g, beta), [ln, g, beta])
    r = leaf((2, 3, 8), 18)
    ang = np.random.default_rng(0).uniform(-3, 3, (3, 4))
    check("rotate_pairs", lambda: nx.rotate_pairs(r, np.cos(ang), np.sin(ang)), [r])

    # one full block: attention with mask, RoPE, QK-Norm, SwiGLU, AdaLN-LoRA
    cfg = ModelConfig(layers=1, hidden=16, heads=2, patch=1, in_channels=2, max_tokens=6, num_classes=2)
    model = FiTv2(cfg, seed=0, dtype=F64)
    model.randomize(seed=1, std=0.3)
    batch = random_batch(cfg, [(2, 2), (1, 3)], 5, np.random.default_rng(2))
    table = default_table(model, batch)
    cos, sin = table.cos_sin(batch.pos_h, batch.pos_w)
    with no_grad():
        t_emb, c_emb = condition(model, np.array([0.3, 0.8]), np.array([1, 0]))
    cond = Tensor(nx.silu(t_emb + c_emb).data, requires_grad=True, dtype=F64, name="cond")
    gw = model.params["adaln_global.weight"]
    hx = leaf((2, 5, 16), 20, "x")
    block = [p for k, p in model.params.items() if k.startswith("blocks.0.")]

    def run_block():
        glob = nx.linear(cond, gw, model.params["adaln_global.bias"])
        out = block_forward(model, 0, hx, cond, glob, batch.mask, cos, sin, table)
        return out * Tensor(batch.valid[..., None].astype(F64), dtype=F64)

    e = nx.gradcheck(lambda: projected(run_block(), 21), [hx, cond, gw, *block])
    errs["block"] = max(e.values())
    elapsed = time.perf_counter() - start
    worst = max(errs, key=errs.get)
    ok = errs[worst] < 1e-4 and elapsed < 60
    verdict("1", "finite-difference gradients", ok, f"worst {worst} {errs[worst]:.1e}, {elapsed:.1f}s")


# -- 2 ---------------------------------------------------------------------------------


def test_acceptance_2_padding_invariance():
    start = time.perf_counter()
    cfg = ModelConfig(layers=2, hidden=32, heads=2, patch=2, in_channels=2, max_tokens=24, num_classes=3)
    model = FiTv2(cfg, seed=0, dtype=F64)
    model.randomize(seed=1)
    rng = np.random.default_rng(0)
    worst_out = worst_loss = 0.0
    for trial in range(100):
        n_items = int(rng.integers(1, 4))
        grids = []
        for _ in range(n_items):
            gh = int(rng.integers(1, 5))
            grids.append((gh, int(rng.integers(1, 24 // gh + 1))))
        L = max(gh * gw for gh, gw in grids) + int(rng.integers(0, 6))
        batch = random_batch(cfg, grids, L, rng)
        t = rng.uniform(0, 1, n_items)
        y = rng.integers(0, cfg.num_classes + 1, n_items)
        junk = batch.with_max_len(L, pad_value=0.0)
        pad = ~junk.valid
        junk.tokens[pad] = 1e3 * rng.standard_normal((int(pad.sum()), cfg.token_dim))
        doubled = batch.with_max_len(2 * L, pad_value=float(rng.normal()))
        seed = int(rng.integers(2**31))
        with no_grad():
            outs = [forward(model, b, t, y).data for b in (batch, junk, doubled)]
            losses = [flow_loss(model, b, TimestepSampler(), np.random.default_rng(seed), y).item() for b in (batch, junk, doubled)]
        for i, n in enumerate(batch.lengths):
            for o in outs[1:]:
                worst_out = max(worst_out, float(np.abs(o[i, :n] - outs[0][i, :n]).max()))
        worst_loss = max(worst_loss, max(abs(v - losses[0]) for v in losses[1:]))
    elapsed = time.perf_counter() - start
    ok = worst_out <= 1e-6 and worst_loss <= 1e-6 and elapsed < 60
    verdict("2", "padding invariance, 100 batches", ok, f"output {worst_out:.1e}, loss {worst_loss:.1e}, {elapsed:.1f}s")


# -- 3 ---------------------------------------------------------------------------------


def test_acceptance_3_rope_relative_position():
    rng = np.random.default_rng(3)
    D = 32
    freqs = pe.base_frequencies(D)
    table = pe.build_table(RopeConfig(head_dim=D), 400, 400)
    worst_1d = worst_2d = worst_norm = 0.0
    for _ in range(1000):
        q, k = rng.standard_normal(D), rng.standard_normal(D)
        m, n, c = rng.integers(0, 200, 3)
        a = pe.rotate_1d(q, m, np.concatenate([freqs, freqs])) @ pe.rotate_1d(k, n, np.concatenate([freqs, freqs]))
        b = pe.rotate_1d(q, m + c, np.concatenate([freqs, freqs])) @ pe.rotate_1d(k, n + c, np.concatenate([freqs, freqs]))
        worst_1d = max(worst_1d, abs(a - b))
        (h1, w1, h2, w2), (dh, dw) = rng.integers(0, 200, 4), rng.integers(0, 200, 2)
        s1 = pe.rotate_2d(q, h1, w1, table) @ pe.rotate_2d(k, h2, w2, table)
        s2 = pe.rotate_2d(q, h1 + dh, w1 + dw, table) @ pe.rotate_2d(k, h2 + dh, w2 + dw, table)
        worst_2d = max(worst_2d, abs(s1 - s2))
        worst_norm = max(worst_norm, abs(np.linalg.norm(pe.rotate_2d(q, h1, w1, table)) - np.linalg.norm(q)))
    ok = max(worst_1d, worst_2d, worst_norm) <= 1e-6
    verdict("3", "RoPE translation invariance and norm", ok, f"1d {worst_1d:.1e}, 2d {worst_2d:.1e}, norm {worst_norm:.1e}")


# -- 4 ---------------------------------------------------------------------------------


def test_acceptance_4_interpolation_identities():
    worst = 0.0
    for D in (16, 32, 64):
        for L in (4, 8, 16):
            for n in (L + 1, 2 * L, 3 * L + 5):
                for plain, vision in (("ntk", "vision_ntk"), ("yarn", "vision_yarn")):
                    a = pe.build_table(RopeConfig(head_dim=D, method=plain, train_len=L), n, n)
                    b = pe.build_table(RopeConfig(head_dim=D, method=vision, train_len=L), n, n)
                    for fa, fb in ((a.freqs_h, b.freqs_h), (a.freqs_w, b.freqs_w)):
                        worst = max(worst, float(np.max(np.abs(fa - fb) / fa)))
    vision_ok = worst <= 1e-12

    identity_ok = True
    for L in (4, 8, 16):
        ref = pe.build_table(RopeConfig(head_dim=16, train_len=L), L, L)
        for method in pe.METHODS:
            for h, w in ((L, L), (1, L), (L, 2), (L // 2, L)):
                t = pe.build_table(RopeConfig(head_dim=16, train_len=L, method=method, attn_scale=True), h, w)
                identity_ok &= np.array_equal(t.freqs_h, ref.freqs_h) and np.array_equal(t.freqs_w, ref.freqs_w)
                identity_ok &= (t.magnitude, t.pos_scale_h, t.pos_scale_w, t.attention_scale) == (1.0,) * 4

    alpha, beta = 1.0, 32.0

    def ramp_def(r):
        if r < alpha:
            return 0.0
        if r > beta:
            return 1.0
        return (r - alpha) / (beta - alpha)

    points = [alpha, beta, 2.0, 16.5, 31.0]
    ramp_ok = all(pe.yarn_ramp(r, alpha, beta) == ramp_def(r) for r in points)
    ramp_ok &= pe.yarn_ramp(alpha, alpha, beta) == 0.0 and pe.yarn_ramp(beta, alpha, beta) == 1.0
    ok = vision_ok and identity_ok and ramp_ok
    verdict("4", "interpolation identities", ok, f"vision-vs-vanilla {worst:.1e}, identity {identity_ok}, ramp {ramp_ok}")


# -- 5, 6 ------------------------------------------------------------------------------


def test_acceptance_5_parameter_accounting():
    start = time.perf_counter()
    published = {"B": 128e6, "XL": 671e6, "3B": 3e9}
    rel = {k: abs(count_parameters(preset(k))["total"] / v - 1) for k, v in published.items()}
    per_block = {k: sum(block_main_weights(preset(k)).values()) / preset(k).hidden ** 2 for k in published}
    ratios = set()
    for d in (384, 768, 1152, 2304):
        w = fit_v1_block_weights(d)
        g = math.gcd(w["attention"], w["swiglu"], w["adaln"])
        ratios.add((w["attention"] // g, w["swiglu"] // g, w["adaln"] // g))
    elapsed = time.perf_counter() - start
    ok = max(rel.values()) < 0.05 and all(v == 13.75 for v in per_block.values()) and ratios == {(2, 4, 3)}
    ok &= elapsed < 1
    detail = ", ".join(f"{k} {v:.2%}" for k, v in rel.items()) + f", 13.75d^2 {per_block['XL']}, ratio {ratios}"
    verdict("5", "parameter accounting", ok, detail)


def test_acceptance_6_flop_accounting():
    start = time.perf_counter()
    published = {"B": 27.3, "XL": 147.0, "3B": 653.0}
    got = {k: estimate_flops(preset(k), 256)["total"] / 1e9 for k in published}
    rel = {k: abs(got[k] / published[k] - 1) for k in published}
    elapsed = time.perf_counter() - start
    ok = max(rel.values()) < 0.10 and elapsed < 1
    verdict("6", "GFLOPs at 256 tokens", ok, ", ".join(f"{k} {got[k]:.2f} ({rel[k]:.1%})" for k in got))


# -- 7 ---------------------------------------------------------------------------------


def test_acceptance_7_freeze_fraction(trained_tiny):
    frac = build_freeze_plan(preset("XL")).fraction
    model, _ = trained_tiny
    spec = DatasetSpec(num_samples=64, seed=4, resolutions=[(20, 20, 0.5), (14, 28, 0.25), (28, 14, 0.25)])
    hi = TokenDataset.from_samples(synth_dataset(spec), 100, 2)
    before = {k: v.data.tobytes() for k, v in model.params.items()}
    plan = build_freeze_plan(model)
    out, state = posttrain(model, plan, hi, 100, 50, TrainConfig(batch_size=4, lr=1e-3, warmup=5))
    frozen = [k for k, f in plan.flags.items() if not f]
    same = all(out.params[k].data.tobytes() == before[k] for k in frozen)
    moved = sum(out.params[k].data.tobytes() != before[k] for k, f in plan.flags.items() if f)
    ok = abs(frac - 0.1415) <= 0.005 and same and state.step == 50 and moved > 0
    verdict("7", "freeze fraction and frozen bytes", ok, f"XL {frac:.5f}, {len(frozen)} frozen identical {same}, {moved} moved")


# -- 8 ---------------------------------------------------------------------------------


def test_acceptance_8_sampler_statistics():
    t = TimestepSampler("logit_normal", 0.0, 1.0).draw(np.random.default_rng(8), 100_000)
    in_range = bool(t.min() > 0 and t.max() < 1)
    med = float(np.median(t))
    mass = float(np.mean((t > 0.25) & (t < 0.75)))
    ok = in_range and abs(med - 0.5) <= 0.01 and abs(mass - 0.7335) <= 0.01
    verdict("8", "logit-normal statistics", ok, f"median {med:.4f}, mass {mass:.4f} (stated 0.7335, exact 0.72806)")


# -- 9 ---------------------------------------------------------------------------------


def test_acceptance_9_ode_correctness(trained_tiny):
    z = rk4(lambda z, t: z, np.array([1.0]), 100)
    rk4_err = abs(z[0] - math.e)
    ze = euler(lambda z, t: z, np.array([1.0]), 100)
    ref = 1.0
    for _ in range(100):
        ref = ref + 0.01 * ref
    model, _ = trained_tiny
    noise = np.random.default_rng(9).standard_normal((2, 16, 16))
    dense, _ = ode_sample(model, (4, 4), [0, 2], FlowConfig(ode="rk4", steps=1000), None, noise=noise)
    flow = FlowConfig(ode="adaptive", rtol=1e-5, atol=1e-5)
    adaptive, info = ode_sample(model, (4, 4), [0, 2], flow, None, noise=noise)
    excess = max(float(np.max(np.abs(a - r) / (flow.atol + flow.rtol * np.abs(r)))) for a, r in zip(adaptive, dense))
    ok = rk4_err <= 1e-6 and ze[0] == ref and excess <= 10
    verdict("9", "ODE solvers", ok, f"rk4 {rk4_err:.1e}, euler exact {ze[0] == ref}, adaptive {excess:.2f} x tol, nfe {info.nfe}")


# -- 10 --------------------------------------------------------------------------------

TOY = ModelConfig(layers=4, hidden=96, heads=4, patch=2, in_channels=4, max_tokens=64, num_classes=4)
TOY_STEPS = 2000
EVAL_EVERY = 100
SEEN = [(16, 16), (10, 20), (20, 10), (8, 24), (24, 8)]
UNSEEN = (12, 18)
OOD = [(20, 20), (14, 28), (12, 32)]  # 10x10, 7x14 and 6x16 tokens, about 1.5x the budget


def _toy_run(kind, train_ds, val_ds):
    model = FiTv2(TOY, seed=0)
    curve = []

    def every(state):
        if state.step % EVAL_EVERY == 0:
            curve.append((state.step, validation_loss(model, val_ds)))

    state = train_loop(
        model, train_ds, TrainConfig(batch_size=16, lr=1e-3, warmup=40), TimestepSampler(kind), TOY_STEPS, seed=0, callback=every
    )
    return model, state, curve


@pytest.fixture(scope="module")
def toy_ladder():
    start = time.perf_counter()
    spec = DatasetSpec(num_samples=2048, seed=0)
    train_ds = TokenDataset.from_samples(synth_dataset(spec), TOY.max_tokens, TOY.patch)
    val_ds = TokenDataset.from_samples(synth_dataset(spec, seed=10_001)[:128], TOY.max_tokens, TOY.patch)
    runs = {kind: _toy_run(kind, train_ds, val_ds) for kind in ("logit_normal", "uniform")}
    model, state, _ = runs["logit_normal"]
    sampler = ema_model(model, state)
    flow = FlowConfig(ode="rk4", steps=16)
    per_class = 16

    def dist(res, method="none", attn=False):
        gen = model_generator(sampler, flow, method, attn)
        return evaluate_generator(gen, spec, res, per_class, seed=77).stat_distance

    seen = {res: dist(res) for res in SEEN}
    unseen = dist(UNSEEN)
    ood = {res: (dist(res, "vision_ntk", True), dist(res)) for res in OOD}
    return dict(runs=runs, seen=seen, unseen=unseen, ood=ood, seconds=time.perf_counter() - start)


@pytest.mark.slow
def test_acceptance_10_toy_mechanism_ordering(toy_ladder):
    runs = toy_ladder["runs"]
    losses = np.array(runs["logit_normal"][1].losses)
    windows = losses.reshape(-1, EVAL_EVERY).mean(axis=1)
    a_ok = bool(np.all(np.diff(windows) < 0))
    rises = [i for i in range(1, len(windows)) if windows[i] >= windows[i - 1]]

    ln_curve = dict(runs["logit_normal"][2])
    target = dict(runs["uniform"][2])[TOY_STEPS]
    reached = next((s for s, v in sorted(ln_curve.items()) if v <= target), None)
    b_ok = reached is not None and reached <= 1400

    best_seen = min(toy_ladder["seen"].values())
    c_ok = toy_ladder["unseen"] <= 2 * best_seen

    wins = sum(v <= d for v, d in toy_ladder["ood"].values())
    d_ok = wins >= 2

    minutes = toy_ladder["seconds"] / 60
    parts = {
        "a": (a_ok, f"window means {windows[0]:.4f} -> {windows[-1]:.4f}, rises at windows {rises}"),
        "b": (b_ok, f"uniform@{TOY_STEPS} val {target:.4f}, logit-normal reaches it at step {reached}"),
        "c": (c_ok, f"unseen {toy_ladder['unseen']:.4f} vs best seen {best_seen:.4f}"),
        "d": (d_ok, "vision_ntk+scale vs direct " + ", ".join(f"{v:.3f}/{d:.3f}" for v, d in toy_ladder["ood"].values())),
    }
    for k, (ok, detail) in parts.items():
        print(f"  10{k} {'PASS' if ok else 'FAIL'}  {detail}")
    failed = [k for k, (ok, _) in parts.items() if not ok]
    ok = not failed and minutes <= 30
    detail = f"{minutes:.1f} min" + (f", failing parts {failed}" if failed else "") + "; " + "; ".join(
        f"10{k}: {d}" for k, (_, d) in parts.items()
    )
    verdict("10", "toy mechanism ordering", ok, detail)


# -- 11 --------------------------------------------------------------------------------


def test_acceptance_11_determinism(tmp_path, toy_dataset):
    from conftest import TINY

    tcfg = TrainConfig(batch_size=8, lr=2e-3, warmup=5)
    cfg = ModelConfig(**TINY)

    def trace(steps, seed=0):
        m = FiTv2(cfg, seed=seed)
        return m, train_loop(m, toy_dataset, tcfg, TimestepSampler(), steps, seed=seed)

    m1, s1 = trace(20)
    m2, s2 = trace(20)
    traces_ok = s1.losses == s2.losses

    flow = FlowConfig(ode="rk4", steps=8)
    a, _ = ode_sample(m1, (4, 6), [0, 1, 2], flow, np.random.default_rng(5))
    b, _ = ode_sample(m2, (4, 6), [0, 1, 2], flow, np.random.default_rng(5))
    samples_ok = all(x.tobytes() == y.tobytes() for x, y in zip(a, b))

    m3 = FiTv2(cfg, seed=0)
    s3 = train_loop(m3, toy_dataset, tcfg, TimestepSampler(), 8, seed=0)
    save_checkpoint(tmp_path / "ck", m3, s3, "")
    ck = load_checkpoint(tmp_path / "ck")
    train_loop(ck.model, toy_dataset, tcfg, TimestepSampler(), 12, state=ck.state)
    resume_loss = float(np.max(np.abs(np.array(ck.state.losses) - np.array(s1.losses))))
    resume_w = max(float(np.max(np.abs(ck.model.params[k].data - m1.params[k].data))) for k in m1.params)
    ok = traces_ok and samples_ok and len(ck.state.losses) == 20 and resume_loss <= 1e-6 and resume_w <= 1e-6
    verdict("11", "determinism and resume", ok, f"traces {traces_ok}, samples {samples_ok}, resume {resume_loss:.1e}/{resume_w:.1e}")


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-s", "-q"]))
