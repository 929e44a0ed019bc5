"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run on its own with ``pytest tests/test_acceptance.py -s -v``; the summary
lines are printed even without ``-s``.
"""

import math
import time

import numpy as np
import torch
from hypothesis import HealthCheck, given, settings, strategies as st

from oobtrigger.augment import EOTConfig
from oobtrigger.dataset import generate_synthetic_dataset
from oobtrigger.evaluation import evaluate_asr, evaluate_sequence, generate_approach_sequence
from oobtrigger.losses import AttackObjective, LossBreakdown, LossWeights, l_fg, l_tv
from oobtrigger.renderer import AffineParams, PlacementRule, init_trigger, render, trigger_grid
from oobtrigger.uapgd import UAPGDConfig, optimize, run_pgd, run_uapgd

from conftest import tiny_detector
from harness import scripted_run
from oracles import TRACE_CASES, central_fd, naive_tv, relative_error

# Ablation grid settings shared by all four cells.
GRID_EPOCHS = 100
GRID_LAMBDA_FG = 0.1
GRID_LAMBDA_TV = 2.5e-5
GRID_ETA0 = 16 / 255
GRID_TRIGGER = (16, 32)
# Short windows so halving can fire several times within the budget.
GRID_L_O = 3
GRID_L_C = 2


def report(capsys, number, name, passed, detail):
    with capsys.disabled():
        print(f"\n[acceptance] criterion {number} ({name}): {'PASS' if passed else 'FAIL'} | {detail}")


# ---------------------------------------------------------------------------
# 1. gradient correctness

# Some l_det gradients are ~1e-8 in norm, so a smaller step drowns them in round-off.
FD_STEP = 1e-4


def _gradient_fixture(seed):
    model = tiny_detector(seed)
    batch = generate_synthetic_dataset(2, (32, 32), 100 + seed).samples
    trigger = np.random.default_rng(seed).uniform(0.05, 0.95, size=(3, 8, 8))
    return model, batch, trigger


def _loss_functions(model, batch):
    det_obj = AttackObjective(model, LossWeights(0, 0), 0, eot=EOTConfig.disabled())
    all_obj = AttackObjective(model, LossWeights(0.5, 0.01), 0, eot=EOTConfig.disabled())

    def det(t):
        images, _, _ = det_obj.composite(batch, t)
        return model.forward_batch(images).max_target_score(0).mean()

    def fg(t):
        images, kept, _ = det_obj.composite(batch, t)
        return l_fg(model.forward_batch(images).features, det_obj.mask_cache.get(kept, t.dtype))

    return {"l_tv": lambda t: l_tv(t), "l_det": det, "l_fg": fg, "l_all": lambda t: all_obj(t, batch).total}


def test_criterion_1_gradient_correctness(capsys):
    start = time.perf_counter()
    worst = {}
    for seed in range(20):
        model, batch, x0 = _gradient_fixture(seed)
        for name, fn in _loss_functions(model, batch).items():
            t = torch.from_numpy(x0.copy()).requires_grad_(True)
            (grad,) = torch.autograd.grad(fn(t), t)
            with torch.inference_mode():
                fd = central_fd(lambda a: fn(torch.from_numpy(a)).item(), x0, FD_STEP)
            worst[name] = max(worst.get(name, 0.0), relative_error(grad.numpy(), fd))
    elapsed = time.perf_counter() - start
    passed = all(v <= 1e-2 for v in worst.values()) and elapsed < 60
    detail = ", ".join(f"{k} max rel err {v:.2e}" for k, v in worst.items()) + f"; {elapsed:.1f}s"
    report(capsys, 1, "gradient correctness", passed, detail)
    assert all(v <= 1e-2 for v in worst.values()), worst
    assert elapsed < 60


# ---------------------------------------------------------------------------
# 2. trace oracle


def test_criterion_2_trace_oracle(capsys):
    start = time.perf_counter()
    mismatches = []
    halving_counts = {}
    for name, losses in TRACE_CASES.items():
        best, rep, obj, oracle = scripted_run(losses)
        halving_counts[name] = len(rep.halving_events)
        if rep.halving_events != oracle["halvings"]:
            mismatches.append(f"{name}: halvings {rep.halving_events} != {oracle['halvings']}")
        if rep.eta_schedule != oracle["steps"]:
            mismatches.append(f"{name}: eta schedule differs")
        if not np.array_equal(best.numpy(), oracle["a_best"]):
            mismatches.append(f"{name}: A_best differs")
    elapsed = time.perf_counter() - start
    covers = 0 in halving_counts.values() and 2 in halving_counts.values()
    passed = not mismatches and covers and elapsed < 10
    report(capsys, 2, "Algorithm 1 trace oracle", passed,
           f"halvings per script {halving_counts}; mismatches {mismatches or 'none'}; {elapsed:.2f}s")
    assert not mismatches and covers and elapsed < 10


# ---------------------------------------------------------------------------
# 3. surrogate optimiser


def _surrogate_distance(seed, adaptive):
    g = torch.Generator().manual_seed(seed)
    target = torch.rand(8, generator=g, dtype=torch.float64)
    v0 = torch.rand(8, generator=g, dtype=torch.float64)

    def objective(v, batch, epoch, j, stream):
        loss = ((v - target) ** 2).sum()
        return LossBreakdown(loss.item(), 0.0, 0.0, loss.item(), n_images=1, total=loss)

    cfg = UAPGDConfig(eta0=0.2, n_epoch=200, adaptive=adaptive, seed=seed)
    best, _ = optimize(objective, v0, cfg, lambda epoch: [None])
    # closed-form optimum is the target itself
    return float((best - target).norm())


def test_criterion_3_surrogate(capsys):
    rows = [(s, _surrogate_distance(s, True), _surrogate_distance(s, False)) for s in range(10)]
    wins = sum(u < p for _, u, p in rows)
    detail = f"UAPGD better on {wins}/10 seeds; max UAPGD dist {max(r[1] for r in rows):.4f}, " \
             f"min PGD dist {min(r[2] for r in rows):.4f}"
    report(capsys, 3, "surrogate optimizer", wins == 10, detail)
    assert wins == 10


# ---------------------------------------------------------------------------
# 4. desk-scale ablation ordering


def _grid_cell(mode, use_fg, train, detector):
    cfg = UAPGDConfig(eta0=GRID_ETA0, n_epoch=GRID_EPOCHS, l_o=GRID_L_O, l_c=GRID_L_C,
                      batch_size=32, seed=0)
    weights = LossWeights(GRID_LAMBDA_FG if use_fg else 0.0, GRID_LAMBDA_TV)
    runner = run_uapgd if mode == "uapgd" else run_pgd
    best, rep = runner(cfg, train, detector, weights, EOTConfig(seed=0), PlacementRule(), 0,
                       init_trigger(GRID_TRIGGER, 0))
    return best, rep


def test_criterion_4_ablation_ordering(capsys, trained, synth_split):
    start = time.perf_counter()
    model, metrics = trained
    train, test = synth_split
    asr = {}
    halvings = {}
    for mode in ("pgd", "uapgd"):
        for use_fg in (False, True):
            name = mode + ("+fg" if use_fg else "")
            best, rep = _grid_cell(mode, use_fg, train, model)
            asr[name] = evaluate_asr(test, best, model, PlacementRule(), 0).asr
            halvings[name] = rep.halving_events
    elapsed = time.perf_counter() - start
    baseline_ok = metrics.holdout_detection_rate >= 0.95
    ordered = asr["uapgd+fg"] >= asr["pgd"]
    detail = (f"clean detection {metrics.holdout_detection_rate:.3f}; test ASR "
              + ", ".join(f"{k}={v:.3f}" for k, v in asr.items())
              + f"; halvings {halvings}; grid {elapsed / 60:.1f} min")
    report(capsys, 4, "ablation ordering", baseline_ok and ordered, detail)
    assert baseline_ok
    assert ordered, asr


# ---------------------------------------------------------------------------
# 5. clean sequence baseline


def test_criterion_5_clean_sequence(capsys, trained_detector):
    seq = generate_approach_sequence(90, (64, 64), (0.1, 0.5), seed=0)
    series, proportion = evaluate_sequence(seq, None, trained_detector, PlacementRule(), 0)
    report(capsys, 5, "clean sequence baseline", proportion <= 0.05,
           f"undetected proportion {proportion:.3f} over {len(series)} frames; min conf {min(series):.3f}")
    assert proportion <= 0.05


# ---------------------------------------------------------------------------
# 6. invariant suite


def _noisy_quadratic(seed):
    g = torch.Generator().manual_seed(seed)
    target = torch.rand(3, 2, 2, generator=g, dtype=torch.float64)
    wobble = torch.rand(64, generator=g, dtype=torch.float64)
    seen = []

    def objective(t, batch, epoch, j, stream):
        seen.append(t.detach().clone())
        loss = ((t - target) ** 2).sum() * 3 + 0.1 * wobble[(epoch * 5 + j) % 64]
        return LossBreakdown(loss.item(), 0, 0, loss.item(), total=loss)
    return objective, seen


_FAST = settings(max_examples=30, deadline=None, suppress_health_check=list(HealthCheck))


def _prop_clamping():
    @_FAST
    @given(seed=st.integers(0, 10**6), eta=st.floats(0.01, 1.0), k=st.integers(1, 4))
    def prop(seed, eta, k):
        objective, seen = _noisy_quadratic(seed)
        a0 = torch.rand(3, 2, 2, generator=torch.Generator().manual_seed(seed), dtype=torch.float64)
        best, _ = optimize(objective, a0, UAPGDConfig(eta0=eta, n_epoch=12, l_o=2, l_c=2, debug=True),
                           lambda e: [None] * k)
        # every trigger handed to the loss after the first is a post-update trigger
        assert all(0 <= s.min() and s.max() <= 1 for s in seen)
        assert 0 <= best.min() and best.max() <= 1
    prop()


def _prop_best_monotone_and_eta():
    @_FAST
    @given(seed=st.integers(0, 10**6), n=st.integers(0, 40), l_o=st.integers(1, 4), l_c=st.integers(2, 4),
           slack=st.sampled_from(["relative", "absolute"]))
    def prop(seed, n, l_o, l_c, slack):
        objective, _ = _noisy_quadratic(seed)
        a0 = torch.rand(3, 2, 2, generator=torch.Generator().manual_seed(seed), dtype=torch.float64)
        cfg = UAPGDConfig(eta0=0.3, n_epoch=n, l_o=l_o, l_c=l_c, slack=slack, eps1=0.01, eps2=0.1)
        _, rep = optimize(objective, a0, cfg, lambda e: [None])
        assert all(a >= b for a, b in zip(rep.best_losses, rep.best_losses[1:]))
        assert rep.best_losses == [min(rep.epoch_losses[:i + 1]) for i in range(len(rep.epoch_losses))]
        assert rep.extra["eta_nominal"] == 0.3 / 2 ** len(rep.halving_events)
    prop()


def _prop_footprint_locality():
    @_FAST
    @given(seed=st.integers(0, 2**32 - 1), s_h=st.floats(0.05, 1.5), s_v=st.floats(0.05, 1.5),
           alpha=st.floats(-math.pi, math.pi), t_h=st.floats(-1, 1), t_v=st.floats(-1, 1),
           u=st.integers(1, 10), v=st.integers(1, 10))
    def prop(seed, s_h, s_v, alpha, t_h, t_v, u, v):
        rng = np.random.default_rng(seed)
        p = AffineParams(s_h, s_v, alpha, t_h, t_v)
        image = rng.random((20, 24, 3))
        out = render(image, torch.from_numpy(rng.random((3, u, v))), p).numpy()
        _, mask = trigger_grid([p], (20, 24))
        outside = ~mask[0, 0].numpy()
        assert out[outside].tobytes() == image[outside].tobytes()
    prop()


def _prop_determinism():
    ds = generate_synthetic_dataset(6, (32, 32), 9)
    model = tiny_detector(4)

    @settings(max_examples=3, deadline=None, suppress_health_check=list(HealthCheck))
    @given(seed=st.integers(0, 1000), use_fg=st.booleans())
    def prop(seed, use_fg):
        cfg = UAPGDConfig(eta0=8 / 255, n_epoch=2, batch_size=4, seed=seed)
        args = (ds, model, LossWeights(0.1 if use_fg else 0.0, 1e-4), EOTConfig(seed=seed), PlacementRule(), 0,
                init_trigger((4, 8), seed).double())
        a, ra = run_uapgd(cfg, *args)
        b, rb = run_uapgd(cfg, *args)
        assert torch.equal(a, b)
        assert ra.batch_records == rb.batch_records and ra.epoch_losses == rb.epoch_losses
    prop()


def test_criterion_6_invariants(capsys):
    timings = {}
    failures = {}
    for name, prop in [("clamping", _prop_clamping), ("L_best monotone + eta=eta0/2^h", _prop_best_monotone_and_eta),
                       ("render locality", _prop_footprint_locality), ("determinism", _prop_determinism)]:
        start = time.perf_counter()
        try:
            prop()
        except Exception as exc:  # record and keep going so every property reports
            failures[name] = repr(exc)[:200]
        timings[name] = time.perf_counter() - start
    slow = {k: v for k, v in timings.items() if v >= 30}
    passed = not failures and not slow
    detail = ", ".join(f"{k} {v:.1f}s" for k, v in timings.items()) + (f"; failures {failures}" if failures else "")
    report(capsys, 6, "invariant suite", passed, detail)
    assert not failures, failures
    assert not slow, slow


# ---------------------------------------------------------------------------
# 7. TV oracle


def test_criterion_7_tv_oracle(capsys):
    rng = np.random.default_rng(7)
    worst = 0.0
    for _ in range(50):
        u, v = rng.integers(1, 9, size=2)
        t = rng.random((3, u, v))
        worst = max(worst, abs(l_tv(torch.from_numpy(t), eps_tv=0.0).item() - naive_tv(t, 0.0)))
    report(capsys, 7, "TV oracle", worst <= 1e-10, f"max abs diff {worst:.2e} over 50 triggers")
    assert worst <= 1e-10
