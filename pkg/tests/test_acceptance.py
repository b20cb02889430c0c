"""Acceptance checks, one per criterion.

Each test prints a single ``PASS``/``FAIL`` line straight to the terminal
(bypassing pytest's capture) and then asserts. The file also runs as a
script: ``python tests/test_acceptance.py``.
"""

import itertools
import math
import sys
import time
import zlib

import numpy as np
import pytest

from fetsim import autodiff as ad
from fetsim.accountant import (AccountantState, compose_epsilon, epsilon_curve, gaussian_delta,
                               analytic_gaussian_sigma, sigma_for_budget)
from fetsim.experiments import desk_config, make_data, run_experiment
from fetsim.linkage import knn_link, split_features
from fetsim.model import FederatedTransformer, ModelConfig, party_dropout
from fetsim.mpc import SecureAggregator, Transcript, encode, secure_sum, share, transcript_leakage_check
from fetsim.splitavg import clip_representation, draw_party_noise, per_sample_norms

pytestmark = pytest.mark.slow

SEEDS = (0, 1, 2, 3, 4)
_CACHE: dict = {}


def report(number: int, ok: bool, detail: str) -> None:
    line = f"{'PASS' if ok else 'FAIL'} criterion {number}: {detail}"
    capsys = _CACHE.get("capsys")
    if capsys is None:
        print(line, flush=True)
        return
    with capsys.disabled():
        print(line, flush=True)


@pytest.fixture(autouse=True)
def _uncaptured_report(capsys):
    _CACHE["capsys"] = capsys
    yield
    _CACHE.pop("capsys", None)


# -- 1. gradients -----------------------------------------------------------------------


def _op_cases(rng):
    def p(*shape):
        return ad.Tensor(rng.normal(size=shape), requires_grad=True)

    a, b = p(3, 4), p(3, 4)
    m = p(4, 2)
    g, beta = p(4), p(4)
    mask = p(3, 4)
    labels = rng.integers(0, 4, 3)
    return {
        "matmul": (lambda: ad.tsum(ad.tanh(a @ m)), [a, m]),
        "add/sub/mul/div": (lambda: ad.tsum((a + b) * (a - b) / (ad.square(b) + 1.0)), [a, b]),
        "exp/log/sqrt": (lambda: ad.tsum(ad.log(ad.exp(a * 0.3) + 1.0) * ad.sqrt(ad.square(b) + 0.5)), [a, b]),
        "relu/maximum": (lambda: ad.tsum(ad.relu(a) * b + ad.maximum(b, 0.37)), [a, b]),
        "softmax+mask": (lambda: ad.tsum(ad.softmax(a, mask) * b), [a, b, mask]),
        "log_softmax": (lambda: ad.tsum(ad.log_softmax(a) * b), [a, b]),
        "layer_norm": (lambda: ad.tsum(ad.layer_norm(a, g, beta) * b), [a, b, g, beta]),
        "reshape/transpose/getitem": (
            lambda: ad.tsum(ad.reshape(ad.transpose(a, (1, 0)), (12,))[2:9] * 1.7), [a]),
        "concat/stack/mean": (
            lambda: ad.tsum(ad.tmean(ad.concat([a, b], axis=0), axis=1) * 2.0)
            + ad.tsum(ad.square(ad.stack([a, b], axis=0))), [a, b]),
        "cross_entropy": (lambda: ad.cross_entropy(a, labels), [a]),
        "mse": (lambda: ad.mse_loss(a, b.data), [a]),
    }


def _relu_margin(model, batch):
    """Smallest |pre-activation| over every ReLU in one forward pass."""
    seen = []
    relu = ad.relu

    def spy(a):
        seen.append(float(np.min(np.abs(a.data))))
        return relu(a)

    ad.relu = spy
    try:
        model.forward(batch)
    finally:
        ad.relu = relu
    return min(seen)


def _smooth_toy_batch(model, rng, step=1e-4):
    """Draw toy batches until no ReLU sits within ten FD steps of its kink.

    Central differences only estimate the derivative where the loss is smooth
    over [x - step, x + step]; a pre-activation closer to zero than that makes
    the oracle itself wrong, whatever the tape computes.
    """
    from fetsim.linkage import LinkedBatch

    for _ in range(100):
        batch = LinkedBatch(np.arange(3), rng.normal(size=(3, 2)), rng.normal(size=(3, 3)),
                            np.array([0, 1, 1]), [np.zeros((3, 2), dtype=int)],
                            [rng.normal(size=(3, 2, 2))], [rng.normal(size=(3, 2, 2))],
                            [np.zeros((3, 2), dtype=int)])
        if _relu_margin(model, batch) > 10 * step:
            return batch
    raise RuntimeError("no smooth toy batch found")


def test_criterion_1_gradients():
    started = time.perf_counter()
    rng = np.random.default_rng(zlib.crc32(b"criterion-1"))
    worst, worst_name = 0.0, ""
    for name, (fn, params) in _op_cases(rng).items():
        err = ad.gradcheck(fn, params)
        if err > worst:
            worst, worst_name = err, name
    cfg = ModelConfig(hidden_size=4, num_heads=2, num_blocks=1, num_neighbors=2, num_parties=1,
                      key_dims=2, pe_max_frequency=10.0, mask_hidden=4,
                      mask_input=desk_config().model.mask_input)
    model = FederatedTransformer(cfg, 3, [2], out_dim=2, seed=0)
    batch = _smooth_toy_batch(model, rng)
    fet_err = ad.gradcheck(lambda: ad.cross_entropy(model.forward(batch), batch.labels),
                           model.parameters())
    elapsed = time.perf_counter() - started
    ok = worst < 1e-3 and fet_err < 1e-3 and elapsed < 120
    report(1, ok, f"worst op rel err {worst:.2e} ({worst_name}), 2-party FeT rel err "
                  f"{fet_err:.2e}, {elapsed:.1f}s")
    assert ok


# -- 2. clipped sum bound ---------------------------------------------------------------------


def test_criterion_2_clipped_sum_bound():
    rng = np.random.default_rng(2)
    violations, worst = 0, 0.0
    c = 1.0
    for k in (2, 5, 10, 50):
        for _ in range(1000):
            scale = 10.0 ** rng.uniform(-3, 2)
            if rng.random() < 0.5:
                reps = [rng.normal(0, scale, size=(8, 2, 6)) for _ in range(k)]
            else:   # all parties aligned: the triangle inequality is tight
                base = rng.normal(0, scale, size=(8, 2, 6))
                reps = [base * rng.uniform(0.5, 2.0) for _ in range(k)]
            reps = [clip_representation(r, c, k).data for r in reps]
            norms = per_sample_norms(np.sum(reps, axis=0))
            violations += int(np.sum(norms > c))
            worst = max(worst, float(norms.max()))
    ok = violations == 0
    report(2, ok, f"{violations} violations over 4x1000 batches, max norm {worst:.12f} (C=1)")
    assert ok


# -- 3. MPC -----------------------------------------------------------------------------------


def test_criterion_3_mpc():
    rng = np.random.default_rng(3)
    worst = 0.0
    for k in (2, 5, 10, 20, 50, 100):
        values = [rng.normal(size=10_000) for _ in range(k)]
        out = SecureAggregator().sum(values, [np.random.default_rng(1000 + i) for i in range(k)])
        worst = max(worst, float(np.max(np.abs(out - np.sum(values, axis=0)))))
    transcript = Transcript()
    values = [rng.normal(size=10_000) for _ in range(5)]
    svs = [share(encode(v), 5, np.random.default_rng(50 + i), owner=i) for i, v in enumerate(values)]
    secure_sum(svs, transcript)
    leak = transcript_leakage_check(transcript, {i: encode(v).values for i, v in enumerate(values)})
    ok = worst < 1e-4 and leak.passed and leak.min_p_value > 0.01
    report(3, ok, f"max |secure - plain| {worst:.2e}; share-stream min p {leak.min_p_value:.3f}, "
                  f"verbatim hits {leak.verbatim_hits}")
    assert ok


# -- 4. noise calibration -----------------------------------------------------------------


def test_criterion_4_noise_calibration():
    sigma, c, draws = 1.1, 0.8, 50_000
    worst, details = 0.0, []
    for k, rate in itertools.product((2, 10), (0.0, 0.6)):
        rng = np.random.default_rng(k * 10 + int(rate * 10))
        survivors, active = party_dropout(list(range(k)), rate, True, rng)
        total = sum(draw_party_noise((draws,), sigma, c, active, rng) for _ in survivors)
        rel = abs(total.var() / (c * sigma) ** 2 - 1)
        worst = max(worst, rel)
        details.append(f"k={k},rd={rate}:{rel:.3%}")
    ok = worst < 0.03
    report(4, ok, "relative variance error " + " ".join(details))
    assert ok


# -- 5. accountant ------------------------------------------------------------------------


def test_criterion_5_accountant():
    import dp_accounting

    slack_ok, minimal_ok = True, True
    for eps, delta in itertools.product((0.2, 1.0, 4.0), (1e-3, 1e-6, 1e-9)):
        s = analytic_gaussian_sigma(eps, delta)
        gap = delta - gaussian_delta(s, eps)
        slack_ok &= 0 <= gap < 1e-9
        minimal_ok &= gaussian_delta(s - 1e-4, eps) > delta
    worst = 0.0
    grid = list(itertools.product((0.8, 1.5, 3.0, 6.0, 10.0), (0.01, 0.1), (100, 5000)))
    for sigma, q, steps in grid:
        ours = compose_epsilon(AccountantState(sigma, q, 1e-5, steps_taken=steps))
        acct = dp_accounting.rdp.RdpAccountant(orders=list(range(2, 257)))
        acct.compose(dp_accounting.PoissonSampledDpEvent(q, dp_accounting.GaussianDpEvent(sigma)), steps)
        ref = acct.get_epsilon(1e-5)
        worst = max(worst, abs(ours - ref) / ref)
    dominated = all(r["eps_with_mpc"] <= r["eps_rdp_no_mpc"]
                    for k in (2, 5, 10, 50)
                    for r in epsilon_curve(np.linspace(0.5, 8, 16), 0.01, 1000, 1e-5, k))
    ok = slack_ok and minimal_ok and worst < 0.05 and len(grid) == 20 and dominated
    report(5, ok, f"slack<1e-9 {slack_ok}, minimal {minimal_ok}, max rel gap to reference "
                  f"{worst:.3%} over {len(grid)} points, MPC curve dominates {dominated}")
    assert ok


# -- 6. sigma scaling ------------------------------------------------------------------------


def test_criterion_6_sigma_scaling():
    eps, delta = 0.5, 1e-5
    ratios = []
    for q, steps in itertools.product((0.01, 0.1), (10_000, 100_000, 1_000_000)):
        ratios.append(sigma_for_budget(eps, delta, q, steps) / (q * math.sqrt(steps)))
    c = math.exp(np.mean(np.log(ratios)))
    spread = max(abs(r / c - 1) for r in ratios)
    ok = spread < 0.10
    report(6, ok, f"sigma/(q*sqrt(BT)) = {c:.3f} with max deviation {spread:.2%} "
                  f"over q*sqrt(BT) in [1, 100]")
    assert ok


# -- 7. linkage -----------------------------------------------------------------------------


def test_criterion_7_linkage():
    rng = np.random.default_rng(7)
    mismatches = 0
    for _ in range(200):
        n = int(rng.integers(20, 2001))
        b, d = int(rng.integers(1, 40)), int(rng.integers(1, 6))
        k = int(rng.integers(1, min(n, 50) + 1))
        if rng.random() < 0.3:
            cand, prim = rng.integers(0, 4, (n, d)).astype(float), rng.integers(0, 4, (b, d)).astype(float)
        else:
            cand, prim = rng.normal(size=(n, d)), rng.normal(size=(b, d))
        dist = np.sqrt(((prim[:, None, :] - cand[None, :, :]) ** 2).sum(-1))
        brute = np.array([sorted(range(n), key=lambda j: (dist[i, j], j))[:k] for i in range(b)])
        mismatches += int(not np.array_equal(knn_link(prim, cand, k), brute))
    X = rng.normal(size=(2000, 12))
    parties = split_features(X, np.zeros(2000), 5, rng, key_noise=0.0)
    exact = min(float(np.mean(knn_link(parties[0].keys, s.keys, 1)[:, 0] == np.arange(2000)))
                for s in parties[1:])
    ok = mismatches == 0 and exact == 1.0
    report(7, ok, f"{mismatches}/200 instances differ from brute force; exact-key alignment {exact:.0%}")
    assert ok


# -- 8-10. desk-scale experiments ---------------------------------------------------------------


VARIANTS = ("fet", "fet_nodm", "solo", "top1sim")


def variant_config(name: str):
    cfg = desk_config()
    cfg.train.model = name.split("_")[0]
    if name == "fet_nodm":
        cfg.model.dynamic_mask = False
    return cfg


def run_variant(name: str, seed: int, data=None, **model_kw):
    cfg = variant_config(name)
    for key, value in model_kw.items():
        setattr(cfg.model, key, value)
    return run_experiment(cfg, seed, data=data)


def ordering_results():
    if "ordering" not in _CACHE:
        started = time.perf_counter()
        results = {v: [] for v in VARIANTS}
        for seed in SEEDS:
            data = make_data(desk_config(), seed)
            for name in VARIANTS:
                results[name].append(run_variant(name, seed, data))
        _CACHE["ordering"] = (results, time.perf_counter() - started)
    return _CACHE["ordering"]


def test_criterion_8_performance_ordering():
    results, elapsed = ordering_results()
    mean = {k: float(np.mean([m.test_metric for m in v])) for k, v in results.items()}
    fet_top1 = mean["fet"] > mean["top1sim"]
    fet_solo = mean["fet"] - mean["solo"] >= 0.02
    dm = mean["fet"] - mean["fet_nodm"] >= 0.01
    fast = elapsed < 30 * 60
    ok = fet_top1 and fet_solo and dm and fast
    summary = ", ".join(f"{k} {v:.4f}" for k, v in mean.items())
    report(8, ok, f"mean test accuracy over {len(SEEDS)} seeds: {summary}; FeT>Top1Sim {fet_top1}, "
                  f"FeT-Solo>=2pt {fet_solo}, DM-noDM>=1pt {dm}; {elapsed / 60:.1f} min")
    assert ok


def test_criterion_9_party_dropout():
    base, _ = ordering_results()
    seeds = SEEDS[:3]
    runs = {0.0: base["fet"][:len(seeds)]}
    for rate in (0.6, 1.0):
        runs[rate] = [run_variant("fet", s, party_dropout=rate) for s in seeds]
    acc = {r: float(np.mean([m.test_metric for m in ms])) for r, ms in runs.items()}
    per_step = {r: float(np.mean([m.comm_bytes / m.steps for m in ms])) for r, ms in runs.items()}
    ratio = per_step[0.6] / per_step[0.0]
    keep = acc[0.6] >= acc[0.0] - 0.01
    degrade = acc[0.0] - acc[1.0] >= 0.05
    comm = abs(ratio - 0.40) <= 0.02
    ok = keep and degrade and comm
    report(9, ok, f"accuracy rd=0 {acc[0.0]:.4f}, rd=0.6 {acc[0.6]:.4f}, rd=1.0 {acc[1.0]:.4f} "
                  f"(mean of {len(seeds)} seeds); upload bytes per step at rd=0.6 are "
                  f"{ratio:.1%} of rd=0")
    assert ok


def test_criterion_10_determinism():
    results, _ = ordering_results()
    seed = SEEDS[0]
    data = make_data(desk_config(), seed)
    same = {name: run_variant(name, seed, data).trace() == results[name][0].trace()
            for name in VARIANTS}
    ok = all(same.values())
    report(10, ok, "identical traces on rerun: " + ", ".join(f"{k} {v}" for k, v in same.items()))
    assert ok


if __name__ == "__main__":
    failures = 0
    tests = [(int(n.split("_")[2]), fn) for n, fn in globals().items() if n.startswith("test_criterion_")]
    for _, fn in sorted(tests, key=lambda t: t[0]):
        try:
            fn()
        except AssertionError:
            failures += 1
    sys.exit(1 if failures else 0)
