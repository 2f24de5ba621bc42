"""End-to-end acceptance checks 1-14.

Each test records one PASS/FAIL line that the terminal summary prints.  The
experiment-scale checks (6-12) share one set of sweeps built by the
``experiments`` fixture; 13 reruns one of them and 14 times the lot.
"""

import os
import time
from dataclasses import replace

import numpy as np
import pytest

from deltatune import autodiff as ad
from deltatune import harness
from deltatune.autodiff import Tape
from deltatune.harness import ExperimentConfig
from deltatune.network import ChangeModel, Dense, ModelSpec, build_model, combined_forward, forward, materialize_sum
from deltatune.penalty import NormKind, PenaltyConfig, penalty_grad, penalty_value
from deltatune.tuner import StoppingPolicy, TuneConfig, tune

from builders import random_delta, random_input, random_params, random_spec
from oracles import central_difference, rel_error

pytestmark = pytest.mark.acceptance

RESULTS = {}
B_GRID = [1, 2, 4, 8, 16, 32]
WORKERS = os.cpu_count() or 1


def record(n, ok, detail):
    RESULTS[n] = f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
    return ok


# ---------------------------------------------------------------- 1-5


def test_01_zero_delta_identity():
    t0 = time.perf_counter()
    rng = np.random.default_rng(1)
    exact = 0
    for _ in range(100):
        spec = random_spec(rng)
        base = random_params(spec, rng)
        x = random_input(spec, rng)
        exact += np.array_equal(combined_forward(ChangeModel.from_base(spec, base), x).data, forward(spec, base, x).data)
    dt = time.perf_counter() - t0
    assert record(1, exact == 100 and dt < 5, f"{exact}/100 bit-identical in {dt:.2f}s")


def test_02_layerwise_sum_equivalence():
    t0 = time.perf_counter()
    rng = np.random.default_rng(2)
    worst, kinds = 0.0, set()
    for _ in range(100):
        spec = random_spec(rng)
        kinds |= {type(l).__name__ for l in spec.layers}
        base = random_params(spec, rng)
        model = ChangeModel(spec, base.copy(trainable=False), random_delta(base, rng, scale=0.5))
        x = random_input(spec, rng)
        diff = np.abs(combined_forward(model, x).data - forward(spec, materialize_sum(model), x).data).max()
        worst = max(worst, float(diff))
    dt = time.perf_counter() - t0
    ok = worst <= 1e-9 and dt < 10 and {"Dense", "Conv", "BatchNorm"} <= kinds
    assert record(2, ok, f"max abs diff {worst:.2e} over 100 deltas in {dt:.2f}s")


def _tuning_loss(model, x, y, cfg):
    return ad.softmax_cross_entropy(combined_forward(model, x), y).item() + penalty_value(model.delta, cfg)


def test_03_gradient_correctness():
    t0 = time.perf_counter()
    rng = np.random.default_rng(3)
    worst = 0.0
    for i in range(20):
        spec = random_spec(rng)
        base = random_params(spec, rng)
        delta = random_delta(base, rng, scale=0.2)
        for _, t in delta.items():
            # keep away from the l1 kink at zero
            t.data = np.where(np.abs(t.data) < 1e-3, 1e-2, t.data)
        model = ChangeModel(spec, base.copy(trainable=False), delta)
        x = random_input(spec, rng, n=3)
        y = rng.integers(0, spec.num_classes, 3)
        for kind in NormKind:
            cfg = PenaltyConfig(kind, float(rng.uniform(0.1, 2.0)))
            delta.zero_grad()
            with Tape() as tape:
                loss = ad.softmax_cross_entropy(combined_forward(model, x), y)
            ad.backward(tape, loss, delta)
            penalty_grad(delta, cfg)
            analytic = [t.grad.copy() for _, t in delta.items()]
            numeric = central_difference(lambda: _tuning_loss(model, x, y, cfg), [t.data for _, t in delta.items()],
                                         h=1e-6)
            for a, n in zip(analytic, numeric):
                worst = max(worst, float(rel_error(a, n, floor=1e-4).max()))
    dt = time.perf_counter() - t0
    assert record(3, worst < 1e-4 and dt < 30, f"max relative error {worst:.2e} over 20 networks x 3 norms in {dt:.1f}s")


def test_04_first_step_zero_penalty():
    spec = random_spec(np.random.default_rng(4))
    zero = build_model(spec, 0).zeros_like(trainable=True)
    ok = all(
        all(np.array_equal(g, np.zeros_like(g)) for g in penalty_grad(zero.copy(), PenaltyConfig(k, 3.0)).values())
        for k in NormKind
    )
    assert record(4, ok, "penalty gradient at zero change is exactly zero for L1, L2, Combined")


def test_05_stopping_semantics():
    spec = ModelSpec((Dense(2, 2),), (2,), 2)
    base = build_model(spec, 0)
    base["0.weight"].data[:] = [[1.0, 0.0], [0.0, 0.5]]
    base["0.bias"].data[:] = [0.5, 0.0]
    batch = (np.array([[1.0, 1.0]]), np.array([1]))

    def run(eps, lr=0.5, max_steps=500):
        return tune(base, spec, batch, TuneConfig.change_penalized(PenaltyConfig("L2", 0.0), lr=lr, epsilon=eps,
                                                                   max_steps=max_steps))

    r0 = run(0)
    first_correct = r0.correct_trace.index(1) + 1
    r3 = run(3)
    cap = run(0, lr=0.0)
    ok = (
        r0.converged and r0.steps_taken == first_correct
        and r3.steps_taken == first_correct + 3 and len(r3.loss_trace) == r3.steps_taken
        and cap.steps_taken == 500 and not cap.converged
    )
    assert record(5, ok, f"eps=0 stop at {r0.steps_taken}, eps=3 stop at {r3.steps_taken}, "
                         f"cap at {cap.steps_taken} converged={cap.converged}")


# ---------------------------------------------------------------- experiments


def _config(structure, methods, b_grid, out):
    return ExperimentConfig.from_dict({
        "name": structure,
        "dataset": {"structure": structure},
        "methods": methods,
        "b_grid": b_grid,
        "output_dir": str(out),
        "workers": WORKERS,
    })


CP = {"method": "ChangePenalized"}
STRUCTURES = ["OneSidedPatch", "OneSidedAttribute", "TwoSidedBackground", "SiteShift"]


@pytest.fixture(scope="session")
def experiments(tmp_path_factory):
    out = tmp_path_factory.mktemp("acceptance")
    times, data = {}, {}
    t_all = time.perf_counter()

    t0 = time.perf_counter()
    data["pretrain"] = {s: harness.cmd_pretrain(_config(s, [CP], [1], out)) for s in STRUCTURES}
    times[6] = time.perf_counter() - t0

    t0 = time.perf_counter()
    patch_methods = [dict(CP, epsilon=e) for e in (0, 5, 50)] + [{"method": "FineTune", "epsilon": e} for e in (0, 50)]
    patch = _config("OneSidedPatch", patch_methods, B_GRID, out)
    data["patch"] = harness.read_results(harness.cmd_sweep(patch, "patch.csv"))
    times["patch"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    abl = [{"method": "ChangePenalized", "norm": n, "lambda": l}
           for n in ("L1", "L2", "Combined") for l in (0.01, 1.0, 10.0) if (n, l) != ("Combined", 1.0)]
    data["ablation"] = harness.read_results(harness.cmd_sweep(_config("OneSidedPatch", abl, [32], out), "ablation.csv"))
    times["ablation"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    data["attribute"] = harness.read_results(harness.cmd_sweep(_config("OneSidedAttribute", [CP], [1], out), "attr.csv"))
    site = _config("SiteShift", [CP, {"method": "FineTune"}, {"method": "SideTune"}, {"method": "MAS"}], [1], out)
    data["site_path"] = harness.cmd_sweep(site, "site.csv")
    data["site"] = harness.read_results(data["site_path"])
    data["site_config"] = site
    times["single"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    two = _config("TwoSidedBackground", [CP, {"method": "FineTune"}], [1, 2, 4], out)
    data["two"] = harness.read_results(harness.cmd_sweep(two, "two.csv"))
    times["two"] = time.perf_counter() - t0

    times["total"] = time.perf_counter() - t_all
    data["times"] = times
    return data


def mean_delta(rows, **match):
    sel = [r for r in rows if all(r[k] == v for k, v in match.items())]
    assert sel and all(r["error"] == "" for r in sel), f"missing or failed rows for {match}"
    return float(np.mean([r["bacc_after"] - r["bacc_before"] for r in sel])), len(sel)


def test_06_bias_gap(experiments):
    gaps = {s: [r["bias_gap"] for r in rows] for s, rows in experiments["pretrain"].items()}
    dt = experiments["times"][6]
    ok = all(g >= 0.10 for v in gaps.values() for g in v) and dt < 180
    detail = "; ".join(f"{s} {min(v):.3f}..{max(v):.3f}" for s, v in gaps.items())
    assert record(6, ok, f"gap (holdout - test bacc) per seed: {detail}; pretraining {dt:.0f}s")


def test_07_single_sample_debiasing(experiments):
    patch, n1 = mean_delta(experiments["patch"], method="ChangePenalized", epsilon=0, b=1)
    attr, n2 = mean_delta(experiments["attribute"], method="ChangePenalized", b=1)
    site = {m: mean_delta(experiments["site"], method=m, b=1) for m in ("ChangePenalized", "FineTune", "SideTune", "MAS")}
    cp = site.pop("ChangePenalized")
    ok = patch > 0 and attr > 0 and cp[0] > 0 and all(cp[0] > v for v, _ in site.values())
    ok = ok and n1 == n2 == cp[1] == 15
    detail = (f"patch {patch:+.4f}, attribute {attr:+.4f}, site {cp[0]:+.4f} vs "
              + ", ".join(f"{m} {v:+.4f}" for m, (v, _) in site.items()))
    assert record(7, ok, detail + " (15 runs each)")


def test_08_two_sided_protection(experiments):
    rows = experiments["two"]
    pairs = {b: (mean_delta(rows, method="ChangePenalized", b=b)[0], mean_delta(rows, method="FineTune", b=b)[0])
             for b in (1, 2, 4)}
    ok = all(cp >= ft for cp, ft in pairs.values())
    assert record(8, ok, "CP vs FT: " + ", ".join(f"b={b} {cp:+.4f}/{ft:+.4f}" for b, (cp, ft) in pairs.items()))


def test_09_overfitting(experiments):
    rows = experiments["patch"]
    e0 = [mean_delta(rows, method="FineTune", epsilon=0, b=b)[0] for b in B_GRID]
    e50 = [mean_delta(rows, method="FineTune", epsilon=50, b=b)[0] for b in B_GRID]
    ok = all(a < b for a, b in zip(e50, e0)) and sum(v < 0 for v in e50) >= len(B_GRID) / 2
    assert record(9, ok, "FT eps=50 vs eps=0 per b: " + ", ".join(f"{a:+.3f}/{b:+.3f}" for a, b in zip(e50, e0)))


def _ablation_cells(experiments):
    cells = {}
    for r in experiments["ablation"]:
        cells.setdefault((r["norm_kind"], r["lambda"]), []).append(r)
    cells[("Combined", 1.0)] = [r for r in experiments["patch"]
                                if r["method"] == "ChangePenalized" and r["epsilon"] == 0 and r["b"] == 32]
    return cells


def test_10_ablation_ordering(experiments):
    cells = {k: mean_delta(v)[0] for k, v in _ablation_cells(experiments).items()}
    part1 = abs(cells[("Combined", 10.0)]) < abs(cells[("Combined", 1.0)])
    worst = min(cells, key=cells.get)
    part2 = worst[0] == "L1" and worst[1] >= 10
    detail = ", ".join(f"{n}/{l:g} {v:+.4f}" for (n, l), v in sorted(cells.items()))
    assert record(10, part1 and part2, f"b=32 cells: {detail}; Combined |10| < |1|: {part1}; "
                                       f"worst cell {worst[0]}/{worst[1]:g}: L1 at lambda>=10 {part2}")


def test_11_sparsity(experiments):
    cells = _ablation_cells(experiments)
    key = lambda r: (r["model_seed"], r["batch_index"])
    l1 = {key(r): r["sparsity_frac"] for r in cells[("L1", 1.0)]}
    l2 = {key(r): r["sparsity_frac"] for r in cells[("L2", 1.0)]}
    assert l1.keys() == l2.keys()
    s1, s2 = float(np.mean(list(l1.values()))), float(np.mean(list(l2.values())))
    assert record(11, s1 >= 2 * s2, f"sparsity_frac L1 {s1:.4f} vs L2 {s2:.4f} over {len(l1)} matched runs at b=32")


def test_12_epsilon_robustness(experiments):
    rows = experiments["patch"]
    means = {e: mean_delta(rows, method="ChangePenalized", epsilon=e)[0] for e in (0, 5, 50)}
    spread = max(means.values()) - min(means.values())
    per_b = {b: np.ptp([mean_delta(rows, method="ChangePenalized", epsilon=e, b=b)[0] for e in (0, 5, 50)])
             for b in B_GRID}
    detail = ", ".join(f"eps={e} {v:+.4f}" for e, v in means.items())
    per = ", ".join(f"b={b} {100 * v:.1f}" for b, v in per_b.items())
    assert record(12, spread < 0.02, f"mean over b grid: {detail}; spread {100 * spread:.2f} points "
                                     f"(per-b spreads in points: {per})")


def test_13_sweep_determinism(experiments):
    cfg = experiments["site_config"]
    again = harness.cmd_sweep(replace(cfg, workers=1), "site_rerun.csv")
    same = again.read_bytes() == experiments["site_path"].read_bytes()
    assert record(13, same, f"rerun of a {len(experiments['site'])}-row sweep "
                            f"({WORKERS} vs 1 workers) is {'byte-identical' if same else 'different'}")


def test_14_suite_runtime(experiments):
    t = experiments["times"]
    assert record(14, t["total"] < 900, f"criteria 6-12 experiments took {t['total']:.0f}s on {WORKERS} core(s) "
                                        f"(pretrain {t[6]:.0f}s, patch {t['patch']:.0f}s, ablation "
                                        f"{t['ablation']:.0f}s, b=1 sets {t['single']:.0f}s, two-sided {t['two']:.0f}s)")
