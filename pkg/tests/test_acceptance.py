"""Acceptance suite: one recorded pass/fail line per criterion.

The training criteria (6, 7, 9) share a session cache of runs so each
configuration is trained once.  Run only this file with

    pytest tests/test_acceptance.py -v

and read the "acceptance criteria" section at the end of the report.
"""

import math
import time
from collections import Counter

import numpy as np
import pytest

from mixsup import losses as L
from mixsup.experiments import box_only, run_ablation, summarize, synthetic_benchmark
from mixsup.gradcheck import _case
from mixsup.metrics import weighted_average
from mixsup.trainer import TrainConfig, point_predictions, train

# -- criterion 1: wAVG recomputed from a reference per-dataset results table ---

COUNTS = (380, 100, 62, 60, 196)   # ColonDB, Kvasir, ClinicDB, EndoScene, ETIS
# method: (per-dataset (Dice, IoU) pairs in COUNTS order, printed wAVG (Dice, IoU)), in %
REFERENCE_TABLE = {
    "U-Net": ([(51.2, 44.4), (81.8, 74.6), (82.3, 75.0), (71.0, 62.7), (39.8, 33.5)], (56.1, 49.3)),
    "PraNet": ([(70.9, 64.0), (89.8, 84.0), (89.9, 84.9), (87.1, 79.7), (62.8, 56.7)], (74.0, 67.5)),
    "SANet": ([(75.3, 67.0), (90.4, 84.7), (91.6, 85.9), (88.8, 81.5), (75.0, 65.4)], (79.4, 71.4)),
    "Polyp-Pvt": ([(80.8, 72.7), (91.7, 86.4), (93.7, 88.9), (90.0, 83.3), (78.7, 70.6)], (83.3, 76.0)),
    "LDNet": ([(79.4, 71.5), (91.2, 85.5), (92.3, 87.2), (89.3, 82.6), (77.8, 70.7)], (82.2, 75.1)),
    "HSNet": ([(81.0, 73.5), (92.6, 87.7), (94.8, 90.5), (90.3, 83.9), (80.8, 73.4)], (84.2, 77.4)),
    "UCFA-Net": ([(82.3, 74.1), (91.7, 86.8), (93.4, 87.0), (89.7, 83.0), (82.3, 74.3)], (84.8, 77.3)),
    "CAFE-Net": ([(82.0, 74.0), (93.3, 88.9), (94.3, 89.9), (90.1, 83.4), (82.2, 73.8)], (84.9, 77.7)),
    "mixed (proposed)": ([(82.8, 74.5), (91.7, 86.2), (91.9, 86.7), (90.7, 83.9), (85.1, 77.6)], (85.8, 78.3)),
}


def test_c1_wavg_oracle(acceptance):
    t0 = time.perf_counter()
    bad = []
    for method, (rows, printed) in REFERENCE_TABLE.items():
        for j, metric in enumerate(("Dice", "IoU")):
            # independent oracle: plain weighted sum, then the library implementation
            oracle = sum(n * r[j] for n, r in zip(COUNTS, rows)) / sum(COUNTS)
            ours = weighted_average([(n, r[j]) for n, r in zip(COUNTS, rows)])
            assert abs(ours - oracle) <= 1e-9
            if abs(ours - printed[j]) > 0.05 + 1e-9:
                bad.append(f"{method} {metric} {ours:.3f} vs printed {printed[j]}")
    dt = time.perf_counter() - t0
    ok = not bad and dt < 1.0
    acceptance("1", ok, f"18 wAVG values, {len(bad)} outside +-0.05 pp"
               + (f": {'; '.join(bad)}" if bad else "") + f" ({dt * 1e3:.1f} ms)")
    assert ok, bad


# -- criterion 2: uncertainty loss shape -----------------------------------------

def test_c2_uncertainty_loss(acceptance):
    t0 = time.perf_counter()
    at_half = abs(float(L.uncertainty_loss(0.5)) - math.log(2))
    p = np.random.default_rng(0).random(1000)
    sym = float(np.abs(L.uncertainty_loss(p) - L.uncertainty_loss(1 - p)).max())
    grid = np.linspace(0.5, 1 - L.EPS, 100_001)[1:]
    vals = L.uncertainty_loss(grid)
    mono = bool((np.diff(vals) < 0).all())
    dt = time.perf_counter() - t0
    ok = at_half <= 1e-9 and sym <= 1e-12 and mono and dt < 1.0
    acceptance("2", ok, f"|U(0.5)-ln2|={at_half:.1e}, symmetry max dev {sym:.1e} on 1000 pts, "
               f"strictly decreasing on {grid.size} grid pts: {mono} ({dt:.2f} s)")
    assert ok


# -- criterion 3: analytic gradients vs central differences ----------------------

def _fd(f, z, h=1e-4):
    g = np.empty_like(z)
    for idx in np.ndindex(z.shape):
        zp = z.copy()
        zp[idx] += h
        zm = z.copy()
        zm[idx] -= h
        g[idx] = (f(zp) - f(zm)) / (2 * h)
    return g


def test_c3_gradient_checks(acceptance):
    t0 = time.perf_counter()
    worst = {}
    for k, name in enumerate(("bce", "dice", "dense", "box", "scribble", "point")):
        rng = np.random.default_rng([2024, k])
        w = 0.0
        for _ in range(100):
            z, f = _case(name, rng)
            g = f(z)[1]
            fd = _fd(lambda zz: f(zz)[0], z)
            w = max(w, np.linalg.norm(g - fd) / max(np.linalg.norm(fd), np.linalg.norm(g), 1e-12))
        worst[name] = w
    dt = time.perf_counter() - t0
    ok = all(v <= 1e-3 for v in worst.values()) and dt < 60
    acceptance("3", ok, "max rel err " + ", ".join(f"{k} {v:.1e}" for k, v in worst.items())
               + f" over 100 trials each ({dt:.1f} s)")
    assert ok, worst


# -- criterion 4: M2B properties -------------------------------------------------

def test_c4_m2b_properties(acceptance):
    t0 = time.perf_counter()
    rng = np.random.default_rng(7)
    idem = dom = rect = 0.0
    for _ in range(1000):
        h, w = rng.integers(1, 20, 2)
        p = rng.random((h, w))
        b = L.m2b(p).probs
        idem = max(idem, float(np.abs(L.m2b(b).probs - b).max()))
        dom = max(dom, float((p - b).max()))
        r0, r1 = np.sort(rng.integers(0, h, 2))
        c0, c1 = np.sort(rng.integers(0, w, 2))
        m = np.zeros((h, w))
        m[r0:r1 + 1, c0:c1 + 1] = 1.0
        rect = max(rect, float(np.abs(L.m2b(m).probs - m).max()))
    soft = L.m2b(np.array([[0.2, 0.8], [0.6, 0.1]])).probs
    ex = float(np.abs(soft - np.array([[0.6, 0.8], [0.6, 0.6]])).max())
    dt = time.perf_counter() - t0
    ok = idem <= 1e-12 and dom <= 0 and rect == 0 and ex <= 1e-12 and dt < 10
    acceptance("4", ok, f"idempotence dev {idem:.1e}, dominance violation {max(dom, 0):.1e}, "
               f"rectangle dev {rect:.1e} on 1000 masks, 2x2 example dev {ex:.1e} ({dt:.2f} s)")
    assert ok


# -- criterion 5: rotation-consistency zero case ---------------------------------

class _IdentityStub:
    class config:
        in_channels = 3

    params: dict = {}

    def forward(self, x, return_cache=False):
        y = x[:, 0].copy()
        return (y, None) if return_cache else y


def test_c5_rotation_zero_case(acceptance):
    t0 = time.perf_counter()
    rng = np.random.default_rng(11)
    vals = []
    for _ in range(100):
        n = int(rng.integers(8, 65))
        x = rng.normal(size=(1, 3, n, n))
        logits, _, back, _ = point_predictions(_IdentityStub(), x)
        vals.append(L.consistency_loss(L.PredictionMap.from_logits(logits[0]),
                                       L.PredictionMap.from_logits(back[0])))
    dt = time.perf_counter() - t0
    ok = all(v == 0.0 for v in vals) and dt < 5
    acceptance("5", ok, f"{sum(v == 0.0 for v in vals)}/100 exact zeros ({dt:.2f} s)")
    assert ok


# -- criterion 8: loss accounting and routing ------------------------------------

def test_c8_accounting_and_routing(acceptance, bench):
    t0 = time.perf_counter()
    res = train(TrainConfig(iterations=100, seed=0), bench.train_sets)
    worst = 0.0
    for r in res.history:
        s = math.fsum(r.losses.components())
        worst = max(worst, abs(r.losses.l_total - s) / max(abs(s), 1e-300))
    counts = Counter(r.kind for r in res.history)
    dt = time.perf_counter() - t0
    ok = worst <= 1e-9 and len(res.history) == 100 and sorted(counts.values()) == [20] * 5 \
        and dt < 120
    acceptance("8", ok, f"max rel |l_total - sum| {worst:.1e}; steps per kind "
               f"{dict(sorted(counts.items()))} ({dt:.0f} s)")
    assert ok


# -- training criteria -----------------------------------------------------------

SEEDS = (0, 1, 2)
# Pilot (seed 0, default config): mixed 0.971, box-only 0.977 test Dice.  The
# stated thresholds hold with margin, so they are pinned unchanged.
MIN_DICE = 0.80
MAX_GAP_PP = 2.0
ABLATION_SLACK_PP = 0.5


@pytest.fixture(scope="session")
def bench():
    return synthetic_benchmark(data_seed=0)


class RunCache:
    def __init__(self, bench, root):
        self.bench = bench
        self.root = root
        self.runs = {}

    def get(self, sets: str, cfg: TrainConfig, tag: str = ""):
        key = (sets, repr(sorted(cfg.to_dict().items())), tag)
        if key not in self.runs:
            data = self.bench.train_sets if sets == "mixed" else box_only(self.bench)
            out = self.root / f"{sets}_{len(self.runs)}"
            t0 = time.perf_counter()
            res = train(cfg, data, val_sets=self.bench.test_sets, out_dir=out)
            self.runs[key] = (res, out, time.perf_counter() - t0)
        return self.runs[key]


@pytest.fixture(scope="session")
def runs(bench, tmp_path_factory):
    return RunCache(bench, tmp_path_factory.mktemp("acceptance_runs"))


@pytest.mark.slow
def test_c6_desk_scale_training(acceptance, runs):
    mixed, box, secs = [], [], 0.0
    for s in SEEDS:
        res, _, dt = runs.get("mixed", TrainConfig(seed=s))
        mixed.append(res.final_val_dice)
        secs += dt
        res, _, dt = runs.get("box", TrainConfig(seed=s))
        box.append(res.final_val_dice)
        secs += dt
    gap = 100 * (np.mean(box) - np.mean(mixed))
    ok = min(mixed) >= MIN_DICE and gap <= MAX_GAP_PP and secs < 15 * 60
    acceptance("6", ok, f"mixed Dice {', '.join(f'{d:.4f}' for d in mixed)} (mean {np.mean(mixed):.4f}); "
               f"box-only mean {np.mean(box):.4f}; box - mixed = {gap:+.2f} pp; "
               f"6 runs in {secs / 60:.1f} min")
    assert ok


@pytest.mark.slow
def test_c6b_training_loss_decreases(acceptance, runs):
    res, _, _ = runs.get("mixed", TrainConfig(seed=0))

    def window(lo):
        v = [r.losses.l_total for r in res.history[lo:lo + 20] if r.kind in ("pixel", "polygon")]
        return float(np.mean(v))

    early, late = window(40), window(len(res.history) - 20)
    ok = late < early
    acceptance("6b", ok, f"dense loss mean over steps 40-59: {early:.4f}; "
               f"over the final 20 steps: {late:.4f}")
    assert ok


@pytest.mark.slow
def test_c7_ablation_direction(acceptance, runs, bench):
    t0 = time.perf_counter()
    reused = 0.0

    def runner(name, cfg):
        nonlocal reused
        before = len(runs.runs)
        res, _, dt = runs.get("mixed", cfg)
        if len(runs.runs) == before:
            reused += dt
        return res.model

    summ = {r["Uncertain"] + r["Consistency"]: r["Dice"]
            for r in summarize(run_ablation(bench, SEEDS, TrainConfig(), runner=runner))}
    base, unc, full = summ[0], summ[1], summ[2]
    secs = time.perf_counter() - t0 + reused
    ok = unc >= base - ABLATION_SLACK_PP and full >= unc - ABLATION_SLACK_PP and secs < 45 * 60
    acceptance("7", ok, f"mean Dice base {base:.2f}, +Uncertain {unc:.2f}, "
               f"+Uncertain+Consistency {full:.2f} (%, 3 seeds; {secs / 60:.1f} min incl. reused runs)")
    assert ok


@pytest.mark.slow
def test_c9_determinism(acceptance, runs):
    first, out1, dt1 = runs.get("mixed", TrainConfig(seed=0))
    second, out2, dt2 = runs.get("mixed", TrainConfig(seed=0), tag="repeat")
    same_csv = (out1 / "history.csv").read_bytes() == (out2 / "history.csv").read_bytes()
    diff = abs(first.final_val_dice - second.final_val_dice)
    ok = same_csv and diff < 1e-6
    acceptance("9", ok, f"history.csv byte-identical: {same_csv}; final val Dice diff {diff:.1e} "
                        f"({dt1:.0f} s + {dt2:.0f} s)")
    assert ok
