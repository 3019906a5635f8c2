"""Acceptance criteria, one test each; every test prints a PASS/FAIL line."""

import time

import numpy as np
import pytest

from tracernet.cli import main
from tracernet.evaluate import eval_metrics, grade_reflux, transition_matrix
from tracernet.export import emit_csv, export_image, parse_number, read_csv, read_pgm
from tracernet.gradcheck import grad_check
from tracernet.phantom import (
    REFERENCE,
    SAS,
    SCHEDULE,
    VENTRICLE,
    TransportModel,
    generate_cohort,
    generate_subject,
    intracranial_mass,
    simulate_tracer,
)
from tracernet.preprocess import build_datasets, preprocess_pair
from tracernet.selftest import LAYER_TOL, NET_TOL, conv3x3_reference, dyadic, layer_cases, unet_gradcheck
from tracernet.tensor import Tensor, conv3x3
from tracernet.tensorio import load_glt, save_glt
from tracernet.trainer import TrainConfig, predict, train
from tracernet.unet import UNetConfig, build_unet, load_checkpoint, save_checkpoint

pytestmark = pytest.mark.acceptance

SEEDS = (0, 1, 2)
ORDERING_LABELS = {"pre-injection": (0.0,), "1-2 hours": (1.5,), "1-9 hours": (1.5, 4.0, 6.0, 8.0)}
EPOCHS = 150


def test_criterion_1_gradient_suite(verdict):
    t0 = time.perf_counter()
    layer_errs = {}
    for seed in range(3):
        for name, fn, inputs in layer_cases(np.random.default_rng(seed)):
            layer_errs[name] = max(layer_errs.get(name, 0.0), grad_check(fn, inputs, seed=seed))
    net_err = unet_gradcheck(seed=0, max_coords=8)
    elapsed = time.perf_counter() - t0
    worst = max(layer_errs, key=layer_errs.get)
    ok = max(layer_errs.values()) < LAYER_TOL and net_err < NET_TOL and elapsed < 120
    verdict(1, ok, f"worst layer {worst} {layer_errs[worst]:.2e} (< 1e-4), depth-2/base-4 U-net {net_err:.2e} "
                   f"(< 1e-3), {elapsed:.1f}s (< 120s)")
    assert ok


def test_criterion_2_convolution_oracle(verdict):
    g = np.random.default_rng(2024)
    exact = 0
    worst_general = 0.0
    for _ in range(200):
        b, c, co = (int(v) for v in g.integers(1, 4, 3))
        h, w = (int(v) for v in g.integers(1, 9, 2))
        dtype = (np.float32, np.float64)[int(g.integers(2))]
        x, k, bias = dyadic(g, (b, c, h, w), dtype), dyadic(g, (co, c, 3, 3), dtype), dyadic(g, (co,), dtype)
        exact += np.array_equal(conv3x3(Tensor(x), Tensor(k), Tensor(bias)).data, conv3x3_reference(x, k, bias))
        xf, kf, bf = g.standard_normal(x.shape), g.standard_normal(k.shape), g.standard_normal(bias.shape)
        diff = np.abs(conv3x3(Tensor(xf), Tensor(kf), Tensor(bf)).data - conv3x3_reference(xf, kf, bf)).max()
        worst_general = max(worst_general, float(diff))
    ok = exact == 200
    verdict(2, ok, f"{exact}/200 random shapes bit-identical on exactly representable values; "
                   f"general float64 values max |diff| {worst_general:.1e} (summation order)")
    assert ok


def test_criterion_3_overfit_one_batch(verdict):
    cohort = generate_cohort(9, 11)
    train_ds, _ = build_datasets(cohort, (1.5,), 8 / 9, 0)
    X, y = train_ds.arrays()
    model = build_unet(UNetConfig(2, 2, 8, 2, seed=0))
    t0 = time.perf_counter()
    _, curve = train(model, (X, y), None, TrainConfig("L2", 200, 8, 1e-3, 0))
    elapsed = time.perf_counter() - t0
    final = curve.train_loss[-1]
    ok = final < 1e-4 and elapsed < 600
    verdict(3, ok, f"{len(X)} samples 64x64 depth-2 base-8, 200 epochs: final train loss {final:.2e} (< 1e-4), "
                   f"{elapsed:.0f}s (< 600s)")
    assert ok


@pytest.fixture(scope="session")
def ordering_runs():
    """Criterion-4 experiment: three ablations x three seeds, plus the L1 runs for criterion 5."""
    results = {"mse": {}, "mse_l1": {}, "grades": [], "seconds": 0.0, "seconds_l1": 0.0}
    for seed in SEEDS:
        cohort = generate_cohort(96, seed)
        for label, times in ORDERING_LABELS.items():
            train_ds, test_ds = build_datasets(cohort, times, 0.75, seed, label)
            assert (len(train_ds), len(test_ds)) == (72, 24)
            kinds = ("L2", "L1") if label == "1-2 hours" else ("L2",)
            for kind in kinds:
                model = build_unet(UNetConfig(2 * len(times), 2, 16, 2, seed=seed))
                t0 = time.perf_counter()
                train(model, train_ds, test_ds, TrainConfig(kind, EPOCHS, 8, 1e-3, seed, log_every=10))
                pred = predict(model, test_ds)
                results["seconds" if kind == "L2" else "seconds_l1"] += time.perf_counter() - t0
                y = test_ds.arrays(np.float64)[1]
                mse = eval_metrics(pred, y)[0]
                results["mse" if kind == "L2" else "mse_l1"][(label, seed)] = mse
                if kind == "L2" and label == "1-2 hours":
                    results["grades"] += _grade_pairs(cohort, test_ds, y, pred)
    return results


def _grade_pairs(cohort, test_ds, y, pred):
    by_id = {s.subject_id: s for s in cohort.series}
    pairs = []
    for i, sample in enumerate(test_ds.samples):
        lab = by_id[sample.subject_id].subject.labels
        base = preprocess_pair(by_id[sample.subject_id].pair(0.0), lab == REFERENCE)
        real = grade_reflux(y[i], lab == VENTRICLE, lab == SAS, base).grade
        guess = grade_reflux(pred[i], lab == VENTRICLE, lab == SAS, base).grade
        pairs.append((real, guess))
    return pairs


def test_criterion_4_ordering(ordering_runs, verdict):
    mse = ordering_runs["mse"]
    avg = {label: float(np.mean([mse[(label, s)] for s in SEEDS])) for label in ORDERING_LABELS}
    pre, early, full = avg["pre-injection"], avg["1-2 hours"], avg["1-9 hours"]
    ratio = pre / early
    minutes = ordering_runs["seconds"] / 60
    order_ok = full <= early < pre and ratio >= 1.5
    ok = order_ok and minutes < 45
    per_seed = "; ".join(f"seed {s}: " + ", ".join(f"{mse[(lbl, s)]:.2e}" for lbl in ORDERING_LABELS) for s in SEEDS)
    verdict(4, ok, f"mean test MSE pre {pre:.2e}, 1-2 h {early:.2e}, 1-9 h {full:.2e}; pre/1-2 h {ratio:.2f} "
                   f"(>= 1.5); ordering {'holds' if order_ok else 'violated'}; training {minutes:.1f} min "
                   f"(< 45) [{per_seed}]")
    assert ok


def test_criterion_5_loss_kind(ordering_runs, verdict):
    l2 = [ordering_runs["mse"][("1-2 hours", s)] for s in SEEDS]
    l1 = [ordering_runs["mse_l1"][("1-2 hours", s)] for s in SEEDS]
    wins = sum(a <= b for a, b in zip(l2, l1))
    ok = wins == len(SEEDS)
    verdict(5, ok, f"1-2 h test MSE L2 vs L1 per seed: " + ", ".join(f"{a:.2e} vs {b:.2e}" for a, b in zip(l2, l1))
            + f"; L2 <= L1 on {wins}/{len(SEEDS)} seeds")
    assert ok


def test_criterion_6_grader_calibration(verdict):
    cohort = generate_cohort(60, 606, {0: 1 / 3, 3: 1 / 3, 4: 1 / 3}, noise_free=True)
    correct = 0
    for s in cohort.series:
        lab = s.subject.labels
        ref = lab == REFERENCE
        g = grade_reflux(preprocess_pair(s.pair(24.0), ref), lab == VENTRICLE, lab == SAS,
                         preprocess_pair(s.pair(0.0), ref))
        correct += g.grade == s.subject.true_grade
    counts = {g: cohort.grades().count(g) for g in (0, 3, 4)}
    ok = correct == 60 and counts == {0: 20, 3: 20, 4: 20}
    verdict(6, ok, f"{correct}/60 noise-free subjects graded correctly (grades {counts})")
    assert ok


def test_criterion_7_transition_matrix(ordering_runs, verdict):
    real, pred = zip(*ordering_runs["grades"])
    tm = transition_matrix(real, pred)
    occupied = [g for g in range(5) if tm.row_counts[g]]
    row_err = max(abs(tm.matrix[g].sum() - 1.0) for g in occupied)
    diag = tm.diagonal_mass()
    ok = diag >= 0.70 and row_err <= 1e-9
    rows = "; ".join(f"row {g} (n={int(tm.row_counts[g])}): " + " ".join(f"{v:.2f}" for v in tm.matrix[g])
                     for g in occupied)
    verdict(7, ok, f"diagonal mass {diag:.3f} (>= 0.70) over {len(real)} test pairs, max row-sum error "
                   f"{row_err:.1e}; {rows}")
    assert ok


TINY = """
cohort.n = 8
cohort.train_fraction = 0.75
model.base_features = 4
training.epochs = 3
training.batch_size = 3
ablation.pre-injection = 0
ablation.1-2 hours = 1.5
"""


def test_criterion_8_determinism_and_persistence(tmp_path, verdict):
    cfg = tmp_path / "tiny.cfg"
    cfg.write_text(TINY)
    outputs = []
    for ws in ("a", "b"):
        argv = ["--config", str(cfg), "--workspace", str(tmp_path / ws)]
        for stage in ("simulate", "preprocess", "train", "predict", "evaluate", "grade", "report"):
            assert main([stage] + argv) == 0
        root = tmp_path / ws
        files = sorted(p.relative_to(root) for p in root.rglob("*") if p.is_file() and p.name != "config.txt")
        outputs.append({f: (root / f).read_bytes() for f in files})
    same_runs = outputs[0].keys() == outputs[1].keys() and all(outputs[0][f] == outputs[1][f] for f in outputs[0])

    g = np.random.default_rng(8)
    model = build_unet(UNetConfig(2, 2, 4, 2, seed=3))
    save_checkpoint(model, tmp_path / "ck")
    loaded = load_checkpoint(tmp_path / "ck")
    ck_ok = all(np.array_equal(loaded.store[n].data, model.store[n].data) for n in model.store)
    save_checkpoint(loaded, tmp_path / "ck2")
    ck_ok &= (tmp_path / "ck").read_bytes() == (tmp_path / "ck2").read_bytes()
    arr = g.standard_normal((3, 4, 5)).astype(np.float32)
    save_glt(tmp_path / "t.glt", arr)
    glt_ok = load_glt(tmp_path / "t.glt").tobytes() == arr.tobytes()
    img = g.random((9, 7))
    export_image(img, tmp_path / "i.pgm")
    pgm_ok = np.array_equal(read_pgm(tmp_path / "i.pgm"), np.floor(img * 65535 + 0.5))
    vals = list(g.standard_normal(20) * 10.0 ** g.integers(-9, 9, 20))
    emit_csv([vals], tmp_path / "v.csv")
    csv_ok = [parse_number(s) for s in read_csv(tmp_path / "v.csv")[0]] == vals
    ok = same_runs and ck_ok and glt_ok and pgm_ok and csv_ok
    verdict(8, ok, f"two identical pipeline runs byte-identical over {len(outputs[0])} files: {same_runs}; "
                   f"round-trips checkpoint {ck_ok}, GLT1 {glt_ok}, PGM {pgm_ok}, CSV {csv_ok}")
    assert ok


def test_criterion_9_simulator_contracts(verdict):
    k24 = SCHEDULE.index(24.0)
    peak_ok = clear_ok = dose_ok = 0
    ratios = {0: [], 3: [], 4: []}
    worst_dose = worst_clear = 0.0
    for seed in range(100):
        grade = (0, 3, 4)[seed % 3]
        s = generate_subject(1000 + seed, grade_target=grade)
        conc = simulate_tracer(s, SCHEDULE)
        mass = intracranial_mass(conc)
        peak_ok += all(mass[k24, p] > np.delete(mass[:, p], k24).max() for p in range(2))
        clear = float((mass[-1] / mass[k24]).max())
        clear_ok += clear < 0.01
        dose = float((mass / TransportModel(s).injected_dose).max())
        dose_ok += dose <= 0.25
        worst_dose, worst_clear = max(worst_dose, dose), max(worst_clear, clear)
        c = conc[k24]
        ratios[grade].append(c[s.labels == VENTRICLE].mean() / c[s.labels == SAS].mean())
    mono = max(ratios[0]) < min(ratios[3]) and max(ratios[3]) < min(ratios[4])
    ok = peak_ok == clear_ok == dose_ok == 100 and mono
    spans = ", ".join(f"grade {g} [{min(v):.2f}, {max(v):.2f}]" for g, v in ratios.items())
    verdict(9, ok, f"100 subjects: peak at 24 h {peak_ok}/100, 696 h mass < 1% of peak {clear_ok}/100 "
                   f"(worst {worst_clear:.1e}), mass <= 0.25 dose {dose_ok}/100 (worst {worst_dose:.3f}); "
                   f"ventricle/SAS ratio {spans}, monotone {mono}")
    assert ok
