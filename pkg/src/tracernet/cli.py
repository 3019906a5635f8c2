"""``tracernet`` command line: simulate, preprocess, train, predict, evaluate, grade, report, selftest."""

from __future__ import annotations

import argparse
import csv
import logging
import sys
import time
from pathlib import Path

import numpy as np

from .config import ExperimentConfig, parse_config
from .errors import ConfigError, TracerNetError
from .evaluate import MetricReport, difference_map, eval_metrics, grade_reflux, report_table, transition_matrix
from .export import emit_csv, export_image, read_csv
from .phantom import PLANES, REFERENCE, SAS, VENTRICLE, PhantomConfig, generate_cohort
from .preprocess import build_datasets, preprocess_pair
from .tensorio import load_glt, save_glt
from .trainer import LossCurve, TrainConfig, predict, train
from .unet import UNetConfig, build_unet, load_checkpoint, save_checkpoint
from .workspace import (
    Workspace,
    load_cohort,
    load_dataset,
    run_dirname,
    save_cohort,
    save_dataset,
)

log = logging.getLogger("tracernet")

SUBCOMMANDS = ("simulate", "preprocess", "train", "predict", "evaluate", "grade", "report", "selftest")
COHORT_KEYS = ("cohort.n", "cohort.seed", "cohort.grid_size", "cohort.grade_mix", "cohort.noise_sigma",
               "cohort.transient_grades")


def phantom_config(cfg: ExperimentConfig) -> PhantomConfig:
    return PhantomConfig(grid_size=cfg["cohort.grid_size"], noise_sigma=cfg["cohort.noise_sigma"],
                         enable_transient_grades=cfg["cohort.transient_grades"])


def _cohort_digest(cfg):
    return cfg.digest(*COHORT_KEYS)


def _dataset_digest(cfg, label):
    times = ",".join(repr(t) for t in cfg.ablations[label])
    return f"{_cohort_digest(cfg)}:{cfg.digest('cohort.train_fraction', 'cohort.split_seed')}:{times}"


def _run_digest(cfg, label):
    return f"{_dataset_digest(cfg, label)}:{cfg.digest('model.', 'training.')}"


# stages

def stage_simulate(ws: Workspace, cfg: ExperimentConfig, args) -> None:
    digest = _cohort_digest(cfg)
    if ws.stamp_matches(ws.cohort_dir, digest) and (ws.cohort_dir / "manifest.tsv").exists():
        log.info("cohort up to date (%s)", digest)
        return
    t0 = time.perf_counter()
    cohort = generate_cohort(cfg["cohort.n"], cfg["cohort.seed"], cfg["cohort.grade_mix"], phantom_config(cfg))
    save_cohort(ws, cohort)
    ws.write_stamp(ws.cohort_dir, digest)
    log.info("simulated %d subjects in %.1fs", len(cohort), time.perf_counter() - t0)


def _require_cohort(ws, cfg):
    cohort = load_cohort(ws, phantom_config(cfg), cfg["cohort.seed"])
    if ws.read_stamp(ws.cohort_dir) != _cohort_digest(cfg):
        raise TracerNetError("cohort was simulated with a different configuration: run 'simulate' first")
    return cohort


def stage_preprocess(ws: Workspace, cfg: ExperimentConfig, args) -> None:
    selected = cfg.selected_ablations(args.label)
    cohort = None
    ws.datasets_dir.mkdir(parents=True, exist_ok=True)
    for label, times in selected.items():
        d = ws.dataset_dir(label)
        digest = _dataset_digest(cfg, label)
        if ws.stamp_matches(d, digest):
            log.info("dataset %r up to date", label)
            continue
        cohort = cohort or _require_cohort(ws, cfg)
        train_ds, test_ds = build_datasets(cohort, times, cfg["cohort.train_fraction"], cfg["cohort.split_seed"], label)
        save_dataset(ws, label, train_ds, test_ds)
        ws.write_stamp(d, digest)
        log.info("dataset %r: %d train / %d test, %d input channels", label, len(train_ds), len(test_ds),
                 train_ds.samples[0].n_channels)
    _merge_dataset_manifest(ws, selected)


def _merge_dataset_manifest(ws, selected):
    path = ws.datasets_dir / "manifest.tsv"
    entries = {}
    if path.exists():
        with open(path, newline="") as fh:
            for row in csv.DictReader(fh, delimiter="\t"):
                entries[row["label"]] = row["times"]
    for label, times in selected.items():
        entries[label] = ",".join(repr(float(t)) for t in times)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(["label", "dir", "times"])
        for label, times in entries.items():
            w.writerow([label, run_dirname(label), times])


def _model_config(cfg, n_in, seed):
    return UNetConfig(in_channels=n_in, out_channels=len(PLANES), base_features=cfg["model.base_features"],
                      depth=cfg["model.depth"], seed=seed)


def stage_train(ws: Workspace, cfg: ExperimentConfig, args) -> None:
    for label in cfg.selected_ablations(args.label):
        rd = ws.run_dir(label)
        digest = _run_digest(cfg, label)
        if ws.stamp_matches(rd, digest) and (rd / "checkpoint").exists():
            log.info("run %r up to date", label)
            continue
        train_ds, test_ds = load_dataset(ws, label)
        seed = cfg["training.seed"]
        n_in = train_ds.samples[0].n_channels
        if cfg["model.in_channels"] not in (0, n_in):
            raise ConfigError(f"model.in_channels = {cfg['model.in_channels']} but ablation {label!r} "
                              f"provides {n_in} input channels")
        mcfg = _model_config(cfg, n_in, seed)
        mcfg.check_extent(*train_ds.samples[0].input.shape[1:])
        rd.mkdir(parents=True, exist_ok=True)
        (rd / "config.txt").write_text(cfg.dumps())
        model = build_unet(mcfg)
        tcfg = TrainConfig(cfg["training.loss_kind"], cfg["training.epochs"], cfg["training.batch_size"],
                           cfg["training.learning_rate"], seed, cfg["training.log_every"])
        t0 = time.perf_counter()
        _, curve = train(model, train_ds, test_ds, tcfg, progress=True)
        save_checkpoint(model, rd / "checkpoint")
        emit_csv([["epoch", "train_loss", "test_loss"]] + curve.rows(), rd / "loss_curve.csv")
        ws.write_stamp(rd, digest)
        log.info("trained %r in %.1fs", label, time.perf_counter() - t0)


def _require_run(ws, cfg, label):
    rd = ws.run_dir(label)
    if not (rd / "checkpoint").exists():
        raise TracerNetError(f"missing checkpoint for {label!r}: run 'train' first")
    if ws.read_stamp(rd) != _run_digest(cfg, label):
        raise TracerNetError(f"checkpoint for {label!r} is stale: run 'train' first")
    return rd


def stage_predict(ws: Workspace, cfg: ExperimentConfig, args) -> None:
    for label in cfg.selected_ablations(args.label):
        rd = _require_run(ws, cfg, label)
        train_ds, test_ds = load_dataset(ws, label)
        model = load_checkpoint(rd / "checkpoint")
        save_glt(rd / "predictions.glt", predict(model, test_ds, cfg["training.batch_size"]))
        save_glt(rd / "predictions_raw.glt", predict(model, test_ds, cfg["training.batch_size"], clamp=False))
        save_glt(rd / "train_predictions.glt", predict(model, train_ds, cfg["training.batch_size"]))
        log.info("predicted %d test subjects for %r", len(test_ds), label)


def _require_predictions(rd, label):
    if not (rd / "predictions.glt").exists():
        raise TracerNetError(f"missing predictions for {label!r}: run 'predict' first")


def stage_evaluate(ws: Workspace, cfg: ExperimentConfig, args) -> None:
    for label in cfg.selected_ablations(args.label):
        rd = _require_run(ws, cfg, label)
        _require_predictions(rd, label)
        train_ds, test_ds = load_dataset(ws, label)
        pred = load_glt(rd / "predictions.glt")
        y = test_ds.arrays(np.float64)[1]
        mse, mae = eval_metrics(pred, y)
        mse_raw, _ = eval_metrics(load_glt(rd / "predictions_raw.glt"), y)
        tr_mse, tr_mae = eval_metrics(load_glt(rd / "train_predictions.glt"), train_ds.arrays(np.float64)[1])
        curve = _read_curve(rd / "loss_curve.csv")
        best = curve.best_test_epoch()
        emit_csv([["label", "test_mse", "test_mae", "test_mse_raw", "train_mse", "train_mae", "best_epoch"],
                  [label, mse, mae, mse_raw, tr_mse, tr_mae, best if best is not None else ""]],
                 rd / "metrics.csv")
        maps = rd / "maps"
        maps.mkdir(exist_ok=True)
        for i, s in enumerate(test_ds.samples):
            for p, plane in enumerate(PLANES):
                export_image(pred[i, p], maps / f"{s.subject_id}_{plane}_pred.pgm")
                export_image(np.clip(difference_map(pred[i, p], y[i, p]), 0.0, 1.0),
                             maps / f"{s.subject_id}_{plane}_diff.pgm")
        log.info("%r: test MSE %.3e MAE %.3e", label, mse, mae)


def _read_curve(path: Path) -> LossCurve:
    curve = LossCurve()
    for row in read_csv(path)[1:]:
        curve.append(int(row[0]), float(row[1]), float(row[2]))
    return curve


def grade_dataset(cohort, dataset, images, theta_e, tau) -> list[int]:
    """Grade each sample's (preprocessed) 24 h pair in ``images`` against its own baseline."""
    by_id = {s.subject_id: s for s in cohort.series}
    grades = []
    for i, sample in enumerate(dataset.samples):
        series = by_id[sample.subject_id]
        labels = series.subject.labels
        baseline = preprocess_pair(series.pair(0.0), labels == REFERENCE)
        g = grade_reflux(images[i], labels == VENTRICLE, labels == SAS, baseline, theta_e=theta_e, tau=tau)
        grades.append(g.grade)
    return grades


def stage_grade(ws: Workspace, cfg: ExperimentConfig, args) -> None:
    cohort = None
    for label in cfg.selected_ablations(args.label):
        rd = _require_run(ws, cfg, label)
        _require_predictions(rd, label)
        cohort = cohort or _require_cohort(ws, cfg)
        _, test_ds = load_dataset(ws, label)
        pred = load_glt(rd / "predictions.glt")
        y = test_ds.arrays(np.float64)[1]
        theta, tau = cfg["grader.theta_e"], cfg["grader.tau"]
        real = grade_dataset(cohort, test_ds, y, theta, tau)
        predicted = grade_dataset(cohort, test_ds, pred, theta, tau)
        emit_csv([["id", "true_grade", "real_grade", "pred_grade"]]
                 + [[s.subject_id, s.grade, r, p] for s, r, p in zip(test_ds.samples, real, predicted)],
                 rd / "grades.csv")
        tm = transition_matrix(real, predicted)
        emit_csv(tm.rows(), rd / "transition_matrix.csv")
        log.info("%r: grade agreement %.3f", label, tm.diagonal_mass())


def stage_report(ws: Workspace, cfg: ExperimentConfig, args) -> None:
    reports = []
    for label in cfg.selected_ablations(args.label):
        rd = _require_run(ws, cfg, label)
        path = rd / "metrics.csv"
        if not path.exists():
            raise TracerNetError(f"missing metrics for {label!r}: run 'evaluate' first")
        row = dict(zip(*read_csv(path)))
        reports.append(MetricReport(label, float(row["test_mse"]), float(row["test_mae"]),
                                    float(row["train_mse"]), float(row["train_mae"]),
                                    int(row["best_epoch"]) if row["best_epoch"] else None,
                                    float(row["test_mse_raw"])))
    text, rows = report_table(reports)
    ws.reports_dir.mkdir(parents=True, exist_ok=True)
    emit_csv(rows, ws.reports_dir / "ablation_table.csv")
    (ws.reports_dir / "ablation_table.txt").write_text(text + "\n")
    (ws.reports_dir / "config.txt").write_text(cfg.dumps())
    print(text)


def stage_selftest(ws, cfg, args) -> None:
    from .selftest import run_selftest

    failures = run_selftest(print)
    if failures:
        raise TracerNetError(f"selftest failed: {', '.join(failures)}")


STAGES = {
    "simulate": stage_simulate,
    "preprocess": stage_preprocess,
    "train": stage_train,
    "predict": stage_predict,
    "evaluate": stage_evaluate,
    "grade": stage_grade,
    "report": stage_report,
    "selftest": stage_selftest,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tracernet", description=__doc__)
    parser.add_argument("subcommand", choices=SUBCOMMANDS)
    parser.add_argument("--config", type=Path, help="key = value configuration file")
    parser.add_argument("--workspace", type=Path, help="workspace root (overrides paths.workspace)")
    parser.add_argument("--seed", type=int, help="overrides cohort.seed, cohort.split_seed and training.seed")
    parser.add_argument("--label", help="run only this ablation label")
    parser.add_argument("-v", "--verbose", action="store_true")
    return parser


def resolve_config(args) -> ExperimentConfig:
    cfg = parse_config(args.config.read_text()) if args.config else ExperimentConfig()
    if args.seed is not None:
        for key in ("cohort.seed", "cohort.split_seed", "training.seed"):
            cfg[key] = args.seed
    if args.workspace is not None:
        cfg["paths.workspace"] = str(args.workspace)
    return cfg


def dispatch(subcommand: str, args: argparse.Namespace) -> int:
    """Run one stage; returns the process exit status."""
    if subcommand not in STAGES:
        print(f"tracernet: unknown subcommand {subcommand!r}; choose from {', '.join(SUBCOMMANDS)}", file=sys.stderr)
        return 2
    try:
        cfg = resolve_config(args)
        if subcommand == "selftest":
            stage_selftest(None, cfg, args)
            return 0
        ws = Workspace(cfg["paths.workspace"])
        with ws.lock():
            STAGES[subcommand](ws, cfg, args)
    except (TracerNetError, OSError, ValueError, KeyError) as exc:
        print(f"tracernet {subcommand}: error: {exc}", file=sys.stderr)
        return 1
    return 0


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    return dispatch(args.subcommand, args)


if __name__ == "__main__":
    sys.exit(main())
