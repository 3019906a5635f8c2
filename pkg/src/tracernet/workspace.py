"""On-disk layout of an experiment workspace.

::

    workspace/
      .lock
      cohort/manifest.tsv, cohort/{subject}/{plane}_{timecode}.glt, labels.glt
      datasets/manifest.tsv, datasets/{run}/{split}_{inputs|targets}.glt
      runs/{run}/checkpoint, loss_curve.csv, config.txt, predictions.glt, ...
      reports/

``{run}`` is the ablation label with anything outside ``[A-Za-z0-9._-]``
replaced by ``_``. Every stage writes a stamp holding a digest of the
configuration it was produced from, which makes re-runs on unchanged inputs
no-ops.
"""

from __future__ import annotations

import csv
import os
import re
from contextlib import contextmanager
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np

from .errors import PipelineError
from .phantom import (
    PLANES,
    SCHEDULE,
    Cohort,
    Kinetics,
    PhantomConfig,
    PhantomSubject,
    SubjectSeries,
    TimePointImage,
    timecode,
)
from .preprocess import Dataset, Sample
from .tensorio import load_glt, save_glt

STAMP = ".stamp"
_KIN_FIELDS = [f.name for f in fields(Kinetics)]


def run_dirname(label: str) -> str:
    return re.sub(r"[^A-Za-z0-9._-]", "_", label)


class Workspace:
    def __init__(self, root: str | os.PathLike):
        self.root = Path(root).resolve()

    # layout
    @property
    def cohort_dir(self) -> Path:
        return self.root / "cohort"

    @property
    def datasets_dir(self) -> Path:
        return self.root / "datasets"

    @property
    def reports_dir(self) -> Path:
        return self.root / "reports"

    def run_dir(self, label: str) -> Path:
        return self.root / "runs" / run_dirname(label)

    def dataset_dir(self, label: str) -> Path:
        return self.datasets_dir / run_dirname(label)

    def path(self, *parts) -> Path:
        """Resolve a path and refuse anything that escapes the workspace root."""
        p = self.root.joinpath(*parts).resolve()
        if p != self.root and self.root not in p.parents:
            raise PipelineError(f"refusing to touch {p}: outside workspace {self.root}")
        return p

    @contextmanager
    def lock(self):
        self.root.mkdir(parents=True, exist_ok=True)
        lock = self.root / ".lock"
        try:
            fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise PipelineError(f"workspace {self.root} is locked by another invocation "
                                f"(remove {lock} if no other process is running)") from None
        try:
            os.write(fd, str(os.getpid()).encode())
            os.close(fd)
            yield self
        finally:
            lock.unlink(missing_ok=True)

    # stamps
    @staticmethod
    def stamp_matches(directory: Path, digest: str) -> bool:
        s = directory / STAMP
        return s.exists() and s.read_text().strip() == digest

    @staticmethod
    def write_stamp(directory: Path, digest: str) -> None:
        (directory / STAMP).write_text(digest + "\n")

    @staticmethod
    def read_stamp(directory: Path) -> str:
        s = directory / STAMP
        return s.read_text().strip() if s.exists() else ""


# cohort persistence

def save_cohort(ws: Workspace, cohort: Cohort) -> None:
    d = ws.cohort_dir
    d.mkdir(parents=True, exist_ok=True)
    rows = []
    for s in cohort.series:
        sub = s.subject
        sdir = d / sub.subject_id
        sdir.mkdir(exist_ok=True)
        save_glt(sdir / "labels.glt", sub.labels.astype(np.float32))
        files = ["labels.glt"]
        for t in sorted(s.images):
            pair = s.images[t].pair
            for p, plane in enumerate(PLANES):
                name = f"{plane}_{timecode(t)}.glt"
                save_glt(sdir / name, pair[p])
                files.append(name)
        kin = asdict(sub.kinetics)
        rows.append([sub.subject_id, sub.seed, sub.true_grade] + [repr(float(kin[k])) for k in _KIN_FIELDS]
                    + [";".join(files)])
    with open(d / "manifest.tsv", "w", newline="") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(["id", "seed", "grade"] + _KIN_FIELDS + ["files"])
        w.writerows(rows)


def load_cohort(ws: Workspace, config: PhantomConfig, seed: int) -> Cohort:
    manifest = ws.cohort_dir / "manifest.tsv"
    if not manifest.exists():
        raise PipelineError(f"missing cohort manifest {manifest}: run 'simulate' first")
    series = []
    with open(manifest, newline="") as fh:
        for row in csv.DictReader(fh, delimiter="\t"):
            sdir = ws.cohort_dir / row["id"]
            labels = load_glt(sdir / "labels.glt").astype(np.int8)
            kin = Kinetics(**{k: float(row[k]) for k in _KIN_FIELDS})
            sub = PhantomSubject(row["id"], int(row["seed"]), labels.shape[-1], labels, kin, int(row["grade"]))
            images = {}
            for t in SCHEDULE:
                planes = [sdir / f"{plane}_{timecode(t)}.glt" for plane in PLANES]
                if all(p.exists() for p in planes):
                    images[t] = TimePointImage(t, np.stack([load_glt(p) for p in planes]))
            series.append(SubjectSeries(sub, images))
    return Cohort(seed, config, series)


# dataset persistence

def save_dataset(ws: Workspace, label: str, train: Dataset, test: Dataset) -> None:
    d = ws.dataset_dir(label)
    d.mkdir(parents=True, exist_ok=True)
    rows = []
    for ds in (train, test):
        X, y = ds.arrays(np.float32)
        save_glt(d / f"{ds.split}_inputs.glt", X)
        save_glt(d / f"{ds.split}_targets.glt", y)
        rows += [[s.subject_id, ds.split, s.grade] for s in ds.samples]
    times = train.samples[0].input_times
    with open(d / "samples.tsv", "w", newline="") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(["id", "split", "grade"])
        w.writerows(rows)
    (d / "times.txt").write_text(",".join(repr(float(t)) for t in times) + "\n")


def load_dataset(ws: Workspace, label: str) -> tuple[Dataset, Dataset]:
    d = ws.dataset_dir(label)
    if not (ws.datasets_dir / "manifest.tsv").exists() or not (d / "samples.tsv").exists():
        raise PipelineError(f"missing dataset manifest for {label!r}: run 'preprocess' first")
    times = tuple(float(t) for t in (d / "times.txt").read_text().strip().split(","))
    with open(d / "samples.tsv", newline="") as fh:
        rows = list(csv.DictReader(fh, delimiter="\t"))
    out = []
    for split in ("train", "test"):
        X = load_glt(d / f"{split}_inputs.glt")
        y = load_glt(d / f"{split}_targets.glt")
        meta = [r for r in rows if r["split"] == split]
        samples = [Sample(r["id"], X[i], y[i], times, int(r["grade"])) for i, r in enumerate(meta)]
        out.append(Dataset(samples, split, label))
    return out[0], out[1]

