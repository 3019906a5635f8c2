"""Synthetic subjects and grade-conditioned tracer transport.

Each subject has a sagittal and an axial plane. Both planes share one set of
kinetic parameters; geometry is drawn per plane. Transport is an explicit
finite-volume diffusion on the intracranial cells with

* a rise-and-decay inflow into the subarachnoid rim (gamma-variate in time,
  tilted towards the skull base in space),
* first-order elimination everywhere,
* exchange between the mean subarachnoid concentration and the ventricular
  compartment whose rate is set by the reflux grade.

Parenchyma carries an extracellular volume fraction, so its stored (tissue)
concentration equilibrates at ``porosity`` times the free concentration next
to it. Ventricular and aqueduct cells exchange with the rest of the domain
only through the reflux term.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.special import gammainc

from .errors import ConfigError

log = logging.getLogger(__name__)

PLANES = ("sagittal", "axial")
SCHEDULE = (0.0, 1.5, 4.0, 6.0, 8.0, 24.0, 48.0, 696.0)
SUPPORTED_GRIDS = (64, 128, 256)

# label values of the per-plane label map
BACKGROUND, PARENCHYMA, VENTRICLE, AQUEDUCT, SAS, REFERENCE = range(6)
MASK_NAMES = {
    BACKGROUND: "background",
    PARENCHYMA: "parenchyma",
    VENTRICLE: "ventricle",
    AQUEDUCT: "aqueduct",
    SAS: "sas",
    REFERENCE: "reference",
}


def timecode(t: float) -> str:
    """Four-digit tenths-of-an-hour code, e.g. 1.5 h -> '0015', 24 h -> '0240'."""
    return f"{int(round(t * 10)):04d}"


def parse_timecode(code: str) -> float:
    return int(code) / 10.0


@dataclass(frozen=True)
class PhantomConfig:
    grid_size: int = 64
    ventricle_fraction: tuple[float, float] = (0.03, 0.20)
    # kinetics, diffusivities in grid cells² per hour
    diffusivity_csf: float = 1.0
    diffusivity_parenchyma: tuple[float, float] = (0.04, 0.10)
    porosity: float = 0.2
    inflow_amplitude: tuple[float, float] = (0.8, 1.2)
    inflow_shape: float = 1.0
    inflow_scale_h: tuple[float, float] = (14.0, 18.0)
    elimination_per_h: tuple[float, float] = (0.025, 0.032)
    tilt: tuple[float, float] = (0.2, 0.8)
    dose_fraction: float = 0.25
    reflux_rate: dict = field(default_factory=lambda: {
        0: (0.0, 0.0), 1: (0.02, 0.04), 2: (0.3, 0.5), 3: (0.03, 0.06), 4: (0.35, 0.7),
    })
    aqueduct_rate_factor: float = 10.0
    transient_stop_h: float = 8.0
    transient_clearance_per_h: float = 0.35
    # rendering
    baseline: dict = field(default_factory=lambda: {
        BACKGROUND: 0.0, PARENCHYMA: 0.35, VENTRICLE: 0.1, AQUEDUCT: 0.1, SAS: 0.1, REFERENCE: 1.0,
    })
    relaxivity: float = 9.0
    noise_sigma: float = 0.01
    enable_transient_grades: bool = False
    dt_h: float | None = None
    stability_safety: float = 0.9

    def __post_init__(self):
        if self.grid_size not in SUPPORTED_GRIDS:
            raise ConfigError(f"grid_size must be one of {SUPPORTED_GRIDS}, got {self.grid_size}")
        if not 0 < self.dose_fraction <= 1:
            raise ConfigError("dose_fraction must lie in (0, 1]")

    @property
    def noise_std(self) -> float:
        """Absolute noise level: ``noise_sigma`` times the parenchymal intensity."""
        return self.noise_sigma * self.baseline[PARENCHYMA]

    def allowed_grades(self) -> tuple[int, ...]:
        return (0, 1, 2, 3, 4) if self.enable_transient_grades else (0, 3, 4)


@dataclass
class Kinetics:
    diffusivity_parenchyma: float
    inflow_amplitude: float
    inflow_scale_h: float
    elimination_per_h: float
    tilt: float
    reflux_rate: float


@dataclass
class PhantomSubject:
    subject_id: str
    seed: int
    grid_size: int
    labels: np.ndarray  # (2, N, N) int8 label map, planes ordered as PLANES
    kinetics: Kinetics
    true_grade: int

    def mask(self, name: str, plane: int | str | None = None) -> np.ndarray:
        code = {v: k for k, v in MASK_NAMES.items()}[name]
        m = self.labels == code
        if plane is None:
            return m
        return m[PLANES.index(plane) if isinstance(plane, str) else plane]


@dataclass
class TimePointImage:
    time: float
    pair: np.ndarray  # (2, N, N): sagittal, axial raw signal

    @property
    def sagittal(self) -> np.ndarray:
        return self.pair[0]

    @property
    def axial(self) -> np.ndarray:
        return self.pair[1]


def _ellipse(u, v, cu, cv, au, av, angle=0.0):
    c, s = np.cos(angle), np.sin(angle)
    du, dv = u - cu, v - cv
    x = c * du + s * dv
    y = -s * du + c * dv
    return (x / au) ** 2 + (y / av) ** 2 <= 1.0


def _plane_labels(rng: np.random.Generator, n: int, plane: str, frac_bounds) -> np.ndarray:
    ii, jj = np.mgrid[0:n, 0:n]
    u = (jj + 0.5) / n * 2 - 1  # left -> right
    v = (ii + 0.5) / n * 2 - 1  # top -> bottom
    rim = max(2, round(0.05 * n)) * 2.0 / n
    half = 1.0 / n

    for _ in range(200):
        scale = rng.uniform(0.95, 1.05)
        if plane == "axial":
            head_c = (0.0, 0.0)
            head_a = (0.78 * scale, 0.86 * scale)
            spread = rng.uniform(0.10, 0.16)
            cv = rng.uniform(-0.18, 0.0)
            au, av = rng.uniform(0.05, 0.10), rng.uniform(0.18, 0.32)
            tilt = rng.uniform(-0.15, 0.15)
            vents = [(-spread, cv, au, av, tilt), (spread, cv, au, av, -tilt)]
            aq_top = cv
            ref_c = (rng.choice([-1, 1]) * 0.83, -0.86)
        else:
            head_c = (0.0, -0.05)
            head_a = (0.88 * scale, 0.76 * scale)
            cu = rng.uniform(-0.12, 0.12)
            cv = rng.uniform(-0.22, -0.06)
            vents = [(cu, cv, rng.uniform(0.20, 0.34), rng.uniform(0.06, 0.12), rng.uniform(-0.2, 0.2))]
            aq_top = cv
            ref_c = (-0.86, 0.80)

        head = _ellipse(u, v, *head_c, *head_a)
        brain = _ellipse(u, v, *head_c, head_a[0] - rim, head_a[1] - rim)
        vent = np.zeros_like(head)
        for cu_, cv_, au_, av_, ang in vents:
            vent |= _ellipse(u, v, cu_, cv_, au_, av_, ang)
        vent &= brain
        # erode by one cell so ventricles never touch the subarachnoid rim
        inner = brain & np.roll(brain, 1, 0) & np.roll(brain, -1, 0) & np.roll(brain, 1, 1) & np.roll(brain, -1, 1)
        vent &= inner
        ribbon = (np.abs(u) <= 1.5 * half + 1e-9) & (v >= aq_top) & brain & ~vent
        ref = _ellipse(u, v, *ref_c, 0.09, 0.09) & ~head

        labels = np.full((n, n), BACKGROUND, dtype=np.int8)
        labels[head & ~brain] = SAS
        labels[brain] = PARENCHYMA
        labels[ribbon] = AQUEDUCT
        labels[vent] = VENTRICLE
        labels[ref] = REFERENCE

        frac = vent.sum() / max((labels == PARENCHYMA).sum(), 1)
        if frac_bounds[0] <= frac <= frac_bounds[1] and ref.sum() > 0 and ribbon.sum() > 0:
            return labels
    raise ConfigError(f"could not draw {plane} geometry within ventricle fraction bounds {frac_bounds}")


def generate_subject(seed: int, grid_size: int = 64, grade_target: int = 3,
                     config: PhantomConfig | None = None, subject_id: str | None = None) -> PhantomSubject:
    """Draw geometry and kinetics for one subject, deterministically from ``seed``."""
    cfg = config or PhantomConfig(grid_size=grid_size)
    if grid_size != cfg.grid_size:
        cfg = replace(cfg, grid_size=grid_size)
    if grade_target not in cfg.allowed_grades():
        raise ConfigError(f"grade {grade_target} not enabled; allowed {cfg.allowed_grades()}")
    rng = np.random.default_rng(seed)
    labels = np.stack([_plane_labels(rng, cfg.grid_size, p, cfg.ventricle_fraction) for p in PLANES])
    lo, hi = cfg.reflux_rate[grade_target]
    kin = Kinetics(
        diffusivity_parenchyma=rng.uniform(*cfg.diffusivity_parenchyma),
        inflow_amplitude=rng.uniform(*cfg.inflow_amplitude),
        inflow_scale_h=rng.uniform(*cfg.inflow_scale_h),
        elimination_per_h=rng.uniform(*cfg.elimination_per_h),
        tilt=rng.uniform(*cfg.tilt),
        reflux_rate=rng.uniform(lo, hi) if hi > 0 else 0.0,
    )
    return PhantomSubject(subject_id or f"sub{seed}", seed, cfg.grid_size, labels, kin, grade_target)


class TransportModel:
    """Explicit finite-volume solver for one subject (both planes at once)."""

    def __init__(self, subject: PhantomSubject, config: PhantomConfig | None = None):
        cfg = config or PhantomConfig(grid_size=subject.grid_size)
        self.cfg = cfg
        self.subject = subject
        kin = subject.kinetics
        lab = subject.labels
        self.domain = np.isin(lab, (PARENCHYMA, VENTRICLE, AQUEDUCT, SAS))
        self.sas = lab == SAS
        self.vent = lab == VENTRICLE
        self.aq = lab == AQUEDUCT
        self.par = lab == PARENCHYMA

        diff = np.zeros(lab.shape)
        diff[self.sas | self.vent | self.aq] = cfg.diffusivity_csf
        diff[self.par] = kin.diffusivity_parenchyma
        self.capacity = np.where(self.par, cfg.porosity, 1.0)

        outer = self.sas | self.par
        inner = self.vent | self.aq
        # face conductances: harmonic mean, zero across compartments or domain edge
        def faces(axis):
            a = diff
            b = np.roll(diff, -1, axis=axis + 1)
            ok = (np.roll(outer, -1, axis=axis + 1) & outer) | (np.roll(inner, -1, axis=axis + 1) & inner)
            hm = np.where(ok & (a > 0) & (b > 0), 2 * a * b / np.maximum(a + b, 1e-30), 0.0)
            # no wrap-around across the grid edge
            idx = [slice(None)] * 3
            idx[axis + 1] = -1
            hm[tuple(idx)] = 0.0
            return hm

        self.k_row = faces(0)  # between (i, j) and (i + 1, j)
        self.k_col = faces(1)  # between (i, j) and (i, j + 1)

        n = lab.shape[-1]
        v = (np.arange(n) + 0.5) / n * 2 - 1
        weight = np.where(self.sas, 1.0 + kin.tilt * v[None, :, None], 0.0)
        self.inflow_weight = weight / weight.sum(axis=(1, 2), keepdims=True) * self.sas.sum(axis=(1, 2), keepdims=True)
        self.n_sas = self.sas.sum(axis=(1, 2))

        grade = subject.true_grade
        r = kin.reflux_rate
        self.rate = np.zeros(lab.shape)
        if grade >= 1:
            self.rate[self.aq] = min(r * cfg.aqueduct_rate_factor, 1.0)
        if grade >= 2:
            self.rate[self.vent] = r
        self.transient = grade == 2

        self.dt_limit = self.stability_limit()
        self.dt = cfg.dt_h if cfg.dt_h is not None else cfg.stability_safety * self.dt_limit
        if self.dt > self.dt_limit:
            raise ConfigError(f"time step {self.dt} h exceeds the explicit stability bound {self.dt_limit:.4g} h")
        if np.max(self.rate) * self.dt > 1:
            raise ConfigError("reflux exchange rate too large for the time step")

    @property
    def injected_dose(self) -> np.ndarray:
        """Total dose per plane; only ``dose_fraction`` of it enters the intracranial rim."""
        return self.subject.kinetics.inflow_amplitude * self.n_sas / self.cfg.dose_fraction

    def stability_limit(self) -> float:
        """Largest stable step: capacity / sum of face conductances, minimized over cells."""
        total = (self.k_row + np.roll(self.k_row, 1, axis=1) + self.k_col + np.roll(self.k_col, 1, axis=2))
        total = np.where(self.domain, total, 0.0)
        with np.errstate(divide="ignore"):
            lim = np.where(total > 0, self.capacity / np.maximum(total, 1e-30), np.inf)
        return float(lim.min())

    def inflow_cdf(self, t: float) -> float:
        kin = self.subject.kinetics
        return float(gammainc(self.cfg.inflow_shape, max(t, 0.0) / kin.inflow_scale_h))

    def diffusion_step(self, c: np.ndarray, dt: float) -> np.ndarray:
        """Mass-conserving exchange between neighbouring cells (no sources)."""
        u = c / self.capacity
        f_row = self.k_row * (np.roll(u, -1, axis=1) - u)
        f_col = self.k_col * (np.roll(u, -1, axis=2) - u)
        div = f_row - np.roll(f_row, 1, axis=1) + f_col - np.roll(f_col, 1, axis=2)
        return c + dt * div

    def reflux_step(self, c: np.ndarray, dt: float, t: float) -> np.ndarray:
        if not self.rate.any() or (self.transient and t >= self.cfg.transient_stop_h):
            return c
        c = c.copy()
        sas_mass = np.where(self.sas, c, 0.0).sum(axis=(1, 2))
        sas_mean = sas_mass / self.n_sas
        transfer = self.rate * dt * (sas_mean[:, None, None] - c)
        moved = transfer.sum(axis=(1, 2))
        c += transfer
        for p in range(c.shape[0]):
            if moved[p] > 0:
                c[p][self.sas[p]] *= 1.0 - moved[p] / sas_mass[p]
            elif moved[p] < 0:
                c[p][self.sas[p]] += -moved[p] / self.n_sas[p]
        return c

    def step(self, c: np.ndarray, t: float, dt: float) -> np.ndarray:
        kin = self.subject.kinetics
        c = self.diffusion_step(c, dt)
        c = self.reflux_step(c, dt, t)
        dose = kin.inflow_amplitude * (self.inflow_cdf(t + dt) - self.inflow_cdf(t))
        c += dose * self.inflow_weight
        c -= kin.elimination_per_h * dt * c
        if self.transient and t >= self.cfg.transient_stop_h:
            c[self.vent] -= self.cfg.transient_clearance_per_h * dt * c[self.vent]
        return c

    def run(self, times=SCHEDULE) -> np.ndarray:
        """Concentration fields (T, 2, N, N) at the requested times (hours)."""
        times = [float(t) for t in times]
        if any(b < a for a, b in zip(times, times[1:])) or times[0] < 0:
            raise ConfigError("schedule must be non-negative and sorted")
        c = np.zeros(self.subject.labels.shape)
        out = np.zeros((len(times),) + c.shape)
        t = 0.0
        for k, target in enumerate(times):
            while t < target - 1e-12:
                dt = min(self.dt, target - t)
                c = self.step(c, t, dt)
                t += dt
            out[k] = np.maximum(c, 0.0)
        return out


def simulate_tracer(subject: PhantomSubject, times=SCHEDULE, config: PhantomConfig | None = None) -> np.ndarray:
    return TransportModel(subject, config).run(times)


def intracranial_mass(conc: np.ndarray) -> np.ndarray:
    """Total tracer per time point and plane, shape (T, 2)."""
    return conc.sum(axis=(-2, -1))


def render_pair(subject: PhantomSubject, concentration: np.ndarray, noise_seed: int | None,
                time: float = 0.0, config: PhantomConfig | None = None) -> TimePointImage:
    """T1-like signal: baseline × (1 + relaxivity · c) plus Gaussian noise, clipped at 0."""
    cfg = config or PhantomConfig(grid_size=subject.grid_size)
    base = np.zeros(subject.labels.shape)
    for code, value in cfg.baseline.items():
        base[subject.labels == code] = value
    signal = base * (1.0 + cfg.relaxivity * concentration)
    if noise_seed is not None and cfg.noise_sigma > 0:
        signal = signal + np.random.default_rng(noise_seed).normal(0.0, cfg.noise_std, signal.shape)
    return TimePointImage(time, np.maximum(signal, 0.0))


@dataclass
class SubjectSeries:
    subject: PhantomSubject
    images: dict[float, TimePointImage]

    @property
    def subject_id(self) -> str:
        return self.subject.subject_id

    def pair(self, t: float) -> np.ndarray:
        try:
            return self.images[float(t)].pair
        except KeyError:
            raise KeyError(f"time point {t} h not in series for {self.subject_id}") from None


@dataclass
class Cohort:
    seed: int
    config: PhantomConfig
    series: list[SubjectSeries]

    def __len__(self):
        return len(self.series)

    def grades(self) -> list[int]:
        return [s.subject.true_grade for s in self.series]


def grade_counts(n: int, grade_mix: dict[int, float]) -> dict[int, int]:
    """Largest-remainder rounding of ``n * proportion`` per grade."""
    total = sum(grade_mix.values())
    if any(p < 0 for p in grade_mix.values()) or abs(total - 1.0) > 1e-9:
        raise ConfigError(f"grade_mix proportions must be non-negative and sum to 1, got {total}")
    raw = {g: n * p for g, p in grade_mix.items()}
    counts = {g: int(np.floor(x)) for g, x in raw.items()}
    short = n - sum(counts.values())
    for g in sorted(raw, key=lambda g: (-(raw[g] - counts[g]), g))[:short]:
        counts[g] += 1
    return counts


def _simulate_series(subject, cfg, noise_seed, noise_free=False) -> SubjectSeries:
    conc = simulate_tracer(subject, SCHEDULE, cfg)
    images = {}
    for k, t in enumerate(SCHEDULE):
        ns = None if noise_free else noise_seed + k
        images[t] = render_pair(subject, conc[k], ns, t, cfg)
    return SubjectSeries(subject, images)


def generate_cohort(n: int, seed: int, grade_mix: dict[int, float] | None = None,
                    config: PhantomConfig | None = None, noise_free: bool = False,
                    workers: int = 1) -> Cohort:
    """``n`` subjects with full time series; grades are shuffled deterministically."""
    cfg = config or PhantomConfig()
    mix = grade_mix or {0: 0.3, 3: 0.4, 4: 0.3}
    for g in mix:
        if g not in cfg.allowed_grades():
            raise ConfigError(f"grade {g} in grade_mix is not enabled")
    counts = grade_counts(n, mix)
    grades = [g for g in sorted(counts) for _ in range(counts[g])]
    rng = np.random.default_rng(seed)
    rng.shuffle(grades)
    seeds = rng.integers(0, 2**31 - 1, size=(n, 2))

    def build(i):
        subj = generate_subject(int(seeds[i, 0]), cfg.grid_size, grades[i], cfg, subject_id=f"s{seed}_{i:04d}")
        return _simulate_series(subj, cfg, int(seeds[i, 1]), noise_free)

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            series = list(pool.map(build, range(n)))
    else:
        series = [build(i) for i in range(n)]
    return Cohort(seed, cfg, series)
