"""Synthetic latent-switch task: does the gate learn which modality to trust?

Generative model, per sample::

    C ~ Bernoulli(p_c)                (stratified: exactly n_per_class per class)
    M ~ Bernoulli(p_m)
    x_v = M * y_v + (1 - M) * noise_v       y_v ~ N(informed_v[C])
    x_t = M * noise_t + (1 - M) * y_t       y_t ~ N(informed_t[C])

so ``M = 1`` means the visual features carry the class and the textual ones
are noise, and ``M = 0`` the reverse. ``M`` is kept for evaluation only.
"""
from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .data import MultilabelDataset
from .layers import GMUClassifier, ModelSpec, ShapeError
from .training import HyperConfig, derive_seed, evaluate_macro_f1, run_indexed, train_model

TIE_TOLERANCE = 0.005  # accuracy fraction; 0.5 points


@dataclass(frozen=True)
class Gaussian:
    mean: tuple[float, ...]
    std: tuple[float, ...]

    def __post_init__(self):
        object.__setattr__(self, "mean", tuple(float(v) for v in self.mean))
        object.__setattr__(self, "std", tuple(float(v) for v in self.std))
        if len(self.mean) != len(self.std):
            raise ValueError("mean and std must have the same dimension")
        if any(s <= 0 for s in self.std):
            raise ValueError(f"standard deviations must be positive, got {self.std}")

    @property
    def d(self) -> int:
        return len(self.mean)

    def draw(self, rng: np.random.Generator, n: int) -> np.ndarray:
        return np.asarray(self.mean) + np.asarray(self.std) * rng.standard_normal((n, self.d))


def _informed(d: int, sep: float, std: float) -> tuple[Gaussian, Gaussian]:
    return Gaussian((-sep,) * d, (std,) * d), Gaussian((sep,) * d, (std,) * d)


def _noise(d: int, offset: float, std: float) -> Gaussian:
    # off the class axis: +offset, -offset, ... (a single coordinate just gets +offset)
    return Gaussian(tuple(offset * (-1) ** i for i in range(d)), (std,) * d)


@dataclass(frozen=True)
class SyntheticParams:
    informed_v: tuple[Gaussian, Gaussian] = _informed(2, 1.5, 1.0)
    informed_t: tuple[Gaussian, Gaussian] = _informed(2, 1.5, 1.0)
    noise_v: Gaussian = _noise(2, 3.0, 1.0)
    noise_t: Gaussian = _noise(2, 3.0, 1.0)
    p_c: float = 0.5
    p_m: float = 0.5
    n_per_class: int = 200
    stratified: bool = True
    seed: int = 0

    def __post_init__(self):
        for name in ("p_c", "p_m"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")
        dims = {g.d for g in (*self.informed_v, *self.informed_t, self.noise_v, self.noise_t)}
        if len(dims) != 1:
            raise ValueError(f"all sources must share one dimension, got {sorted(dims)}")
        if self.n_per_class < 1:
            raise ValueError("n_per_class must be positive")

    @property
    def d(self) -> int:
        return self.noise_v.d

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticParams":
        d = dict(d)
        for key in ("informed_v", "informed_t"):
            if key in d:
                d[key] = tuple(Gaussian(**g) for g in d[key])
        for key in ("noise_v", "noise_t"):
            if key in d:
                d[key] = Gaussian(**d[key])
        return cls(**d)


def make_params(d: int = 2, sep: float = 1.5, noise_offset: float = 3.0, std: float = 1.0,
                noise_std: float | None = None, **kw) -> SyntheticParams:
    noise_std = std if noise_std is None else noise_std
    return SyntheticParams(
        informed_v=_informed(d, sep, std), informed_t=_informed(d, sep, std),
        noise_v=_noise(d, noise_offset, noise_std), noise_t=_noise(d, noise_offset, noise_std), **kw,
    )


def separated_params(**kw) -> SyntheticParams:
    """Informed and noise clouds far apart: the gate should recover M almost exactly."""
    return make_params(d=2, sep=1.5, noise_offset=3.0, std=0.5, **kw)


def grid_params(**kw) -> SyntheticParams:
    """One feature per modality, for 2-D activation maps."""
    return make_params(d=1, sep=1.5, noise_offset=4.5, std=1.0, **kw)


@dataclass(frozen=True)
class SyntheticSample:
    x_v: np.ndarray
    x_t: np.ndarray
    c: int
    m: int


@dataclass(frozen=True)
class SyntheticSet:
    x_v: np.ndarray
    x_t: np.ndarray
    c: np.ndarray
    m: np.ndarray

    def __len__(self) -> int:
        return len(self.c)

    def samples(self) -> list[SyntheticSample]:
        return [SyntheticSample(self.x_v[i], self.x_t[i], int(self.c[i]), int(self.m[i])) for i in range(len(self))]

    def observed(self, rows=None) -> MultilabelDataset:
        """What a model may see: features and class, never the latent switch."""
        rows = np.arange(len(self)) if rows is None else np.asarray(rows)
        return MultilabelDataset((self.x_v[rows], self.x_t[rows]), self.c[rows, None], ("c",),
                                 tuple(str(i) for i in rows))


def generate_synthetic(params: SyntheticParams) -> SyntheticSet:
    rng = np.random.default_rng(params.seed)
    n = 2 * params.n_per_class
    if params.stratified:
        c = rng.permutation(np.repeat([0, 1], params.n_per_class))
    else:
        c = (rng.random(n) < params.p_c).astype(np.int64)
    m = (rng.random(n) < params.p_m).astype(np.int64)
    y_v = np.where(c[:, None] == 1, params.informed_v[1].draw(rng, n), params.informed_v[0].draw(rng, n))
    y_t = np.where(c[:, None] == 1, params.informed_t[1].draw(rng, n), params.informed_t[0].draw(rng, n))
    noise_v = params.noise_v.draw(rng, n)
    noise_t = params.noise_t.draw(rng, n)
    M = m[:, None]
    x_v = M * y_v + (1 - M) * noise_v
    x_t = M * noise_t + (1 - M) * y_t
    return SyntheticSet(x_v, x_t, c, m)


def stratified_split(c: np.ndarray, train_fraction: float, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    train, test = [], []
    for cls in np.unique(c):
        idx = rng.permutation(np.flatnonzero(c == cls))
        k = int(round(train_fraction * len(idx)))
        train.append(idx[:k])
        test.append(idx[k:])
    return np.sort(np.concatenate(train)), np.sort(np.concatenate(test))


# single GMU unit and logistic regression share this budget
SYNTH_BUDGET = HyperConfig(
    hidden_size=1, learning_rate=0.05, dropout=0.0, max_norm=None, init_range=0.1,
    batch_size=128, max_epochs=100, batch_norm=False,
)
GMU_UNIT = ModelSpec(kind="gmu", head="none", hidden=1)
LOGISTIC = ModelSpec(kind="logistic")


@dataclass(frozen=True)
class ExperimentRecord:
    seed: int
    gmu_accuracy: float
    logistic_accuracy: float
    gate_latent_correlation: float | None
    gate_agreement: float
    gmu_diverged: bool = False
    logistic_diverged: bool = False

    @property
    def margin(self) -> float:
        return self.gmu_accuracy - self.logistic_accuracy


@dataclass
class SyntheticRun:
    record: ExperimentRecord
    data: SyntheticSet
    train_rows: np.ndarray
    test_rows: np.ndarray
    gmu: GMUClassifier
    logistic: object


def accuracy(model, dataset: MultilabelDataset, threshold: float = 0.5) -> float:
    pred = model.predict_proba(list(dataset.features))[:, 0] >= threshold
    return float(np.mean(pred == dataset.labels[:, 0].astype(bool)))


def pearson(a, b) -> float | None:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.std() == 0 or b.std() == 0:
        return None
    return float(np.corrcoef(a, b)[0, 1])


def fit_synthetic(params: SyntheticParams, budget: HyperConfig = SYNTH_BUDGET,
                  train_fraction: float = 0.7) -> SyntheticRun:
    """Train the single-unit GMU and logistic regression on one draw."""
    data = generate_synthetic(params)
    split_rng = np.random.default_rng(np.random.SeedSequence(params.seed, spawn_key=(0,)))
    train_rows, test_rows = stratified_split(data.c, train_fraction, split_rng)
    train, test = data.observed(train_rows), data.observed(test_rows)
    gmu = train_model(GMU_UNIT, train, None, replace(budget, seed=derive_seed(params.seed, 1)))
    log = train_model(LOGISTIC, train, None, replace(budget, seed=derive_seed(params.seed, 2)))
    z = gmu.model.gates(list(test.features))[0][:, 0]
    m = data.m[test_rows]
    record = ExperimentRecord(
        seed=params.seed,
        gmu_accuracy=accuracy(gmu.model, test),
        logistic_accuracy=accuracy(log.model, test),
        gate_latent_correlation=pearson(z, m),
        gate_agreement=float(np.mean((z > 0.5) == (m == 1))),
        gmu_diverged=gmu.diverged,
        logistic_diverged=log.diverged,
    )
    return SyntheticRun(record, data, train_rows, test_rows, gmu.model, log.model)


def run_synthetic_experiment(params: SyntheticParams, budget: HyperConfig = SYNTH_BUDGET,
                             train_fraction: float = 0.7) -> ExperimentRecord:
    return fit_synthetic(params, budget, train_fraction).record


@dataclass
class SuiteResult:
    master_seed: int
    records: list[ExperimentRecord]
    tie_tolerance: float = TIE_TOLERANCE

    @property
    def wins(self) -> int:
        return sum(r.margin > self.tie_tolerance for r in self.records)

    @property
    def losses(self) -> int:
        return sum(r.margin < -self.tie_tolerance for r in self.records)

    @property
    def ties(self) -> int:
        return len(self.records) - self.wins - self.losses

    def _corrs(self) -> list[float]:
        return [r.gate_latent_correlation for r in self.records if r.gate_latent_correlation is not None]

    @property
    def mean_correlation(self) -> float | None:
        c = self._corrs()
        return float(np.mean(c)) if c else None

    @property
    def mean_abs_correlation(self) -> float | None:
        c = self._corrs()
        return float(np.mean(np.abs(c))) if c else None

    def to_dict(self) -> dict:
        return {
            "master_seed": self.master_seed,
            "n_experiments": len(self.records),
            "tie_tolerance": self.tie_tolerance,
            "wins": self.wins,
            "ties": self.ties,
            "losses": self.losses,
            "mean_correlation": self.mean_correlation,
            "mean_abs_correlation": self.mean_abs_correlation,
            "mean_gmu_accuracy": float(np.mean([r.gmu_accuracy for r in self.records])),
            "mean_logistic_accuracy": float(np.mean([r.logistic_accuracy for r in self.records])),
            "records": [asdict(r) for r in self.records],
        }


def _experiment(params, budget, train_fraction):
    return run_synthetic_experiment(params, budget, train_fraction)


def run_synthetic_suite(
    base: SyntheticParams,
    n_experiments: int,
    master_seed: int,
    jobs: int = 1,
    budget: HyperConfig = SYNTH_BUDGET,
    train_fraction: float = 0.7,
    order: Sequence[int] | None = None,
    tie_tolerance: float = TIE_TOLERANCE,
) -> SuiteResult:
    """Repeat the experiment under ``n_experiments`` derived seeds.

    Experiment ``i`` always uses ``derive_seed(master_seed, i)``, so the result
    does not depend on ``order`` or ``jobs``.
    """
    if n_experiments < 1:
        raise ValueError("n_experiments must be at least 1")
    order = list(range(n_experiments)) if order is None else list(order)
    if sorted(order) != list(range(n_experiments)):
        raise ValueError("order must be a permutation of the experiment indices")
    args = [(replace(base, seed=derive_seed(master_seed, i)), budget, train_fraction) for i in order]
    done = dict(zip(order, run_indexed(_experiment, args, jobs)))
    return SuiteResult(master_seed, [done[i] for i in range(n_experiments)], tie_tolerance)


# ---------------------------------------------------------------------------
# activation maps
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ActivationGrid:
    x_v: np.ndarray  # lattice axis values
    x_t: np.ndarray
    z: np.ndarray  # [len(x_v) x len(x_t)]
    p: np.ndarray

    def rows(self) -> list[tuple[float, float, float, float]]:
        """Row-major: x_v is the slow index, x_t the fast one."""
        return [
            (float(v), float(t), float(self.z[i, j]), float(self.p[i, j]))
            for i, v in enumerate(self.x_v)
            for j, t in enumerate(self.x_t)
        ]

    def lookup(self, x_v, x_t) -> tuple[np.ndarray, np.ndarray]:
        """Gate and prediction at the lattice point nearest each query."""
        i = np.abs(np.asarray(x_v)[:, None] - self.x_v[None, :]).argmin(axis=1)
        j = np.abs(np.asarray(x_t)[:, None] - self.x_t[None, :]).argmin(axis=1)
        return self.z[i, j], self.p[i, j]


def export_activation_grid(model: GMUClassifier, bounds: Sequence[tuple[float, float]],
                           resolution: int) -> ActivationGrid:
    if not isinstance(model, GMUClassifier) or model.gmu.dims != (1, 1):
        raise ShapeError("activation grids need a bimodal GMU with one feature per modality")
    if resolution < 2:
        raise ValueError("resolution must be at least 2")
    (v_lo, v_hi), (t_lo, t_hi) = bounds
    xv = np.linspace(v_lo, v_hi, resolution)
    xt = np.linspace(t_lo, t_hi, resolution)
    V, T = np.meshgrid(xv, xt, indexing="ij")
    feats = [V.reshape(-1, 1), T.reshape(-1, 1)]
    z = model.gates(feats)[0][:, 0].reshape(resolution, resolution)
    p = model.predict_proba(feats)[:, 0].reshape(resolution, resolution)
    return ActivationGrid(xv, xt, z, p)


def write_grid(grid: ActivationGrid, path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["x_v", "x_t", "z", "p"])
        for row in grid.rows():
            w.writerow([f"{v:.9g}" for v in row])


def read_grid(path: str | Path) -> list[tuple[float, ...]]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header != ["x_v", "x_t", "z", "p"]:
            raise ValueError(f"unexpected grid header {header}")
        return [tuple(float(v) for v in row) for row in reader]


# ---------------------------------------------------------------------------
# multilabel fusion benchmark
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class FusionTask:
    dataset: MultilabelDataset
    latent: np.ndarray  # 1 where the visual modality is the clean one


def generate_fusion_dataset(n: int = 1500, d: int = 8, q: int = 4, seed: int = 0, label_rate: float = 0.4,
                            noise_offset: float = 3.0, noise_std: float = 1.0, sep: float = 1.0,
                            std: float = 1.0, p_m: float = 0.5) -> FusionTask:
    """Multilabel analogue of the latent-switch task.

    Both modalities linearly encode all ``q`` labels through their own random
    mixing matrix. Per sample a switch picks the clean modality; the other is
    replaced by label-independent noise centred off-origin. So every label is
    recoverable from exactly one modality per sample, and which one varies.
    """
    rng = np.random.default_rng(seed)
    y = (rng.random((n, q)) < label_rate).astype(np.int64)
    signs = 2.0 * y - 1.0
    mix_v = rng.standard_normal((q, d))
    mix_t = rng.standard_normal((q, d))
    m = (rng.random(n) < p_m).astype(np.int64)
    offset = np.zeros(d)
    offset[0] = noise_offset
    clean_v = sep * signs @ mix_v + std * rng.standard_normal((n, d))
    clean_t = sep * signs @ mix_t + std * rng.standard_normal((n, d))
    scale = noise_std * math.sqrt(q)  # match the spread of the clean signal
    noise_v = offset + scale * rng.standard_normal((n, d))
    noise_t = offset + scale * rng.standard_normal((n, d))
    M = m[:, None]
    x_v = M * clean_v + (1 - M) * noise_v
    x_t = M * noise_t + (1 - M) * clean_t
    ds = MultilabelDataset((x_v, x_t), y, tuple(f"label{j}" for j in range(q)))
    return FusionTask(ds, m)


# Fixed budget shared by every model in the fusion comparison.
FUSION_BUDGET = HyperConfig(
    hidden_size=32, learning_rate=0.01, dropout=0.0, max_norm=None, init_range=0.1,
    batch_size=64, max_epochs=60, patience=60, batch_norm=False,
)
FUSION_MODELS = {
    "gmu": (ModelSpec(kind="gmu", head="maxout", head_layers=1), (0, 1)),
    "concat": (ModelSpec(kind="maxout_mlp", n_layers=2), (0, 1)),
    "visual_only": (ModelSpec(kind="maxout_mlp", n_layers=2), (0,)),
    "textual_only": (ModelSpec(kind="maxout_mlp", n_layers=2), (1,)),
}


@dataclass
class FusionComparison:
    seeds: list[int]
    macro_f1: dict[str, list[float]]

    def mean(self, name: str) -> float:
        return float(np.mean(self.macro_f1[name]))

    def to_dict(self) -> dict:
        return {"seeds": list(self.seeds), "macro_f1": self.macro_f1,
                "mean_macro_f1": {k: self.mean(k) for k in self.macro_f1}}


def _fusion_trial(seed: int, name: str, budget: HyperConfig, task_kw: dict) -> float:
    ds = generate_fusion_dataset(seed=seed, **task_kw).dataset
    split_rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(0,)))
    test, dev, train = ds.split([0.3, 0.1], split_rng)
    spec, mods = FUSION_MODELS[name]
    report = train_model(spec, train.select(mods), dev.select(mods), replace(budget, seed=seed))
    return evaluate_macro_f1(report.model, test.select(mods))


def run_fusion_comparison(seeds: Sequence[int] = range(10), budget: HyperConfig = FUSION_BUDGET,
                          jobs: int = 1, **task_kw) -> FusionComparison:
    """Held-out macro-f1 of the GMU against concatenation and single-modality models.

    Every model sees the same split and the same budget; dev macro-f1 picks the epoch.
    """
    seeds = list(seeds)
    names = list(FUSION_MODELS)
    args = [(s, n, budget, task_kw) for s in seeds for n in names]
    scores = run_indexed(_fusion_trial, args, jobs)
    table = {n: [scores[i * len(names) + j] for i in range(len(seeds))] for j, n in enumerate(names)}
    return FusionComparison(seeds, table)
