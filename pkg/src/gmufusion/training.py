"""ADAM, the minibatch training loop and random hyperparameter search."""
from __future__ import annotations

import hashlib
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from .data import MultilabelDataset
from .layers import Classifier, ModelSpec, build_model, fusion_avg_probs
from .metrics import multilabel_f1, threshold_probs
from .regularization import apply_max_norm
from .tensor import Graph, NonFiniteError, Parameter

# searched ranges; hidden size is a discrete choice
HIDDEN_SIZES = (64, 128, 256, 512)
LEARNING_RATE_RANGE = (1e-3, 1e-1)
DROPOUT_RANGE = (0.3, 0.7)
MAX_NORM_RANGE = (5.0, 20.0)
INIT_RANGE_RANGE = (1e-3, 1e-1)


class DivergenceError(FloatingPointError):
    pass


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: Sequence[Parameter], state: AdamState, grads: Sequence[np.ndarray] | None = None) -> AdamState:
    """One bias-corrected ADAM update, in place on ``params`` and ``state``.

    Gradients default to each parameter's ``grad``. Nothing is modified if any
    gradient is non-finite.
    """
    grads = [p.grad for p in params] if grads is None else [np.asarray(g, dtype=np.float64) for g in grads]
    for p, g in zip(params, grads):
        if g.shape != p.shape:
            raise ValueError(f"gradient for {p.name} has shape {g.shape}, parameter {p.shape}")
        if not np.all(np.isfinite(g)):
            raise DivergenceError(f"non-finite gradient for {p.name} at step {state.t + 1}")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for p, g in zip(params, grads):
        with np.errstate(over="ignore", invalid="ignore"):
            m = b1 * state.m.get(p.name, 0.0) + (1.0 - b1) * g
            v = b2 * state.v.get(p.name, 0.0) + (1.0 - b2) * g * g
            new = p.value - state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        if not np.all(np.isfinite(new)):
            raise DivergenceError(f"non-finite update for {p.name} at step {state.t}")
        state.m[p.name], state.v[p.name] = m, v
        p.value = new
    return state


# ---------------------------------------------------------------------------
# configs and reports
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class HyperConfig:
    """Training hyperparameters.

    Values outside the search ranges are allowed when set explicitly (a zero
    learning rate is a useful control); :meth:`in_search_space` tells them apart.
    ``max_norm=None`` and ``dropout=0`` switch those regularizers off.
    """

    hidden_size: int = 128
    learning_rate: float = 1e-2
    dropout: float = 0.5
    max_norm: float | None = 10.0
    init_range: float = 0.05
    batch_size: int = 128
    max_epochs: int = 200
    patience: int = 20
    batch_norm: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.hidden_size < 1:
            raise ValueError(f"hidden_size must be positive, got {self.hidden_size}")
        if self.learning_rate < 0:
            raise ValueError(f"learning_rate must be >= 0, got {self.learning_rate}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"dropout must lie in [0, 1), got {self.dropout}")
        if self.max_norm is not None and self.max_norm <= 0:
            raise ValueError(f"max_norm must be positive, got {self.max_norm}")
        if self.init_range <= 0:
            raise ValueError(f"init_range must be positive, got {self.init_range}")
        if self.batch_size < 2 or self.max_epochs < 1 or self.patience < 1:
            raise ValueError("batch_size >= 2, max_epochs >= 1 and patience >= 1 are required")

    def in_search_space(self) -> bool:
        return (
            self.hidden_size in HIDDEN_SIZES
            and LEARNING_RATE_RANGE[0] <= self.learning_rate <= LEARNING_RATE_RANGE[1]
            and DROPOUT_RANGE[0] <= self.dropout <= DROPOUT_RANGE[1]
            and self.max_norm is not None
            and MAX_NORM_RANGE[0] <= self.max_norm <= MAX_NORM_RANGE[1]
            and INIT_RANGE_RANGE[0] <= self.init_range <= INIT_RANGE_RANGE[1]
        )


def derive_seed(master_seed: int, index: int) -> int:
    """Independent per-index seed; does not depend on evaluation order."""
    return int(np.random.SeedSequence(master_seed, spawn_key=(index,)).generate_state(1, np.uint64)[0])


def _between(rng, lo, hi, log):
    if log:
        return float(math.exp(rng.uniform(math.log(lo), math.log(hi))))
    return float(rng.uniform(lo, hi))


def sample_config(rng: np.random.Generator, base: HyperConfig = HyperConfig(), log_uniform: bool = True,
                  seed: int | None = None) -> HyperConfig:
    """Draw the searched fields; everything else is copied from ``base``."""
    return replace(
        base,
        hidden_size=int(rng.choice(HIDDEN_SIZES)),
        learning_rate=_between(rng, *LEARNING_RATE_RANGE, log_uniform),
        dropout=float(rng.uniform(*DROPOUT_RANGE)),
        max_norm=float(rng.uniform(*MAX_NORM_RANGE)),
        init_range=_between(rng, *INIT_RANGE_RANGE, log_uniform),
        seed=base.seed if seed is None else seed,
    )


@dataclass
class TrainReport:
    config: HyperConfig
    spec: ModelSpec
    train_loss: list[float] = field(default_factory=list)
    dev_macro_f1: list[float] = field(default_factory=list)
    best_epoch: int = -1
    best_dev_macro_f1: float | None = None
    snapshot_id: str = ""
    diverged: bool = False
    error: str | None = None
    members: list["TrainReport"] = field(default_factory=list)
    # not part of the serialized report: timing varies run to run
    wall_clock: float = field(default=0.0, compare=False)
    model: object = field(default=None, repr=False, compare=False)

    @property
    def seed(self) -> int:
        return self.config.seed

    @property
    def epochs_run(self) -> int:
        return len(self.train_loss)

    def to_dict(self) -> dict:
        return {
            "config": asdict(self.config),
            "model": asdict(self.spec),
            "seed": self.seed,
            "train_loss": list(self.train_loss),
            "dev_macro_f1": list(self.dev_macro_f1),
            "best_epoch": self.best_epoch,
            "best_dev_macro_f1": self.best_dev_macro_f1,
            "epochs_run": self.epochs_run,
            "snapshot_id": self.snapshot_id,
            "diverged": self.diverged,
            "error": self.error,
            "members": [m.to_dict() for m in self.members],
        }


def snapshot_id(model: Classifier) -> str:
    h = hashlib.sha256()
    for p in sorted(model.parameters(), key=lambda p: p.name):
        h.update(p.name.encode())
        h.update(np.ascontiguousarray(p.value).tobytes())
    return h.hexdigest()[:16]


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

def _batches(perm: np.ndarray, size: int) -> list[np.ndarray]:
    batches = [perm[i:i + size] for i in range(0, len(perm), size)]
    # a lone trailing sample cannot be batch-normalized
    if len(batches) > 1 and len(batches[-1]) < 2:
        batches[-2] = np.concatenate([batches[-2], batches.pop()])
    return batches


def predict_proba(model, dataset: MultilabelDataset) -> np.ndarray:
    return model.predict_proba(list(dataset.features))


def evaluate_macro_f1(model, dataset: MultilabelDataset, threshold: float = 0.5) -> float:
    pred = threshold_probs(predict_proba(model, dataset), threshold)
    return multilabel_f1(pred, dataset.labels).f1_macro


def train_model(
    spec: ModelSpec,
    train: MultilabelDataset,
    dev: MultilabelDataset | None,
    config: HyperConfig,
    on_step: Callable[[Classifier], None] | None = None,
) -> TrainReport:
    """Train ``spec`` on ``train``, keeping the parameters of the best dev epoch.

    Without a dev set every epoch up to ``max_epochs`` runs and the final
    parameters are kept. The run is a pure function of its arguments:
    initialization, shuffling and dropout draw from streams derived from
    ``config.seed``. A non-finite loss or gradient stops training; the report
    then has ``diverged`` set and covers the epochs completed so far.
    """
    if spec.kind == "avg_probs":
        return train_avg_probs(train, dev, config)
    start = time.perf_counter()
    init_ss, shuffle_ss, dropout_ss = np.random.SeedSequence(config.seed).spawn(3)
    model = build_model(spec, train.dims, train.n_labels, config.hidden_size, config.init_range,
                        np.random.default_rng(init_ss), config.dropout, config.batch_norm)
    shuffle_rng = np.random.default_rng(shuffle_ss)
    dropout_rng = np.random.default_rng(dropout_ss)
    params = model.parameters()
    adam = AdamState(lr=config.learning_rate)
    report = TrainReport(config, spec, model=model)
    best_state, since_best = None, 0

    for epoch in range(config.max_epochs):
        total, count = 0.0, 0
        try:
            for idx in _batches(shuffle_rng.permutation(train.n), config.batch_size):
                g = Graph()
                xs = [g.constant(f[idx], "features") for f in train.features]
                y = g.constant(train.labels[idx], "labels")
                for p in params:
                    p.zero_grad()
                loss = model.loss(g, xs, y, train=True, rng=dropout_rng)
                value = float(loss.value)
                if not math.isfinite(value):
                    raise DivergenceError(f"non-finite loss at epoch {epoch}")
                g.backward(loss)
                adam_step(params, adam)
                apply_max_norm(params, config.max_norm)
                if on_step is not None:
                    on_step(model)
                total += value * len(idx)
                count += len(idx)
        except (DivergenceError, FloatingPointError, NonFiniteError) as exc:
            report.diverged, report.error = True, str(exc)
            break
        report.train_loss.append(total / count)
        if dev is None:
            report.best_epoch = epoch
            continue
        score = evaluate_macro_f1(model, dev)
        report.dev_macro_f1.append(score)
        if report.best_dev_macro_f1 is None or score > report.best_dev_macro_f1:
            report.best_epoch, report.best_dev_macro_f1 = epoch, score
            best_state, since_best = model.state(), 0
        else:
            since_best += 1
            if since_best >= config.patience:
                break

    if best_state is not None:
        model.load_state(best_state)
    report.snapshot_id = snapshot_id(model)
    report.wall_clock = time.perf_counter() - start
    return report


class AveragedModel:
    """Late fusion of independently trained single-modality models."""

    output = "probs"

    def __init__(self, members: Sequence[Classifier], modalities: Sequence[int]):
        self.members = list(members)
        self.modalities = list(modalities)

    def predict_proba(self, xs) -> np.ndarray:
        probs = [m.predict_proba([xs[i]]) for m, i in zip(self.members, self.modalities)]
        return np.mean(probs, axis=0)

    def predict(self, xs, threshold: float = 0.5) -> np.ndarray:
        return fusion_avg_probs([m.predict_proba([xs[i]]) for m, i in zip(self.members, self.modalities)],
                                threshold)

    def parameters(self):
        return [p for m in self.members for p in m.parameters()]


def train_avg_probs(train: MultilabelDataset, dev: MultilabelDataset | None, config: HyperConfig,
                    member_spec: ModelSpec = ModelSpec(kind="maxout_mlp")) -> TrainReport:
    """One MaxoutMLP per modality; their probabilities are averaged at predict time."""
    start = time.perf_counter()
    members = []
    for i in range(len(train.dims)):
        members.append(train_model(member_spec, train.select([i]), dev.select([i]) if dev else None,
                                   replace(config, seed=derive_seed(config.seed, i))))
    model = AveragedModel([m.model for m in members], range(len(members)))
    report = TrainReport(config, ModelSpec(kind="avg_probs"), members=members, model=model)
    report.diverged = any(m.diverged for m in members)
    report.error = next((m.error for m in members if m.error), None)
    if dev is not None:
        report.best_dev_macro_f1 = evaluate_macro_f1(model, dev)
        report.dev_macro_f1 = [report.best_dev_macro_f1]
        report.best_epoch = 0
    report.snapshot_id = snapshot_id(model)
    report.wall_clock = time.perf_counter() - start
    return report


# ---------------------------------------------------------------------------
# random search
# ---------------------------------------------------------------------------

def run_indexed(fn: Callable, args: Sequence[tuple], jobs: int = 1) -> list:
    """``[fn(*a) for a in args]``, optionally across processes; order is kept."""
    if jobs <= 1 or len(args) <= 1:
        return [fn(*a) for a in args]
    chunk = max(1, len(args) // (4 * jobs))
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(_call, [(fn, a) for a in args], chunksize=chunk))


def _call(item):
    fn, a = item
    return fn(*a)


@dataclass
class SearchResult:
    best_index: int
    trials: list[TrainReport]

    @property
    def best(self) -> TrainReport:
        return self.trials[self.best_index]

    def to_dict(self) -> dict:
        return {
            "best_index": self.best_index,
            "best": self.best.to_dict(),
            "trials": [t.to_dict() for t in self.trials],
        }


def trial_configs(n_trials: int, master_seed: int, base: HyperConfig = HyperConfig(),
                  log_uniform: bool = True) -> list[HyperConfig]:
    configs = []
    for i in range(n_trials):
        rng = np.random.default_rng(np.random.SeedSequence(master_seed, spawn_key=(i, 0)))
        configs.append(sample_config(rng, base, log_uniform, seed=derive_seed(master_seed, i)))
    return configs


def _score(report: TrainReport) -> float:
    if report.diverged or report.best_dev_macro_f1 is None:
        return -math.inf
    return report.best_dev_macro_f1


def random_hyperparameter_search(
    spec: ModelSpec,
    train: MultilabelDataset,
    dev: MultilabelDataset,
    n_trials: int,
    master_seed: int,
    base: HyperConfig = HyperConfig(),
    log_uniform: bool = True,
    jobs: int = 1,
    configs: Sequence[HyperConfig] | None = None,
) -> SearchResult:
    """Train ``n_trials`` random configs and keep the best on the dev set.

    Ties go to the lowest trial index. ``configs`` replaces the sampled
    configurations outright.
    """
    if n_trials < 1:
        raise ValueError("n_trials must be at least 1")
    if configs is None:
        configs = trial_configs(n_trials, master_seed, base, log_uniform)
    trials = run_indexed(train_model, [(spec, train, dev, c) for c in configs], jobs)
    scores = [_score(t) for t in trials]
    best = max(range(len(trials)), key=lambda i: (scores[i], -i))
    return SearchResult(best, trials)
