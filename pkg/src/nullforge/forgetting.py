"""Two-task continual-learning simulation on the toy MLP.

Task P stands in for pretraining knowledge and task F for the downstream
fine-tuning task.  Forgetting is measured as the increase of the task-P
evaluation MSE after fine-tuning only the adapter factors on task F; this is
a loss-based proxy, not an accuracy score.
"""

from __future__ import annotations

import json
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .activations import DEFAULT_DIMS, ActivationCapture, CalibrationSet, ToyModel, activate, activate_grad, forward_collect
from .adapters import AdapterBundle, init_bundle
from .linalg import as_matrix, fro_norm, svd

DEFAULT_SCHEMES = ("vanilla_lora", "pissa", "milora", "corda_kp", "lora_null")


class TrainingDivergence(RuntimeError):
    pass


@dataclass(frozen=True)
class TaskSpec:
    """Linear teacher on a low-dimensional input subspace.

    Inputs are ``basis @ z + input_noise * e`` with z ~ N(0, I_k); targets
    are ``teacher @ x + target_noise * e``.  Train and eval samples come from
    disjoint generator streams of ``seed``.
    """

    name: str
    basis: np.ndarray
    teacher: np.ndarray
    n_train: int = 256
    n_eval: int = 256
    input_noise: float = 1e-3
    target_noise: float = 0.0
    seed: int = 0

    @property
    def input_dim(self) -> int:
        return self.basis.shape[0]

    @property
    def output_dim(self) -> int:
        return self.teacher.shape[0]

    def sample(self, split: str) -> tuple[np.ndarray, np.ndarray]:
        stream = {"train": 0, "eval": 1}[split]
        n = self.n_train if split == "train" else self.n_eval
        rng = np.random.default_rng([self.seed, 17, stream])
        z = rng.standard_normal((self.basis.shape[1], n))
        x = self.basis @ z + self.input_noise * rng.standard_normal((self.input_dim, n))
        y = self.teacher @ x + self.target_noise * rng.standard_normal((self.output_dim, n))
        return x, y


def make_task_pair(
    input_dim: int = 32,
    output_dim: int = 16,
    rank_p: int = 8,
    rank_f: int = 4,
    overlap_angle: float = math.pi / 4,
    seed: int = 0,
    n_train: int = 256,
    n_eval: int = 256,
    input_noise: float = 1e-3,
) -> tuple[TaskSpec, TaskSpec]:
    """Task P on a rank_p subspace and task F on a rank_f subspace tilted by ``overlap_angle``.

    Each task-F basis vector is ``cos(angle) p_i + sin(angle) q_i`` with p_i a
    task-P direction and q_i orthogonal to all of task P, so angle 0 puts task
    F inside task P's subspace and pi/2 makes the two orthogonal.
    """
    if rank_p + rank_f > input_dim or rank_f > rank_p:
        raise ValueError("need rank_f <= rank_p and rank_p + rank_f <= input_dim")
    rng = np.random.default_rng([seed, 11])
    q, _ = np.linalg.qr(rng.standard_normal((input_dim, input_dim)))
    basis_p = q[:, :rank_p]
    orth = q[:, rank_p : rank_p + rank_f]
    basis_f = math.cos(overlap_angle) * basis_p[:, :rank_f] + math.sin(overlap_angle) * orth
    teacher_p = rng.standard_normal((output_dim, rank_p)) @ basis_p.T / math.sqrt(rank_p)
    teacher_f = rng.standard_normal((output_dim, rank_f)) @ basis_f.T / math.sqrt(rank_f)
    task_p = TaskSpec("P", basis_p, teacher_p, n_train, n_eval, input_noise, 0.0, seed)
    task_f = TaskSpec("F", basis_f, teacher_f, n_train, n_eval, input_noise, 0.0, seed + 7919)
    return task_p, task_f


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-2
    steps: int = 500
    batch_size: int = 256
    seed: int = 0
    loss: str = "mse"
    max_epochs: int = 10_000

    def validate(self, budget: int) -> None:
        if self.learning_rate < 0 or not math.isfinite(self.learning_rate):
            raise ValueError(f"learning rate must be finite and non-negative, got {self.learning_rate}")
        if self.steps < 0 or self.batch_size < 1:
            raise ValueError("steps must be >= 0 and batch_size >= 1")
        if self.loss != "mse":
            raise ValueError(f"unsupported loss {self.loss!r}")
        if self.batch_size > budget:
            raise ValueError(f"batch size {self.batch_size} exceeds the {budget} training samples")
        if self.steps * self.batch_size > budget * self.max_epochs:
            raise ValueError("steps x batch_size exceeds the sample budget times max_epochs")


def mse(pred: np.ndarray, target: np.ndarray) -> float:
    return float(np.mean((pred - target) ** 2))


def _batches(n: int, cfg: TrainConfig):
    rng = np.random.default_rng([cfg.seed, 23])
    order = np.arange(n)
    pos = n
    while True:
        if cfg.batch_size == n:
            yield order
            continue
        if pos + cfg.batch_size > n:
            order = rng.permutation(n)
            pos = 0
        yield order[pos : pos + cfg.batch_size]
        pos += cfg.batch_size


def _check_finite(loss: float, step: int, lr: float) -> None:
    if not math.isfinite(loss):
        raise TrainingDivergence(f"loss became non-finite at step {step} with learning rate {lr}")


def _backprop(layer_mats, nonlinearity: str, x: np.ndarray, y: np.ndarray):
    """Loss, per-layer inputs h_i and upstream gradients delta_i (w.r.t. pre-activations).

    ``layer_mats`` is a list of callables ``h -> z`` paired with a callable
    ``delta -> W^T delta`` for each layer.
    """
    hs = [x]
    zs = []
    n_layers = len(layer_mats)
    for i, (fwd, _) in enumerate(layer_mats):
        z = fwd(hs[-1])
        zs.append(z)
        hs.append(z if i == n_layers - 1 else activate(z, nonlinearity))
    out = hs[-1]
    loss = mse(out, y)
    delta = 2.0 * (out - y) / out.size
    deltas = [None] * n_layers
    for i in range(n_layers - 1, -1, -1):
        deltas[i] = delta
        if i > 0:
            delta = layer_mats[i][1](delta) * activate_grad(zs[i - 1], nonlinearity)
    return loss, hs, deltas


def model_loss_and_grads(model: ToyModel, x: np.ndarray, y: np.ndarray):
    mats = [(lambda h, w=w: w @ h, lambda d, w=w: w.T @ d) for w in model.weights]
    loss, hs, deltas = _backprop(mats, model.nonlinearity, x, y)
    return loss, [d @ h.T for d, h in zip(deltas, hs)]


def adapter_loss_and_grads(model: ToyModel, bundles: Sequence[AdapterBundle], x: np.ndarray, y: np.ndarray):
    """MSE and its gradients with respect to every (a, b) pair.

    Layer output is ``residual h + b (a h)``; with upstream gradient delta,
    ``grad_b = delta (a h)^T`` and ``grad_a = b^T delta h^T``.
    """
    mats = [
        (
            lambda h, bd=bd: bd.residual @ h + bd.b @ (bd.a @ h),
            lambda d, bd=bd: bd.residual.T @ d + bd.a.T @ (bd.b.T @ d),
        )
        for bd in bundles
    ]
    loss, hs, deltas = _backprop(mats, model.nonlinearity, x, y)
    grads = []
    for bd, h, d in zip(bundles, hs, deltas):
        ah = bd.a @ h
        grads.append((bd.b.T @ d @ h.T, d @ ah.T))
    return loss, grads


def adapted_output(model: ToyModel, bundles: Sequence[AdapterBundle], x: np.ndarray, use_adapters: bool = True) -> np.ndarray:
    h = x
    n = len(bundles)
    for i, bd in enumerate(bundles):
        z = bd.residual @ h
        if use_adapters:
            z = z + bd.b @ (bd.a @ h)
        h = z if i == n - 1 else activate(z, model.nonlinearity)
    return h


def _check_chain(model: ToyModel, bundles: Sequence[AdapterBundle]) -> None:
    if len(bundles) != model.n_layers:
        raise ValueError(f"expected {model.n_layers} bundles, got {len(bundles)}")
    for i, bd in enumerate(bundles):
        shape = (model.layer_dims[i + 1], model.layer_dims[i])
        if bd.residual.shape != shape:
            raise ValueError(f"bundle {i} has shape {bd.residual.shape}, layer expects {shape}")


def pretrain(dims: Sequence[int], task: TaskSpec, cfg: TrainConfig, nonlinearity: str = "tanh") -> tuple[ToyModel, float]:
    """Full-network gradient descent on ``task`` from a seeded Gaussian init.

    Returns the model and its final training loss.
    """
    dims = tuple(dims)
    if dims[0] != task.input_dim or dims[-1] != task.output_dim:
        raise ValueError(f"dims {dims} incompatible with task of shape {task.input_dim}->{task.output_dim}")
    cfg.validate(task.n_train)
    model = ToyModel.random(dims, nonlinearity, seed=cfg.seed)
    x, y = task.sample("train")
    weights = [w.copy() for w in model.weights]
    loss = mse(model(x), y)
    batches = _batches(x.shape[1], cfg)
    for step in range(cfg.steps):
        idx = next(batches)
        loss, grads = model_loss_and_grads(model.with_weights(weights), x[:, idx], y[:, idx])
        _check_finite(loss, step, cfg.learning_rate)
        for w, g in zip(weights, grads):
            w -= cfg.learning_rate * g
    model = model.with_weights(weights)
    final = mse(model(x), y)
    _check_finite(final, cfg.steps, cfg.learning_rate)
    return model, final


def finetune_adapters(model: ToyModel, bundles: Sequence[AdapterBundle], task: TaskSpec, cfg: TrainConfig):
    """Gradient descent on the adapter factors only; residuals stay untouched.

    Returns ``(tuned_bundles, history)`` where ``history[t]`` is the task
    training loss before step t (plus the final loss as the last entry).
    """
    _check_chain(model, bundles)
    if task.input_dim != model.layer_dims[0] or task.output_dim != model.layer_dims[-1]:
        raise ValueError("task shape does not match the model")
    cfg.validate(task.n_train)
    x, y = task.sample("train")
    current = list(bundles)
    history = []
    batches = _batches(x.shape[1], cfg)
    for step in range(cfg.steps):
        idx = next(batches)
        loss, grads = adapter_loss_and_grads(model, current, x[:, idx], y[:, idx])
        _check_finite(loss, step, cfg.learning_rate)
        history.append(loss)
        current = [
            bd.with_factors(bd.a - cfg.learning_rate * ga, bd.b - cfg.learning_rate * gb)
            for bd, (ga, gb) in zip(current, grads)
        ]
    final = mse(adapted_output(model, current, x), y)
    _check_finite(final, cfg.steps, cfg.learning_rate)
    history.append(final)
    return current, history


@dataclass(frozen=True)
class ForgettingMetrics:
    loss: float
    baseline: float
    delta: float


def measure_forgetting(model: ToyModel, bundles: Sequence[AdapterBundle], task: TaskSpec, baseline: float | None = None) -> ForgettingMetrics:
    """Task-P eval loss with ``bundles`` applied, relative to the unadapted model."""
    _check_chain(model, bundles)
    x, y = task.sample("eval")
    if baseline is None:
        baseline = mse(model(x), y)
    loss = mse(adapted_output(model, bundles, x), y)
    return ForgettingMetrics(loss, baseline, loss - baseline)


def relative_change(a_star, a0) -> float:
    a_star = as_matrix(a_star, "a_star")
    a0 = as_matrix(a0, "a0")
    if a_star.shape != a0.shape:
        raise ValueError(f"shape mismatch {a_star.shape} vs {a0.shape}")
    denom = fro_norm(a0)
    if denom == 0:
        raise ValueError("relative change is undefined for a zero initial matrix")
    return fro_norm(a_star - a0) / denom


def projection_profile(a, u) -> np.ndarray:
    """pa_i = sum_j |(a u)_{j,i}|: mass of the rows of ``a`` along each basis column."""
    a = as_matrix(a, "a")
    u = as_matrix(u, "u")
    if u.shape[0] != u.shape[1] or a.shape[1] != u.shape[0]:
        raise ValueError(f"a {a.shape} and u {u.shape} are incompatible")
    return np.sum(np.abs(a @ u), axis=0)


def profile_csv(pa: np.ndarray) -> str:
    lines = ["idx,pa"]
    lines += [f"{i},{v:.17g}" for i, v in enumerate(pa)]
    return "\n".join(lines) + "\n"


@dataclass
class SimReport:
    scheme: str
    seed: int
    pretrain_loss_before: float = math.nan
    pretrain_loss_after: float = math.nan
    finetune_loss_final: float = math.nan
    forgetting_delta: float = math.nan
    discard_adapter_loss: float = math.nan
    relative_change_a: list = field(default_factory=list)
    pa_profiles: list = field(default_factory=list)
    pa_profile_files: list = field(default_factory=list)
    error: str | None = None

    def to_json(self) -> dict:
        out = asdict(self)
        out.pop("pa_profiles")
        if out["error"] is None:
            out.pop("error")
        return out


@dataclass(frozen=True)
class BenchmarkConfig:
    dims: tuple[int, ...] = DEFAULT_DIMS
    nonlinearity: str = "tanh"
    rank: int = 8
    rank_p: int = 8
    rank_f: int = 4
    overlap_angle: float = math.pi / 4
    n_train: int = 256
    n_eval: int = 256
    alpha: float = 1.0
    damping: float = 0.0
    pretrain: TrainConfig = TrainConfig(learning_rate=0.1, steps=2000)
    finetune: TrainConfig = TrainConfig(learning_rate=1e-2, steps=500)


def _tasks(cfg: BenchmarkConfig, seed: int):
    return make_task_pair(
        cfg.dims[0], cfg.dims[-1], cfg.rank_p, cfg.rank_f, cfg.overlap_angle, seed, cfg.n_train, cfg.n_eval
    )


def prepare_seed(cfg: BenchmarkConfig, seed: int):
    """Pretrained model, tasks and per-layer task-P captures shared by all schemes of a seed."""
    task_p, task_f = _tasks(cfg, seed)
    model, _ = pretrain(cfg.dims, task_p, TrainConfig(**{**asdict(cfg.pretrain), "seed": seed}), cfg.nonlinearity)
    x_p, _ = task_p.sample("train")
    cal = CalibrationSet(x_p, seed, f"task-P train inputs (rank {cfg.rank_p}, n={cfg.n_train})")
    caps = [forward_collect(model, cal, i) for i in range(model.n_layers)]
    return model, task_p, task_f, caps


def run_cell(scheme: str, seed: int, cfg: BenchmarkConfig, model, task_p, task_f, caps: Sequence[ActivationCapture]) -> SimReport:
    report = SimReport(scheme, seed)
    try:
        bundles = [
            init_bundle(scheme, w, cfg.rank, cap, cfg.alpha, cfg.damping, seed=seed * 1000 + i)
            for i, (w, cap) in enumerate(zip(model.weights, caps))
        ]
        x_eval, y_eval = task_p.sample("eval")
        before = mse(model(x_eval), y_eval)
        report.pretrain_loss_before = before
        report.discard_adapter_loss = mse(adapted_output(model, bundles, x_eval, use_adapters=False), y_eval)
        ft_cfg = TrainConfig(**{**asdict(cfg.finetune), "seed": seed})
        tuned, history = finetune_adapters(model, bundles, task_f, ft_cfg)
        metrics = measure_forgetting(model, tuned, task_p, baseline=before)
        report.pretrain_loss_after = metrics.loss
        report.forgetting_delta = metrics.delta
        report.finetune_loss_final = history[-1]
        report.relative_change_a = [relative_change(t.a, b.a) if fro_norm(b.a) > 0 else math.nan for t, b in zip(tuned, bundles)]
        report.pa_profiles = [
            projection_profile(t.a, svd(cap.x_pre, want_full_u=True).u) for t, cap in zip(tuned, caps)
        ]
    except (ValueError, RuntimeError) as exc:
        report.error = f"{type(exc).__name__}: {exc}"
    return report


def _threads() -> int:
    raw = os.environ.get("NULLFORGE_THREADS")
    if raw is None:
        return 1
    n = int(raw)
    if n < 1:
        raise ValueError("NULLFORGE_THREADS must be a positive integer")
    return n


def run_comparison(
    schemes: Sequence[str] = DEFAULT_SCHEMES,
    seeds: Sequence[int] = tuple(range(10)),
    cfg: BenchmarkConfig = BenchmarkConfig(),
) -> list[SimReport]:
    """Every (scheme, seed) cell; a failing cell records its error and the rest proceed."""
    if not seeds:
        raise ValueError("need at least one seed")

    def one_seed(seed):
        try:
            prepared = prepare_seed(cfg, seed)
        except (ValueError, RuntimeError) as exc:
            return [SimReport(s, seed, error=f"{type(exc).__name__}: {exc}") for s in schemes]
        return [run_cell(s, seed, cfg, *prepared) for s in schemes]

    workers = _threads()
    if workers == 1:
        per_seed = [one_seed(s) for s in seeds]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            per_seed = list(pool.map(one_seed, seeds))
    # scheme-major order, matching the summary CSV
    by_scheme = {s: [] for s in schemes}
    for reports in per_seed:
        for rep in reports:
            by_scheme[rep.scheme].append(rep)
    return [rep for s in schemes for rep in by_scheme[s]]


SUMMARY_FIELDS = ("scheme", "seed", "forgetting_delta", "finetune_loss_final", "discard_adapter_loss")


def _fmt(v) -> str:
    return f"{v:.17g}" if isinstance(v, float) else str(v)


def medians(reports: Sequence[SimReport]) -> dict[str, dict[str, float]]:
    out: dict[str, dict[str, float]] = {}
    for scheme in dict.fromkeys(r.scheme for r in reports):
        rows = [r for r in reports if r.scheme == scheme and r.error is None]
        out[scheme] = {
            key: float(np.median([getattr(r, key) for r in rows])) if rows else math.nan
            for key in SUMMARY_FIELDS[2:]
        }
        out[scheme]["n_seeds"] = len(rows)
    return out


def write_reports(out_dir, reports: Sequence[SimReport]) -> None:
    """Per-cell JSON + pa CSVs, ``summary.csv`` and ``medians.csv``; each file written atomically."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for rep in reports:
        stem = f"{rep.scheme}_seed{rep.seed}"
        rep.pa_profile_files = []
        for i, pa in enumerate(rep.pa_profiles):
            name = f"{stem}_layer{i}_pa.csv"
            _atomic_write(out_dir / name, profile_csv(pa))
            rep.pa_profile_files.append(name)
        _atomic_write(out_dir / f"{stem}.json", json.dumps(rep.to_json(), indent=2) + "\n")
    lines = [",".join(SUMMARY_FIELDS)]
    for rep in reports:
        lines.append(",".join(_fmt(getattr(rep, k)) for k in SUMMARY_FIELDS))
    _atomic_write(out_dir / "summary.csv", "\n".join(lines) + "\n")
    med = medians(reports)
    seeds = sorted({r.seed for r in reports})
    mlines = ["scheme,n_seeds,median_forgetting_delta,median_finetune_loss_final,median_discard_adapter_loss,seeds"]
    for scheme, m in med.items():
        mlines.append(
            f"{scheme},{m['n_seeds']},{_fmt(m['forgetting_delta'])},{_fmt(m['finetune_loss_final'])},"
            f"{_fmt(m['discard_adapter_loss'])},{' '.join(map(str, seeds))}"
        )
    _atomic_write(out_dir / "medians.csv", "\n".join(mlines) + "\n")


def _atomic_write(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)
