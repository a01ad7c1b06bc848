"""Calibration activations from a toy feed-forward model.

Columns of every matrix here are samples: a calibration set of N inputs in
R^d0 is a ``d0 x N`` array and the captured input of layer i is a
``d_i x N`` array.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .linalg import as_matrix, check_psd, symmetric_eig
from .nfm import read_nfm, write_nfm

NONLINEARITIES = ("tanh", "relu", "identity")

DEFAULT_DIMS = (32, 48, 32, 16)
DEFAULT_SAMPLES = 256
DEFAULT_NOISE = 1e-3


def activate(z: np.ndarray, kind: str) -> np.ndarray:
    if kind == "tanh":
        return np.tanh(z)
    if kind == "relu":
        return np.maximum(z, 0.0)
    if kind == "identity":
        return z
    raise ValueError(f"unknown nonlinearity {kind!r}")


def activate_grad(z: np.ndarray, kind: str) -> np.ndarray:
    if kind == "tanh":
        t = np.tanh(z)
        return 1.0 - t * t
    if kind == "relu":
        return (z > 0).astype(np.float64)
    if kind == "identity":
        return np.ones_like(z)
    raise ValueError(f"unknown nonlinearity {kind!r}")


@dataclass(frozen=True)
class ToyModel:
    """MLP ``x -> W_{L-1} f(... f(W_0 x))``; no nonlinearity after the last layer."""

    layer_dims: tuple[int, ...]
    weights: tuple[np.ndarray, ...]
    nonlinearity: str = "tanh"

    def __post_init__(self):
        dims = tuple(int(d) for d in self.layer_dims)
        if len(dims) < 2 or any(d < 1 for d in dims):
            raise ValueError(f"layer_dims must list at least two positive sizes, got {dims}")
        if len(self.weights) != len(dims) - 1:
            raise ValueError(f"expected {len(dims) - 1} weight matrices, got {len(self.weights)}")
        weights = []
        for i, w in enumerate(self.weights):
            w = as_matrix(w, f"weights[{i}]")
            if w.shape != (dims[i + 1], dims[i]):
                raise ValueError(f"weights[{i}] has shape {w.shape}, expected {(dims[i + 1], dims[i])}")
            weights.append(w)
        if self.nonlinearity not in NONLINEARITIES:
            raise ValueError(f"unknown nonlinearity {self.nonlinearity!r}")
        object.__setattr__(self, "layer_dims", dims)
        object.__setattr__(self, "weights", tuple(weights))

    @property
    def n_layers(self) -> int:
        return len(self.weights)

    @classmethod
    def random(cls, dims=DEFAULT_DIMS, nonlinearity: str = "tanh", seed: int = 0) -> "ToyModel":
        """Gaussian weights with std 1/sqrt(fan_in)."""
        rng = np.random.default_rng(seed)
        weights = tuple(
            rng.standard_normal((dims[i + 1], dims[i])) / np.sqrt(dims[i]) for i in range(len(dims) - 1)
        )
        return cls(tuple(dims), weights, nonlinearity)

    def with_weights(self, weights: Sequence[np.ndarray]) -> "ToyModel":
        return ToyModel(self.layer_dims, tuple(weights), self.nonlinearity)

    def layer_inputs(self, x: np.ndarray) -> list[np.ndarray]:
        """Inputs reaching every layer; element L is the network output."""
        h = x
        out = [h]
        for i, w in enumerate(self.weights):
            z = w @ h
            h = z if i == self.n_layers - 1 else activate(z, self.nonlinearity)
            out.append(h)
        return out

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return self.layer_inputs(x)[-1]


@dataclass(frozen=True)
class CalibrationSet:
    samples: np.ndarray
    seed: int
    generator_spec: str

    def __post_init__(self):
        object.__setattr__(self, "samples", as_matrix(self.samples, "calibration samples"))


def lowrank_basis(dim: int, rank: int, seed: int) -> np.ndarray:
    """Fixed seeded mixing matrix M (dim x rank) of the calibration generator."""
    rng = np.random.default_rng([seed, 0])
    return rng.standard_normal((dim, rank))


def make_calibration_set(
    dim: int,
    n_samples: int = DEFAULT_SAMPLES,
    latent_dim: int | None = None,
    noise: float = DEFAULT_NOISE,
    seed: int = 0,
) -> CalibrationSet:
    """Samples ``M z + noise * e`` with z ~ N(0, I_k) and k = max(1, dim // 4) by default."""
    if n_samples < 1:
        raise ValueError("calibration set needs at least one sample")
    k = max(1, dim // 4) if latent_dim is None else int(latent_dim)
    mixing = lowrank_basis(dim, k, seed)
    rng = np.random.default_rng([seed, 1])
    z = rng.standard_normal((k, n_samples))
    e = rng.standard_normal((dim, n_samples))
    samples = mixing @ z + noise * e
    spec = f"lowrank-gaussian(dim={dim},k={k},noise={noise!r},n={n_samples})"
    return CalibrationSet(samples, seed, spec)


@dataclass(frozen=True)
class ActivationCapture:
    layer_index: int
    gram: np.ndarray
    sample_count: int
    x_pre: np.ndarray | None = None
    seed: int | None = None
    generator_spec: str = ""

    @property
    def d_in(self) -> int:
        return self.gram.shape[0]


def forward_collect(model: ToyModel, cal: CalibrationSet, layer_index: int) -> ActivationCapture:
    """Stack the inputs that reach ``layer_index`` when ``cal`` is run through ``model``."""
    if not 0 <= layer_index < model.n_layers:
        raise ValueError(f"layer_index {layer_index} outside [0, {model.n_layers})")
    if cal.samples.shape[0] != model.layer_dims[0]:
        raise ValueError(
            f"calibration samples have dimension {cal.samples.shape[0]}, model expects {model.layer_dims[0]}"
        )
    x_pre = model.layer_inputs(cal.samples)[layer_index]
    return ActivationCapture(
        layer_index=layer_index,
        gram=x_pre @ x_pre.T,
        sample_count=x_pre.shape[1],
        x_pre=x_pre,
        seed=cal.seed,
        generator_spec=cal.generator_spec,
    )


def capture_layers(model: ToyModel, cal: CalibrationSet, hooks: Mapping[str, int]) -> dict[str, ActivationCapture]:
    """Captures keyed by hook name; hooks on the same layer input share one object."""
    by_layer: dict[int, ActivationCapture] = {}
    out = {}
    for name, layer in hooks.items():
        if layer not in by_layer:
            by_layer[layer] = forward_collect(model, cal, layer)
        out[name] = by_layer[layer]
    return out


def gram_accumulate(sample_stream: Iterable, dim: int | None = None, layer_index: int = 0) -> ActivationCapture:
    """Running sum of outer products ``x x^T`` in stream order.

    ``dim`` is only needed to size the result of an empty stream.
    """
    gram = None
    count = 0
    for x in sample_stream:
        x = np.asarray(x, dtype=np.float64).ravel()
        if gram is None:
            if dim is not None and x.size != dim:
                raise ValueError(f"sample 0 has dimension {x.size}, expected {dim}")
            gram = np.zeros((x.size, x.size))
        elif x.size != gram.shape[0]:
            raise ValueError(f"sample {count} has dimension {x.size}, expected {gram.shape[0]}")
        if not np.all(np.isfinite(x)):
            raise ValueError(f"sample {count} contains non-finite entries")
        gram += np.outer(x, x)
        count += 1
    if gram is None:
        if dim is None:
            raise ValueError("empty stream: pass dim to size the zero gram")
        gram = np.zeros((dim, dim))
    return ActivationCapture(layer_index=layer_index, gram=gram, sample_count=count)


def left_basis_from_gram(cap: ActivationCapture) -> tuple[np.ndarray, np.ndarray]:
    """Full left singular basis of X_pre from the eigenvectors of its Gram matrix."""
    gram = check_psd(cap.gram, "gram")
    lam, u = symmetric_eig(gram)
    return u, np.sqrt(np.maximum(lam, 0.0))


def extract_null_basis(u: np.ndarray, sigma: np.ndarray, r: int) -> np.ndarray:
    """The ``r`` columns of ``u`` paired with the smallest singular values.

    ``sigma`` may be shorter than the column count of ``u``; missing entries
    are implicit zeros.
    """
    u = as_matrix(u, "u")
    d_in = u.shape[0]
    if u.shape[1] != d_in:
        raise ValueError(f"u must be a full {d_in}x{d_in} basis, got {u.shape}")
    if len(sigma) > d_in:
        raise ValueError("more singular values than basis columns")
    if not 1 <= r < d_in:
        raise ValueError(f"null-space rank {r} outside [1, {d_in - 1}]")
    return u[:, d_in - r:].copy()


def save_capture(directory, cap: ActivationCapture) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    write_nfm(directory / "gram.nfm", cap.gram)
    if cap.x_pre is not None:
        write_nfm(directory / "x_pre.nfm", cap.x_pre)
    meta = {
        "layer_index": cap.layer_index,
        "sample_count": cap.sample_count,
        "seed": cap.seed,
        "generator_spec": cap.generator_spec,
        "has_x_pre": cap.x_pre is not None,
    }
    (directory / "capture.json").write_text(json.dumps(meta, indent=2) + "\n")


def load_capture(directory) -> ActivationCapture:
    directory = Path(directory)
    meta = json.loads((directory / "capture.json").read_text())
    x_pre = read_nfm(directory / "x_pre.nfm") if meta["has_x_pre"] else None
    gram = read_nfm(directory / "gram.nfm")
    if x_pre is not None and x_pre.shape[0] != gram.shape[0]:
        raise ValueError("x_pre and gram dimensions disagree")
    return ActivationCapture(
        layer_index=int(meta["layer_index"]),
        gram=gram,
        sample_count=int(meta["sample_count"]),
        x_pre=x_pre,
        seed=meta.get("seed"),
        generator_spec=meta.get("generator_spec", ""),
    )


def save_calibration(directory, cal: CalibrationSet) -> None:
    """A calibration set is stored as the layer-0 capture of its own samples."""
    x = cal.samples
    save_capture(directory, ActivationCapture(0, x @ x.T, x.shape[1], x, cal.seed, cal.generator_spec))


def load_calibration(directory) -> CalibrationSet:
    cap = load_capture(directory)
    if cap.x_pre is None:
        raise ValueError(f"{directory} holds a Gram-only capture, not calibration samples")
    return CalibrationSet(cap.x_pre, cap.seed if cap.seed is not None else 0, cap.generator_spec)
