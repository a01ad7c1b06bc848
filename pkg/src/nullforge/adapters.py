"""Adapter initialization schemes and the adapted forward pass.

Every scheme returns an :class:`AdapterBundle` holding the down-projection
``a`` (r x d_in), the up-projection ``b`` (d_out x r), the frozen residual
weight and the original weight, with ``residual + b @ a == w0`` up to
rounding.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .activations import ActivationCapture, extract_null_basis, left_basis_from_gram
from .linalg import (
    as_matrix,
    condition_estimate,
    fro_norm,
    numerical_rank,
    pinv_psd,
    svd,
    truncate_rank,
)
from .nfm import read_nfm, write_nfm

SCHEMES = ("vanilla_lora", "pissa", "milora", "corda_kp", "lora_null")
SVD_SCHEMES = SCHEMES[1:]

CORDA_MAX_CONDITION = 1e12
# absolute slack on top of the 2x rule so exactly-zero stored errors survive BLAS differences
LOAD_ERROR_FLOOR = 1e-14


class BundleIntegrityError(ValueError):
    pass


@dataclass(frozen=True)
class AdapterBundle:
    scheme: str
    a: np.ndarray
    b: np.ndarray
    residual: np.ndarray
    w0: np.ndarray
    r: int
    alpha: float = 1.0
    seed: int | None = None
    damping: float | None = None
    u_null: np.ndarray | None = None

    @property
    def d_in(self) -> int:
        return self.w0.shape[1]

    @property
    def d_out(self) -> int:
        return self.w0.shape[0]

    @property
    def delta(self) -> np.ndarray:
        return self.b @ self.a

    def reconstruction_error(self) -> float:
        """||residual + b a - w0||_F / ||w0||_F (absolute when w0 = 0)."""
        err = fro_norm(self.residual + self.b @ self.a - self.w0)
        scale = fro_norm(self.w0)
        return err / scale if scale > 0 else err

    def with_factors(self, a: np.ndarray, b: np.ndarray) -> "AdapterBundle":
        return replace(self, a=a, b=b)

    def manifest(self) -> dict:
        return {
            "scheme": self.scheme,
            "rank": self.r,
            "alpha": float(self.alpha),
            "d_in": self.d_in,
            "d_out": self.d_out,
            "seed": self.seed,
            "damping": None if self.damping is None else float(self.damping),
            "reconstruction_error": self.reconstruction_error(),
        }


def _check_rank(w0: np.ndarray, r: int) -> None:
    limit = min(w0.shape)
    if not 1 <= r <= limit:
        raise ValueError(f"rank {r} outside [1, {limit}] for a {w0.shape[0]}x{w0.shape[1]} weight")


def _split(u: np.ndarray, sigma: np.ndarray, v: np.ndarray, r: int, scale: float = 1.0):
    """b = u sqrt(scale*sigma), a = sqrt(scale*sigma) v^T, zero-padded up to r."""
    root = np.sqrt(scale * sigma)
    b = u * root
    a = root[:, None] * v.T
    k = len(sigma)
    if k < r:
        b = np.hstack([b, np.zeros((b.shape[0], r - k))])
        a = np.vstack([a, np.zeros((r - k, a.shape[1]))])
    return a, b


def init_vanilla(w0, r: int, seed: int = 0) -> AdapterBundle:
    """Gaussian ``a`` with std 1/sqrt(d_in) and zero ``b``."""
    w0 = as_matrix(w0, "w0")
    _check_rank(w0, r)
    rng = np.random.default_rng(seed)
    a = rng.normal(0.0, 1.0 / np.sqrt(w0.shape[1]), size=(r, w0.shape[1]))
    b = np.zeros((w0.shape[0], r))
    return AdapterBundle("vanilla_lora", a, b, w0.copy(), w0.copy(), r, seed=seed)


def init_pissa(w0, r: int) -> AdapterBundle:
    """Adapter on the principal r singular triples of ``w0``."""
    w0 = as_matrix(w0, "w0")
    _check_rank(w0, r)
    s = svd(w0)
    a, b = _split(s.u[:, :r], s.sigma[:r], s.v[:, :r], r)
    return AdapterBundle("pissa", a, b, w0 - b @ a, w0.copy(), r)


def init_milora(w0, r: int) -> AdapterBundle:
    """Adapter on the minor r of the R nonzero singular triples of ``w0``.

    The residual is the rank-(R - r) truncation, i.e. the Eckart-Young
    optimum of ``min ||W' - w0||_F`` under that rank constraint.
    """
    w0 = as_matrix(w0, "w0")
    _check_rank(w0, r)
    s = svd(w0)
    rank = numerical_rank(s.sigma)
    if r > rank:
        raise ValueError(f"rank {r} exceeds the numerical rank {rank} of w0")
    lo = rank - r
    a, b = _split(s.u[:, lo:rank], s.sigma[lo:rank], s.v[:, lo:rank], r)
    return AdapterBundle("milora", a, b, truncate_rank(s, lo), w0.copy(), r)


def init_corda_kp(w0, cap: ActivationCapture, r: int, damping: float = 0.0) -> AdapterBundle:
    """Knowledge-preserved CorDA: minor components of ``w0 @ C`` mapped back by ``C^-1``.

    ``C = cap.gram + damping * I``.  The inverse is folded entirely into ``a``.
    """
    w0 = as_matrix(w0, "w0")
    _check_rank(w0, r)
    gram = as_matrix(cap.gram, "gram")
    if gram.shape != (w0.shape[1], w0.shape[1]):
        raise ValueError(f"gram has shape {gram.shape}, expected {(w0.shape[1],) * 2}")
    if damping < 0:
        raise ValueError(f"damping must be non-negative, got {damping}")
    c_d = gram + damping * np.eye(gram.shape[0])
    if damping == 0:
        cond = condition_estimate(gram)
        if cond > CORDA_MAX_CONDITION:
            raise ValueError(
                f"covariance is numerically singular (condition estimate {cond:.3e} > 1e12); "
                "pass a nonzero damping"
            )
    c_inv = pinv_psd(gram, damping)
    s = svd(w0 @ c_d)
    rank = numerical_rank(s.sigma)
    if r > rank:
        raise ValueError(f"rank {r} exceeds the numerical rank {rank} of w0 @ C")
    lo = rank - r
    a, b = _split(s.u[:, lo:rank], s.sigma[lo:rank], s.v[:, lo:rank], r)
    a = a @ c_inv
    residual = truncate_rank(s, lo) @ c_inv
    return AdapterBundle("corda_kp", a, b, residual, w0.copy(), r, damping=float(damping))


def init_lora_null(w0, u_null, alpha: float = 1.0) -> AdapterBundle:
    """Adapter from the SVD of ``w0`` projected onto ``span(u_null)``.

    ``b @ a == alpha * w0 @ u_null @ u_null.T``; each factor carries
    ``sqrt(alpha)``.
    """
    w0 = as_matrix(w0, "w0")
    u_null = as_matrix(u_null, "u_null")
    if u_null.shape[0] != w0.shape[1]:
        raise ValueError(f"u_null has {u_null.shape[0]} rows, weight has d_in={w0.shape[1]}")
    r = u_null.shape[1]
    if r > u_null.shape[0]:
        raise ValueError("u_null has more columns than rows")
    if fro_norm(u_null.T @ u_null - np.eye(r)) > 1e-8:
        raise ValueError("u_null columns are not orthonormal within 1e-8")
    if not alpha > 0 or not np.isfinite(alpha):
        raise ValueError(f"alpha must be a positive real, got {alpha}")
    s = svd(w0 @ u_null @ u_null.T)
    k = min(r, s.k)
    a, b = _split(s.u[:, :k], s.sigma[:k], s.v[:, :k], r, scale=alpha)
    return AdapterBundle("lora_null", a, b, w0 - b @ a, w0.copy(), r, alpha=float(alpha), u_null=u_null.copy())


def null_basis_from_capture(cap: ActivationCapture, r: int) -> np.ndarray:
    """Approximate null space of X_pre: SVD of x_pre when stored, else the Gram eigenbasis."""
    if cap.x_pre is not None:
        s = svd(cap.x_pre, want_full_u=True)
        return extract_null_basis(s.u, s.sigma, r)
    u, sigma = left_basis_from_gram(cap)
    return extract_null_basis(u, sigma, r)


def init_bundle(
    scheme: str,
    w0,
    r: int,
    cap: ActivationCapture | None = None,
    alpha: float = 1.0,
    damping: float = 0.0,
    seed: int = 0,
) -> AdapterBundle:
    if scheme == "vanilla_lora":
        return init_vanilla(w0, r, seed)
    if scheme == "pissa":
        return init_pissa(w0, r)
    if scheme == "milora":
        return init_milora(w0, r)
    if scheme in ("corda_kp", "lora_null") and cap is None:
        raise ValueError(f"scheme {scheme} needs an activation capture")
    if scheme == "corda_kp":
        return init_corda_kp(w0, cap, r, damping)
    if scheme == "lora_null":
        return init_lora_null(w0, null_basis_from_capture(cap, r), alpha)
    raise ValueError(f"unknown scheme {scheme!r}; expected one of {', '.join(SCHEMES)}")


def apply_adapter(bundle: AdapterBundle, x) -> np.ndarray:
    """``residual @ x + b @ (a @ x)`` for a vector or a matrix of column inputs."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim not in (1, 2) or x.shape[0] != bundle.d_in:
        raise ValueError(f"input has shape {x.shape}, expected leading dimension {bundle.d_in}")
    return bundle.residual @ x + bundle.b @ (bundle.a @ x)


_FILES = {"a": "A.nfm", "b": "B.nfm", "residual": "residual.nfm", "w0": "W0.nfm"}


def save_bundle(directory, bundle: AdapterBundle) -> dict:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for attr, fname in _FILES.items():
        write_nfm(directory / fname, getattr(bundle, attr))
    if bundle.u_null is not None:
        write_nfm(directory / "U_null.nfm", bundle.u_null)
    manifest = bundle.manifest()
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")
    return manifest


def load_bundle(directory, verify: bool = True) -> AdapterBundle:
    """Read a bundle directory; with ``verify`` the stored reconstruction error is re-checked."""
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    mats = {attr: read_nfm(directory / fname) for attr, fname in _FILES.items()}
    if (directory / "U_null.nfm").exists():
        mats["u_null"] = read_nfm(directory / "U_null.nfm")
    if manifest["scheme"] not in SCHEMES:
        raise BundleIntegrityError(f"unknown scheme {manifest['scheme']!r} in manifest")
    bundle = AdapterBundle(
        scheme=manifest["scheme"],
        r=int(manifest["rank"]),
        alpha=float(manifest["alpha"]),
        seed=manifest.get("seed"),
        damping=manifest.get("damping"),
        **mats,
    )
    shapes = {
        "a": (bundle.r, manifest["d_in"]),
        "b": (manifest["d_out"], bundle.r),
        "residual": (manifest["d_out"], manifest["d_in"]),
        "w0": (manifest["d_out"], manifest["d_in"]),
    }
    for attr, shape in shapes.items():
        if getattr(bundle, attr).shape != tuple(shape):
            raise BundleIntegrityError(f"{_FILES[attr]} has shape {getattr(bundle, attr).shape}, manifest says {shape}")
    if verify:
        stored = float(manifest["reconstruction_error"])
        actual = bundle.reconstruction_error()
        if actual > 2.0 * stored + LOAD_ERROR_FLOOR:
            raise BundleIntegrityError(
                f"reconstruction error {actual:.3e} exceeds twice the stored value {stored:.3e}"
            )
    return bundle
