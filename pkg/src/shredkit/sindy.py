"""Sparse dynamics identification over a polynomial + trig function library.

Covers library evaluation (numpy and differentiable-tensor routes), sequential
thresholded least squares, the Euler mini-step recurrent cell, ensembles under
a threshold ladder, the linear (Koopman) restriction, and eigen-analysis of
discovered linear generators.

Conventions: states are rows, so zdot = theta(z) @ Xi with Xi of shape (p, d);
column j of Xi gives dz_j/dt. The column-convention generator of a linear
model is Xi[linear].T.
"""

from __future__ import annotations

import itertools
import json
import math
import warnings
from dataclasses import dataclass, replace

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor


class DimensionMismatchError(ValueError):
    pass


class ConditioningError(RuntimeError):
    """Normal equations singular; suggests ridge > 0."""


class RolloutDivergenceError(RuntimeError):
    def __init__(self, substep: int):
        super().__init__(f"non-finite state at Euler sub-step {substep}")
        self.substep = substep


class EigenAnalysisError(RuntimeError):
    pass


@dataclass(frozen=True)
class LibrarySpec:
    """Candidate-function library: constant, graded-lex monomials, then per-coordinate trig.

    ``trig`` entries are (kind, frequency) with kind in {"sin", "cos"}; each is
    applied to every coordinate, so the trig block contributes dim * len(trig)
    terms. The ordering is total and stable, which keeps serialized coefficient
    matrices meaningful across reloads.
    """

    dim: int
    poly_degree: int
    include_constant: bool = True
    trig: tuple[tuple[str, float], ...] = ()

    def __post_init__(self):
        if self.dim < 1:
            raise DimensionMismatchError("library dim must be >= 1")
        if self.poly_degree < 0:
            raise DimensionMismatchError("poly_degree must be >= 0")
        for kind, _freq in self.trig:
            if kind not in ("sin", "cos"):
                raise DimensionMismatchError(f"unknown trig kind {kind!r}")

    def monomials(self) -> list[tuple[int, ...]]:
        """Index tuples (with repetition) for each monomial, graded-lex order."""
        terms = []
        for degree in range(1, self.poly_degree + 1):
            terms.extend(itertools.combinations_with_replacement(range(self.dim), degree))
        return terms

    @property
    def term_count(self) -> int:
        p = len(self.monomials()) + self.dim * len(self.trig)
        return p + (1 if self.include_constant else 0)

    def term_names(self, var: str = "z") -> list[str]:
        names = ["1"] if self.include_constant else []
        for mono in self.monomials():
            parts = []
            for j, grp in itertools.groupby(mono):
                e = len(list(grp))
                parts.append(f"{var}{j + 1}" + (f"^{e}" if e > 1 else ""))
            names.append(" ".join(parts))
        for kind, freq in self.trig:
            for j in range(self.dim):
                arg = f"{var}{j + 1}" if freq == 1.0 else f"{freq:g} {var}{j + 1}"
                names.append(f"{kind}({arg})")
        return names

    @property
    def linear_slice(self) -> slice:
        """Positions of the pure linear terms z1..zd within the ordering."""
        if self.poly_degree < 1:
            raise DimensionMismatchError("library has no linear terms")
        start = 1 if self.include_constant else 0
        return slice(start, start + self.dim)

    def to_dict(self) -> dict:
        return {"dim": self.dim, "poly_degree": self.poly_degree,
                "include_constant": self.include_constant,
                "trig": [[k, f] for k, f in self.trig]}

    @staticmethod
    def from_dict(d: dict) -> "LibrarySpec":
        return LibrarySpec(dim=int(d["dim"]), poly_degree=int(d["poly_degree"]),
                           include_constant=bool(d["include_constant"]),
                           trig=tuple((k, float(f)) for k, f in d["trig"]))


def evaluate_library(Z: np.ndarray, spec: LibrarySpec) -> np.ndarray:
    """Evaluate all candidate functions on states Z of shape (n, d) -> (n, p)."""
    Z = np.atleast_2d(np.asarray(Z, dtype=np.float64))
    if Z.shape[1] != spec.dim:
        raise DimensionMismatchError(f"state dim {Z.shape[1]} != library dim {spec.dim}")
    cols = []
    if spec.include_constant:
        cols.append(np.ones((Z.shape[0], 1)))
    for mono in spec.monomials():
        col = np.ones(Z.shape[0])
        for j in mono:
            col = col * Z[:, j]
        cols.append(col[:, None])
    for kind, freq in spec.trig:
        fn = np.sin if kind == "sin" else np.cos
        cols.append(fn(freq * Z))
    return np.concatenate(cols, axis=1)


def library_features(z: Tensor, spec: LibrarySpec) -> Tensor:
    """Differentiable mirror of :func:`evaluate_library`; z has states on the last axis."""
    if z.shape[-1] != spec.dim:
        raise DimensionMismatchError(f"state dim {z.shape[-1]} != library dim {spec.dim}")
    coords = [dc.slice_axis(z, -1, j, j + 1) for j in range(spec.dim)]
    cols: list[Tensor] = []
    if spec.include_constant:
        cols.append(Tensor(np.ones(z.shape[:-1] + (1,))))
    for mono in spec.monomials():
        col: Tensor | None = None
        for j, grp in itertools.groupby(mono):
            e = len(list(grp))
            factor = coords[j] if e == 1 else dc.power(coords[j], e)
            col = factor if col is None else col * factor
        cols.append(col)
    for kind, freq in spec.trig:
        arg = z if freq == 1.0 else z * freq
        cols.append(dc.sin(arg) if kind == "sin" else dc.cos(arg))
    return dc.concat(cols, axis=-1)


@dataclass
class SindyModel:
    """Latent ODE zdot = theta(z) @ Xi advanced by k explicit-Euler mini-steps of dt/k."""

    spec: LibrarySpec
    Xi: np.ndarray          # (p, d)
    mask: np.ndarray        # boolean (p, d); Xi is zero wherever mask is False
    dt: float = 1.0
    k: int = 1

    def __post_init__(self):
        self.Xi = np.asarray(self.Xi, dtype=np.float64)
        self.mask = np.asarray(self.mask, dtype=bool)
        p = self.spec.term_count
        if self.Xi.shape != (p, self.spec.dim):
            raise DimensionMismatchError(f"Xi shape {self.Xi.shape} != ({p}, {self.spec.dim})")
        if self.mask.shape != self.Xi.shape:
            raise DimensionMismatchError("mask shape differs from Xi")
        if self.dt <= 0 or self.k < 1:
            raise DimensionMismatchError("need dt > 0 and k >= 1")

    @property
    def nnz(self) -> int:
        return int(self.mask.sum())

    def effective_Xi(self) -> np.ndarray:
        return np.where(self.mask, self.Xi, 0.0)

    def linear_generator(self) -> np.ndarray:
        """Column-convention d x d generator from the pure linear terms."""
        return self.effective_Xi()[self.spec.linear_slice, :].T

    def to_dict(self) -> dict:
        return {"spec": self.spec.to_dict(), "Xi": self.Xi.tolist(),
                "mask": self.mask.astype(int).tolist(), "dt": self.dt, "k": self.k}

    @staticmethod
    def from_dict(d: dict) -> "SindyModel":
        return SindyModel(spec=LibrarySpec.from_dict(d["spec"]),
                          Xi=np.asarray(d["Xi"], dtype=np.float64),
                          mask=np.asarray(d["mask"], dtype=bool),
                          dt=float(d["dt"]), k=int(d["k"]))

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @staticmethod
    def from_json(text: str) -> "SindyModel":
        return SindyModel.from_dict(json.loads(text))


@dataclass
class EnsembleSindy:
    """B models sharing one library, thresholded at an ascending ladder."""

    models: list[SindyModel]
    thresholds: list[float]

    def __post_init__(self):
        if not self.models or len(self.models) != len(self.thresholds):
            raise DimensionMismatchError("need one threshold per ensemble member")
        if any(t2 < t1 for t1, t2 in zip(self.thresholds, self.thresholds[1:])):
            raise DimensionMismatchError("thresholds must be ascending")


def threshold_ladder(low: float, high: float, count: int) -> list[float]:
    if count == 1:
        return [low]
    return list(np.linspace(low, high, count))


def finite_differences(Z: np.ndarray, dt: float) -> np.ndarray:
    """Second-order derivative estimates: central interior, one-sided 3-point ends."""
    Z = np.asarray(Z, dtype=np.float64)
    if Z.shape[0] < 3:
        raise DimensionMismatchError("need at least 3 samples for finite differences")
    dZ = np.empty_like(Z)
    dZ[1:-1] = (Z[2:] - Z[:-2]) / (2.0 * dt)
    dZ[0] = (-3.0 * Z[0] + 4.0 * Z[1] - Z[2]) / (2.0 * dt)
    dZ[-1] = (3.0 * Z[-1] - 4.0 * Z[-2] + Z[-3]) / (2.0 * dt)
    return dZ


def _solve_ridge(theta: np.ndarray, rhs: np.ndarray, ridge: float) -> np.ndarray:
    if ridge > 0:
        gram = theta.T @ theta + ridge * np.eye(theta.shape[1])
        return np.linalg.solve(gram, theta.T @ rhs)
    # Unregularized route must be well posed.
    if theta.shape[1] > 0:
        cond = np.linalg.cond(theta.T @ theta)
        if not np.isfinite(cond) or cond > 1e12:
            raise ConditioningError(
                "singular normal equations with ridge=0; pass ridge > 0")
    sol, *_ = np.linalg.lstsq(theta, rhs, rcond=None)
    return sol


def fit_stlsq(Z: np.ndarray, dZ: np.ndarray, spec: LibrarySpec, threshold: float,
              iters: int = 20, ridge: float = 1e-6, dt: float = 1.0, k: int = 1) -> SindyModel:
    """Sequential thresholded least squares on derivative targets.

    Alternates ridge refits on the active support with hard thresholding until
    the mask reaches a fixpoint (or ``iters`` rounds), then polishes surviving
    coefficients with one ridge-free least-squares refit so exact-library data
    is recovered to machine precision.
    """
    Z = np.atleast_2d(np.asarray(Z, dtype=np.float64))
    dZ = np.atleast_2d(np.asarray(dZ, dtype=np.float64))
    if Z.shape != dZ.shape:
        raise DimensionMismatchError(f"states {Z.shape} and targets {dZ.shape} differ")
    if ridge < 0:
        raise ValueError("ridge must be >= 0")
    theta = evaluate_library(Z, spec)
    n, p = theta.shape
    if n < p:
        warnings.warn(f"fit_stlsq: {n} samples < {p} library terms; fit may be underdetermined",
                      stacklevel=2)
    d = spec.dim
    Xi = np.zeros((p, d))
    mask = np.ones((p, d), dtype=bool)
    for j in range(d):
        active = mask[:, j]
        for _ in range(max(1, iters)):
            if not active.any():
                break
            coef = _solve_ridge(theta[:, active], dZ[:, j], ridge)
            keep = np.abs(coef) >= threshold
            new_active = active.copy()
            new_active[active] = keep
            if (new_active == active).all():
                active = new_active
                break
            active = new_active
        mask[:, j] = active
        Xi[:, j] = 0.0
        if active.any():
            # Ridge-free polish on the surviving support; rank-deficient
            # supports fall back to the minimum-norm solution.
            Xi[active, j] = np.linalg.lstsq(theta[:, active], dZ[:, j], rcond=None)[0]
    return SindyModel(spec=spec, Xi=Xi, mask=mask, dt=dt, k=k)


def sindy_cell(z: np.ndarray, model: SindyModel) -> np.ndarray:
    """Advance state(s) one frame via k explicit-Euler sub-steps of h = dt/k."""
    z = np.asarray(z, dtype=np.float64)
    single = z.ndim == 1
    state = np.atleast_2d(z)
    h = model.dt / model.k
    Xi = model.effective_Xi()
    with np.errstate(over="ignore", invalid="ignore"):
        for i in range(model.k):
            state = state + h * (evaluate_library(state, model.spec) @ Xi)
            if not np.all(np.isfinite(state)):
                raise RolloutDivergenceError(i)
    return state[0] if single else state


def rollout(model: SindyModel, z0: np.ndarray, steps: int) -> np.ndarray:
    """Trajectory of shape (steps + 1, d) from z0 under repeated sindy_cell."""
    z0 = np.asarray(z0, dtype=np.float64)
    out = np.empty((steps + 1, z0.shape[-1]))
    out[0] = z0
    z = z0
    for t in range(steps):
        z = sindy_cell(z, model)
        out[t + 1] = z
    return out


def euler_rollout_features(z0: Tensor, xi_stack: Tensor, spec: LibrarySpec,
                           dt: float, k: int) -> Tensor:
    """Differentiable k-mini-step Euler advance.

    ``z0`` is (batch, d) or broadcastable (1, batch, d); ``xi_stack`` is either
    a (p, d) matrix or a stacked (members, p, d) tensor, in which case the
    returned state is (members, batch, d) with each member advancing its own
    trajectory after the shared initial state.
    """
    h = dt / k
    z = z0
    for _ in range(k):
        theta = library_features(z, spec)
        z = z + dc.scale(theta @ xi_stack, h)
    return z


def ensemble_sindy_loss(z_t: Tensor, z_next: Tensor, xi_tensors: list[Tensor],
                        masks: list[np.ndarray], spec: LibrarySpec,
                        dt: float, k: int) -> Tensor:
    """Sum over ensemble members of mean squared one-step rollout error.

    Gradients reach every Xi and both latent endpoints (no stop-gradient), so
    the encoder and the latent dynamics adapt to each other.
    """
    if z_t.shape[0] == 0:
        raise DimensionMismatchError("empty batch")
    if not xi_tensors:
        raise DimensionMismatchError("empty ensemble")
    members = []
    for xi, mask in zip(xi_tensors, masks):
        masked = xi * Tensor(mask.astype(np.float64))
        members.append(masked.reshape(1, *xi.shape))
    xi_stack = dc.concat(members, axis=0) if len(members) > 1 else members[0]
    b, d = z_t.shape
    z0 = z_t.reshape(1, b, d)
    pred = euler_rollout_features(z0, xi_stack, spec, dt, k)
    target = z_next.reshape(1, b, d)
    return dc.mse(pred, target) * float(len(members))


def koopman_loss(latents: list[Tensor], K: Tensor, m_max: int) -> Tensor:
    """Mean over horizons m=1..m_max of squared m-step linear prediction error.

    ``latents`` holds consecutive latent batches [Z_t, Z_t+1, ..., Z_t+m_max]
    (each (batch, d)); the linear map acts on row states, z' = z @ K.
    """
    if m_max < 1:
        raise DimensionMismatchError("m_max must be >= 1")
    if len(latents) < m_max + 1:
        raise DimensionMismatchError(
            f"need {m_max + 1} consecutive latent batches, got {len(latents)}")
    base = latents[0]
    km = K
    terms = []
    for m in range(1, m_max + 1):
        pred = base @ km
        terms.append(dc.mse(pred, latents[m]))
        if m < m_max:
            km = km @ K
    total = terms[0]
    for t in terms[1:]:
        total = total + t
    return dc.scale(total, 1.0 / m_max)


def threshold_prune(model: SindyModel, threshold: float) -> SindyModel:
    """Clear mask entries with |Xi| below threshold; pruning is monotone and idempotent."""
    if threshold < 0:
        raise ValueError("threshold must be >= 0")
    new_mask = model.mask & (np.abs(model.Xi) >= threshold)
    new_Xi = np.where(new_mask, model.Xi, 0.0)
    return replace(model, Xi=new_Xi, mask=new_mask)


def koopman_restrict(spec: LibrarySpec) -> LibrarySpec:
    """Drop constant and nonlinear terms; the remaining Xi is a d x d generator."""
    return LibrarySpec(dim=spec.dim, poly_degree=1, include_constant=False, trig=())


@dataclass
class LinearMode:
    eigenvalue: complex
    omega: float                 # |Im|, 0 for real modes
    growth_rate: float           # Re
    period: float | None         # 2*pi/omega for oscillatory modes
    half_life: float | None      # ln2/|Re| when decaying
    doubling_time: float | None  # ln2/Re when growing
    eigenvector: np.ndarray


@dataclass
class LinearSystemAnalysis:
    generator: np.ndarray
    eigenvalues: np.ndarray
    eigenvectors: np.ndarray
    modes: list[LinearMode]

    def oscillation_frequencies(self) -> list[float]:
        return sorted(m.omega for m in self.modes if m.omega > 0)


def analyze_linear_system(G: np.ndarray) -> LinearSystemAnalysis:
    """Eigendecompose a column-convention generator and report per-mode timescales."""
    G = np.asarray(G, dtype=np.float64)
    if G.ndim != 2 or G.shape[0] != G.shape[1]:
        raise DimensionMismatchError(f"generator must be square, got {G.shape}")
    if not np.all(np.isfinite(G)):
        raise EigenAnalysisError("generator has non-finite entries")
    try:
        eigvals, eigvecs = np.linalg.eig(G)
    except np.linalg.LinAlgError as exc:
        raise EigenAnalysisError(f"eigensolver failed: {exc}") from exc
    scale = max(np.linalg.norm(G), 1e-300)
    for mu, v in zip(eigvals, eigvecs.T):
        resid = np.linalg.norm(G @ v - mu * v)
        if resid > 1e-8 * scale * np.linalg.norm(v):
            raise EigenAnalysisError(f"eigenpair residual {resid:.3e} too large")

    modes: list[LinearMode] = []
    used = np.zeros(len(eigvals), dtype=bool)
    order = np.argsort(-np.abs(eigvals.imag))
    for i in order:
        if used[i]:
            continue
        mu = eigvals[i]
        used[i] = True
        if abs(mu.imag) > 1e-12:
            # Consume the conjugate partner so each pair is reported once.
            partner = None
            for j in range(len(eigvals)):
                if not used[j] and abs(eigvals[j] - np.conj(mu)) <= 1e-8 * max(1.0, abs(mu)):
                    partner = j
                    break
            if partner is not None:
                used[partner] = True
            omega = abs(mu.imag)
            lam = mu.real
            modes.append(LinearMode(
                eigenvalue=complex(mu), omega=omega, growth_rate=lam,
                period=2.0 * math.pi / omega,
                half_life=math.log(2.0) / abs(lam) if lam < 0 else None,
                doubling_time=math.log(2.0) / lam if lam > 0 else None,
                eigenvector=eigvecs[:, i]))
        else:
            lam = mu.real
            modes.append(LinearMode(
                eigenvalue=complex(mu), omega=0.0, growth_rate=lam, period=None,
                half_life=math.log(2.0) / abs(lam) if lam < 0 else None,
                doubling_time=math.log(2.0) / lam if lam > 0 else None,
                eigenvector=eigvecs[:, i].real))
    return LinearSystemAnalysis(generator=G, eigenvalues=eigvals,
                                eigenvectors=eigvecs, modes=modes)


def equations_text(model: SindyModel, var: str = "z") -> str:
    """Plain-text listing, one line per coordinate's discovered equation."""
    names = model.spec.term_names(var)
    Xi = model.effective_Xi()
    lines = []
    for j in range(model.spec.dim):
        terms = []
        for i, name in enumerate(names):
            c = Xi[i, j]
            if model.mask[i, j] and c != 0.0:
                sign = "-" if c < 0 else ("+" if terms else "")
                mag = abs(c)
                body = f"{mag:.6g}" if name == "1" else f"{mag:.6g} {name}"
                terms.append(f"{sign} {body}" if terms else f"{sign}{body}")
        rhs = " ".join(terms) if terms else "0"
        lines.append(f"d{var}{j + 1}/dt = {rhs}")
    return "\n".join(lines)
