"""Forecasting, error tables, loss-landscape scans, and theory validation harnesses."""

from __future__ import annotations

import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from . import diffcore as dc
from . import nets, sindy
from .data import WindowedDataset, gen_sine_ode
from .diffcore import Tensor
from .shred import ShredModel, combined_loss, make_batch


class EvaluationError(ValueError):
    pass


def worker_count() -> int:
    """Worker cap from SHRED_THREADS; defaults to available parallelism."""
    env = os.environ.get("SHRED_THREADS")
    if env:
        return max(1, int(env))
    return os.cpu_count() or 1


def _pmap(fn, items: list):
    """Order-preserving map, fanned out over processes when it pays off."""
    workers = worker_count()
    if workers <= 1 or len(items) < 2 * workers:
        return [fn(x) for x in items]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


# ---------------------------------------------------------------------------
# Forecasting
# ---------------------------------------------------------------------------

@dataclass
class ForecastReport:
    predictions: np.ndarray          # (H+1, N); row 0 is the init window's decode
    latents: np.ndarray              # (H+1, d)
    mse_rows: list[dict] = field(default_factory=list)
    total_mse: float | None = None
    traces: dict[int, tuple[np.ndarray, np.ndarray]] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"horizon": int(self.predictions.shape[0] - 1),
                "mse_rows": self.mse_rows, "total_mse": self.total_mse,
                "latents": self.latents.tolist()}


def forecast(model: ShredModel, init_window: np.ndarray, horizon: int) -> ForecastReport:
    """Pure latent rollout: encode once, integrate the discovered dynamics, decode.

    No sensor feedback after initialization. Row t of the predictions aligns
    with the frame t steps after the init window's final frame.
    """
    init_window = np.asarray(init_window, dtype=np.float64)
    if init_window.ndim != 2 or init_window.shape[0] != model.config.lag:
        raise EvaluationError(
            f"init window must be (lag={model.config.lag}, sensors), got {init_window.shape}")
    z0 = model.encode_np(init_window[None])[0]
    d = z0.shape[0]
    latents = np.empty((horizon + 1, d))
    latents[0] = z0
    if model.mode == "koopman":
        K = model.K.data
        z = z0
        for t in range(horizon):
            z = z @ K
            if not np.all(np.isfinite(z)):
                raise sindy.RolloutDivergenceError(t + 1)
            latents[t + 1] = z
    else:
        member = model.selected_model()
        z = z0
        for t in range(horizon):
            try:
                z = sindy.sindy_cell(z, member)
            except sindy.RolloutDivergenceError as exc:
                raise sindy.RolloutDivergenceError(t + 1) from exc
            latents[t + 1] = z
    predictions = model.decode_np(latents)
    return ForecastReport(predictions=predictions, latents=latents)


def horizon_mse(pred: np.ndarray, truth: np.ndarray,
                windows: list[tuple[int, int]]) -> tuple[list[dict], float]:
    """Per-window and total MSE in the units of the supplied fields."""
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if pred.shape != truth.shape:
        raise EvaluationError(f"prediction {pred.shape} and truth {truth.shape} differ")
    rows = []
    for lo, hi in windows:
        if not (0 <= lo < hi <= pred.shape[0]):
            raise EvaluationError(f"window [{lo}, {hi}) outside [0, {pred.shape[0]})")
        rows.append({"window": [int(lo), int(hi)],
                     "mse": float(np.mean((pred[lo:hi] - truth[lo:hi]) ** 2))})
    covered = sorted((lo, hi) for lo, hi in windows)
    total = float(np.mean(np.concatenate(
        [((pred[lo:hi] - truth[lo:hi]) ** 2).reshape(-1) for lo, hi in covered])))
    return rows, total


def sensor_traces(pred: np.ndarray, truth: np.ndarray, held_out: list[int],
                  training_sensors: tuple[int, ...] = ()) -> dict[int, tuple[np.ndarray, np.ndarray]]:
    """Predicted vs. true series at held-out locations (disjoint from training sensors)."""
    overlap = set(held_out) & set(training_sensors)
    if overlap:
        raise EvaluationError(f"held-out sensors overlap training sensors: {sorted(overlap)}")
    return {int(i): (pred[:, i].copy(), truth[:, i].copy()) for i in held_out}


def latent_frequencies(traj: np.ndarray, dt: float) -> list[float]:
    """Dominant angular frequency of each latent coordinate via an interpolated FFT peak."""
    traj = np.atleast_2d(np.asarray(traj, dtype=np.float64))
    n = traj.shape[0]
    freqs = np.fft.rfftfreq(n, d=dt)
    out = []
    for j in range(traj.shape[1]):
        x = traj[:, j] - traj[:, j].mean()
        spec = np.abs(np.fft.rfft(x * np.hanning(n)))
        if spec.size < 3:
            out.append(0.0)
            continue
        k = int(np.argmax(spec[1:]) + 1)
        if 1 <= k < spec.size - 1:
            a, b, c = spec[k - 1], spec[k], spec[k + 1]
            denom = a - 2 * b + c
            shift = 0.5 * (a - c) / denom if denom != 0 else 0.0
        else:
            shift = 0.0
        out.append(2.0 * math.pi * (freqs[k] + shift * (freqs[1] - freqs[0])))
    return out


# ---------------------------------------------------------------------------
# Loss landscape
# ---------------------------------------------------------------------------

@dataclass
class LandscapeGrid:
    alpha: float
    seeds: tuple[int, int]
    ts: np.ndarray             # grid coordinates in [-1, 1]
    values: np.ndarray         # (n, n) loss at (t_x, t_y)
    base_loss: float

    def rows(self):
        for i, tx in enumerate(self.ts):
            for j, ty in enumerate(self.ts):
                yield float(tx), float(ty), float(self.values[i, j])


def _directions(params: dict[str, Tensor], seed: int) -> dict[str, np.ndarray]:
    """Per-tensor Gaussian directions, normalized and rescaled to the tensor's norm.

    This mirrors the filter-wise normalization of the visualization method the
    scan follows: each tensor is displaced relative to its own scale, so t = 1
    at alpha = 1 moves a tensor by its own Frobenius norm.
    """
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    out = {}
    for name in sorted(params):
        r = rng.standard_normal(params[name].shape)
        norm = np.linalg.norm(r)
        scale = np.linalg.norm(params[name].data)
        out[name] = (r / norm) * scale if norm > 0 else r
    return out


def batch_loss_fn(model: ShredModel, dataset: WindowedDataset, batch_size: int = 128):
    """Deterministic eval-mode loss over a fixed leading batch of training pairs."""
    horizon = model.config.koopman_m_max if model.mode == "koopman" else 1
    max_start = int(dataset.train_idx.max()) - horizon
    pool = dataset.train_idx[dataset.train_idx <= max_start]
    starts = pool[:batch_size]
    batch = make_batch(dataset, starts, horizon)

    def loss_fn() -> float:
        with dc.no_grad():
            total, _ = combined_loss(batch, model, train_mode=False)
        return float(total.data)

    return loss_fn


def landscape_scan(model: ShredModel, loss_fn, alpha: float, grid_n: int,
                   seeds: tuple[int, int] = (0, 1)) -> LandscapeGrid:
    """Loss over a 2-D grid of weight perturbations along two random directions.

    Non-finite losses are recorded as +inf cells. The model's parameters are
    restored exactly afterwards, and the grid center reproduces the base loss.
    """
    if grid_n < 3 or grid_n % 2 == 0:
        raise EvaluationError("grid size must be odd and >= 3")
    if alpha < 0:
        raise EvaluationError("alpha must be >= 0")
    params = model.named_parameters()
    base = {name: p.data.copy() for name, p in params.items()}
    rx = _directions(params, seeds[0])
    ry = _directions(params, seeds[1])
    ts = np.linspace(-1.0, 1.0, grid_n)
    base_loss = float(loss_fn())
    values = np.empty((grid_n, grid_n))
    try:
        for i, tx in enumerate(ts):
            for j, ty in enumerate(ts):
                if tx == 0.0 and ty == 0.0:
                    values[i, j] = base_loss
                    continue
                for name, p in params.items():
                    # Perturbation summed first: IEEE commutativity then makes
                    # the grid exactly transpose under direction swap.
                    p.data = base[name] + ((tx * alpha) * rx[name] + (ty * alpha) * ry[name])
                v = loss_fn()
                values[i, j] = v if np.isfinite(v) else np.inf
    finally:
        for name, p in params.items():
            p.data = base[name]
    return LandscapeGrid(alpha=alpha, seeds=tuple(seeds), ts=ts, values=values,
                         base_loss=base_loss)


def landscape_segments(model: ShredModel, loss_fn, alpha: float, seeds: tuple[int, int],
                       n_segments: int, n_points: int, seed: int = 0) -> np.ndarray:
    """Loss samples along segments from the scan center toward random endpoints.

    Segments move from the unperturbed parameters outward to uniformly drawn
    points of the alpha-scaled 2-direction plane, sampled at uniform fractions;
    convexity checking runs on these collinear values.
    """
    if n_points < 3:
        raise EvaluationError("segments need at least 3 samples")
    params = model.named_parameters()
    base = {name: p.data.copy() for name, p in params.items()}
    rx = _directions(params, seeds[0])
    ry = _directions(params, seeds[1])
    rng = np.random.default_rng(seed)
    ends = rng.uniform(-1.0, 1.0, size=(n_segments, 2))
    fractions = np.linspace(0.0, 1.0, n_points)
    values = np.empty((n_segments, n_points))
    try:
        for s in range(n_segments):
            bx, by = ends[s]
            for q, frac in enumerate(fractions):
                tx = frac * bx
                ty = frac * by
                for name, p in params.items():
                    p.data = base[name] + ((tx * alpha) * rx[name] + (ty * alpha) * ry[name])
                v = loss_fn()
                values[s, q] = v if np.isfinite(v) else np.inf
    finally:
        for name, p in params.items():
            p.data = base[name]
    return values


def convexity_check(segments: np.ndarray, tolerance: float = 1e-7) -> tuple[bool, list[tuple]]:
    """Midpoint inequality f((a+b)/2) <= (f(a)+f(b))/2 + tol on every sampled triple.

    ``segments`` is (n_segments, n_points) of losses at uniformly spaced
    collinear points. Returns overall pass/fail plus the violation list
    (segment, i, j, excess).
    """
    segments = np.atleast_2d(np.asarray(segments, dtype=np.float64))
    if segments.shape[1] < 3:
        raise EvaluationError("need >= 3 collinear samples per segment")
    violations = []
    for s in range(segments.shape[0]):
        f = segments[s]
        m = f.size
        for i in range(m - 2):
            for j in range(i + 2, m, 2):
                mid = (i + j) // 2
                excess = f[mid] - 0.5 * (f[i] + f[j]) - tolerance
                if excess > 0:
                    violations.append((s, i, j, float(excess)))
    return len(violations) == 0, violations


def segment_pass_fraction(segments: np.ndarray, tolerance: float = 1e-7) -> float:
    """Fraction of segments with no midpoint-convexity violation."""
    segments = np.atleast_2d(segments)
    ok = 0
    for s in range(segments.shape[0]):
        passed, _ = convexity_check(segments[s:s + 1], tolerance)
        ok += passed
    return ok / segments.shape[0]


# ---------------------------------------------------------------------------
# Coefficient-error scaling harness
# ---------------------------------------------------------------------------

@dataclass
class ScalingCell:
    n: int
    noise: float
    horizon: float
    coef_err_mean: float
    coef_err_std: float
    rollout_err_mean: float
    lambda_min_ratio: float
    excluded: bool

    def to_dict(self) -> dict:
        return {"n": self.n, "noise": self.noise, "horizon": self.horizon,
                "coef_err_mean": self.coef_err_mean, "coef_err_std": self.coef_err_std,
                "rollout_err_mean": self.rollout_err_mean,
                "lambda_min_ratio": self.lambda_min_ratio, "excluded": self.excluded}


@dataclass
class ScalingReport:
    cells: list[ScalingCell]
    slope_n: float
    slope_n_ci: tuple[float, float]
    s_ratio: float               # coef error ratio for doubled noise (expect ~2)
    s_ratio_ci: tuple[float, float]
    lambda_min_overall: float

    def to_dict(self) -> dict:
        return {"cells": [c.to_dict() for c in self.cells],
                "slope_n": self.slope_n, "slope_n_ci": list(self.slope_n_ci),
                "s_ratio": self.s_ratio, "s_ratio_ci": list(self.s_ratio_ci),
                "lambda_min_overall": self.lambda_min_overall}


def _default_scaling_system() -> tuple[np.ndarray, sindy.LibrarySpec]:
    G = np.array([[-0.1, 1.0], [-1.0, -0.1]])
    spec = sindy.LibrarySpec(dim=2, poly_degree=3, include_constant=True)
    return G, spec


def _scaling_trial(args) -> tuple[float, float, float]:
    """One Monte-Carlo fit: returns (coef error, rollout error at T, lambda_min/n)."""
    n, noise, horizon, seed = args
    G, spec = _default_scaling_system()
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    X = rng.uniform(-1.0, 1.0, size=(n, 2))
    theta = sindy.evaluate_library(X, spec)
    xi_true = np.zeros((spec.term_count, 2))
    xi_true[spec.linear_slice, :] = G.T
    targets = X @ G.T + noise * rng.standard_normal((n, 2))
    gram = theta.T @ theta
    lam_min = float(np.linalg.eigvalsh(gram).min()) / n
    fit = sindy.fit_stlsq(X, targets, spec, threshold=0.0, iters=1, ridge=0.0)
    coef_err = float(np.linalg.norm(fit.Xi - xi_true))

    x0 = np.array([1.0, 0.0])
    truth = scipy.linalg.expm(horizon * G) @ x0
    dt = 0.01
    steps = int(round(horizon / dt))
    z = x0.copy()
    for _ in range(steps):
        k1 = (sindy.evaluate_library(z[None], spec) @ fit.Xi)[0]
        k2 = (sindy.evaluate_library((z + 0.5 * dt * k1)[None], spec) @ fit.Xi)[0]
        k3 = (sindy.evaluate_library((z + 0.5 * dt * k2)[None], spec) @ fit.Xi)[0]
        k4 = (sindy.evaluate_library((z + dt * k3)[None], spec) @ fit.Xi)[0]
        z = z + (dt / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
    rollout_err = float(np.linalg.norm(z - truth))
    return coef_err, rollout_err, lam_min


def theory_scaling_experiment(n_values: list[int] | None = None,
                              noise_values: list[float] | None = None,
                              horizon: float = 2.0, trials: int = 20,
                              seed: int = 0) -> ScalingReport:
    """Monte-Carlo sweep of least-squares coefficient error against sample count and noise.

    States are drawn iid from the sampling box (matching the regression model
    the error bound is stated for), noise is added to the derivative targets,
    and thresholding is off. Ill-conditioned cells are flagged and excluded
    from the slope fit.
    """
    n_values = n_values or [100, 1000, 10_000, 100_000]
    noise_values = noise_values or [0.1, 0.2]
    if trials < 20:
        raise EvaluationError("need >= 20 Monte-Carlo trials per cell")
    cells = []
    counter = 0
    for noise in noise_values:
        for n in n_values:
            args = [(n, noise, horizon, seed * 1_000_003 + counter * 1009 + t)
                    for t in range(trials)]
            counter += 1
            results = _pmap(_scaling_trial, args)
            coef = np.array([r[0] for r in results])
            roll = np.array([r[1] for r in results])
            lam = np.array([r[2] for r in results])
            excluded = bool(lam.min() <= 0 or not np.all(np.isfinite(coef)))
            cells.append(ScalingCell(n=n, noise=noise, horizon=horizon,
                                     coef_err_mean=float(coef.mean()),
                                     coef_err_std=float(coef.std(ddof=1)),
                                     rollout_err_mean=float(roll.mean()),
                                     lambda_min_ratio=float(lam.min()),
                                     excluded=excluded))

    # Slope of log coef error vs log n at the first noise level.
    s0 = noise_values[0]
    pts = [(math.log(c.n), math.log(c.coef_err_mean), c.coef_err_std / (c.coef_err_mean * math.sqrt(trials)))
           for c in cells if c.noise == s0 and not c.excluded]
    xs = np.array([p[0] for p in pts])
    ys = np.array([p[1] for p in pts])
    A = np.stack([xs, np.ones_like(xs)], axis=1)
    coefs, res, *_ = np.linalg.lstsq(A, ys, rcond=None)
    slope = float(coefs[0])
    dof = max(1, xs.size - 2)
    resid_var = float(res[0]) / dof if res.size else 0.0
    cov = resid_var * np.linalg.inv(A.T @ A)
    se = math.sqrt(max(cov[0, 0], 1e-30))
    slope_ci = (slope - 1.96 * se, slope + 1.96 * se)

    # Ratio of coefficient error when noise doubles (paired by n).
    ratios = []
    ratio_ses = []
    if len(noise_values) >= 2 and abs(noise_values[1] - 2 * noise_values[0]) < 1e-12:
        for n in n_values:
            lo = next(c for c in cells if c.n == n and c.noise == noise_values[0])
            hi = next(c for c in cells if c.n == n and c.noise == noise_values[1])
            if lo.excluded or hi.excluded:
                continue
            r = hi.coef_err_mean / lo.coef_err_mean
            rel = math.sqrt((lo.coef_err_std / lo.coef_err_mean) ** 2
                            + (hi.coef_err_std / hi.coef_err_mean) ** 2) / math.sqrt(trials)
            ratios.append(r)
            ratio_ses.append(r * rel)
    if ratios:
        s_ratio = float(np.mean(ratios))
        spread = 1.96 * float(np.linalg.norm(ratio_ses)) / len(ratios)
        s_ratio_ci = (s_ratio - spread, s_ratio + spread)
    else:
        s_ratio, s_ratio_ci = float("nan"), (float("nan"), float("nan"))

    return ScalingReport(cells=cells, slope_n=slope, slope_n_ci=slope_ci,
                         s_ratio=s_ratio, s_ratio_ci=s_ratio_ci,
                         lambda_min_overall=float(min(c.lambda_min_ratio for c in cells)))


# ---------------------------------------------------------------------------
# Sine-system comparison: sparse regression vs. a recurrent baseline
# ---------------------------------------------------------------------------

@dataclass
class SineComparisonConfig:
    x0: float = 2.0
    v0: float = 0.0
    dt: float = 0.02
    n_train: int = 1000
    n_test: int = 2000          # 2x the training horizon
    gru_hidden: int = 32
    gru_layers: int = 2
    gru_window: int = 10
    gru_epochs: int = 150
    gru_lr: float = 1e-3
    threshold: float = 0.1
    seed: int = 0


@dataclass
class SineComparisonReport:
    sindy_mse: float
    gru_mse: float
    sin_coefficient: float
    config: SineComparisonConfig

    def to_dict(self) -> dict:
        return {"sindy_mse": self.sindy_mse, "gru_mse": self.gru_mse,
                "sin_coefficient": self.sin_coefficient,
                "sindy_beats_gru": bool(self.sindy_mse < self.gru_mse)}


def sine_comparison(config: SineComparisonConfig | None = None) -> SineComparisonReport:
    """Extrapolation shoot-out on xdd = -sin(x): library regression vs. a GRU predictor.

    Both models see the first half of the trajectory; the report compares MSE
    over the following 2x horizon, extrapolated autoregressively with no
    corrections.
    """
    cfg = config or SineComparisonConfig()
    traj = gen_sine_ode(cfg.x0, cfg.v0, cfg.n_train + cfg.n_test, cfg.dt)
    train = traj[:cfg.n_train + 1]
    test = traj[cfg.n_train:]

    # Route (a): sparse regression with a trig-capable library.
    spec = sindy.LibrarySpec(dim=2, poly_degree=1, include_constant=True,
                             trig=(("sin", 1.0),))
    dZ = sindy.finite_differences(train, cfg.dt)
    fit = sindy.fit_stlsq(train, dZ, spec, threshold=cfg.threshold,
                          dt=cfg.dt, k=40)
    names = spec.term_names(var="x")
    sin_coeff = float(fit.effective_Xi()[names.index("sin(x1)"), 1])
    try:
        pred = sindy.rollout(fit, train[-1], cfg.n_test)
        sindy_mse = float(np.mean((pred - test) ** 2))
    except sindy.RolloutDivergenceError:
        sindy_mse = float("inf")

    # Route (b): stacked GRU, inputs min-max normalized over the training half,
    # teacher-forced one-step training, autoregressive rollout.
    lo = train.min(axis=0)
    hi = train.max(axis=0)
    span = np.where(hi > lo, hi - lo, 1.0)
    norm = lambda x: (x - lo) / span
    denorm = lambda x: x * span + lo
    train_n = norm(train)

    rng = np.random.default_rng(np.random.SeedSequence(cfg.seed, spawn_key=(7,)))
    gru = nets.init_gru(rng, input_size=2,
                        hidden_sizes=[cfg.gru_hidden] * cfg.gru_layers)
    head_W = Tensor(rng.uniform(-0.25, 0.25, (cfg.gru_hidden, 2)), requires_grad=True)
    head_b = Tensor(np.zeros(2), requires_grad=True)
    params = dict(gru.tensors())
    params["head.W"] = head_W
    params["head.b"] = head_b
    opt = dc.AdamW(params, lr=cfg.gru_lr, weight_decay=0.0)

    w = cfg.gru_window
    starts = np.arange(0, train_n.shape[0] - w)
    windows = np.stack([train_n[s:s + w] for s in starts])
    targets = train_n[starts + w]

    def predict(batch_windows: np.ndarray) -> Tensor:
        latent = nets.encode_window(batch_windows, gru)
        return latent @ head_W + head_b

    batch = 64
    for epoch in range(cfg.gru_epochs):
        erng = np.random.default_rng(np.random.SeedSequence(cfg.seed, spawn_key=(8, epoch)))
        order = erng.permutation(starts.size)
        for s in range(0, order.size, batch):
            sel = order[s:s + batch]
            loss = dc.mse(predict(windows[sel]), Tensor(targets[sel]))
            dc.backward(loss)
            opt.step()

    history = train_n[-w:].copy()
    preds = [train_n[-1].copy()]
    with dc.no_grad():
        for _ in range(cfg.n_test):
            nxt = predict(history[None]).data[0]
            preds.append(nxt)
            history = np.vstack([history[1:], nxt])
    gru_pred = denorm(np.array(preds))
    gru_mse = float(np.mean((gru_pred - test) ** 2))

    return SineComparisonReport(sindy_mse=sindy_mse, gru_mse=gru_mse,
                                sin_coefficient=sin_coeff, config=cfg)
