"""Joint training of the sensor encoder, decoder, and latent dynamics.

The loop optimizes reconstruction plus a latent-dynamics penalty (ensemble
one-step rollouts, or m-step linear prediction in koopman mode), pruning each
ensemble member at its own threshold on a fixed epoch cadence. All randomness
derives from the config seed through counter-keyed streams, so runs and
resumed runs are bit-reproducible on one platform.
"""

from __future__ import annotations

import json
import struct
import time
import warnings
import zlib
from dataclasses import dataclass, field, asdict

import numpy as np
import scipy.linalg

from . import diffcore as dc
from . import nets, sindy
from .data import WindowedDataset
from .diffcore import Tensor
from .nets import DecoderParams, GruParams
from .sindy import EnsembleSindy, LibrarySpec, SindyModel

CKPT_MAGIC = b"SHRD"
CKPT_VERSION = 1


class ConfigError(ValueError):
    pass


class NumericalAbortError(RuntimeError):
    def __init__(self, epoch: int, batch: int, breakdown: dict):
        super().__init__(f"non-finite loss at epoch {epoch}, batch {batch}: {breakdown}")
        self.epoch = epoch
        self.batch = batch
        self.breakdown = breakdown


class SelectionError(RuntimeError):
    pass


class CheckpointError(RuntimeError):
    pass


def rng_for(seed: int, *key: int) -> np.random.Generator:
    """Counter-keyed stream so every consumer of randomness is independently derived."""
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=tuple(key)))


@dataclass
class ShredConfig:
    lag: int = 52
    latent_dim: int = 3
    epochs: int = 1000
    batch_size: int = 128
    learning_rate: float = 1e-3
    weight_decay: float = 1e-2
    dropout: float = 0.1
    dt: float = 1.0 / 52.0
    ministeps: int = 10
    threshold_interval: int = 100
    threshold_low: float = 0.1
    threshold_high: float = 1.0
    ensemble_size: int = 10
    poly_degree: int = 3
    include_constant: bool = True
    trig: tuple[tuple[str, float], ...] = ()
    mode: str = "sindy"
    seed: int = 0
    koopman_m_max: int = 1
    gru_layers: int = 2
    gru_hidden: int | None = None      # intermediate width; defaults to latent_dim
    decoder_widths: tuple[int, ...] = (350, 400)
    sindy_loss_weight: float = 1.0
    grad_clip: float | None = None
    warmup_epochs: int = 0             # reconstruction-only epochs before the joint phase
    refit_on_prune: bool = False       # least-squares refit of active terms at each event

    def validate(self) -> None:
        positive = {"lag": self.lag, "latent_dim": self.latent_dim,
                    "batch_size": self.batch_size, "learning_rate": self.learning_rate,
                    "dt": self.dt, "ministeps": self.ministeps,
                    "threshold_interval": self.threshold_interval,
                    "ensemble_size": self.ensemble_size, "koopman_m_max": self.koopman_m_max,
                    "gru_layers": self.gru_layers}
        for name, value in positive.items():
            if value <= 0:
                raise ConfigError(f"{name} must be positive, got {value}")
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must be in [0, 1)")
        if self.threshold_low > self.threshold_high:
            raise ConfigError("threshold_low must be <= threshold_high")
        if self.threshold_low < 0:
            raise ConfigError("thresholds must be >= 0")
        if self.mode not in ("sindy", "koopman"):
            raise ConfigError(f"mode must be 'sindy' or 'koopman', got {self.mode!r}")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be >= 0")
        if self.poly_degree < 1:
            raise ConfigError("poly_degree must be >= 1 (latent dynamics need linear terms)")
        if self.warmup_epochs < 0:
            raise ConfigError("warmup_epochs must be >= 0")

    def library(self) -> LibrarySpec:
        spec = LibrarySpec(dim=self.latent_dim, poly_degree=self.poly_degree,
                           include_constant=self.include_constant,
                           trig=tuple((k, float(f)) for k, f in self.trig))
        return sindy.koopman_restrict(spec) if self.mode == "koopman" else spec

    def hidden_sizes(self) -> list[int]:
        mid = self.gru_hidden if self.gru_hidden is not None else self.latent_dim
        return [mid] * (self.gru_layers - 1) + [self.latent_dim]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["trig"] = [[k, f] for k, f in self.trig]
        d["decoder_widths"] = list(self.decoder_widths)
        return d

    @staticmethod
    def from_dict(d: dict) -> "ShredConfig":
        known = {f for f in ShredConfig.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        kwargs = dict(d)
        if "trig" in kwargs:
            kwargs["trig"] = tuple((k, float(f)) for k, f in kwargs["trig"])
        if "decoder_widths" in kwargs:
            kwargs["decoder_widths"] = tuple(int(w) for w in kwargs["decoder_widths"])
        cfg = ShredConfig(**kwargs)
        cfg.validate()
        return cfg


@dataclass
class ShredModel:
    config: ShredConfig
    gru: GruParams
    decoder: DecoderParams
    spec: LibrarySpec
    xi: list[Tensor] = field(default_factory=list)
    masks: list[np.ndarray] = field(default_factory=list)
    thresholds: list[float] = field(default_factory=list)
    K: Tensor | None = None
    selected_index: int | None = None
    extra: dict = field(default_factory=dict)       # sensors, scale, provenance
    optimizer: "dc.AdamW | None" = None             # set by train(); not serialized here

    @property
    def mode(self) -> str:
        return self.config.mode

    def named_parameters(self) -> dict[str, Tensor]:
        params: dict[str, Tensor] = {}
        params.update(self.gru.tensors())
        params.update(self.decoder.tensors())
        for i, xi in enumerate(self.xi):
            params[f"xi{i}"] = xi
        if self.K is not None:
            params["K"] = self.K
        return params

    def dynamics_param_names(self) -> set[str]:
        names = {f"xi{i}" for i in range(len(self.xi))}
        if self.K is not None:
            names.add("K")
        return names

    def member(self, i: int) -> SindyModel:
        xi = np.where(self.masks[i], self.xi[i].data, 0.0)
        return SindyModel(spec=self.spec, Xi=xi, mask=self.masks[i].copy(),
                          dt=self.config.dt, k=self.config.ministeps)

    def ensemble(self) -> EnsembleSindy:
        return EnsembleSindy(models=[self.member(i) for i in range(len(self.xi))],
                             thresholds=list(self.thresholds))

    def koopman_generator(self) -> np.ndarray:
        """Continuous column-convention generator from the learned one-frame map."""
        if self.K is None:
            raise SelectionError("model has no linear dynamics matrix")
        K_col = self.K.data.T
        G = scipy.linalg.logm(K_col) / self.config.dt
        if np.abs(G.imag).max() > 1e-6:
            warnings.warn("matrix log has a notable imaginary part; taking the real part",
                          stacklevel=2)
        return np.real(G)

    def selected_model(self) -> SindyModel:
        if self.mode == "koopman":
            G = self.koopman_generator()
            spec = self.spec
            Xi = G.T
            mask = np.abs(Xi) > 0
            return SindyModel(spec=spec, Xi=Xi, mask=mask,
                              dt=self.config.dt, k=self.config.ministeps)
        if self.selected_index is None:
            raise SelectionError("no ensemble member selected yet")
        return self.member(self.selected_index)

    def encode(self, windows: np.ndarray) -> Tensor:
        return nets.encode_window(windows, self.gru)

    def encode_np(self, windows: np.ndarray, chunk: int = 512) -> np.ndarray:
        """Evaluation-mode latents for a (n, L, S) stack of windows."""
        windows = np.asarray(windows, dtype=np.float64)
        outs = []
        with dc.no_grad():
            for s in range(0, windows.shape[0], chunk):
                outs.append(nets.encode_window(windows[s:s + chunk], self.gru).data)
        return np.concatenate(outs, axis=0)

    def decode_np(self, z: np.ndarray) -> np.ndarray:
        z = np.atleast_2d(np.asarray(z, dtype=np.float64))
        with dc.no_grad():
            return nets.decode(Tensor(z), self.decoder, train_mode=False).data


def init_model(config: ShredConfig, n_sensors: int, n_space: int) -> ShredModel:
    config.validate()
    spec = config.library()
    gru, decoder = nets.init_params(config.seed, n_sensors, config.hidden_sizes(),
                                    list(config.decoder_widths), n_space, config.dropout)
    model = ShredModel(config=config, gru=gru, decoder=decoder, spec=spec)
    if config.mode == "koopman":
        model.K = Tensor(np.eye(config.latent_dim), requires_grad=True)
    else:
        p = spec.term_count
        model.thresholds = sindy.threshold_ladder(config.threshold_low,
                                                  config.threshold_high,
                                                  config.ensemble_size)
        for _ in range(config.ensemble_size):
            model.xi.append(Tensor(np.zeros((p, config.latent_dim)), requires_grad=True))
            model.masks.append(np.ones((p, config.latent_dim), dtype=bool))
    return model


def _initial_xi_estimate(model: ShredModel, dataset: WindowedDataset,
                         max_windows: int = 2048) -> None:
    """Seed every member's coefficients with a ridge fit to the initial latents.

    Untrained-encoder latents are nearly constant, so the fit uses a ridge
    scaled to the feature gram and is discarded entirely if the implied
    one-frame Euler step would be unstable.
    """
    idx = np.unique(dataset.train_idx)
    if idx.size < 3:
        return
    idx = idx[:max_windows]
    latents = model.encode_np(dataset.inputs[idx])
    dZ = sindy.finite_differences(latents, model.config.dt)
    theta = sindy.evaluate_library(latents, model.spec)
    ridge = max(1e-3 * float(np.mean(np.sum(theta * theta, axis=0))), 1e-9)
    gram = theta.T @ theta + ridge * np.eye(theta.shape[1])
    try:
        estimate = np.linalg.solve(gram, theta.T @ dZ)
    except np.linalg.LinAlgError:
        return
    if float(np.abs(estimate).max()) * model.config.dt > 1.0:
        return
    for xi in model.xi:
        xi.data = estimate.copy()


@dataclass
class Batch:
    """Temporally adjacent window groups: windows[m] pairs with windows[m+1] one frame later."""

    windows: list[np.ndarray]   # each (batch, L, S)
    targets: list[np.ndarray]   # each (batch, N)


def make_batch(dataset: WindowedDataset, starts: np.ndarray, horizon: int) -> Batch:
    windows = [dataset.inputs[starts + m] for m in range(horizon + 1)]
    targets = [dataset.targets[starts + m] for m in range(horizon + 1)]
    return Batch(windows=windows, targets=targets)


def combined_loss(batch: Batch, model: ShredModel, train_mode: bool = False,
                  rng: np.random.Generator | None = None,
                  dynamics_enabled: bool = True) -> tuple[Tensor, dict]:
    """Reconstruction MSE plus the latent-dynamics penalty, with a per-term breakdown.

    Sparsity is enforced by the scheduled thresholding events, not by a
    differentiable term.
    """
    if len(batch.windows) < 2:
        raise ConfigError("batch must contain adjacent window groups")
    groups = len(batch.windows)
    nb = batch.windows[0].shape[0]
    stacked = np.concatenate(batch.windows, axis=0)
    latents = model.encode(stacked)
    recon = nets.decode(latents, model.decoder, train_mode=train_mode, rng=rng)
    recon_loss = dc.mse(recon, Tensor(np.concatenate(batch.targets, axis=0)))

    parts = {"recon": float(recon_loss.data)}
    total = recon_loss
    if dynamics_enabled and model.config.sindy_loss_weight > 0:
        zs = [dc.slice_axis(latents, 0, m * nb, (m + 1) * nb) for m in range(groups)]
        if model.mode == "koopman":
            dyn = sindy.koopman_loss(zs, model.K, model.config.koopman_m_max)
        else:
            dyn = sindy.ensemble_sindy_loss(zs[0], zs[1], model.xi, model.masks,
                                            model.spec, model.config.dt,
                                            model.config.ministeps)
        parts["dynamics"] = float(dyn.data)
        total = total + dc.scale(dyn, model.config.sindy_loss_weight)
    else:
        parts["dynamics"] = 0.0
    parts["total"] = float(total.data)
    return total, parts


def _apply_masks(model: ShredModel) -> None:
    for xi, mask in zip(model.xi, model.masks):
        xi.data[~mask] = 0.0


def _prune_members(model: ShredModel) -> list[int]:
    nnz = []
    for xi, mask, thr in zip(model.xi, model.masks, model.thresholds):
        mask &= np.abs(xi.data) >= thr
        xi.data[~mask] = 0.0
        nnz.append(int(mask.sum()))
    return nnz


def _refit_members(model: ShredModel, dataset: WindowedDataset,
                   max_windows: int = 4096) -> None:
    """Snap each member's active coefficients to the one-frame least-squares optimum.

    Targets are forward differences of the current latent trajectory, i.e. the
    exact optimum of the one-mini-step rollout loss; for k > 1 this is a
    second-order-accurate approximation that the gradient phase keeps
    polishing. Masks are untouched.
    """
    idx = np.unique(dataset.train_idx)
    if idx.size < 3:
        return
    idx = idx[:max_windows]
    latents = model.encode_np(dataset.inputs[idx])
    theta = sindy.evaluate_library(latents[:-1], model.spec)
    targets = (latents[1:] - latents[:-1]) / model.config.dt
    for xi, mask in zip(model.xi, model.masks):
        new = np.zeros_like(xi.data)
        for j in range(model.config.latent_dim):
            active = mask[:, j]
            if active.any():
                sol, *_ = np.linalg.lstsq(theta[:, active], targets[:, j], rcond=None)
                new[active, j] = sol
        xi.data = new


def _refit_koopman(model: ShredModel, dataset: WindowedDataset,
                   max_windows: int = 4096) -> None:
    """Snap the linear map to the one-step least-squares optimum on current latents."""
    idx = np.unique(dataset.train_idx)
    if idx.size < 3:
        return
    latents = model.encode_np(dataset.inputs[idx[:max_windows]])
    K, *_ = np.linalg.lstsq(latents[:-1], latents[1:], rcond=None)
    model.K.data = K


def train(dataset: WindowedDataset, config: ShredConfig,
          resume_from=None) -> tuple[ShredModel, list[dict]]:
    """Run the full training schedule and return the model plus per-epoch log.

    The log records epoch, mean loss terms, per-member active-term counts, and
    wall time. With ``resume_from`` pointing at a checkpoint, training
    continues from the stored epoch and reproduces an uninterrupted run
    exactly.
    """
    config.validate()
    if dataset.n_windows < 2:
        raise ConfigError("dataset must contain at least two windows")
    n_sensors = dataset.inputs.shape[2]
    n_space = dataset.targets.shape[1]

    if resume_from is not None:
        model, optimizer, start_epoch = load_checkpoint(resume_from)
        # The stored config snapshot wins; only the target epoch count may move.
        model.config.epochs = config.epochs
        config = model.config
    else:
        model = init_model(config, n_sensors, n_space)
        if config.mode == "sindy" and config.warmup_epochs == 0:
            _initial_xi_estimate(model, dataset)
        optimizer = dc.AdamW(model.named_parameters(), lr=config.learning_rate,
                             weight_decay=config.weight_decay,
                             grad_clip=config.grad_clip,
                             no_decay=model.dynamics_param_names())
        start_epoch = 0

    horizon = config.koopman_m_max if config.mode == "koopman" else 1
    max_start = int(dataset.train_idx.max()) - horizon if dataset.train_idx.size else -1
    starts_pool = dataset.train_idx[dataset.train_idx <= max_start]
    if config.epochs > 0 and starts_pool.size == 0:
        raise ConfigError("training split has no adjacent window pairs")

    log: list[dict] = []
    dynamics_enabled = True
    for epoch in range(start_epoch + 1, config.epochs + 1):
        t0 = time.perf_counter()
        in_warmup = epoch <= config.warmup_epochs
        if config.mode == "sindy" and config.warmup_epochs and epoch == config.warmup_epochs + 1:
            _initial_xi_estimate(model, dataset)
        use_dynamics = (dynamics_enabled and not in_warmup
                        and config.sindy_loss_weight > 0)
        shuffle_rng = rng_for(config.seed, 1, epoch)
        order = shuffle_rng.permutation(starts_pool)
        sums = {"total": 0.0, "recon": 0.0, "dynamics": 0.0}
        n_batches = 0
        for bi, s in enumerate(range(0, order.size, config.batch_size)):
            starts = order[s:s + config.batch_size]
            batch = make_batch(dataset, starts, horizon)
            drop_rng = rng_for(config.seed, 2, epoch, bi)
            loss, parts = combined_loss(batch, model, train_mode=True, rng=drop_rng,
                                        dynamics_enabled=use_dynamics)
            if not np.isfinite(parts["total"]):
                raise NumericalAbortError(epoch, bi, parts)
            dc.backward(loss)
            if not use_dynamics:
                # Dynamics params sit outside the graph during warmup and once
                # every member prunes to null; freeze them explicitly.
                for name in model.dynamics_param_names():
                    p = optimizer.params[name]
                    if p.grad is None:
                        p.grad = np.zeros(p.shape)
            optimizer.step()
            if model.xi:
                _apply_masks(model)
            for k in sums:
                sums[k] += parts[k]
            n_batches += 1

        record = {"epoch": epoch,
                  "loss": sums["total"] / n_batches,
                  "recon": sums["recon"] / n_batches,
                  "dynamics": sums["dynamics"] / n_batches}
        joint_epoch = epoch - config.warmup_epochs
        if (config.mode == "sindy" and joint_epoch > 0
                and joint_epoch % config.threshold_interval == 0):
            record["nnz"] = _prune_members(model)
            record["pruned"] = True
            if dynamics_enabled and all(n == 0 for n in record["nnz"]):
                warnings.warn("every ensemble member pruned to the null model; "
                              "continuing with reconstruction loss only", stacklevel=2)
                dynamics_enabled = False
            if config.refit_on_prune and dynamics_enabled:
                _refit_members(model, dataset)
        elif config.mode == "sindy":
            record["nnz"] = [int(m.sum()) for m in model.masks]
        record["wall_time"] = time.perf_counter() - t0
        log.append(record)

    if config.refit_on_prune and config.epochs > start_epoch:
        if config.mode == "sindy" and dynamics_enabled and model.xi:
            _refit_members(model, dataset)
        elif config.mode == "koopman":
            _refit_koopman(model, dataset)

    if config.mode == "sindy" and config.epochs > 0 and model.xi:
        latents = _selection_latents(model, dataset)
        if latents is not None:
            try:
                model.selected_index, _, _ = select_discovered_model(model, latents)
            except SelectionError:
                model.selected_index = None
    model.optimizer = optimizer
    return model, log


def _selection_latents(model: ShredModel, dataset: WindowedDataset) -> np.ndarray | None:
    idx = dataset.val_idx if dataset.val_idx.size >= 3 else np.unique(dataset.train_idx)
    if idx.size < 3:
        return None
    return model.encode_np(dataset.inputs[idx])


def select_discovered_model(model: ShredModel,
                            latents: np.ndarray) -> tuple[int, SindyModel, str]:
    """Pick the sparsest member whose validation rollout MSE is within 10% of the best.

    The rollout starts from the first validation latent and runs the member's
    cell for the whole span with no corrections; diverging members score inf.
    """
    latents = np.asarray(latents, dtype=np.float64)
    if latents.ndim != 2 or latents.shape[0] < 2:
        raise SelectionError("need a latent trajectory with at least 2 rows")
    mses = []
    for i in range(len(model.xi)):
        member = model.member(i)
        try:
            traj = sindy.rollout(member, latents[0], latents.shape[0] - 1)
            mse = float(np.mean((traj - latents) ** 2))
        except sindy.RolloutDivergenceError:
            mse = float("inf")
        if not np.isfinite(mse):
            mse = float("inf")
        mses.append(mse)
    best = min(mses)
    if not np.isfinite(best):
        raise SelectionError(f"all ensemble members diverge on validation rollout: {mses}")
    cutoff = best * 1.1
    candidates = [i for i, m in enumerate(mses) if m <= cutoff]
    chosen = min(candidates, key=lambda i: (model.member(i).nnz, i))
    member = model.member(chosen)
    return chosen, member, sindy.equations_text(member)


# ---------------------------------------------------------------------------
# Checkpoint container
# ---------------------------------------------------------------------------

def _write_section(f, name: str, array: np.ndarray) -> None:
    name_b = name.encode()
    arr = np.ascontiguousarray(array, dtype="<f8")
    dims = arr.shape
    head = struct.pack("<H", len(name_b)) + name_b + struct.pack("<B", arr.ndim)
    head += b"".join(struct.pack("<Q", d) for d in dims)
    payload = arr.tobytes()
    crc = zlib.crc32(name_b + payload) & 0xFFFFFFFF
    f.write(head)
    f.write(payload)
    f.write(struct.pack("<I", crc))


def _read_sections(raw: bytes, off: int) -> dict[str, np.ndarray]:
    out = {}
    n = len(raw)
    while off < n:
        name = "<unknown>"
        try:
            (name_len,) = struct.unpack_from("<H", raw, off)
            off += 2
            name = raw[off:off + name_len].decode()
            off += name_len
            (ndims,) = struct.unpack_from("<B", raw, off)
            off += 1
            dims = struct.unpack_from(f"<{ndims}Q", raw, off) if ndims else ()
            off += 8 * ndims
            count = int(np.prod(dims)) if dims else 1
            payload = raw[off:off + 8 * count]
            if len(payload) < 8 * count:
                raise CheckpointError(f"section {name!r}: truncated payload")
            off += 8 * count
            (crc,) = struct.unpack_from("<I", raw, off)
            off += 4
        except struct.error:
            raise CheckpointError(f"section {name!r}: truncated container") from None
        if zlib.crc32(name.encode() + payload) & 0xFFFFFFFF != crc:
            raise CheckpointError(f"section {name!r}: checksum mismatch")
        out[name] = np.frombuffer(payload, dtype="<f8").reshape(dims).copy()
    return out


def save_checkpoint(model: ShredModel, optimizer: dc.AdamW, epoch: int, path) -> None:
    header = {"config": model.config.to_dict(), "epoch": int(epoch),
              "adam_step": int(optimizer.step_count),
              "selected_index": model.selected_index,
              "thresholds": list(model.thresholds),
              "extra": model.extra}
    header_b = json.dumps(header).encode()
    with open(path, "wb") as f:
        f.write(CKPT_MAGIC)
        f.write(struct.pack("<I", CKPT_VERSION))
        f.write(struct.pack("<I", len(header_b)))
        f.write(header_b)
        for name, tensor in model.named_parameters().items():
            _write_section(f, name, tensor.data)
        for i, mask in enumerate(model.masks):
            _write_section(f, f"mask{i}", mask.astype(np.float64))
        for name, arr in optimizer.state_arrays().items():
            _write_section(f, name, arr)


def load_checkpoint(path) -> tuple[ShredModel, dc.AdamW, int]:
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:4] != CKPT_MAGIC:
        raise CheckpointError(f"bad magic {raw[:4]!r}; expected {CKPT_MAGIC.decode()}")
    (version,) = struct.unpack_from("<I", raw, 4)
    if version != CKPT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    (hlen,) = struct.unpack_from("<I", raw, 8)
    header = json.loads(raw[12:12 + hlen].decode())
    sections = _read_sections(raw, 12 + hlen)

    config = ShredConfig.from_dict(header["config"])
    gru_tensor_names = [k for k in sections if k.startswith("gru")]
    n_sensors = sections["gru0.W_u"].shape[0] if gru_tensor_names else 0
    n_space = sections["dec_out.W"].shape[1]
    model = init_model(config, n_sensors, n_space)
    for name, tensor in model.named_parameters().items():
        if name not in sections:
            raise CheckpointError(f"missing section {name!r}")
        tensor.data = sections[name].astype(np.float64)
    for i in range(len(model.masks)):
        model.masks[i] = sections[f"mask{i}"].astype(bool)
    if header["thresholds"]:
        model.thresholds = [float(t) for t in header["thresholds"]]
    model.selected_index = header["selected_index"]
    model.extra = header.get("extra", {})
    optimizer = dc.AdamW(model.named_parameters(), lr=config.learning_rate,
                         weight_decay=config.weight_decay, grad_clip=config.grad_clip,
                         no_decay=model.dynamics_param_names())
    optimizer.load_state_arrays(sections, header["adam_step"])
    model.optimizer = optimizer
    return model, optimizer, int(header["epoch"])


def write_log_jsonl(log: list[dict], path) -> None:
    with open(path, "w") as f:
        for record in log:
            f.write(json.dumps(record) + "\n")
