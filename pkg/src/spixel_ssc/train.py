"""Joint training of the superpixel and self-representation stages.

The pipeline graph is fixed (features -> superpixels -> normalised centroids
-> unfolded ADMM -> losses), so reverse mode is written out stage by stage
instead of going through a general tape.
"""
from __future__ import annotations

import csv
import json
import logging
import os
import struct
import tempfile
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import admm, kernels, losses
from .errors import ConfigError, NumericalError
from .superpixel import (
    DEFAULT_G,
    AdaptedFeatures,
    SoftAssignment,
    SuperpixelState,
    SuperpixelTrace,
    adapt_features,
    quantized_features,
    run_superpixels,
    superpixels_backward,
)

logger = logging.getLogger(__name__)

PARAM_NAMES = ("delta", "raw_compactness", "raw_lambda_sr")
ABLATION_MODES = ("M1", "M2", "M3", "M4", "full")
LOSS_COLUMNS = ("spixel_compact", "spixel_consistency", "recon", "l1", "entropy", "noise", "rep", "total")

CHECKPOINT_MAGIC = b"SPXCKPT\x00"
CHECKPOINT_VERSION = 1


def softplus(x):
    return np.logaddexp(0.0, x)


def softplus_inv(y: float) -> float:
    return float(np.log(np.expm1(y)))


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x, dtype=np.float64)))


@dataclass(frozen=True)
class TrainConfig:
    alpha: float = 50.0
    epochs: int = 200
    learning_rate: float = 1e-3
    tau: float = 0.1
    T: int = 10
    K: int = 15
    rho: float = 1.0
    M: int | None = None
    seed: int = 0
    ablation_mode: str = "full"
    G: int = DEFAULT_G
    lambda_init: float = 0.1
    noise_weight: float = losses.NOISE_WEIGHT
    checkpoint_every: int = 50

    def __post_init__(self):
        if self.ablation_mode not in ABLATION_MODES:
            raise ConfigError(f"ablation_mode must be one of {ABLATION_MODES}, got {self.ablation_mode!r}")
        for name in ("tau", "rho", "learning_rate", "lambda_init"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        for name in ("T", "K", "G"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.epochs < 0 or self.alpha < 0 or self.noise_weight < 0:
            raise ConfigError("epochs, alpha and noise_weight must be nonnegative")
        if self.M is not None and self.M < 1:
            raise ConfigError(f"M must be positive, got {self.M}")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class Phase:
    """Which loss terms drive the gradient and which parameters move."""

    epochs: int
    rep_weight: float
    spixel_weight: float
    noise_weight: float
    active: frozenset


def phases(config: TrainConfig) -> list[Phase]:
    all_params = frozenset(PARAM_NAMES)
    spixel_params = frozenset({"delta", "raw_compactness"})
    rep_params = frozenset({"raw_lambda_sr"})
    E, a = config.epochs, config.alpha
    mode = config.ablation_mode
    if mode == "M1":
        return []
    if mode == "M2":
        return [Phase(E, 0.0, 1.0, 1.0, spixel_params)]
    if mode == "M3":
        return [Phase(E, a, 0.0, 0.0, rep_params)]
    if mode == "M4":
        first = E // 2
        return [Phase(first, 0.0, 1.0, 1.0, spixel_params), Phase(E - first, a, 0.0, 0.0, rep_params)]
    return [Phase(E, a, 1.0, 1.0, all_params)]


@dataclass
class ParameterSet:
    delta: np.ndarray
    raw_compactness: np.ndarray
    raw_lambda_sr: np.ndarray
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0

    @classmethod
    def initial(cls, n_pixels: int, bands: int, M: int, lambda_init: float = 0.1) -> "ParameterSet":
        ps = cls(np.zeros((n_pixels, bands)), np.zeros(M), np.array([softplus_inv(lambda_init)]))
        for name in PARAM_NAMES:
            ps.m[name] = np.zeros_like(ps[name])
            ps.v[name] = np.zeros_like(ps[name])
        return ps

    def __getitem__(self, name: str) -> np.ndarray:
        return getattr(self, name)

    @property
    def compactness(self) -> np.ndarray:
        return sigmoid(self.raw_compactness)

    @property
    def lambda_sr(self) -> float:
        return float(softplus(self.raw_lambda_sr[0]))

    def copy(self) -> "ParameterSet":
        return ParameterSet(self.delta.copy(), self.raw_compactness.copy(), self.raw_lambda_sr.copy(),
                            {k: a.copy() for k, a in self.m.items()}, {k: a.copy() for k, a in self.v.items()},
                            self.step)


@dataclass
class Trace:
    """Everything :func:`backward` needs to replay a forward pass."""

    params: ParameterSet
    config: TrainConfig
    feat: AdaptedFeatures
    sp_trace: SuperpixelTrace
    assignment: SoftAssignment
    state: SuperpixelState
    F: np.ndarray
    nf: admm.NormalizedFeatures
    selfrep: admm.SelfRepState
    report: losses.LossReport
    consistency_grad: np.ndarray


def _check(stage: str, *arrays) -> None:
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise NumericalError(stage)


def forward(params: ParameterSet, X: np.ndarray, height: int, width: int,
            config: TrainConfig) -> tuple[losses.LossReport, Trace]:
    """Evaluate every loss term for the current parameters."""
    M = params.raw_compactness.size
    feat = adapt_features(X, params.delta, height, width, M)
    _check("features", feat.Xp)
    w = params.compactness
    assignment, state, sp_trace = run_superpixels(feat, w, M, config.T, config.tau, config.G)
    _check("superpixels", state.S, state.rS, assignment.probs)
    F = quantized_features(state, assignment.hard)
    nf = admm.normalize_features(state.S)
    selfrep = admm.unfold_forward(nf.Shat, config.K, config.rho, params.lambda_sr)
    _check("self-representation", selfrep.Z, selfrep.C)
    Z = selfrep.Z
    consistency, consistency_grad = kernels.consistency(assignment.probs, assignment.candidates, height, width)
    report = losses.LossReport.from_parts(
        spixel_compact=losses.compactness_loss(feat.Xp, F),
        spixel_consistency=consistency,
        recon=losses.recon_loss(nf.Shat, Z),
        l1=losses.l1_loss(Z),
        entropy=losses.entropy_loss(Z),
        noise=losses.noise_loss(params.delta, config.noise_weight),
        alpha=config.alpha,
    )
    _check("losses", np.array(report.total))
    return report, Trace(params, config, feat, sp_trace, assignment, state, F, nf, selfrep, report,
                         consistency_grad)


def backward(trace: Trace, phase: Phase | None = None) -> dict[str, np.ndarray]:
    """Exact gradient of the phase objective w.r.t. the raw parameters.

    The default phase is the full objective ``alpha*rep + spixel + noise``
    with every parameter active.  Inactive parameters get exact zeros.
    """
    cfg = trace.config
    if phase is None:
        phase = Phase(0, cfg.alpha, 1.0, 1.0, frozenset(PARAM_NAMES))
    params = trace.params
    feat, asg, state = trace.feat, trace.assignment, trace.state
    H, W = trace.feat.height, trace.feat.width
    grads = {name: np.zeros_like(params[name]) for name in PARAM_NAMES}

    need_spixel_path = bool({"delta", "raw_compactness"} & phase.active)
    gS = np.zeros_like(state.S)
    glam = 0.0
    if phase.rep_weight != 0.0:
        Shat, Z = trace.nf.Shat, trace.selfrep.Z
        gShat_r, gZ_r = losses.recon_loss_grad(Shat, Z)
        gZ = phase.rep_weight * (losses.REP_RECON_WEIGHT * gZ_r + losses.l1_loss_grad(Z)
                                 + losses.entropy_loss_grad(Z))
        gShat, glam = admm.unfold_backward(Shat, trace.selfrep, gZ)
        gShat += phase.rep_weight * losses.REP_RECON_WEIGHT * gShat_r
        if need_spixel_path:
            gS += admm.normalize_backward(trace.nf, gShat)

    if need_spixel_path:
        gXp = np.zeros_like(feat.Xp)
        gP_last = None
        if phase.spixel_weight != 0.0:
            gx, gF = losses.compactness_loss_grad(feat.Xp, trace.F)
            gXp += phase.spixel_weight * gx
            gS += kernels.segment_sum(asg.hard, phase.spixel_weight * gF, gS.shape[0])
            gP_last = phase.spixel_weight * trace.consistency_grad
        gx, gw = superpixels_backward(trace.sp_trace, gS, gP_last)
        gXp += gx
        w = params.compactness
        grads["delta"] = gXp
        grads["raw_compactness"] = gw * w * (1.0 - w)
    if phase.noise_weight != 0.0:
        grads["delta"] = grads["delta"] + phase.noise_weight * losses.noise_loss_grad(params.delta, cfg.noise_weight)
    grads["raw_lambda_sr"] = np.array([glam * float(sigmoid(params.raw_lambda_sr[0]))])

    for name in PARAM_NAMES:
        if name not in phase.active:
            grads[name] = np.zeros_like(params[name])
        _check(f"gradient of {name}", grads[name])
    return grads


def adam_step(params: ParameterSet, grads: dict[str, np.ndarray], lr: float,
              betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8,
              active=PARAM_NAMES) -> ParameterSet:
    """Bias-corrected Adam update, in place; returns ``params``.

    Parameters outside ``active`` keep their values and moments.
    """
    b1, b2 = betas
    params.step += 1
    t = params.step
    for name in active:
        g = grads[name]
        m = b1 * params.m[name] + (1.0 - b1) * g
        v = b2 * params.v[name] + (1.0 - b2) * g * g
        params.m[name], params.v[name] = m, v
        m_hat = m / (1.0 - b1 ** t)
        v_hat = v / (1.0 - b2 ** t)
        setattr(params, name, params[name] - lr * m_hat / (np.sqrt(v_hat) + eps))
    return params


# ----------------------------------------------------------------- checkpoint


def save_checkpoint(path, params: ParameterSet, config: TrainConfig, epoch: int) -> Path:
    """Write parameters and optimiser moments atomically.

    Layout: magic, u32 version, u32 header length, JSON header, then every
    array as little-endian float64 in header order.  The config is echoed to
    ``<path>.json``.
    """
    path = Path(path)
    arrays = [(name, params[name]) for name in PARAM_NAMES]
    arrays += [(f"m.{n}", params.m[n]) for n in PARAM_NAMES] + [(f"v.{n}", params.v[n]) for n in PARAM_NAMES]
    header = {
        "epoch": epoch,
        "step": params.step,
        "rng": {"seed": config.seed},
        "config": config.to_dict(),
        "arrays": [[name, list(a.shape)] for name, a in arrays],
    }
    hbytes = json.dumps(header, sort_keys=True).encode()
    payload = b"".join(np.ascontiguousarray(a, dtype="<f8").tobytes() for _, a in arrays)
    blob = CHECKPOINT_MAGIC + struct.pack("<II", CHECKPOINT_VERSION, len(hbytes)) + hbytes + payload
    _atomic_write(path, blob)
    _atomic_write(path.with_name(path.name + ".json"),
                  (json.dumps(config.to_dict(), indent=2, sort_keys=True) + "\n").encode())
    return path


def load_checkpoint(path) -> tuple[ParameterSet, TrainConfig, int]:
    blob = Path(path).read_bytes()
    if blob[:8] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path} is not a checkpoint")
    version, hlen = struct.unpack("<II", blob[8:16])
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    header = json.loads(blob[16:16 + hlen])
    offset = 16 + hlen
    arrays = {}
    for name, shape in header["arrays"]:
        n = int(np.prod(shape))
        arrays[name] = np.frombuffer(blob, dtype="<f8", count=n, offset=offset).reshape(shape).astype(np.float64)
        offset += 8 * n
    ps = ParameterSet(arrays["delta"], arrays["raw_compactness"], arrays["raw_lambda_sr"],
                      {n: arrays[f"m.{n}"] for n in PARAM_NAMES}, {n: arrays[f"v.{n}"] for n in PARAM_NAMES},
                      header["step"])
    return ps, TrainConfig.from_dict(header["config"]), header["epoch"]


def _atomic_write(path: Path, data: bytes) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


# ---------------------------------------------------------------------- loop


@dataclass
class TrainResult:
    params: ParameterSet
    history: list[losses.LossReport]
    trace: Trace


def train(X: np.ndarray, height: int, width: int, M: int, config: TrainConfig,
          loss_csv=None, checkpoint=None) -> TrainResult:
    """Run the ablation-mode schedule and return the final parameters.

    Row ``e`` of the loss history holds the losses after ``e`` optimiser
    steps, so ``M1`` yields a single row for the initial parameters.
    """
    X = np.asarray(X, dtype=np.float64)
    params = ParameterSet.initial(X.shape[0], X.shape[1], M, config.lambda_init)
    history: list[losses.LossReport] = []
    writer = fh = None
    if loss_csv is not None:
        fh = open(loss_csv, "w", newline="")
        writer = csv.writer(fh)
        writer.writerow(("epoch",) + LOSS_COLUMNS)

    def record(report):
        history.append(report)
        if writer is not None:
            writer.writerow([len(history) - 1] + [repr(getattr(report, c)) for c in LOSS_COLUMNS])

    last_good = params.copy()
    try:
        epoch = 0
        for phase in phases(config):
            for _ in range(phase.epochs):
                try:
                    report, trace = forward(params, X, height, width, config)
                    record(report)
                    grads = backward(trace, phase)
                    adam_step(params, grads, config.learning_rate, active=sorted(phase.active))
                    _check("parameters", params.delta, params.raw_compactness, params.raw_lambda_sr)
                except NumericalError:
                    if checkpoint is not None:
                        save_checkpoint(checkpoint, last_good, config, epoch)
                    raise
                epoch += 1
                last_good = params.copy()
                if checkpoint is not None and config.checkpoint_every and epoch % config.checkpoint_every == 0:
                    save_checkpoint(checkpoint, params, config, epoch)
        report, trace = forward(params, X, height, width, config)
        record(report)
        if checkpoint is not None:
            save_checkpoint(checkpoint, params, config, epoch)
    finally:
        if fh is not None:
            fh.close()
    return TrainResult(params, history, trace)
