"""Maximum-likelihood training with Adam.

Gradients are exact for the discretized loss: the reverse-time RK4 solve
is recorded on a tape and differentiated.  Reported validation numbers use
the adaptive solver.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import autodiff as ad
from . import field as fieldmod
from .field import VectorFieldParams
from .flow import SolverConfig, log_prob, rk4_path, rk4_steps
from .prior import GrassmannGaussianPrior

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "grassflow-checkpoint"
CHECKPOINT_VERSION = 1
T_MIN, T_MAX = 0.1, 10.0


class TrainingDiverged(RuntimeError):
    pass


class NonFiniteLoss(FloatingPointError):
    def __init__(self, index: int):
        super().__init__(f"non-finite log-likelihood for sample {index}")
        self.index = index


def make_rng(seed: int) -> np.random.Generator:
    """Counter-based generator (Philox) for a 64-bit seed."""
    return np.random.Generator(np.random.Philox(int(seed) & (2**64 - 1)))


@dataclass
class TrainConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    weight_decay: float = 0.0
    epochs: int = 1000
    batch_size: int = 500
    lr_step_epoch: int | None = 20000
    lr_step_factor: float = 0.1
    seed: int = 0
    eval_every: int = 100
    train_dt: float = 0.1
    widths: tuple = fieldmod.TEXTURE_WIDTHS
    T_init: float = 1.0
    train_time: bool = True
    solver: SolverConfig = field(default_factory=SolverConfig)
    out_dir: str | None = None

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("Adam betas must lie in [0, 1)")
        if self.batch_size <= 0 or self.epochs < 0:
            raise ValueError("batch_size must be positive and epochs non-negative")
        self.widths = tuple(int(w) for w in self.widths)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["widths"] = list(self.widths)
        return d


# --------------------------------------------------------------------------
# loss
# --------------------------------------------------------------------------


def _check_finite(logp):
    bad = np.nonzero(~np.isfinite(logp))[0]
    if bad.size:
        raise NonFiniteLoss(int(bad[0]))


def loss_nll(params: VectorFieldParams, prior: GrassmannGaussianPrior, batch, cfg: SolverConfig) -> float:
    """Mean negative log-likelihood of ``batch`` (N, D, k)."""
    batch = np.asarray(batch, dtype=np.float64)
    if batch.shape[0] == 0:
        raise ValueError("empty batch")
    logp = np.atleast_1d(log_prob(params, prior, batch, cfg))
    _check_finite(logp)
    return float(-np.mean(logp))


def nll_tape(params: VectorFieldParams, prior, batch, dt: float, t0: float = 0.0):
    """Record the RK4 loss on a fresh tape.  Returns (loss Var, param Vars)."""
    tape = ad.Tape()
    pv = params.as_vars(tape)
    T = pv.T
    n = rk4_steps(float(np.asarray(ad.value(T)).reshape(())) - t0, dt)
    Y0, delta = rk4_path(pv, np.asarray(batch, dtype=np.float64), T, t0 - T, n)
    logp = prior.log_density_ops(Y0) - delta
    _check_finite(ad.value(logp))
    loss = -1.0 * ad.sum_(logp) / float(np.shape(batch)[0])
    return loss, pv


def loss_and_grad(params: VectorFieldParams, prior, batch, dt: float, t0: float = 0.0):
    """Discretized loss and its gradient as a dict keyed like ``params.arrays()``."""
    loss, pv = nll_tape(params, prior, batch, dt, t0)
    var_arrays = pv.arrays()
    wanted = [v for v in var_arrays.values() if ad.is_var(v)]
    g = ad.backward(loss, wrt=wanted)
    grads = {}
    for name, v in var_arrays.items():
        if ad.is_var(v):
            grads[name] = g[v].reshape(np.shape(params.arrays()[name]))
        else:
            grads[name] = np.zeros_like(np.asarray(params.arrays()[name], dtype=np.float64))
    return float(ad.value(loss).reshape(())), grads


# --------------------------------------------------------------------------
# Adam
# --------------------------------------------------------------------------


@dataclass
class AdamMoments:
    m: dict
    v: dict

    @classmethod
    def zeros_like(cls, arrays: dict) -> "AdamMoments":
        z = {k: np.zeros_like(np.asarray(a, dtype=np.float64)) for k, a in arrays.items()}
        return cls(z, {k: a.copy() for k, a in z.items()})


def _decays(name: str) -> bool:
    return name != "T" and not name.endswith("gate_b")


def adam_step(params: dict, grads: dict, moments: AdamMoments, cfg: TrainConfig, step: int, lr=None):
    """One Adam update (``step`` counts from 1) with decoupled weight decay.

    Weight decay skips the gate biases and the integration time.
    """
    lr = cfg.lr if lr is None else lr
    new, m_new, v_new = {}, {}, {}
    b1, b2 = cfg.beta1, cfg.beta2
    for name, p in params.items():
        p = np.asarray(p, dtype=np.float64)
        g = np.asarray(grads[name], dtype=np.float64)
        m = b1 * moments.m[name] + (1.0 - b1) * g
        v = b2 * moments.v[name] + (1.0 - b2) * g * g
        mhat = m / (1.0 - b1 ** step)
        vhat = v / (1.0 - b2 ** step)
        upd = p - lr * mhat / (np.sqrt(vhat) + cfg.adam_eps)
        if cfg.weight_decay and _decays(name):
            upd = upd - lr * cfg.weight_decay * p
        new[name], m_new[name], v_new[name] = upd, m, v
    return new, AdamMoments(m_new, v_new)


# --------------------------------------------------------------------------
# checkpoints
# --------------------------------------------------------------------------


@dataclass
class Checkpoint:
    params: VectorFieldParams
    prior: GrassmannGaussianPrior
    config: dict
    epoch: int = 0
    rng_state: dict | None = None
    best_val_nll: float | None = None
    seed: int = 0

    def to_json(self) -> str:
        arrays = {}
        for name, a in self.params.arrays().items():
            a = np.asarray(a, dtype=np.float64)
            arrays[name] = {"shape": list(a.shape), "data": [float(x) for x in a.ravel()]}
        doc = {
            "format": CHECKPOINT_FORMAT,
            "version": CHECKPOINT_VERSION,
            "dims": list(self.params.dims),
            "widths": list(self.params.widths),
            "train_time": bool(self.params.train_time),
            "params": arrays,
            "prior": self.prior.to_dict(),
            "seed": int(self.seed),
            "config": self.config,
            "epoch": int(self.epoch),
            "rng_state": self.rng_state,
            "best_val_nll": self.best_val_nll,
            "weight_decay_applied_to": "all weights except gate biases and T",
        }
        return json.dumps(doc, indent=1, default=_json_default)

    def save(self, path) -> None:
        Path(path).write_text(self.to_json())

    @classmethod
    def from_json(cls, text: str) -> "Checkpoint":
        doc = json.loads(text)
        if doc.get("format") != CHECKPOINT_FORMAT:
            raise ValueError("not a grassflow checkpoint")
        if doc.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {doc.get('version')}")
        arrays = {
            name: np.array(entry["data"], dtype=np.float64).reshape(entry["shape"])
            for name, entry in doc["params"].items()
        }
        arrays["T"] = float(arrays["T"].reshape(()))
        params = VectorFieldParams.from_arrays(arrays, doc.get("train_time", True))
        prior = GrassmannGaussianPrior.from_dict(doc["prior"])
        return cls(
            params,
            prior,
            doc.get("config", {}),
            doc.get("epoch", 0),
            doc.get("rng_state"),
            doc.get("best_val_nll"),
            doc.get("seed", 0),
        )

    @classmethod
    def load(cls, path) -> "Checkpoint":
        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(f"no such checkpoint: {path}")
        return cls.from_json(path.read_text())


def _json_default(o):
    if isinstance(o, np.integer):
        return int(o)
    if isinstance(o, np.floating):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, tuple):
        return list(o)
    raise TypeError(f"cannot serialize {type(o).__name__}")


# --------------------------------------------------------------------------
# data for training
# --------------------------------------------------------------------------


@dataclass
class TrainData:
    """Training points, or a sampler producing fresh ones for every batch."""

    val: np.ndarray
    test: np.ndarray | None = None
    train: np.ndarray | None = None
    sampler: Callable[[np.random.Generator, int], np.ndarray] | None = None

    def __post_init__(self):
        if (self.train is None) == (self.sampler is None):
            raise ValueError("give exactly one of train points or a sampler")

    def batches(self, rng, batch_size):
        """Batches for one epoch."""
        if self.sampler is not None:
            yield self.sampler(rng, batch_size)
            return
        perm = rng.permutation(self.train.shape[0])
        for start in range(0, perm.size, batch_size):
            yield self.train[perm[start:start + batch_size]]


# --------------------------------------------------------------------------
# training loop
# --------------------------------------------------------------------------

METRICS_HEADER = ["epoch", "train_nll", "val_nll", "lr", "wall_seconds"]


def _lr_at(cfg: TrainConfig, epoch: int) -> float:
    if cfg.lr_step_epoch and epoch >= cfg.lr_step_epoch:
        return cfg.lr * cfg.lr_step_factor ** (epoch // cfg.lr_step_epoch)
    return cfg.lr


def train(
    cfg: TrainConfig,
    data: TrainData,
    prior: GrassmannGaussianPrior,
    params: VectorFieldParams | None = None,
    callback: Callable[[int, float, float | None], None] | None = None,
) -> Checkpoint:
    """Run ``cfg.epochs`` epochs; returns the last checkpoint.

    With ``cfg.out_dir`` set, ``metrics.csv``, ``last.json`` and
    ``best.json`` are written there.
    """
    rng = make_rng(cfg.seed)
    if params is None:
        params = fieldmod.init(prior.dims, cfg.widths, cfg.seed, cfg.T_init, cfg.train_time)
    params = params.copy()
    arrays = {k: np.asarray(v, dtype=np.float64) for k, v in params.arrays().items()}
    moments = AdamMoments.zeros_like(arrays)
    out = Path(cfg.out_dir) if cfg.out_dir else None
    metrics_path = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        metrics_path = out / "metrics.csv"
        with metrics_path.open("w", newline="") as fh:
            csv.writer(fh, lineterminator="\n").writerow(METRICS_HEADER)

    def snapshot(epoch, best):
        return Checkpoint(params.copy(), prior, cfg.to_dict(), epoch, rng.bit_generator.state, best, cfg.seed)

    best_val = None
    initial_nll = None
    bad_epochs = 0
    step = 0
    start = time.perf_counter()
    ckpt = snapshot(0, None)
    for epoch in range(1, cfg.epochs + 1):
        lr = _lr_at(cfg, epoch - 1)
        losses = []
        for batch in data.batches(rng, cfg.batch_size):
            step += 1
            loss, grads = loss_and_grad(params, prior, batch, cfg.train_dt, cfg.solver.t0)
            if not params.train_time:
                grads["T"] = np.zeros_like(np.asarray(grads["T"]))
            arrays, moments = adam_step(arrays, grads, moments, cfg, step, lr)
            arrays["T"] = float(np.clip(np.asarray(arrays["T"]).reshape(()), T_MIN, T_MAX))
            params = VectorFieldParams.from_arrays(arrays, params.train_time)
            losses.append(loss)
        train_nll = float(np.mean(losses))
        if initial_nll is None:
            initial_nll = train_nll
        if not np.isfinite(train_nll) or train_nll > initial_nll + 10.0 * max(abs(initial_nll), 1.0):
            bad_epochs += 1
            if bad_epochs >= 3:
                raise TrainingDiverged(f"training NLL diverged at epoch {epoch} ({train_nll:.4g})")
        else:
            bad_epochs = 0

        val_nll = None
        if cfg.eval_every and (epoch % cfg.eval_every == 0 or epoch == cfg.epochs):
            val_nll = loss_nll(params, prior, data.val, cfg.solver)
            if best_val is None or val_nll < best_val:
                best_val = val_nll
                if out is not None:
                    snapshot(epoch, best_val).save(out / "best.json")
            log.info("epoch %d: train %.4f  val %.4f  T %.3f", epoch, train_nll, val_nll, arrays["T"])
        if metrics_path is not None:
            with metrics_path.open("a", newline="") as fh:
                csv.writer(fh, lineterminator="\n").writerow(
                    [epoch, repr(train_nll), "" if val_nll is None else repr(val_nll), repr(lr),
                     f"{time.perf_counter() - start:.3f}"]
                )
        if callback is not None:
            callback(epoch, train_nll, val_nll)
        ckpt = snapshot(epoch, best_val)
    if out is not None:
        ckpt.save(out / "last.json")
        if best_val is None:
            ckpt.save(out / "best.json")
    return ckpt
