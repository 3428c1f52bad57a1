"""Adversarial training against worst-case measurement perturbations.

The inner maximization of the robust objective is approximated by gradient
ascent on the dual surrogate psi = loss + gamma*(rho - ||z - zeta||^2) with
respect to the inputs.  The radius rho enters psi only as an additive
constant, so it never affects a gradient, a training trajectory, or an
attack -- only reported objective values.  Perturbed inputs are treated as
constants when the model is subsequently trained (perturb, then fit).
"""

import time
from dataclasses import dataclass

import numpy as np

from . import metrics, unrolled
from .autodiff import Tape, huber_value
from .errors import ConfigError, DimensionError, NumericsError

COSTS = ("l2sq",)


@dataclass(frozen=True)
class RobustConfig:
    """Dual multiplier gamma, radius rho, and input-ascent settings."""

    gamma: float = 0.13
    rho: float = 0.0
    eta: float = 0.02
    steps: int = 1
    cost: str = "l2sq"
    normalize: bool = False

    def __post_init__(self):
        if not self.gamma > 0:
            raise ConfigError(f"gamma must be > 0, got {self.gamma}")
        if self.rho < 0:
            raise ConfigError(f"rho must be >= 0, got {self.rho}")
        if self.eta < 0:
            raise ConfigError(f"eta must be >= 0, got {self.eta}")
        if self.steps < 1:
            raise ConfigError(f"ascent steps must be >= 1, got {self.steps}")
        if self.cost not in COSTS:
            raise ConfigError(f"unsupported transport cost '{self.cost}'")


def _batched(Z, Vstar):
    Z = np.atleast_2d(np.asarray(Z, dtype=float))
    V = np.atleast_2d(np.asarray(Vstar, dtype=float))
    if Z.shape[0] != V.shape[0]:
        raise DimensionError(
            f"{Z.shape[0]} measurement rows vs {V.shape[0]} reference states"
        )
    return Z, V


def psi(model, zeta, z, v_star, rc: RobustConfig, delta=1.0):
    """Dual surrogate loss + gamma*(rho - cost), averaged over the batch."""
    zeta = np.atleast_2d(np.asarray(zeta, dtype=float))
    z, v = _batched(z, v_star)
    if zeta.shape != z.shape:
        raise DimensionError(f"zeta shape {zeta.shape} vs z shape {z.shape}")
    loss = huber_value(model.predict(zeta), v, delta)
    cost = float(np.mean(np.sum((z - zeta) ** 2, axis=-1)))
    val = loss + rc.gamma * (rc.rho - cost)
    if not np.isfinite(val):
        raise NumericsError("non-finite dual objective")
    return val


def adversarial_perturb(model, Z, Vstar, rc: RobustConfig, delta=1.0):
    """Ascend the dual surrogate in input space, one step per rc.steps.

    The squared-distance cost has zero gradient at zeta = z, so the first
    step is exactly eta * grad of the loss.  Per-sample gradients are
    independent of batch composition.  rho does not appear anywhere here.
    """
    Z, V = _batched(Z, Vstar)
    zeta = Z.copy()
    if rc.eta == 0.0:
        return zeta
    nb = Z.shape[0]
    for _ in range(rc.steps):
        tape = Tape()
        zt = tape.tensor(zeta)
        pred = model.forward(tape, zt)
        # sum of per-sample mean losses, so each row's gradient is its own
        obj = tape.scale(tape.huber(pred, tape.tensor(V), delta), nb)
        diff = tape.sub(zt, tape.tensor(Z))
        obj = tape.add(obj, tape.scale(tape.sumsq(diff), -rc.gamma))
        tape.backward(obj)
        g = zt.grad
        if not np.all(np.isfinite(g)):
            bad = np.where(~np.isfinite(g).all(axis=1))[0]
            raise NumericsError(
                f"non-finite attack gradient at samples {bad.tolist()}"
            )
        if rc.normalize:
            norms = np.linalg.norm(g, axis=1, keepdims=True)
            g = np.divide(g, norms, out=np.zeros_like(g), where=norms > 0)
        zeta = zeta + rc.eta * g
    return zeta


def robust_train(model, dataset, rc: RobustConfig, epochs, batch=32, lr=1e-3,
                 seed=0, delta=1.0):
    """Clean training loop with every batch replaced by its perturbation."""

    def perturb(m, Zb, Vb):
        return adversarial_perturb(m, Zb, Vb, rc, delta=delta)

    return unrolled.train(model, dataset, epochs, batch=batch, lr=lr,
                          seed=seed, delta=delta, perturb=perturb)


def attack_eval(model, dataset, rc: RobustConfig, mm=None, delta=1.0,
                split="test"):
    """Metrics on adversarially perturbed inputs of one dataset split.

    Returns (report, zeta).  report.extra carries the dual-objective
    bookkeeping: mean psi = mean loss + gamma*(rho - mean cost).
    """
    idx = dataset.indices(split)
    if idx.size == 0:
        raise ConfigError(f"dataset has no '{split}' samples")
    Z, V = dataset.Z[idx], dataset.V[idx]
    zeta = adversarial_perturb(model, Z, V, rc, delta=delta)
    t0 = time.perf_counter()
    pred = model.predict(zeta)
    per_sample = (time.perf_counter() - t0) / idx.size
    loss_mean = huber_value(pred, V, delta)
    cost_mean = float(np.mean(np.sum((Z - zeta) ** 2, axis=-1)))
    extra = {
        "psi_mean": loss_mean + rc.gamma * (rc.rho - cost_mean),
        "loss_mean": loss_mean,
        "cost_mean": cost_mean,
        "gamma": rc.gamma,
        "rho": rc.rho,
        "eta": rc.eta,
    }
    report = metrics.evaluate("attacked", pred, V, Z=zeta, mm=mm, delta=delta,
                              runtime_per_sample=per_sample, extra=extra)
    return report, zeta
