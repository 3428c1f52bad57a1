"""Newton-Raphson AC power flow (polar) and training-data generation."""

from dataclasses import dataclass, field

import numpy as np

from . import case_io, measurement
from .errors import ConfigError, ConvergenceError, GenerationError
from .grid_model import build_admittance


def _setpoints(case):
    """Per-bus generation, voltage setpoints and bus-type index sets."""
    n = case.n_bus
    pg = np.zeros(n)
    vset = np.array([b.vm for b in case.buses])
    has_gen = np.zeros(n, dtype=bool)
    for g in case.gens:
        pos = case.bus_pos(g.bus)
        pg[pos] += g.pg
        if not has_gen[pos]:
            vset[pos] = g.vg
            has_gen[pos] = True
    types = np.array([{"pq": 0, "pv": 1, "slack": 2}[b.btype] for b in case.buses])
    return pg, vset, types


def solve_powerflow(case, pd=None, qd=None, adm=None, tol=1e-10, max_iter=20):
    """Solve the AC power flow; returns the interleaved rectangular state.

    The slack angle is pinned to 0 (global-rotation gauge).  PV buses hold
    their voltage setpoint; reactive limits are not enforced.
    """
    if adm is None:
        adm = build_admittance(case)
    Y = adm.Y
    n = case.n_bus
    pd = np.array([b.pd for b in case.buses]) if pd is None else np.asarray(pd, dtype=float)
    qd = np.array([b.qd for b in case.buses]) if qd is None else np.asarray(qd, dtype=float)
    pg, vset, types = _setpoints(case)

    pq = np.flatnonzero(types == 0)
    pv = np.flatnonzero(types == 1)
    pvpq = np.concatenate([pv, pq])
    p_spec = pg - pd
    q_spec = -qd

    # flat start: setpoint magnitudes, zero angles
    vm = np.where(types == 0, 1.0, vset)
    va = np.zeros(n)

    def mismatch(vm, va):
        V = vm * np.exp(1j * va)
        S = V * np.conj(Y @ V)
        dp = p_spec[pvpq] - S.real[pvpq]
        dq = q_spec[pq] - S.imag[pq]
        return V, S, np.concatenate([dp, dq])

    V, S, f = mismatch(vm, va)
    for _ in range(max_iter):
        if np.abs(f).max() <= tol:
            return measurement.pack_state(V)
        Ibus = Y @ V
        diagV = np.diag(V)
        diagI = np.diag(Ibus)
        diagVnorm = np.diag(V / vm)
        dS_dVa = 1j * diagV @ np.conj(diagI - Y @ diagV)
        dS_dVm = diagVnorm @ np.conj(diagI) + diagV @ np.conj(Y @ diagVnorm)
        npv, npq = len(pv), len(pq)
        J = np.empty((npv + 2 * npq, npv + 2 * npq))
        J[:npv + npq, :npv + npq] = dS_dVa.real[np.ix_(pvpq, pvpq)]
        J[:npv + npq, npv + npq:] = dS_dVm.real[np.ix_(pvpq, pq)]
        J[npv + npq:, :npv + npq] = dS_dVa.imag[np.ix_(pq, pvpq)]
        J[npv + npq:, npv + npq:] = dS_dVm.imag[np.ix_(pq, pq)]
        try:
            dx = np.linalg.solve(J, f)
        except np.linalg.LinAlgError as e:
            raise ConvergenceError(f"power flow Jacobian singular: {e}",
                                   mismatch=float(np.abs(f).max())) from None
        va[pvpq] += dx[:npv + npq]
        vm[pq] += dx[npv + npq:]
        V, S, f = mismatch(vm, va)

    raise ConvergenceError(
        f"power flow did not converge in {max_iter} iterations "
        f"(max mismatch {np.abs(f).max():.3e} p.u.)",
        mismatch=float(np.abs(f).max()),
    )


def power_mismatch(case, v, adm=None, pd=None, qd=None):
    """Max |scheduled - computed| power at the buses the solver balances."""
    if adm is None:
        adm = build_admittance(case)
    pd = np.array([b.pd for b in case.buses]) if pd is None else np.asarray(pd, dtype=float)
    qd = np.array([b.qd for b in case.buses]) if qd is None else np.asarray(qd, dtype=float)
    pg, _, types = _setpoints(case)
    V = measurement.unpack_state(v)
    S = V * np.conj(adm.Y @ V)
    pq = types == 0
    nonslack = types != 2
    dp = np.abs((pg - pd - S.real)[nonslack])
    dq = np.abs((-qd - S.imag)[pq])
    return max(dp.max(), dq.max() if dq.size else 0.0)


@dataclass
class ScenarioConfig:
    count: int
    seed: int = 0
    mult_lo: float = 0.8
    mult_hi: float = 1.2
    shared_shape: bool = False   # one multiplier per snapshot instead of per bus
    train_frac: float = 0.8
    noise: bool = True
    sigmas: dict = None
    noise_on_magnitude: bool = False
    retries: int = 5

    def __post_init__(self):
        if self.count <= 0:
            raise ConfigError("sample count must be positive")
        if not 0.0 < self.train_frac < 1.0:
            raise ConfigError("train fraction must be in (0, 1)")
        if self.mult_lo <= 0 or self.mult_hi < self.mult_lo:
            raise ConfigError("load multiplier range must be positive and ordered")


def generate_dataset(case, mm, sc, adm=None):
    """Solve random load snapshots and package (z, v*) pairs.

    Each sample draws from its own seed stream, so generation is deterministic
    under the config seed regardless of retry history elsewhere.
    """
    if adm is None:
        adm = build_admittance(case)
    base_pd = np.array([b.pd for b in case.buses])
    base_qd = np.array([b.qd for b in case.buses])
    Z = np.empty((sc.count, mm.n_meter))
    V = np.empty((sc.count, 2 * case.n_bus))

    for t in range(sc.count):
        rng = np.random.default_rng(np.random.SeedSequence([sc.seed, t]))
        v_star = None
        for attempt in range(sc.retries + 1):
            size = None if sc.shared_shape else case.n_bus
            mult = rng.uniform(sc.mult_lo, sc.mult_hi, size=size)
            try:
                v_star = solve_powerflow(case, pd=base_pd * mult, qd=base_qd * mult, adm=adm)
                break
            except ConvergenceError as e:
                last = e
        if v_star is None:
            raise GenerationError(
                f"sample {t}: power flow failed {sc.retries + 1} times "
                f"(last mismatch {last.mismatch:.3e})"
            )
        z = mm.evaluate(v_star)
        if sc.noise:
            z = measurement.add_noise(z, mm, rng, sigmas=sc.sigmas,
                                      on_magnitude=sc.noise_on_magnitude)
        Z[t], V[t] = z, v_star

    n_train = int(round(sc.count * sc.train_frac))
    split = ["train"] * n_train + ["test"] * (sc.count - n_train)
    meta = {
        "case": case.name,
        "seed": sc.seed,
        "mult": [sc.mult_lo, sc.mult_hi],
        "shared_shape": sc.shared_shape,
        "noise": bool(sc.noise),
        "noise_on_magnitude": bool(sc.noise_on_magnitude),
        "sigmas": mm.sigmas if sc.sigmas is None else {**mm.sigmas, **sc.sigmas},
    }
    return case_io.Dataset(Z=Z, V=V, split=split,
                           selection=mm.selection.to_dict(), meta=meta)
