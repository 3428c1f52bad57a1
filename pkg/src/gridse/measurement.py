"""Quadratic measurement model: every meter reading is v^T H_m v.

The state v stacks real/imaginary voltage parts interleaved per bus:
(v_1^r, v_1^i, ..., v_N^r, v_N^i).  Supported meter types: squared voltage
magnitude |V_n|^2, active/reactive injections P_n, Q_n, and active/reactive
branch flows measured at either end.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DimensionError, SelectionError
from .kernels import QuadFormPack

V2, P_INJ, Q_INJ, P_FLOW, Q_FLOW = "v2", "p_inj", "q_inj", "p_flow", "q_flow"
MAGNITUDE_TYPES = (V2,)
POWER_TYPES = (P_INJ, Q_INJ, P_FLOW, Q_FLOW)

DEFAULT_SIGMAS = {"magnitude": 0.01, "power": 0.02}


# ---------------------------------------------------------------------------
# state helpers

def flat_state(n_bus):
    v = np.zeros(2 * n_bus)
    v[0::2] = 1.0
    return v


def pack_state(V):
    """Complex bus voltages -> interleaved real state vector."""
    V = np.asarray(V, dtype=complex)
    v = np.empty(V.shape[:-1] + (2 * V.shape[-1],))
    v[..., 0::2] = V.real
    v[..., 1::2] = V.imag
    return v


def unpack_state(v):
    v = np.asarray(v)
    return v[..., 0::2] + 1j * v[..., 1::2]


def rotate_state(v, theta):
    """Apply the global phase rotation e^{j theta} to an interleaved state."""
    return pack_state(unpack_state(v) * np.exp(1j * theta))


def rotation_generator(v):
    """Tangent of the rotation gauge orbit at v: d/dtheta rotate_state(v, 0)."""
    v = np.asarray(v)
    g = np.empty_like(v)
    g[..., 0::2] = -v[..., 1::2]
    g[..., 1::2] = v[..., 0::2]
    return g


# ---------------------------------------------------------------------------
# selection

@dataclass
class MeasurementSelection:
    """Meter sets, in the fixed global order v2, p_inj, q_inj, p_flow, q_flow.

    Buses are referenced by position in the case bus list; flows by
    (branch position, side) with side 'from' or 'to'.
    """
    v2: tuple = ()
    p_inj: tuple = ()
    q_inj: tuple = ()
    p_flow: tuple = ()      # ((branch_pos, side), ...)
    q_flow: tuple = ()

    @property
    def n_meter(self):
        return (len(self.v2) + len(self.p_inj) + len(self.q_inj)
                + len(self.p_flow) + len(self.q_flow))

    def ordered(self):
        """List of (type, target) in global meter order."""
        return ([(V2, n) for n in self.v2]
                + [(P_INJ, n) for n in self.p_inj]
                + [(Q_INJ, n) for n in self.q_inj]
                + [(P_FLOW, e) for e in self.p_flow]
                + [(Q_FLOW, e) for e in self.q_flow])

    def to_dict(self):
        return {
            "v2": list(self.v2),
            "p_inj": list(self.p_inj),
            "q_inj": list(self.q_inj),
            "p_flow": [[int(e), s] for e, s in self.p_flow],
            "q_flow": [[int(e), s] for e, s in self.q_flow],
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            v2=tuple(d.get("v2", ())),
            p_inj=tuple(d.get("p_inj", ())),
            q_inj=tuple(d.get("q_inj", ())),
            p_flow=tuple((int(e), s) for e, s in d.get("p_flow", ())),
            q_flow=tuple((int(e), s) for e, s in d.get("q_flow", ())),
        )


def default_selection(adm):
    """All squared voltage magnitudes plus all sending-end active flows."""
    n, e = adm.n_bus, adm.n_branch
    return MeasurementSelection(
        v2=tuple(range(n)),
        p_flow=tuple((k, "from") for k in range(e)),
    )


def full_selection(adm):
    """All five meter types, flows metered at both ends."""
    n, e = adm.n_bus, adm.n_branch
    both = tuple((k, s) for k in range(e) for s in ("from", "to"))
    return MeasurementSelection(
        v2=tuple(range(n)),
        p_inj=tuple(range(n)),
        q_inj=tuple(range(n)),
        p_flow=both,
        q_flow=both,
    )


def selection_by_name(adm, name):
    if name == "default":
        return default_selection(adm)
    if name == "full":
        return full_selection(adm)
    raise ConfigError(f"unknown selection {name!r} (have: default, full)")


# ---------------------------------------------------------------------------
# model

@dataclass
class MeasurementModel:
    pack: QuadFormPack
    selection: MeasurementSelection
    types: list                 # meter type per row, selection order
    sigmas: dict = field(default_factory=lambda: dict(DEFAULT_SIGMAS))
    n_bus: int = 0

    @property
    def n_meter(self):
        return self.pack.n_meters

    @property
    def n_state(self):
        return self.pack.n_state

    def evaluate(self, v):
        return self.pack.values(np.asarray(v, dtype=float))

    def jacobian(self, v):
        return self.pack.jacobian(np.asarray(v, dtype=float))

    def evaluate_batch(self, V):
        return self.pack.values_batch(np.asarray(V, dtype=float))

    def dense_h(self, m):
        return self.pack.dense(m)

    def sigma_vector(self, sigmas=None):
        sig = dict(self.sigmas)
        if sigmas:
            sig.update(sigmas)
        for k, s in sig.items():
            if s < 0:
                raise ConfigError(f"negative sigma for {k!r}")
        return np.array([
            sig["magnitude"] if t in MAGNITUDE_TYPES else sig["power"]
            for t in self.types
        ])


def _stamp(entries, a, b, y, part):
    """Accumulate the quadratic form of Re/Im{ V_a * conj(y * V_b) }."""
    g, s = y.real, y.imag
    ar, ai, br, bi = 2 * a, 2 * a + 1, 2 * b, 2 * b + 1
    if part == "re":
        quads = ((ar, br, g), (ai, bi, g), (ai, br, s), (ar, bi, -s))
    else:
        quads = ((ar, br, -s), (ai, bi, -s), (ai, br, g), (ar, bi, -g))
    for i, j, val in quads:
        if val != 0.0:
            entries[(i, j)] = entries.get((i, j), 0.0) + val


def _meter_entries(adm, mtype, target):
    entries = {}
    if mtype == V2:
        n = target
        entries[(2 * n, 2 * n)] = 1.0
        entries[(2 * n + 1, 2 * n + 1)] = 1.0
        return entries
    part = "re" if mtype in (P_INJ, P_FLOW) else "im"
    if mtype in (P_INJ, Q_INJ):
        a = target
        for b in np.flatnonzero(adm.Y[a] != 0):
            _stamp(entries, a, int(b), adm.Y[a, b], part)
    else:
        e, side = target
        f, t = int(adm.f[e]), int(adm.t[e])
        if side == "from":
            _stamp(entries, f, f, adm.yff[e], part)
            _stamp(entries, f, t, adm.yft[e], part)
        else:
            _stamp(entries, t, t, adm.ytt[e], part)
            _stamp(entries, t, f, adm.ytf[e], part)
    return entries


def _symmetrize(entries):
    keys = set(entries) | {(j, i) for i, j in entries}
    return {
        (i, j): 0.5 * (entries.get((i, j), 0.0) + entries.get((j, i), 0.0))
        for i, j in keys
    }


def _validate_selection(adm, sel):
    n, e = adm.n_bus, adm.n_branch
    for name in (V2, P_INJ, Q_INJ):
        for b in getattr(sel, name):
            if not 0 <= b < n:
                raise SelectionError(f"{name} meter on nonexistent bus position {b}")
    for name in (P_FLOW, Q_FLOW):
        for eidx, side in getattr(sel, name):
            if not 0 <= eidx < e:
                raise SelectionError(f"{name} meter on nonexistent branch position {eidx}")
            if side not in ("from", "to"):
                raise SelectionError(f"{name} meter side must be 'from' or 'to', got {side!r}")
    if sel.n_meter == 0:
        raise SelectionError("empty measurement selection")


def build_measurement_model(adm, sel, sigmas=None):
    """Assemble all H_m (stamped from the admittance model, exactly symmetric)."""
    _validate_selection(adm, sel)
    n_state = 2 * adm.n_bus
    rows, cols, vals, starts, types = [], [], [], [0], []
    for mtype, target in sel.ordered():
        sym = _symmetrize(_meter_entries(adm, mtype, target))
        for (i, j) in sorted(sym):
            rows.append(i)
            cols.append(j)
            vals.append(sym[(i, j)])
        starts.append(len(vals))
        types.append(mtype)
    pack = QuadFormPack(
        n_meters=len(types), n_state=n_state,
        rows=np.array(rows, dtype=np.int64),
        cols=np.array(cols, dtype=np.int64),
        vals=np.array(vals), starts=np.array(starts, dtype=np.int64),
    )
    sig = dict(DEFAULT_SIGMAS)
    if sigmas:
        sig.update(sigmas)
    return MeasurementModel(pack=pack, selection=sel, types=types,
                            sigmas=sig, n_bus=adm.n_bus)


def evaluate_h(mm, v):
    return mm.evaluate(v)


def jacobian(mm, v):
    return mm.jacobian(v)


def add_noise(z, mm, rng, sigmas=None, on_magnitude=False):
    """Additive Gaussian noise, sigma chosen per meter type.

    With on_magnitude=True, magnitude meters are modeled as reading |V_n|
    with noise, then squared into the quadratic-model quantity.
    """
    z = np.asarray(z, dtype=float)
    if z.shape[-1] != mm.n_meter:
        raise DimensionError(f"measurement length {z.shape[-1]} != {mm.n_meter}")
    sig = mm.sigma_vector(sigmas)
    eps = rng.standard_normal(z.shape) * sig
    out = z + eps
    if on_magnitude:
        ismag = np.array([t in MAGNITUDE_TYPES for t in mm.types])
        mag = np.sqrt(np.clip(z[..., ismag], 0.0, None))
        out[..., ismag] = (mag + eps[..., ismag]) ** 2
    return out
