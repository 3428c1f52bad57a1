"""Bus admittance model and graph shift operators built from a GridCase."""

import warnings
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError

SHIFT_KINDS = ("adjacency", "laplacian", "random-walk-laplacian", "normalized-adjacency")
WEIGHTINGS = ("binary", "admittance-magnitude")


@dataclass
class AdmittanceModel:
    Y: np.ndarray            # (N, N) complex
    f: np.ndarray            # (E,) from-bus positions (in-service branches)
    t: np.ndarray            # (E,) to-bus positions
    yff: np.ndarray          # (E,) complex branch admittances
    yft: np.ndarray
    ytf: np.ndarray
    ytt: np.ndarray
    bus_ids: list            # position -> external id

    @property
    def n_bus(self):
        return self.Y.shape[0]

    @property
    def n_branch(self):
        return len(self.f)


@dataclass
class ShiftOperator:
    W: np.ndarray
    kind: str
    weighting: str


def build_admittance(case):
    """Standard bus-admittance stamping with taps, shifts and shunts."""
    n = case.n_bus
    Y = np.zeros((n, n), dtype=complex)
    live = [br for br in case.branches if br.status]
    e = len(live)
    f = np.empty(e, dtype=int)
    t = np.empty(e, dtype=int)
    yff = np.empty(e, dtype=complex)
    yft = np.empty(e, dtype=complex)
    ytf = np.empty(e, dtype=complex)
    ytt = np.empty(e, dtype=complex)

    for k, br in enumerate(live):
        i, j = case.bus_pos(br.f), case.bus_pos(br.t)
        ys = 1.0 / complex(br.r, br.x)
        tap = br.tap * np.exp(1j * br.shift)
        ytt[k] = ys + 0.5j * br.b
        yff[k] = ytt[k] / (br.tap * br.tap)
        yft[k] = -ys / np.conj(tap)
        ytf[k] = -ys / tap
        f[k], t[k] = i, j
        Y[i, i] += yff[k]
        Y[j, j] += ytt[k]
        Y[i, j] += yft[k]
        Y[j, i] += ytf[k]

    for pos, bus in enumerate(case.buses):
        Y[pos, pos] += complex(bus.gs, bus.bs)

    _check_connectivity(case, f, t)
    return AdmittanceModel(Y=Y, f=f, t=t, yff=yff, yft=yft, ytf=ytf, ytt=ytt,
                           bus_ids=[b.id for b in case.buses])


def _check_connectivity(case, f, t):
    n = case.n_bus
    adj = [[] for _ in range(n)]
    for i, j in zip(f, t):
        adj[i].append(j)
        adj[j].append(i)
    seen = np.zeros(n, dtype=bool)
    stack = [case.slack_pos()]
    seen[stack[0]] = True
    while stack:
        u = stack.pop()
        for w in adj[u]:
            if not seen[w]:
                seen[w] = True
                stack.append(w)
    if not seen.all():
        missing = [case.buses[i].id for i in np.flatnonzero(~seen)]
        warnings.warn(f"network has islands: buses {missing} unreachable from slack")


def build_shift_operator(case, kind="normalized-adjacency", weighting="admittance-magnitude"):
    """Graph shift operator on the network topology (taps ignored)."""
    if kind not in SHIFT_KINDS:
        raise ConfigError(f"unknown shift kind {kind!r} (have {SHIFT_KINDS})")
    if weighting not in WEIGHTINGS:
        raise ConfigError(f"unknown shift weighting {weighting!r} (have {WEIGHTINGS})")

    n = case.n_bus
    A = np.zeros((n, n))
    for br in case.branches:
        if not br.status:
            continue
        i, j = case.bus_pos(br.f), case.bus_pos(br.t)
        w = 1.0 if weighting == "binary" else abs(1.0 / complex(br.r, br.x))
        A[i, j] += w
        A[j, i] += w

    deg = A.sum(axis=1)
    if kind == "adjacency":
        W = A
    elif kind == "laplacian":
        W = np.diag(deg) - A
    else:
        # normalized kinds: degree-zero nodes get a zero row instead of a 0/0
        with np.errstate(divide="ignore"):
            inv = np.where(deg > 0, 1.0 / deg, 0.0)
        if kind == "random-walk-laplacian":
            W = inv[:, None] * A
            live = deg > 0
            W[live, live] -= 1.0
            W[live] *= -1.0  # I - D^{-1} A on connected nodes, zero rows elsewhere
        else:
            half = np.sqrt(inv)
            W = half[:, None] * A * half[None, :]
    return ShiftOperator(W=W, kind=kind, weighting=weighting)
