"""Learned iterative state estimator: graph-convolutional refinement blocks.

The model unrolls a fixed number of regularized Gauss-Newton-style updates
v_{i+1} = A_i z + B_i u_i + b_i, where u_i is a graph-neural-network map of
the current state and A_i, B_i, b_i are trained freely.  Warm initialization
sets every block to the closed-form one-step operator linearized at flat
start, so the untrained model already behaves like a single regularized
least-squares solve.
"""

from dataclasses import dataclass

import numpy as np

from . import measurement, solvers
from .autodiff import Adam, Tape, Tensor, huber_value
from .errors import ConfigError, DimensionError, IllPosedError, InitError, NumericsError

_ACTIVATIONS = ("relu", "linear")


@dataclass(frozen=True)
class GnnConfig:
    """Widths F_0..F_L, per-layer hop counts K_1..K_L, per-layer activation."""

    widths: tuple
    hops: tuple
    activations: tuple = None

    def __post_init__(self):
        widths = tuple(int(w) for w in self.widths)
        hops = tuple(int(k) for k in self.hops)
        if len(widths) < 2:
            raise ConfigError("GnnConfig needs at least one layer (two widths)")
        if len(hops) != len(widths) - 1:
            raise ConfigError(
                f"GnnConfig: {len(widths)} widths need {len(widths) - 1} hop counts, "
                f"got {len(hops)}"
            )
        if any(w < 1 for w in widths):
            raise ConfigError(f"GnnConfig: widths must be positive, got {widths}")
        if any(k < 1 for k in hops):
            raise ConfigError(f"GnnConfig: hop counts must be >= 1, got {hops}")
        if self.activations is None:
            acts = ("relu",) * (len(hops) - 1) + ("linear",)
        else:
            acts = tuple(self.activations)
        if len(acts) != len(hops):
            raise ConfigError(
                f"GnnConfig: {len(hops)} layers need {len(hops)} activations"
            )
        for name in acts:
            if name not in _ACTIVATIONS:
                raise ConfigError(f"GnnConfig: unknown activation '{name}'")
        object.__setattr__(self, "widths", widths)
        object.__setattr__(self, "hops", hops)
        object.__setattr__(self, "activations", acts)

    @property
    def n_layers(self):
        return len(self.hops)


def param_count(cfg: GnnConfig) -> int:
    """Number of graph-filter coefficients: sum_l K_l * F_l * F_{l-1}."""
    return sum(k * fin * fout
               for k, fin, fout in zip(cfg.hops, cfg.widths[:-1], cfg.widths[1:]))


def init_gnn_params(cfg: GnnConfig, rng):
    """Per-layer lists of K_l coefficient arrays, uniform +-1/sqrt(F_in K)."""
    thetas = []
    for k, fin, fout in zip(cfg.hops, cfg.widths[:-1], cfg.widths[1:]):
        bound = 1.0 / np.sqrt(fin * k)
        thetas.append([rng.uniform(-bound, bound, size=(fin, fout))
                       for _ in range(k)])
    return thetas


def graph_conv(tape, X, W, hs):
    """sum_k W^k X H_k via repeated shift application (W^k never formed)."""
    if not hs:
        raise DimensionError("graph_conv needs at least one coefficient matrix")
    if not isinstance(W, Tensor):
        W = tape.tensor(W)
    out = tape.matmul(X, hs[0])
    shifted = X
    for h in hs[1:]:
        shifted = tape.matmul(W, shifted)
        out = tape.add(out, tape.matmul(shifted, h))
    return out


def gnn_forward(tape, X, W, thetas, cfg: GnnConfig):
    """Stacked graph convolutions with the configured activations."""
    if len(thetas) != cfg.n_layers:
        raise DimensionError(
            f"expected {cfg.n_layers} coefficient layers, got {len(thetas)}"
        )
    if not isinstance(W, Tensor):
        W = tape.tensor(W)
    out = X
    for layer, act in zip(thetas, cfg.activations):
        out = graph_conv(tape, out, W, layer)
        if act == "relu":
            out = tape.relu(out)
    return out


class UnrolledBlock:
    """One refinement step: v -> A z + B u(v) + b with its own GNN filters."""

    def __init__(self, A, B, b, thetas):
        self.A, self.B, self.b = A, B, b
        self.thetas = thetas

    def parameters(self):
        yield self.A
        yield self.B
        yield self.b
        for layer in self.thetas:
            yield from layer


class UnrolledModel:
    def __init__(self, W, cfg: GnnConfig, n_meter, blocks, meta=None):
        W = np.asarray(W, dtype=float)
        if W.ndim != 2 or W.shape[0] != W.shape[1]:
            raise DimensionError(f"shift operator must be square, got {W.shape}")
        if cfg.widths[0] != 2 or cfg.widths[-1] != 2:
            raise ConfigError(
                f"state features are (real, imag) pairs: widths must start and "
                f"end at 2, got {cfg.widths}"
            )
        self.W = W
        self.cfg = cfg
        self.n_meter = int(n_meter)
        self.blocks = list(blocks)
        self.meta = dict(meta or {})
        if not self.blocks:
            raise ConfigError("model needs at least one block")
        n = self.n_state
        for i, blk in enumerate(self.blocks):
            if blk.A.data.shape != (n, self.n_meter):
                raise DimensionError(
                    f"block {i}: A is {blk.A.data.shape}, expected {(n, self.n_meter)}"
                )
            if blk.B.data.shape != (n, n):
                raise DimensionError(
                    f"block {i}: B is {blk.B.data.shape}, expected {(n, n)}"
                )
            if blk.b.data.shape != (n,):
                raise DimensionError(
                    f"block {i}: b is {blk.b.data.shape}, expected {(n,)}"
                )
            if len(blk.thetas) != cfg.n_layers:
                raise DimensionError(
                    f"block {i}: {len(blk.thetas)} filter layers, expected {cfg.n_layers}"
                )
            for l, layer in enumerate(blk.thetas):
                want = (cfg.widths[l], cfg.widths[l + 1])
                if len(layer) != cfg.hops[l]:
                    raise DimensionError(
                        f"block {i} layer {l}: {len(layer)} hop matrices, "
                        f"expected {cfg.hops[l]}"
                    )
                for k, h in enumerate(layer):
                    if h.data.shape != want:
                        raise DimensionError(
                            f"block {i} layer {l} hop {k}: shape {h.data.shape}, "
                            f"expected {want}"
                        )

    @property
    def n_bus(self):
        return self.W.shape[0]

    @property
    def n_state(self):
        return 2 * self.W.shape[0]

    @classmethod
    def from_arrays(cls, W, cfg, n_meter, blocks, meta=None):
        built = []
        for A, B, b, thetas in blocks:
            built.append(UnrolledBlock(
                Tensor(A), Tensor(B), Tensor(b),
                [[Tensor(h) for h in layer] for layer in thetas],
            ))
        return cls(W=W, cfg=cfg, n_meter=n_meter, blocks=built, meta=meta)

    def parameters(self):
        seen, out = set(), []
        for blk in self.blocks:
            for p in blk.parameters():
                if id(p) not in seen:
                    seen.add(id(p))
                    out.append(p)
        return out

    def forward(self, tape, z, collect=False):
        """Refine v_0 = 0 through every block; z is a (batch, M) tensor."""
        if z.data.ndim != 2 or z.data.shape[1] != self.n_meter:
            raise DimensionError(
                f"forward expects (batch, {self.n_meter}) measurements, "
                f"got {z.data.shape}"
            )
        nb = z.data.shape[0]
        W = tape.tensor(self.W)
        v = tape.tensor(np.zeros((nb, self.n_state)))
        vs, us = [v], []
        for blk in self.blocks:
            X = tape.reshape(v, (nb, self.n_bus, 2))
            U = gnn_forward(tape, X, W, blk.thetas, self.cfg)
            u = tape.reshape(U, (nb, self.n_state))
            v = tape.add(
                tape.add(tape.matmul(z, tape.transpose(blk.A)),
                         tape.matmul(u, tape.transpose(blk.B))),
                blk.b,
            )
            us.append(u)
            vs.append(v)
        if collect:
            return v, vs, us
        return v

    def predict(self, Z):
        """Estimate states for a (batch, M) measurement array (no gradients)."""
        Z = np.atleast_2d(np.asarray(Z, dtype=float))
        tape = Tape()
        return self.forward(tape, tape.tensor(Z)).data.copy()


def unrolled_forward(model, Z):
    """Forward pass returning (v_final, [v_0..v_final], [u_0..u_I]) as arrays."""
    Z = np.atleast_2d(np.asarray(Z, dtype=float))
    tape = Tape()
    v, vs, us = model.forward(tape, tape.tensor(Z), collect=True)
    return v.data.copy(), [t.data.copy() for t in vs], [t.data.copy() for t in us]


def init_unrolled(W, cfg, mm, lam=1.0, strategy="warm", seed=0, unroll=6,
                  tied=False):
    """Build an I+1 block model (unroll = I refinement iterations).

    warm: every block gets the closed-form regularized one-step operator
    linearized at flat start, plus small random graph filters.  random: all
    coefficients drawn at matching fan-in scales.
    """
    if strategy not in ("warm", "random"):
        raise ConfigError(f"unknown init strategy '{strategy}'")
    if unroll < 0:
        raise ConfigError("unroll count must be >= 0")
    W = np.asarray(W, dtype=float)
    n_bus = mm.n_bus
    if W.shape != (n_bus, n_bus):
        raise DimensionError(
            f"shift operator is {W.shape}, grid has {n_bus} buses"
        )
    n = 2 * n_bus
    m = mm.pack.n_meters
    rng = np.random.default_rng(seed)

    if strategy == "warm":
        v0 = measurement.flat_state(n_bus)
        try:
            A, B, b = solvers.regularized_coefficients(
                mm.jacobian(v0), mm.evaluate(v0), v0, lam
            )
        except IllPosedError as e:
            raise InitError(f"warm initialization failed: {e}") from None

    blocks = []
    shared = init_gnn_params(cfg, rng) if tied else None
    shared = ([[Tensor(h) for h in layer] for layer in shared]
              if shared is not None else None)
    for _ in range(unroll + 1):
        if strategy == "warm":
            Ab, Bb, bb = A.copy(), B.copy(), b.copy()
        else:
            Ab = rng.uniform(-1, 1, size=(n, m)) / np.sqrt(m)
            Bb = rng.uniform(-1, 1, size=(n, n)) / np.sqrt(n)
            bb = np.zeros(n)
        thetas = (shared if tied else
                  [[Tensor(h) for h in layer]
                   for layer in init_gnn_params(cfg, rng)])
        blocks.append(UnrolledBlock(Tensor(Ab), Tensor(Bb), Tensor(bb), thetas))
    meta = {"strategy": strategy, "lam": float(lam), "seed": int(seed),
            "unroll": int(unroll), "tied": bool(tied)}
    return UnrolledModel(W=W, cfg=cfg, n_meter=m, blocks=blocks, meta=meta)


def evaluate_loss(model, Z, V, delta=1.0):
    """Mean Huber loss of model predictions against reference states."""
    Z = np.atleast_2d(np.asarray(Z, dtype=float))
    V = np.atleast_2d(np.asarray(V, dtype=float))
    if Z.shape[0] == 0:
        return float("nan")
    return huber_value(model.predict(Z), V, delta)


def train(model, dataset, epochs, batch=32, lr=1e-3, seed=0, delta=1.0,
          perturb=None):
    """Mini-batch Adam on the mean Huber loss over the train split.

    perturb, when given, maps (model, Z_batch, V_batch) -> replacement inputs
    and is applied before each gradient step (inputs treated as constants).
    Returns (model, history) with history rows (epoch, train_loss, test_loss);
    row 0 is the untouched model.
    """
    if epochs < 0:
        raise ConfigError("epochs must be >= 0")
    if batch < 1:
        raise ConfigError("batch size must be >= 1")
    train_idx = np.asarray(dataset.indices("train"), dtype=int)
    test_idx = np.asarray(dataset.indices("test"), dtype=int)
    if train_idx.size == 0:
        raise ConfigError("dataset has no training samples")

    def split_loss(idx):
        if idx.size == 0:
            return float("nan")
        pred = model.predict(dataset.Z[idx])
        bad = idx[~np.isfinite(pred).all(axis=1)]
        if bad.size:
            raise NumericsError(f"non-finite loss at samples {bad.tolist()}")
        return huber_value(pred, dataset.V[idx], delta)

    def losses():
        return split_loss(train_idx), split_loss(test_idx)

    opt = Adam(model.parameters(), lr=lr)
    rng = np.random.default_rng(seed)
    history = [(0,) + losses()]
    for epoch in range(1, epochs + 1):
        order = rng.permutation(train_idx.size)
        for s in range(0, train_idx.size, batch):
            idx = train_idx[order[s:s + batch]]
            Zb, Vb = dataset.Z[idx], dataset.V[idx]
            if perturb is not None:
                Zb = perturb(model, Zb, Vb)
            tape = Tape()
            pred = model.forward(tape, tape.tensor(Zb))
            try:
                loss = tape.huber(pred, tape.tensor(Vb), delta)
            except NumericsError:
                bad = np.where(~np.isfinite(pred.data).all(axis=1))[0]
                rows = idx[bad] if bad.size else idx
                raise NumericsError(
                    f"non-finite loss at samples {rows.tolist()}"
                ) from None
            opt.zero_grad()
            tape.backward(loss)
            opt.step()
        history.append((epoch,) + losses())
    return model, history


class FnnModel:
    """Dense feed-forward baseline mapping measurements straight to a state."""

    def __init__(self, widths, seed=0):
        widths = tuple(int(w) for w in widths)
        if len(widths) < 2 or any(w < 1 for w in widths):
            raise ConfigError(f"FnnModel needs positive layer widths, got {widths}")
        self.widths = widths
        rng = np.random.default_rng(seed)
        self.layers = []
        for fin, fout in zip(widths[:-1], widths[1:]):
            bound = 1.0 / np.sqrt(fin)
            self.layers.append((Tensor(rng.uniform(-bound, bound, (fin, fout))),
                                Tensor(np.zeros(fout))))

    def parameters(self):
        out = []
        for w, b in self.layers:
            out += [w, b]
        return out

    def forward(self, tape, z):
        if z.data.ndim != 2 or z.data.shape[1] != self.widths[0]:
            raise DimensionError(
                f"forward expects (batch, {self.widths[0]}), got {z.data.shape}"
            )
        x = z
        last = len(self.layers) - 1
        for li, (w, b) in enumerate(self.layers):
            x = tape.add(tape.matmul(x, w), b)
            if li < last:
                x = tape.relu(x)
        return x

    def predict(self, Z):
        Z = np.atleast_2d(np.asarray(Z, dtype=float))
        tape = Tape()
        return self.forward(tape, tape.tensor(Z)).data.copy()
