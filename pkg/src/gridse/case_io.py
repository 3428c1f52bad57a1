"""MATPOWER-subset case parsing plus dataset/checkpoint serialization.

Both file formats are a single JSON header line followed by a raw
little-endian float64 block, so round-trips are bit-exact and the header is
readable with `head -1`.
"""

import io
import json
import re
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import FormatError, ParseError, ValidationError

BUS_PQ, BUS_PV, BUS_SLACK = 1, 2, 3
_BUS_TYPES = {BUS_PQ: "pq", BUS_PV: "pv", BUS_SLACK: "slack"}

DATASET_FORMAT = "gridse-dataset"
CHECKPOINT_FORMAT = "gridse-checkpoint"
FORMAT_VERSION = 1


@dataclass
class Bus:
    id: int
    btype: str          # 'slack' | 'pv' | 'pq'
    pd: float           # p.u.
    qd: float
    gs: float           # p.u. shunt at V=1
    bs: float
    vm: float
    va: float           # rad


@dataclass
class Branch:
    f: int              # external bus ids
    t: int
    r: float
    x: float
    b: float            # total line charging
    tap: float          # 1.0 when none
    shift: float        # rad
    status: int


@dataclass
class Gen:
    bus: int
    pg: float           # p.u.
    qg: float
    vg: float


@dataclass
class GridCase:
    base_mva: float
    buses: list
    branches: list
    gens: list
    name: str = ""
    _index: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        self._index = {b.id: i for i, b in enumerate(self.buses)}

    @property
    def n_bus(self):
        return len(self.buses)

    @property
    def n_branch(self):
        """In-service branch count."""
        return sum(1 for br in self.branches if br.status)

    def bus_pos(self, bus_id):
        return self._index[bus_id]

    def slack_pos(self):
        return next(i for i, b in enumerate(self.buses) if b.btype == "slack")


def _strip_comment(line):
    return line.split("%", 1)[0]


def _find_scalar(lines, name):
    pat = re.compile(rf"mpc\.{name}\s*=\s*([^;]+);")
    for ln in lines:
        m = pat.search(_strip_comment(ln))
        if m:
            return float(m.group(1))
    return None


def _find_matrix(lines, name):
    """Return list of (line_no, row_values) for mpc.<name> = [ ... ];"""
    open_pat = re.compile(rf"mpc\.{name}\s*=\s*\[")
    rows = []
    inside = False
    for lineno, raw in enumerate(lines, start=1):
        ln = _strip_comment(raw)
        if not inside:
            m = open_pat.search(ln)
            if not m:
                continue
            inside = True
            ln = ln[m.end():]
        if "]" in ln:
            ln = ln.split("]", 1)[0]
            inside = False
            done = True
        else:
            done = False
        for chunk in ln.split(";"):
            chunk = chunk.strip()
            if not chunk:
                continue
            vals = []
            for tok in chunk.split():
                try:
                    vals.append(float(tok))
                except ValueError:
                    raise ParseError(
                        f"{name} row at line {lineno}: bad number {tok!r}"
                    ) from None
            rows.append((lineno, vals))
        if not inside and done:
            return rows
    if inside:
        raise ParseError(f"unterminated {name} matrix")
    return None


def parse_case(text, name=""):
    """Parse a MATPOWER-format case into a GridCase (quantities in p.u.)."""
    if hasattr(text, "read"):
        text = text.read()
    lines = text.splitlines()

    base = _find_scalar(lines, "baseMVA")
    if base is None:
        raise ParseError("missing baseMVA")
    bus_rows = _find_matrix(lines, "bus")
    br_rows = _find_matrix(lines, "branch")
    if bus_rows is None:
        raise ParseError("missing bus table")
    if br_rows is None:
        raise ParseError("missing branch table")
    gen_rows = _find_matrix(lines, "gen") or []

    buses, seen = [], set()
    warned = False
    for lineno, row in bus_rows:
        if len(row) < 10:
            raise ParseError(f"bus row at line {lineno}: expected >= 10 columns, got {len(row)}")
        if len(row) > 13 and not warned:
            warnings.warn(f"bus table: ignoring columns beyond 13")
            warned = True
        bid, btype = int(row[0]), int(row[1])
        if bid in seen:
            raise ParseError(f"duplicate bus id {bid} at line {lineno}")
        seen.add(bid)
        if btype not in _BUS_TYPES:
            raise ValidationError(f"bus {bid}: unsupported type code {btype}")
        buses.append(Bus(
            id=bid, btype=_BUS_TYPES[btype],
            pd=row[2] / base, qd=row[3] / base,
            gs=row[4] / base, bs=row[5] / base,
            vm=row[7], va=np.radians(row[8]),
        ))

    slacks = [b.id for b in buses if b.btype == "slack"]
    if len(slacks) != 1:
        raise ValidationError(f"expected exactly one slack bus, found {len(slacks)}")

    branches = []
    warned = False
    for lineno, row in br_rows:
        if len(row) < 11:
            raise ParseError(f"branch row at line {lineno}: expected >= 11 columns, got {len(row)}")
        if len(row) > 13 and not warned:
            warnings.warn("branch table: ignoring columns beyond 13")
            warned = True
        f, t, status = int(row[0]), int(row[1]), int(row[10])
        for end in (f, t):
            if end not in seen:
                raise ValidationError(f"branch at line {lineno} references unknown bus {end}")
        if status and row[2] == 0.0 and row[3] == 0.0:
            raise ValidationError(f"branch {f}-{t} at line {lineno}: r and x both zero")
        branches.append(Branch(
            f=f, t=t, r=row[2], x=row[3], b=row[4],
            tap=row[8] if row[8] != 0.0 else 1.0,
            shift=np.radians(row[9]), status=status,
        ))

    gens = []
    warned = False
    for lineno, row in gen_rows:
        if len(row) < 6:
            raise ParseError(f"gen row at line {lineno}: expected >= 6 columns, got {len(row)}")
        if len(row) > 21 and not warned:
            warnings.warn("gen table: ignoring columns beyond 21")
            warned = True
        gbus = int(row[0])
        if gbus not in seen:
            raise ValidationError(f"gen at line {lineno} references unknown bus {gbus}")
        if len(row) >= 8 and row[7] == 0.0:
            continue  # out of service
        gens.append(Gen(bus=gbus, pg=row[1] / base, qg=row[2] / base, vg=row[5]))

    return GridCase(base_mva=base, buses=buses, branches=branches, gens=gens, name=name)


def load_case(path):
    with open(path, "r") as fh:
        return parse_case(fh.read(), name=Path(path).stem)


@dataclass
class Dataset:
    """Measurement/ground-truth pairs with a train/test split."""
    Z: np.ndarray          # (count, M)
    V: np.ndarray          # (count, 2N)
    split: list            # 'train' | 'test' per sample
    selection: dict        # self-describing meter selection
    meta: dict = field(default_factory=dict)

    @property
    def count(self):
        return self.Z.shape[0]

    def indices(self, tag):
        return np.array([i for i, s in enumerate(self.split) if s == tag], dtype=int)


def _open_sink(sink):
    if hasattr(sink, "write"):
        return sink, False
    return open(sink, "wb"), True


def _open_source(source):
    if hasattr(source, "read"):
        return source, False
    return open(source, "rb"), True


def _write_blocks(fh, header, arrays):
    fh.write(json.dumps(header, separators=(",", ":")).encode())
    fh.write(b"\n")
    for arr in arrays:
        fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def _read_header(fh, expect_format):
    line = fh.readline()
    if not line:
        raise FormatError("empty stream")
    try:
        header = json.loads(line.decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise FormatError(f"bad header: {e}") from None
    if header.get("format") != expect_format:
        raise FormatError(f"not a {expect_format} stream (format={header.get('format')!r})")
    if header.get("version") != FORMAT_VERSION:
        raise FormatError(
            f"unsupported {expect_format} version {header.get('version')!r}"
            f" (expected {FORMAT_VERSION})"
        )
    return header


def _read_block(fh, shape, what):
    n = int(np.prod(shape, dtype=np.int64)) if shape else 0
    buf = fh.read(8 * n)
    if len(buf) != 8 * n:
        raise FormatError(f"truncated {what} block: expected {8*n} bytes, got {len(buf)}")
    return np.frombuffer(buf, dtype="<f8").reshape(shape).copy()


def save_dataset(dataset, sink):
    header = {
        "format": DATASET_FORMAT,
        "version": FORMAT_VERSION,
        "count": int(dataset.count),
        "n_meter": int(dataset.Z.shape[1]),
        "n_state": int(dataset.V.shape[1]),
        "selection": dataset.selection,
        "split": list(dataset.split),
        "meta": dataset.meta,
    }
    if len(dataset.split) != dataset.count or dataset.V.shape[0] != dataset.count:
        raise FormatError("sample count mismatch between Z, V and split")
    fh, own = _open_sink(sink)
    try:
        _write_blocks(fh, header, [dataset.Z, dataset.V])
    finally:
        if own:
            fh.close()


def load_dataset(source):
    fh, own = _open_source(source)
    try:
        header = _read_header(fh, DATASET_FORMAT)
        count, m, n = header["count"], header["n_meter"], header["n_state"]
        if len(header["split"]) != count:
            raise FormatError("split length does not match sample count")
        Z = _read_block(fh, (count, m), "measurement")
        V = _read_block(fh, (count, n), "state")
        extra = fh.read(1)
        if extra:
            raise FormatError("trailing bytes after state block")
    finally:
        if own:
            fh.close()
    for name, arr in (("measurement", Z), ("state", V)):
        bad = ~np.isfinite(arr)
        if bad.any():
            i, j = np.argwhere(bad)[0]
            raise FormatError(f"non-finite entry in {name} block at sample {i}, column {j}")
    return Dataset(Z=Z, V=V, split=list(header["split"]),
                   selection=header["selection"], meta=header.get("meta", {}))


def save_checkpoint(model, sink):
    """Serialize an UnrolledModel (architecture + flat parameter arrays)."""
    header = {
        "format": CHECKPOINT_FORMAT,
        "version": FORMAT_VERSION,
        "n_bus": int(model.n_bus),
        "n_meter": int(model.n_meter),
        "blocks": len(model.blocks),
        "hops": list(model.cfg.hops),
        "widths": list(model.cfg.widths),
        "meta": model.meta,
    }
    arrays = [model.W]
    for blk in model.blocks:
        arrays += [blk.A.data, blk.B.data, blk.b.data]
        for layer in blk.thetas:
            arrays += [h.data for h in layer]
    fh, own = _open_sink(sink)
    try:
        _write_blocks(fh, header, arrays)
    finally:
        if own:
            fh.close()


def load_checkpoint(source):
    from . import unrolled  # deferred: avoids import cycle

    fh, own = _open_source(source)
    try:
        header = _read_header(fh, CHECKPOINT_FORMAT)
        n_bus, m = header["n_bus"], header["n_meter"]
        n = 2 * n_bus
        cfg = unrolled.GnnConfig(widths=tuple(header["widths"]), hops=tuple(header["hops"]))
        W = _read_block(fh, (n_bus, n_bus), "shift operator")
        blocks = []
        for i in range(header["blocks"]):
            A = _read_block(fh, (n, m), f"block {i} A")
            B = _read_block(fh, (n, n), f"block {i} B")
            b = _read_block(fh, (n,), f"block {i} b")
            thetas = []
            for l in range(len(cfg.hops)):
                fin, fout = cfg.widths[l], cfg.widths[l + 1]
                thetas.append([
                    _read_block(fh, (fin, fout), f"block {i} layer {l} hop {k}")
                    for k in range(cfg.hops[l])
                ])
            blocks.append((A, B, b, thetas))
        extra = fh.read(1)
        if extra:
            raise FormatError("trailing bytes after parameter blocks")
    finally:
        if own:
            fh.close()
    return unrolled.UnrolledModel.from_arrays(
        W=W, cfg=cfg, n_meter=m, blocks=blocks, meta=header.get("meta", {})
    )
