"""Mesh text format and binary state format.

Text mesh::

    msim-mesh v1 <shell|solid>
    v x y z
    e i j k [l]
    pin i
    mat <name> youngs_modulus poisson_ratio density [thickness bending_stiffness]

Binary state: ``MSIM``, u32 version, u64 vertex count, then little-endian
f64 positions, velocities and the state time.  A trajectory stream is a plain
concatenation of state records.
"""
from __future__ import annotations

import io
import struct
from pathlib import Path

import numpy as np

from msim.elastic import MaterialParams
from msim.mesh import Mesh, SimState

MESH_HEADER = "msim-mesh"
MESH_VERSION = "v1"
STATE_MAGIC = b"MSIM"
STATE_VERSION = 1
_STATE_HEAD = struct.Struct("<4sIQ")


class ParseError(ValueError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} at byte {offset}")
        self.offset = offset


def format_mesh(mesh: Mesh) -> str:
    if mesh.n_vertices == 0:
        raise ValueError("refusing to save a mesh without vertices")
    out = io.StringIO()
    out.write(f"{MESH_HEADER} {MESH_VERSION} {mesh.kind}\n")
    for p in mesh.rest_positions:
        out.write("v " + " ".join(repr(float(c)) for c in p) + "\n")
    for el in mesh.elements:
        out.write("e " + " ".join(str(int(i)) for i in el) + "\n")
    for i in np.flatnonzero(mesh.pinned):
        out.write(f"pin {int(i)}\n")
    m = mesh.material
    vals = [m.youngs_modulus, m.poisson_ratio, m.density]
    if mesh.kind == "shell":
        vals += [m.thickness, m.bending_stiffness]
    out.write(f"mat {m.name} " + " ".join(repr(float(v)) for v in vals) + "\n")
    return out.getvalue()


def save_mesh(mesh: Mesh, path) -> None:
    Path(path).write_text(format_mesh(mesh))


def parse_mesh(text: str) -> Mesh:
    data = text.encode()
    offset = 0
    kind = None
    verts, elems, pins = [], [], []
    material = None
    for lineno, raw in enumerate(data.split(b"\n")):
        line_offset = offset
        offset += len(raw) + 1
        line = raw.decode().strip()
        if not line or line.startswith("#"):
            continue
        tok = line.split()
        if kind is None:
            if len(tok) != 3 or tok[0] != MESH_HEADER:
                raise ParseError("missing msim-mesh header", line_offset)
            if tok[1] != MESH_VERSION:
                raise ParseError(f"unsupported version {tok[1]!r}", line_offset)
            if tok[2] not in ("shell", "solid"):
                raise ParseError(f"unknown mesh kind {tok[2]!r}", line_offset)
            kind = tok[2]
            continue
        try:
            if tok[0] == "v" and len(tok) == 4:
                verts.append([float(t) for t in tok[1:]])
            elif tok[0] == "e" and len(tok) == (4 if kind == "shell" else 5):
                elems.append([int(t) for t in tok[1:]])
            elif tok[0] == "pin" and len(tok) == 2:
                pins.append(int(tok[1]))
            elif tok[0] == "mat" and len(tok) >= 5:
                vals = [float(t) for t in tok[2:]]
                if kind == "shell":
                    if len(vals) != 5:
                        raise ValueError("shell material needs 5 parameters")
                    material = MaterialParams(vals[0], vals[1], vals[2], vals[3], vals[4], tok[1])
                else:
                    if len(vals) != 3:
                        raise ValueError("solid material needs 3 parameters")
                    material = MaterialParams(vals[0], vals[1], vals[2], name=tok[1])
            else:
                raise ValueError(f"malformed record {tok[0]!r}")
        except ValueError as exc:
            raise ParseError(str(exc), line_offset) from None
    if kind is None:
        raise ParseError("empty mesh file", 0)
    if not verts:
        raise ParseError("mesh has no vertices", offset)
    if material is None:
        raise ParseError("missing mat record", offset)
    pinned = np.zeros(len(verts), dtype=bool)
    for p in pins:
        if not 0 <= p < len(verts):
            raise ParseError(f"pin index {p} out of range", offset)
        pinned[p] = True
    return Mesh.from_elements(verts, np.array(elems, dtype=np.int64).reshape(-1, 3 if kind == "shell" else 4),
                              material, pinned)


def load_mesh(path) -> Mesh:
    return parse_mesh(Path(path).read_text())


def encode_state(state: SimState) -> bytes:
    n = len(state.positions)
    if n == 0:
        raise ValueError("refusing to save a state without vertices")
    head = _STATE_HEAD.pack(STATE_MAGIC, STATE_VERSION, n)
    body = np.concatenate([state.positions.ravel(), state.velocities.ravel(),
                           [float(state.time)]]).astype("<f8").tobytes()
    return head + body


def decode_states(data: bytes) -> list[SimState]:
    """Decode one or more concatenated state records."""
    states = []
    offset = 0
    while offset < len(data):
        if len(data) - offset < _STATE_HEAD.size:
            raise ParseError("truncated state header", offset)
        magic, version, n = _STATE_HEAD.unpack_from(data, offset)
        if magic != STATE_MAGIC:
            raise ParseError("bad state magic", offset)
        if version != STATE_VERSION:
            raise ParseError(f"unsupported state version {version}", offset + 4)
        body = offset + _STATE_HEAD.size
        nbytes = 8 * (6 * n + 1)
        if len(data) - body < nbytes:
            raise ParseError("truncated state payload", len(data))
        vals = np.frombuffer(data, dtype="<f8", count=6 * n + 1, offset=body).astype(float)
        states.append(SimState(vals[: 3 * n].reshape(n, 3), vals[3 * n: 6 * n].reshape(n, 3),
                               float(vals[-1])))
        offset = body + nbytes
    return states


def save_state(state: SimState, path) -> None:
    Path(path).write_bytes(encode_state(state))


def load_state(path) -> SimState:
    data = Path(path).read_bytes()
    states = decode_states(data)
    if len(states) != 1:
        raise ParseError(f"expected one state record, found {len(states)}", 0)
    return states[0]


def save_state_stream(states, path) -> None:
    with open(path, "wb") as fh:
        for s in states:
            fh.write(encode_state(s))


def load_state_stream(path) -> list[SimState]:
    return decode_states(Path(path).read_bytes())
