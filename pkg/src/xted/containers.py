"""Binary dataset container.

Layout (all integers u32 little-endian, floats f64 little-endian)::

    "XTEDDATA" | version | dim_s | dim_a | reward_flag | n_traj
    per trajectory: length, states (length*dim_s), actions (length*dim_a),
                    rewards (length, only when reward_flag)
    footer: u32 length + UTF-8 JSON {"domains": [...], "records": [...]}

Everything before the footer is the payload; the footer carries provenance
records (which may hold timestamps) and per-trajectory domain tags.
"""

from __future__ import annotations

import json
import struct

import numpy as np

from .errors import FormatError
from .fileio import atomic_write_bytes
from .training import Trajectory

MAGIC = b"XTEDDATA"
VERSION = 1
_HEADER = struct.Struct("<8s5I")


def payload_bytes_of(trajs):
    if not trajs:
        raise FormatError("cannot write an empty dataset")
    t0 = trajs[0]
    dim_s, dim_a = t0.states.shape[1], t0.actions.shape[1]
    has_r = t0.rewards is not None
    out = [_HEADER.pack(MAGIC, VERSION, dim_s, dim_a, int(has_r), len(trajs))]
    for t in trajs:
        if t.states.shape[1] != dim_s or t.actions.shape[1] != dim_a or (t.rewards is not None) != has_r:
            raise FormatError("trajectories in one container must share dimensions")
        out.append(struct.pack("<I", len(t)))
        out.append(np.ascontiguousarray(t.states, dtype="<f8").tobytes())
        out.append(np.ascontiguousarray(t.actions, dtype="<f8").tobytes())
        if has_r:
            out.append(np.ascontiguousarray(t.rewards, dtype="<f8").reshape(-1).tobytes())
    return b"".join(out)


def dataset_bytes(trajs, records=None):
    footer = json.dumps(
        {"domains": [t.domain for t in trajs], "records": list(records or [])},
        sort_keys=True,
        separators=(",", ":"),
    ).encode("utf-8")
    return payload_bytes_of(trajs) + struct.pack("<I", len(footer)) + footer


def write_dataset(path, trajs, records=None):
    atomic_write_bytes(path, dataset_bytes(trajs, records))


def parse_dataset(buf):
    """Returns ``(trajectories, records, payload_length)``."""
    if len(buf) < _HEADER.size or buf[:8] != MAGIC:
        raise FormatError("not a dataset container (bad magic)")
    _, version, dim_s, dim_a, has_r, n = _HEADER.unpack_from(buf, 0)
    if version != VERSION:
        raise FormatError(f"dataset version {version} but this build reads version {VERSION}")
    off = _HEADER.size
    raw = []
    try:
        for _ in range(n):
            (L,) = struct.unpack_from("<I", buf, off)
            off += 4
            arrs = []
            for width in (dim_s, dim_a) + ((1,) if has_r else ()):
                cnt = L * width
                arrs.append(np.frombuffer(buf, "<f8", cnt, off).reshape(L, width).astype(np.float64))
                off += 8 * cnt
            raw.append(arrs)
        payload_len = off
        (flen,) = struct.unpack_from("<I", buf, off)
        off += 4
        footer = json.loads(buf[off : off + flen].decode("utf-8"))
    except (struct.error, ValueError) as exc:
        raise FormatError(f"truncated or corrupt dataset container: {exc}") from exc
    if off + flen != len(buf):
        raise FormatError("trailing bytes after dataset footer")
    domains = footer.get("domains", [""] * n)
    trajs = [
        Trajectory(a[0], a[1], a[2] if has_r else None, domains[i]) for i, a in enumerate(raw)
    ]
    return trajs, footer.get("records", []), payload_len


def read_dataset(path):
    """Returns ``(trajectories, provenance_records)``."""
    with open(path, "rb") as fh:
        trajs, records, _ = parse_dataset(fh.read())
    return trajs, records


def payload_bytes(path):
    """File bytes up to (excluding) the provenance footer."""
    with open(path, "rb") as fh:
        buf = fh.read()
    _, _, n = parse_dataset(buf)
    return buf[:n]
