"""File formats: market spec JSON, binary/CSV trajectories, manifests, hashes."""

import csv
import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from lmsbi.errors import ValidationError
from lmsbi.market import INDICATORS, MacroTrajectory, MarketSpec, MicroTrajectory

TRAJ_MAGIC = b"LMTR"
TRAJ_VERSION = 1
_TRAJ_HEADER = struct.Struct("<4sHIIB")
KIND_MACRO = 0
KIND_MICRO = 1


def spec_to_dict(spec: MarketSpec):
    return {"n": spec.n, "z": spec.z.tolist(), "p": spec.p.tolist(), "P": spec.P.tolist()}


def spec_from_dict(obj) -> MarketSpec:
    missing = {"n", "z", "p", "P"} - set(obj)
    if missing:
        raise ValidationError(f"market spec missing keys: {sorted(missing)}")
    n = obj["n"]
    P = np.asarray(obj["P"], dtype=np.float64)
    if P.ndim == 1 and isinstance(n, int) and P.size == n * n:
        P = P.reshape(n, n)
    return MarketSpec(n=n, z=np.asarray(obj["z"]), p=np.asarray(obj["p"], dtype=np.float64), P=P)


def save_spec(spec: MarketSpec, path):
    Path(path).write_text(json.dumps(spec_to_dict(spec), indent=1))


def load_spec(path) -> MarketSpec:
    try:
        obj = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{path}: not valid JSON ({exc})") from exc
    return spec_from_dict(obj)


def save_trajectory(traj, path):
    """Write a macro or micro trajectory as ``LMTR`` binary (little-endian float64 payload)."""
    if isinstance(traj, MicroTrajectory):
        kind, n, T = KIND_MICRO, traj.n, traj.T
        payload = traj.blocks()
    elif isinstance(traj, MacroTrajectory):
        kind, n, T = KIND_MACRO, traj.n, traj.T
        payload = traj.data
    else:
        raise TypeError(f"cannot save {type(traj).__name__}")
    with open(path, "wb") as fh:
        fh.write(_TRAJ_HEADER.pack(TRAJ_MAGIC, TRAJ_VERSION, n, T, kind))
        fh.write(np.ascontiguousarray(payload, dtype="<f8").tobytes())


def load_trajectory(path):
    raw = Path(path).read_bytes()
    if len(raw) < _TRAJ_HEADER.size:
        raise ValidationError(f"{path}: truncated trajectory header")
    magic, version, n, T, kind = _TRAJ_HEADER.unpack_from(raw)
    if magic != TRAJ_MAGIC:
        raise ValidationError(f"{path}: bad magic {magic!r}")
    if version != TRAJ_VERSION:
        raise ValidationError(f"{path}: unsupported trajectory version {version}")
    body = np.frombuffer(raw, dtype="<f8", offset=_TRAJ_HEADER.size)
    if kind == KIND_MACRO:
        if body.size != T * 4 * n:
            raise ValidationError(f"{path}: payload size {body.size} != T*4n = {T * 4 * n}")
        return MacroTrajectory(body.reshape(T, 4 * n).astype(np.float64))
    if kind == KIND_MICRO:
        if body.size != T * n * (n + 4):
            raise ValidationError(f"{path}: payload size {body.size} != T*n*(n+4)")
        blocks = body.reshape(T, n, n + 4)
        transitions = np.rint(blocks[:, :, :n]).astype(np.int64)
        ind = blocks[:, :, n:].transpose(0, 2, 1).reshape(T, 4 * n)
        return MicroTrajectory(transitions=transitions, indicators=MacroTrajectory(ind.copy()))
    raise ValidationError(f"{path}: unknown trajectory kind {kind}")


def indicator_columns(n):
    return [f"{name}_{i + 1}" for name in INDICATORS for i in range(n)]


def trajectory_to_csv(traj, path):
    """One row per step. Micro files prepend ``J_i_j`` columns."""
    macro = traj.indicators if isinstance(traj, MicroTrajectory) else traj
    n = macro.n
    header = ["t"]
    if isinstance(traj, MicroTrajectory):
        header += [f"J_{i + 1}_{j + 1}" for i in range(n) for j in range(n)]
    header += indicator_columns(n)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for t in range(macro.T):
            row = [t]
            if isinstance(traj, MicroTrajectory):
                row += traj.transitions[t].ravel().tolist()
            row += [repr(float(x)) for x in macro.data[t]]
            w.writerow(row)


def write_matrix_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in rows:
            w.writerow([repr(float(x)) if isinstance(x, (float, np.floating)) else x for x in row])


def read_samples_csv(path, columns=("delta_u", "delta_v", "r")):
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = set(columns) - set(reader.fieldnames or ())
        if missing:
            raise ValidationError(f"{path}: missing columns {sorted(missing)}")
        return np.array([[float(row[c]) for c in columns] for row in reader], dtype=np.float64)


def file_hash(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def array_hash(*arrays):
    h = hashlib.sha256()
    for a in arrays:
        a = np.ascontiguousarray(a)
        h.update(str(a.dtype).encode())
        h.update(str(a.shape).encode())
        h.update(a.tobytes())
    return h.hexdigest()
