"""Gaussian cloud container plus PLY / GCLD reading and writing.

Clouds are stored struct-of-arrays in float32, the precision of both the
3DGS PLY files and the native GCLD container, so every save/load round trip
is bit-exact.
"""

from __future__ import annotations

import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataError, ParseError, ValidationError

log = logging.getLogger(__name__)

SH_C0 = 0.28209479177387814
GCLD_MAGIC = b"GCLD1\n"
RECORD_FLOATS = 14
ACTIVATIONS = ("raw", "activated")

# 3DGS vertex properties this reader requires, in the order the writer emits them.
PLY_PROPERTIES = (
    "x", "y", "z",
    "f_dc_0", "f_dc_1", "f_dc_2",
    "opacity",
    "scale_0", "scale_1", "scale_2",
    "rot_0", "rot_1", "rot_2", "rot_3",
)

_PLY_TYPES = {
    "char": "i1", "int8": "i1", "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2", "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4", "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4", "double": "f8", "float64": "f8",
}


def sigmoid(x):
    return 1.0 / (1.0 + np.exp(-np.asarray(x, dtype=np.float64)))


def logit(p):
    p = np.asarray(p, dtype=np.float64)
    return np.log(p) - np.log1p(-p)


@dataclass(frozen=True)
class Bounds:
    center: tuple[float, float, float]
    radius: float

    def to_json(self) -> dict:
        return {"center": list(self.center), "radius": self.radius}

    @classmethod
    def from_json(cls, d: dict) -> "Bounds":
        return cls(tuple(float(c) for c in d["center"]), float(d["radius"]))


@dataclass(frozen=True)
class Gaussian:
    position: tuple[float, float, float]
    albedo: tuple[float, float, float]
    opacity: float
    scale: tuple[float, float, float]
    rotation: tuple[float, float, float, float]  # (w, x, y, z)


def canonicalize_quaternions(q: np.ndarray) -> np.ndarray:
    """Normalize (w, x, y, z) rows and flip sign so the first nonzero of w, x, y, z is positive."""
    q = np.asarray(q, dtype=np.float64)
    norm = np.linalg.norm(q, axis=1, keepdims=True)
    if np.any(norm == 0) or not np.all(np.isfinite(norm)):
        bad = int(np.flatnonzero((norm[:, 0] == 0) | ~np.isfinite(norm[:, 0]))[0])
        raise DataError(f"record {bad}: quaternion has zero or non-finite norm")
    q = q / norm
    nz = q != 0
    first = np.argmax(nz, axis=1)
    sign = np.sign(q[np.arange(len(q)), first])
    return q * sign[:, None]


@dataclass(frozen=True, eq=False)
class GaussianCloud:
    positions: np.ndarray
    albedo: np.ndarray
    opacity: np.ndarray
    scale: np.ndarray
    rotation: np.ndarray
    source_id: str = ""
    activation: str = "activated"
    bounds: Bounds | None = field(default=None)

    def __post_init__(self):
        n = len(np.asarray(self.opacity).reshape(-1))
        shapes = {"positions": 3, "albedo": 3, "scale": 3, "rotation": 4}
        for name, width in shapes.items():
            arr = np.array(getattr(self, name), dtype=np.float32).reshape(n, width)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        op = np.array(self.opacity, dtype=np.float32).reshape(n)
        op.setflags(write=False)
        object.__setattr__(self, "opacity", op)
        if self.activation not in ACTIVATIONS:
            raise ValidationError(f"unknown activation {self.activation!r}")
        self._check()
        if self.bounds is None and n > 0:
            object.__setattr__(self, "bounds", Bounds(*compute_bounds(self)))
        elif self.bounds is not None and not self.bounds.radius > 0:
            raise ValidationError("bounds radius must be positive")

    def _check(self):
        for name in ("positions", "albedo", "opacity", "scale", "rotation"):
            arr = getattr(self, name)
            finite = np.isfinite(arr) if arr.ndim == 1 else np.isfinite(arr).all(axis=1)
            if not finite.all():
                raise DataError(f"record {int(np.flatnonzero(~finite)[0])}: non-finite {name}")
        if self.activation != "activated":
            return
        if len(self) and (self.opacity.min() < 0 or self.opacity.max() > 1):
            raise DataError("opacity outside [0, 1]")
        if len(self) and self.scale.min() <= 0:
            raise DataError("scale components must be positive")
        norms = np.linalg.norm(self.rotation.astype(np.float64), axis=1)
        if len(self) and np.abs(norms - 1).max() > 1e-6:
            raise DataError("rotation quaternions must be unit length")

    def __len__(self) -> int:
        return self.opacity.shape[0]

    def __getitem__(self, i: int) -> Gaussian:
        return Gaussian(
            tuple(map(float, self.positions[i])),
            tuple(map(float, self.albedo[i])),
            float(self.opacity[i]),
            tuple(map(float, self.scale[i])),
            tuple(map(float, self.rotation[i])),
        )

    @property
    def gaussians(self) -> list[Gaussian]:
        return [self[i] for i in range(len(self))]

    def records(self) -> np.ndarray:
        """(N, 14) float32 rows: position, albedo, opacity, scale, quaternion."""
        return np.concatenate(
            [self.positions, self.albedo, self.opacity[:, None], self.scale, self.rotation], axis=1
        )

    def subset(self, indices) -> "GaussianCloud":
        idx = np.asarray(indices, dtype=np.int64)
        return GaussianCloud(
            self.positions[idx], self.albedo[idx], self.opacity[idx], self.scale[idx],
            self.rotation[idx], source_id=self.source_id, activation=self.activation,
        )

    def replace(self, **changes) -> "GaussianCloud":
        kw = dict(
            positions=self.positions, albedo=self.albedo, opacity=self.opacity, scale=self.scale,
            rotation=self.rotation, source_id=self.source_id, activation=self.activation,
        )
        kw.update(changes)
        return GaussianCloud(**kw)

    @classmethod
    def from_records(cls, rec: np.ndarray, **kw) -> "GaussianCloud":
        rec = np.asarray(rec, dtype=np.float32).reshape(-1, RECORD_FLOATS)
        return cls(rec[:, 0:3], rec[:, 3:6], rec[:, 6], rec[:, 7:10], rec[:, 10:14], **kw)

    @classmethod
    def empty(cls, source_id: str = "") -> "GaussianCloud":
        return cls.from_records(np.zeros((0, RECORD_FLOATS), np.float32), source_id=source_id)


def compute_bounds(cloud: GaussianCloud) -> tuple[tuple[float, float, float], float]:
    """Mean-centred bounding sphere. Coincident positions get radius 1."""
    if len(cloud) == 0:
        raise ValidationError("empty cloud has no bounds")
    pos = cloud.positions.astype(np.float64)
    center = pos.mean(axis=0)
    radius = float(np.sqrt(((pos - center) ** 2).sum(axis=1).max()))
    if radius == 0.0:
        radius = 1.0
    return tuple(float(c) for c in center), radius


# ---------------------------------------------------------------- PLY


def _read_ply_header(fh) -> tuple[int, list[tuple[str, str]]]:
    first = fh.readline()
    if first.strip() != b"ply":
        raise ParseError("not a PLY file (missing 'ply' magic)")
    count = None
    props: list[tuple[str, str]] = []
    fmt = None
    in_vertex = False
    while True:
        line = fh.readline()
        if not line:
            raise ParseError("PLY header has no end_header")
        tok = line.decode("ascii", "replace").split()
        if not tok or tok[0] in ("comment", "obj_info"):
            continue
        if tok[0] == "end_header":
            break
        if tok[0] == "format":
            fmt = tok[1]
        elif tok[0] == "element":
            in_vertex = tok[1] == "vertex"
            if in_vertex:
                count = int(tok[2])
            elif count is None:
                raise ParseError(f"element {tok[1]!r} precedes vertex element")
        elif tok[0] == "property" and in_vertex:
            if tok[1] == "list":
                raise ParseError("list properties are not supported in the vertex element")
            if tok[1] not in _PLY_TYPES:
                raise ParseError(f"unknown PLY type {tok[1]!r}")
            props.append((tok[2], _PLY_TYPES[tok[1]]))
    if fmt != "binary_little_endian":
        raise ParseError(f"unsupported PLY format {fmt!r}; need binary_little_endian")
    if count is None:
        raise ParseError("missing property: no vertex element")
    names = {p for p, _ in props}
    for required in PLY_PROPERTIES:
        if required not in names:
            raise ParseError(f"missing property {required!r}")
    return count, props


def _load_ply(path: Path, activation: str) -> GaussianCloud:
    with open(path, "rb") as fh:
        count, props = _read_ply_header(fh)
        dtype = np.dtype([(name, "<" + t) for name, t in props])
        data = np.frombuffer(fh.read(dtype.itemsize * count), dtype=dtype)
    if data.shape[0] != count:
        raise ParseError(f"truncated PLY: expected {count} vertices, found {data.shape[0]}")
    if any(name.startswith("f_rest_") for name, _ in props):
        log.warning("ignoring higher-order SH coefficients in %s", path)

    def cols(*names):
        return np.stack([data[n].astype(np.float64) for n in names], axis=1)

    rec = np.concatenate(
        [cols("x", "y", "z"), cols("f_dc_0", "f_dc_1", "f_dc_2"), cols("opacity"),
         cols("scale_0", "scale_1", "scale_2"), cols("rot_0", "rot_1", "rot_2", "rot_3")],
        axis=1,
    )
    bad = ~np.isfinite(rec).all(axis=1)
    if bad.any():
        raise DataError(f"record {int(np.flatnonzero(bad)[0])}: non-finite value in {path}")
    if activation == "activated":
        rec[:, 3:6] = np.clip(rec[:, 3:6] * SH_C0 + 0.5, 0.0, 1.0)
        rec[:, 6] = sigmoid(rec[:, 6])
        rec[:, 7:10] = np.exp(rec[:, 7:10])
    if len(rec):
        rec[:, 10:14] = _normalize_stored_quaternions(rec[:, 10:14])
    return GaussianCloud.from_records(rec, source_id=path.stem, activation=activation)


def _normalize_stored_quaternions(q: np.ndarray) -> np.ndarray:
    # float32 quaternions that are already unit and canonical are kept bit-for-bit
    q32 = q.astype(np.float32).astype(np.float64)
    out = canonicalize_quaternions(q)
    first = np.argmax(q32 != 0, axis=1)
    keep = (np.abs(np.linalg.norm(q32, axis=1) - 1.0) <= 1e-7) & (q32[np.arange(len(q32)), first] > 0)
    out[keep] = q32[keep]
    return out


def save_ply(cloud: GaussianCloud, path) -> None:
    """Write a 3DGS-style binary PLY. Activated clouds are written back in logit/log/SH-DC space."""
    rec = cloud.records().astype(np.float64)
    if cloud.activation == "activated":
        rec[:, 3:6] = (rec[:, 3:6] - 0.5) / SH_C0
        rec[:, 6] = logit(np.clip(rec[:, 6], 1e-7, 1 - 1e-7))
        rec[:, 7:10] = np.log(rec[:, 7:10])
    header = ["ply", "format binary_little_endian 1.0", f"element vertex {len(cloud)}"]
    header += [f"property float {p}" for p in PLY_PROPERTIES]
    header.append("end_header")
    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        fh.write(rec.astype("<f4").tobytes())


# ---------------------------------------------------------------- GCLD


def _json_bytes(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")


def write_container(fh, magic: bytes, header: dict, payload: bytes) -> None:
    hdr = _json_bytes(header)
    fh.write(magic)
    fh.write(struct.pack("<I", len(hdr)))
    fh.write(hdr)
    fh.write(payload)


def read_container(fh, magic: bytes, path) -> tuple[dict, bytes]:
    got = fh.read(len(magic))
    if got != magic:
        raise ParseError(f"{path}: bad magic {got!r}, expected {magic!r}")
    (length,) = struct.unpack("<I", fh.read(4))
    try:
        header = json.loads(fh.read(length).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ParseError(f"{path}: corrupt header ({exc})") from exc
    return header, fh.read()


def save_cloud(cloud: GaussianCloud, path) -> None:
    if len(cloud) == 0:
        raise ValidationError("empty cloud")
    header = {
        "count": len(cloud),
        "activation": cloud.activation,
        "source_id": cloud.source_id,
        "bounds": cloud.bounds.to_json(),
    }
    with open(path, "wb") as fh:
        write_container(fh, GCLD_MAGIC, header, cloud.records().astype("<f4").tobytes())


def _load_gcld(path: Path) -> GaussianCloud:
    with open(path, "rb") as fh:
        header, payload = read_container(fh, GCLD_MAGIC, path)
    for key in ("count", "activation", "source_id"):
        if key not in header:
            raise ParseError(f"{path}: missing header field {key!r}")
    count = int(header["count"])
    if len(payload) != count * RECORD_FLOATS * 4:
        raise ParseError(f"{path}: payload holds {len(payload)} bytes, expected {count * RECORD_FLOATS * 4}")
    rec = np.frombuffer(payload, dtype="<f4").reshape(count, RECORD_FLOATS)
    bad = ~np.isfinite(rec).all(axis=1)
    if bad.any():
        raise DataError(f"record {int(np.flatnonzero(bad)[0])}: non-finite value in {path}")
    return GaussianCloud.from_records(rec, source_id=header["source_id"], activation=header["activation"])


def load_splat_file(path, activation: str = "activated") -> GaussianCloud:
    """Read a 3DGS binary PLY or a native GCLD file.

    For PLY input, ``activation="activated"`` maps the stored logit, log-scale
    and SH DC terms to opacity, scale and albedo; ``"raw"`` keeps them as stored.
    GCLD files carry their own activation state and ignore the argument.
    """
    if activation not in ACTIVATIONS:
        raise ValidationError(f"unknown activation {activation!r}")
    path = Path(path)
    with open(path, "rb") as fh:
        head = fh.read(len(GCLD_MAGIC))
    if head == GCLD_MAGIC:
        return _load_gcld(path)
    return _load_ply(path, activation)
