"""Binary little-endian splat PLY files and JSON diagnostic reports."""
from __future__ import annotations

import json
import logging
import os
import re
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from .model import GaussianSet, normalize_quaternions

log = logging.getLogger(__name__)

_PLY_TYPES = {
    "char": "i1", "int8": "i1", "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2", "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4", "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4", "double": "f8", "float64": "f8",
}
_FLOAT_NAMES = ("float", "float32")


class SplatFormatError(ValueError):
    """Malformed, truncated or non-conformant splat file."""


@dataclass
class SplatHeader:
    count: int
    properties: list[tuple[str, str]]  # (name, ply type) in file order
    header_bytes: int

    @property
    def rest_count(self) -> int:
        return sum(1 for name, _ in self.properties if name.startswith("f_rest_"))

    @property
    def appearance_dim(self) -> int:
        return 3 + self.rest_count


def canonical_properties(appearance_dim: int) -> list[str]:
    if appearance_dim < 3:
        raise ValueError("appearance needs at least the 3 DC coefficients")
    return (["x", "y", "z", "nx", "ny", "nz", "f_dc_0", "f_dc_1", "f_dc_2"]
            + [f"f_rest_{i}" for i in range(appearance_dim - 3)]
            + ["opacity", "scale_0", "scale_1", "scale_2", "rot_0", "rot_1", "rot_2", "rot_3"])


def _parse_header(raw: bytes) -> SplatHeader:
    end = raw.find(b"end_header\n")
    if not raw.startswith(b"ply\n") or end < 0:
        raise SplatFormatError("missing 'ply' magic or 'end_header'")
    lines = raw[:end].decode("ascii", errors="replace").split("\n")[1:-1]
    count = None
    props: list[tuple[str, str]] = []
    fmt_seen = False
    for line in lines:
        parts = line.split()
        if not parts or parts[0] in ("comment", "obj_info"):
            continue
        if parts[0] == "format":
            if parts[1:] != ["binary_little_endian", "1.0"]:
                raise SplatFormatError(f"unsupported format: {line!r}")
            fmt_seen = True
        elif parts[0] == "element":
            if count is not None or len(parts) != 3 or parts[1] != "vertex":
                raise SplatFormatError(f"only a single 'vertex' element is supported: {line!r}")
            try:
                count = int(parts[2])
            except ValueError as e:
                raise SplatFormatError(f"bad element count: {line!r}") from e
            if count < 0:
                raise SplatFormatError("negative element count")
        elif parts[0] == "property":
            if count is None or len(parts) != 3:
                raise SplatFormatError(f"bad property line: {line!r}")
            if parts[1] not in _PLY_TYPES:
                raise SplatFormatError(f"unknown property type: {line!r}")
            props.append((parts[2], parts[1]))
        else:
            raise SplatFormatError(f"unexpected header line: {line!r}")
    if not fmt_seen or count is None:
        raise SplatFormatError("header lacks format or element line")
    header = SplatHeader(count, props, end + len(b"end_header\n"))
    names = [n for n, _ in props]
    if len(set(names)) != len(names):
        raise SplatFormatError("duplicate property names")
    rest = sorted(int(n[7:]) for n in names if re.fullmatch(r"f_rest_\d+", n))
    if rest != list(range(len(rest))):
        raise SplatFormatError("f_rest_* properties are not contiguous from 0")
    types = dict(props)
    for name in canonical_properties(header.appearance_dim):
        if name not in types:
            raise SplatFormatError(f"missing required property {name!r}")
        if types[name] not in _FLOAT_NAMES:
            raise SplatFormatError(f"required property {name!r} has type {types[name]!r}, expected float")
    return header


def read_header(path: str | os.PathLike) -> SplatHeader:
    with open(path, "rb") as f:
        head = f.read(1 << 16)
    return _parse_header(head)


def read_splat(path: str | os.PathLike) -> GaussianSet:
    """Load a splat PLY.  Normals are validated as present and then dropped."""
    raw = Path(path).read_bytes()
    header = _parse_header(raw)
    dtype = np.dtype([(name, "<" + _PLY_TYPES[t]) for name, t in header.properties])
    payload = raw[header.header_bytes:]
    expected = header.count * dtype.itemsize
    if len(payload) < expected:
        raise SplatFormatError(f"truncated payload: {len(payload)} bytes, expected {expected}")
    if len(payload) > expected:
        raise SplatFormatError(f"trailing data: {len(payload)} bytes, expected {expected}")
    rec = np.frombuffer(payload, dtype=dtype, count=header.count)

    def cols(names):
        return np.stack([rec[n].astype(np.float64) for n in names], axis=-1) if header.count else \
            np.zeros((0, len(names)))

    d = header.appearance_dim
    positions = cols(["x", "y", "z"])
    if np.isnan(positions).any():
        raise SplatFormatError("NaN position")
    known = set(canonical_properties(d))
    extras = [n for n, _ in header.properties if n not in known]
    if extras:
        log.warning("ignoring %d unrecognized properties: %s", len(extras), extras)
    rotations = cols(["rot_0", "rot_1", "rot_2", "rot_3"])
    try:
        rotations, deviation = normalize_quaternions(rotations) if header.count else (rotations, 0.0)
    except ValueError as e:
        raise SplatFormatError(str(e)) from e
    if deviation > 1e-6:
        log.warning("normalized quaternions (max norm deviation %.3g)", deviation)
    appearance = cols(["f_dc_0", "f_dc_1", "f_dc_2"] + [f"f_rest_{i}" for i in range(d - 3)])
    try:
        return GaussianSet(
            positions=positions,
            log_scales=cols(["scale_0", "scale_1", "scale_2"]),
            rotations=rotations,
            opacity_logits=cols(["opacity"]).reshape(-1),
            appearance=appearance,
            meta={
                "source": str(path),
                "property_order": [n for n, _ in header.properties if n in known],
                "quat_max_deviation": deviation,
            },
        )
    except ValueError as e:
        raise SplatFormatError(str(e)) from e


def write_splat(gs: GaussianSet, path: str | os.PathLike) -> None:
    """Write ``gs`` as float32 binary PLY; normals are zero-filled.

    Property order follows the file the set was read from when it is
    compatible, otherwise the canonical 3DGS order.
    """
    d = gs.appearance_dim
    names = canonical_properties(d)
    order = gs.meta.get("property_order")
    if order is not None and sorted(order) == sorted(names):
        names = list(order)
    columns: dict[str, np.ndarray] = {}
    for i, n in enumerate("xyz"):
        columns[n] = gs.positions[:, i]
    for n in ("nx", "ny", "nz"):
        columns[n] = np.zeros(len(gs))
    for i in range(d):
        columns[f"f_dc_{i}" if i < 3 else f"f_rest_{i - 3}"] = gs.appearance[:, i]
    columns["opacity"] = gs.opacity_logits
    for i in range(3):
        columns[f"scale_{i}"] = gs.log_scales[:, i]
    for i in range(4):
        columns[f"rot_{i}"] = gs.rotations[:, i]

    rec = np.empty(len(gs), dtype=np.dtype([(n, "<f4") for n in names]))
    for n in names:
        with np.errstate(over="ignore"):
            v = columns[n].astype(np.float32)
        if not np.all(np.isfinite(v)):
            raise ValueError(f"non-finite values in {n!r} (after float32 conversion)")
        rec[n] = v
    header = "ply\nformat binary_little_endian 1.0\nelement vertex {}\n{}end_header\n".format(
        len(gs), "".join(f"property float {n}\n" for n in names))
    with open(path, "wb") as f:
        f.write(header.encode("ascii"))
        f.write(rec.tobytes())


# ---------------------------------------------------------------- reports

@dataclass
class OverlapEnergyBlock:
    value: float = 0.0
    truncation_bound: float = 0.0
    cutoff_sigma: float = 0.0
    exact: bool = False
    pairs_evaluated: int = 0
    convention: str = "normalized-gaussian product integral, ordered pairs i != j"


@dataclass
class EffectiveOverlapBlock:
    tau: float = 0.0
    counts: list[int] = field(default_factory=list)
    min: float = 0.0
    median: float = 0.0
    mean: float = 0.0
    max: float = 0.0


@dataclass
class DensityBlock:
    errors: list[float] = field(default_factory=list)
    median: float = 0.0
    max: float = 0.0


@dataclass
class CurvatureBlock:
    radius: float = 0.0
    conditions: list[float] = field(default_factory=list)
    median: float = 0.0
    max: float = 0.0


@dataclass
class DiagnosticsReport:
    """Structured diagnostics record.  ``timing`` is the only non-deterministic field."""

    overlap_energy: OverlapEnergyBlock = field(default_factory=OverlapEnergyBlock)
    effective_overlap: EffectiveOverlapBlock = field(default_factory=EffectiveOverlapBlock)
    density_errors: DensityBlock = field(default_factory=DensityBlock)
    curvature_proxy: CurvatureBlock = field(default_factory=CurvatureBlock)
    ray_profiles: list[dict[str, Any]] = field(default_factory=list)
    reorg: dict[str, Any] = field(default_factory=dict)
    extra: dict[str, Any] = field(default_factory=dict)
    timing: dict[str, Any] = field(default_factory=dict)

    def to_dict(self) -> dict[str, Any]:
        return _plain(asdict(self))

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "DiagnosticsReport":
        return cls(
            overlap_energy=OverlapEnergyBlock(**d.get("overlap_energy", {})),
            effective_overlap=EffectiveOverlapBlock(**d.get("effective_overlap", {})),
            density_errors=DensityBlock(**d.get("density_errors", {})),
            curvature_proxy=CurvatureBlock(**d.get("curvature_proxy", {})),
            ray_profiles=d.get("ray_profiles", []),
            reorg=d.get("reorg", {}),
            extra=d.get("extra", {}),
            timing=d.get("timing", {}),
        )


def _plain(obj):
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _plain(obj.tolist())
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        return float(obj)
    return obj


def dumps_report(report: DiagnosticsReport | dict) -> str:
    # repr-based float output is the shortest string that round-trips exactly (<= 17 digits)
    data = report.to_dict() if isinstance(report, DiagnosticsReport) else _plain(report)
    return json.dumps(data, indent=2, sort_keys=True, allow_nan=False) + "\n"


def write_report(report: DiagnosticsReport, path: str | os.PathLike) -> None:
    Path(path).write_text(dumps_report(report))


def read_report(path: str | os.PathLike) -> DiagnosticsReport:
    return DiagnosticsReport.from_dict(json.loads(Path(path).read_text()))
