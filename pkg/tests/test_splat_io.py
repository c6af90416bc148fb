import json
import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from splatreorg.model import GaussianSet
from splatreorg.splat_io import (DiagnosticsReport, OverlapEnergyBlock, SplatFormatError, dumps_report,
                                 read_header, read_report, read_splat, write_report, write_splat)

from oracles import random_set, random_unit_quats


def hand_written_ply(path, n, rest, rng, normals_zero=True, order=None):
    """Conformant splat PLY written without the package: explicit header text + packed float32."""
    names = (["x", "y", "z", "nx", "ny", "nz", "f_dc_0", "f_dc_1", "f_dc_2"]
             + [f"f_rest_{i}" for i in range(rest)]
             + ["opacity", "scale_0", "scale_1", "scale_2", "rot_0", "rot_1", "rot_2", "rot_3"])
    if order is not None:
        names = order(names)
    cols = {name: rng.standard_normal(n).astype("<f4") for name in names}
    for nm in ("nx", "ny", "nz"):
        if normals_zero:
            cols[nm][:] = 0
    q = random_unit_quats(rng, n).astype("<f4")
    for i in range(4):
        cols[f"rot_{i}"] = q[:, i]
    header = "ply\nformat binary_little_endian 1.0\nelement vertex %d\n" % n
    header += "".join(f"property float {nm}\n" for nm in names) + "end_header\n"
    body = np.stack([cols[nm] for nm in names], axis=1).astype("<f4").tobytes()
    path.write_bytes(header.encode() + body)
    return names, cols


def test_byte_exact_roundtrip_on_conformant_file(tmp_path, rng):
    src = tmp_path / "in.ply"
    hand_written_ply(src, 257, 45, rng)
    gs = read_splat(src)
    dst = tmp_path / "out.ply"
    write_splat(gs, dst)
    assert dst.read_bytes() == src.read_bytes()


def test_byte_exact_roundtrip_preserves_nonstandard_order(tmp_path, rng):
    src = tmp_path / "in.ply"
    hand_written_ply(src, 31, 0, rng, order=lambda ns: ns[::-1])
    dst = tmp_path / "out.ply"
    write_splat(read_splat(src), dst)
    assert dst.read_bytes() == src.read_bytes()


def test_header_arithmetic_17_rest(tmp_path, rng):
    src = tmp_path / "in.ply"
    _, cols = hand_written_ply(src, 5, 17, rng)
    gs = read_splat(src)
    assert gs.appearance_dim == 20 and read_header(src).appearance_dim == 20
    np.testing.assert_array_equal(gs.appearance[:, 19], cols["f_rest_16"].astype(np.float64))
    np.testing.assert_array_equal(gs.opacity_logits, cols["opacity"].astype(np.float64))


def test_empty_file_roundtrip(tmp_path):
    p = tmp_path / "e.ply"
    write_splat(GaussianSet.empty(), p)
    assert p.read_bytes().endswith(b"end_header\n")
    gs = read_splat(p)
    assert len(gs) == 0 and gs.appearance_dim == 3


def test_field_exact_read_of_write(tmp_path, rng):
    gs = random_set(rng, 100, appearance_dim=12)
    # float32-representable values so read(write(gs)) is exact
    as32 = lambda a: np.asarray(a, np.float32).astype(np.float64)
    q = as32(gs.rotations)
    q = np.where(np.abs(np.linalg.norm(q, axis=1, keepdims=True) - 1) <= 1e-6, q, gs.rotations)
    gs = GaussianSet(as32(gs.positions), as32(gs.log_scales), q, as32(gs.opacity_logits), as32(gs.appearance))
    p = tmp_path / "a.ply"
    write_splat(gs, p)
    assert read_splat(p).equals(gs)


def test_normals_are_written_as_zero(tmp_path, rng):
    src = tmp_path / "in.ply"
    hand_written_ply(src, 10, 0, rng, normals_zero=False)
    dst = tmp_path / "out.ply"
    write_splat(read_splat(src), dst)
    again = np.frombuffer(dst.read_bytes()[read_header(dst).header_bytes:], "<f4").reshape(10, -1)
    np.testing.assert_array_equal(again[:, 3:6], 0)


def test_nonunit_quaternions_normalized_with_warning(tmp_path, rng, caplog):
    gs = random_set(rng, 8)
    p = tmp_path / "q.ply"
    write_splat(gs, p)
    raw = bytearray(p.read_bytes())
    head = read_header(p)
    rec = np.frombuffer(bytes(raw[head.header_bytes:]), "<f4").reshape(8, -1).copy()
    rec[:, -4:] *= 2.0
    p.write_bytes(bytes(raw[:head.header_bytes]) + rec.tobytes())
    with caplog.at_level("WARNING"):
        back = read_splat(p)
    assert "normalized quaternions" in caplog.text
    np.testing.assert_allclose(np.linalg.norm(back.rotations, axis=1), 1.0, atol=1e-15)
    assert back.meta["quat_max_deviation"] == pytest.approx(1.0, abs=1e-6)


@pytest.mark.parametrize("mutate, needle", [
    (lambda b: b.replace(b"binary_little_endian", b"ascii"), "format"),
    (lambda b: b.replace(b"property float opacity\n", b""), "opacity"),
    (lambda b: b.replace(b"property float x\n", b"property double x\n"), "float"),
    (lambda b: b.replace(b"property float y\n", b"property quux y\n"), "type"),
    (lambda b: b[:-3], "truncated"),
    (lambda b: b + b"\0\0\0\0", "trailing"),
    (lambda b: b.replace(b"end_header\n", b""), "end_header"),
])
def test_malformed_files_raise(tmp_path, rng, mutate, needle):
    p = tmp_path / "m.ply"
    hand_written_ply(p, 4, 0, rng)
    p.write_bytes(mutate(p.read_bytes()))
    with pytest.raises(SplatFormatError, match=needle):
        read_splat(p)


def test_nan_position_rejected(tmp_path, rng):
    p = tmp_path / "n.ply"
    hand_written_ply(p, 3, 0, rng)
    raw = bytearray(p.read_bytes())
    off = read_header(p).header_bytes
    raw[off:off + 4] = np.float32(np.nan).tobytes()
    p.write_bytes(bytes(raw))
    with pytest.raises(SplatFormatError, match="NaN"):
        read_splat(p)


def test_write_rejects_float32_overflow(tmp_path, rng):
    gs = random_set(rng, 2)
    big = GaussianSet(gs.positions * 1e300, gs.log_scales, gs.rotations, gs.opacity_logits, gs.appearance)
    with pytest.raises(ValueError, match="non-finite"):
        write_splat(big, tmp_path / "x.ply")


# ---- reports

def test_empty_report_has_zeroed_blocks(tmp_path):
    p = tmp_path / "r.json"
    write_report(DiagnosticsReport(), p)
    d = json.loads(p.read_text())
    assert d["overlap_energy"]["value"] == 0.0 and d["effective_overlap"]["counts"] == []


@given(st.lists(st.floats(allow_nan=False, allow_infinity=False), min_size=1, max_size=20))
def test_report_float_roundtrip_exact(values):
    rep = DiagnosticsReport(overlap_energy=OverlapEnergyBlock(value=values[0], truncation_bound=abs(values[-1])))
    rep.density_errors.errors = values
    back = DiagnosticsReport.from_dict(json.loads(dumps_report(rep)))
    assert back.overlap_energy.value == values[0]
    assert back.density_errors.errors == values


def test_report_file_roundtrip(tmp_path):
    rep = DiagnosticsReport(overlap_energy=OverlapEnergyBlock(value=math.pi / 7, truncation_bound=1e-17))
    p = tmp_path / "r.json"
    write_report(rep, p)
    assert read_report(p) == rep


def test_report_digits_roundtrip():
    x = 0.1 + 0.2
    text = dumps_report({"v": x})
    assert float(json.loads(text)["v"]) == x
