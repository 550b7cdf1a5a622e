"""Readers and writers for every on-disk format of a scene bundle.

Binary rasters and point files are little-endian float32 behind a 4-byte
magic; writes go through a temporary file and an atomic rename.
"""
from __future__ import annotations

import json
import os
import struct
import tempfile
from pathlib import Path

import numpy as np

from .. import geometry
from ..errors import DataError
from ..gaussians import HybridGaussianSet
from ..matching import MatchSet

CHECKPOINT_VERSION = 1
ORD_FIELDS = 14  # mu(3) s(3) r(4) c(3) alpha(1)
RAY_FIELDS = 21  # o(3) d(3) z(1) s(3) r(4) c(3) alpha(1) view(1) u(1) v(1)


def atomic_write_bytes(path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def _read(path) -> bytes:
    try:
        return Path(path).read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc


def _check_magic(buf: bytes, magic: bytes, path) -> None:
    if buf[:4] != magic:
        raise DataError(f"{path}: expected magic {magic!r}, found {buf[:4]!r}")


def _f32(buf: bytes, offset: int, count: int, path) -> np.ndarray:
    end = offset + 4 * count
    if len(buf) < end:
        raise DataError(f"{path}: truncated file")
    return np.frombuffer(buf, dtype="<f4", count=count, offset=offset)


# -- cameras -----------------------------------------------------------------


def camera_to_dict(cam: geometry.Camera) -> dict:
    K = cam.intrinsics
    return {
        "id": int(cam.id),
        "fx": float(K.fx),
        "fy": float(K.fy),
        "cx": float(K.cx),
        "cy": float(K.cy),
        "width": int(K.width),
        "height": int(K.height),
        "R": [float(x) for x in cam.pose.R.ravel()],
        "t": [float(x) for x in cam.pose.t],
    }


def camera_from_dict(d: dict) -> geometry.Camera:
    try:
        K = geometry.CameraIntrinsics(float(d["fx"]), float(d["fy"]), float(d["cx"]), float(d["cy"]), int(d["width"]), int(d["height"]))
        R = np.asarray(d["R"], dtype=np.float64).reshape(3, 3)
        # re-orthonormalize values that went through a text round trip
        U, _, Vt = np.linalg.svd(R)
        R = U @ np.diag([1.0, 1.0, np.linalg.det(U @ Vt)]) @ Vt
        return geometry.Camera(K, geometry.CameraPose(R, d["t"]), int(d["id"]))
    except (KeyError, TypeError, ValueError) as exc:
        raise DataError(f"invalid camera record: {exc}") from exc


def write_cameras(path, cameras) -> None:
    cams = sorted(cameras.values() if isinstance(cameras, dict) else cameras, key=lambda c: c.id)
    atomic_write_text(path, json.dumps([camera_to_dict(c) for c in cams], indent=1))


def read_cameras(path) -> dict:
    try:
        records = json.loads(_read(path).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise DataError(f"{path}: {exc}") from exc
    if not isinstance(records, list):
        raise DataError(f"{path}: expected a JSON array")
    cams = [camera_from_dict(r) for r in records]
    return {c.id: c for c in cams}


# -- images ------------------------------------------------------------------


def write_gimg(path, image) -> None:
    img = np.asarray(image, dtype="<f4")
    if img.ndim == 2:
        img = img[..., None]
    H, W, C = img.shape
    atomic_write_bytes(path, b"GIMG" + struct.pack("<III", W, H, C) + img.tobytes())


def read_gimg(path) -> np.ndarray:
    buf = _read(path)
    _check_magic(buf, b"GIMG", path)
    W, H, C = struct.unpack_from("<III", buf, 4)
    data = _f32(buf, 16, W * H * C, path)
    return data.reshape(H, W, C).astype(np.float64)


def write_ppm(path, image) -> None:
    img = np.asarray(image, dtype=np.float64)
    H, W = img.shape[:2]
    data = np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)
    atomic_write_bytes(path, f"P6\n{W} {H}\n255\n".encode("ascii") + data.tobytes())


def read_ppm(path) -> np.ndarray:
    buf = _read(path)
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(buf) and buf[pos : pos + 1].isspace():
            pos += 1
        if buf[pos : pos + 1] == b"#":
            while pos < len(buf) and buf[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(buf) and not buf[pos : pos + 1].isspace():
            pos += 1
        tokens.append(buf[start:pos])
    pos += 1
    if tokens[0] != b"P6" or tokens[3] != b"255":
        raise DataError(f"{path}: only binary P6 with maxval 255 is supported")
    W, H = int(tokens[1]), int(tokens[2])
    raw = np.frombuffer(buf, dtype=np.uint8, count=W * H * 3, offset=pos)
    return raw.reshape(H, W, 3).astype(np.float64) / 255.0


def read_image(path) -> np.ndarray:
    path = Path(path)
    return read_ppm(path) if path.suffix.lower() == ".ppm" else read_gimg(path)


# -- points, flow, depth -----------------------------------------------------


def write_points(path, xyz, rgb) -> None:
    rec = np.concatenate([np.asarray(xyz, dtype=np.float64).reshape(-1, 3), np.asarray(rgb, dtype=np.float64).reshape(-1, 3)], axis=1)
    atomic_write_bytes(path, b"GPTS" + struct.pack("<I", len(rec)) + rec.astype("<f4").tobytes())


def read_points(path):
    buf = _read(path)
    _check_magic(buf, b"GPTS", path)
    (n,) = struct.unpack_from("<I", buf, 4)
    rec = _f32(buf, 8, 6 * n, path).reshape(n, 6).astype(np.float64)
    return rec[:, :3].copy(), rec[:, 3:].copy()


def write_flow(path, flow) -> None:
    data = np.asarray(flow, dtype="<f4")
    H, W = data.shape[:2]
    atomic_write_bytes(path, b"GFLW" + struct.pack("<II", W, H) + data.tobytes())


def read_flow(path) -> np.ndarray:
    buf = _read(path)
    _check_magic(buf, b"GFLW", path)
    W, H = struct.unpack_from("<II", buf, 4)
    return _f32(buf, 12, W * H * 2, path).reshape(H, W, 2).astype(np.float64)


def write_depth(path, depth) -> None:
    data = np.asarray(depth, dtype="<f4")
    H, W = data.shape
    atomic_write_bytes(path, b"GDPT" + struct.pack("<II", W, H) + data.tobytes())


def read_depth(path) -> np.ndarray:
    buf = _read(path)
    _check_magic(buf, b"GDPT", path)
    W, H = struct.unpack_from("<II", buf, 4)
    return _f32(buf, 12, W * H, path).reshape(H, W).astype(np.float64)


# -- matches -----------------------------------------------------------------


def write_matches(path, p_i, p_j, weight=None) -> None:
    p_i = np.asarray(p_i, dtype=np.float64).reshape(-1, 2)
    p_j = np.asarray(p_j, dtype=np.float64).reshape(-1, 2)
    lines = ["# u_i v_i u_j v_j weight"]
    w = np.ones(len(p_i)) if weight is None else np.asarray(weight, dtype=np.float64)
    for a, b, c in zip(p_i, p_j, w):
        lines.append(" ".join(repr(float(x)) for x in (*a, *b, c)))
    atomic_write_text(path, "\n".join(lines) + "\n")


def read_matches_file(path, view_i: int, view_j: int) -> MatchSet:
    rows = []
    for lineno, line in enumerate(_read(path).decode("utf-8").splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        vals = line.split()
        if len(vals) not in (4, 5):
            raise DataError(f"{path}:{lineno}: expected 4 or 5 values")
        try:
            nums = [float(v) for v in vals]
        except ValueError as exc:
            raise DataError(f"{path}:{lineno}: {exc}") from exc
        rows.append(nums + ([1.0] if len(nums) == 4 else []))
    arr = np.asarray(rows, dtype=np.float64).reshape(-1, 5)
    n = len(arr)
    return MatchSet(np.full(n, view_i), np.full(n, view_j), arr[:, 0:2], arr[:, 2:4], arr[:, 4])


def read_match_dir(directory) -> MatchSet:
    out = MatchSet.empty()
    directory = Path(directory)
    if not directory.is_dir():
        return out
    for path in sorted(directory.glob("*_*.txt"), key=lambda p: tuple(int(x) for x in p.stem.split("_"))):
        i, j = (int(x) for x in path.stem.split("_"))
        out = out.concat(read_matches_file(path, i, j))
    return out


# -- Gaussian checkpoint -----------------------------------------------------


def _camera_record(cam: geometry.Camera, split: int) -> bytes:
    K = cam.intrinsics
    return (
        struct.pack("<I", cam.id)
        + np.asarray([K.fx, K.fy, K.cx, K.cy], dtype="<f4").tobytes()
        + struct.pack("<III", K.width, K.height, split)
        + np.concatenate([cam.pose.R.ravel(), cam.pose.t]).astype("<f4").tobytes()
    )


CAMERA_RECORD_BYTES = 4 + 16 + 12 + 48


def encode_checkpoint(gset: HybridGaussianSet, refiner_params=None, cameras=None, splits=None) -> bytes:
    """Serialize a set; optional sections carry refiner weights and cameras."""
    out = [b"GSPT", struct.pack("<IIII", CHECKPOINT_VERSION, gset.n_ordinary, gset.n_ray, len(gset.pairs))]
    no = gset.n_ordinary
    ord_rec = np.concatenate(
        [gset.mu, gset.log_scale[:no], gset.quat[:no], gset.color[:no], gset.opacity[:no, None]], axis=1
    )
    ray_rec = np.concatenate(
        [
            gset.ray_origin, gset.ray_dir, gset.z[:, None], gset.log_scale[no:], gset.quat[no:],
            gset.color[no:], gset.opacity[no:, None], gset.ray_view[:, None].astype(np.float64), gset.ray_pixel,
        ],
        axis=1,
    )
    out.append(ord_rec.astype("<f4").tobytes())
    out.append(ray_rec.astype("<f4").tobytes())
    out.append(np.asarray(gset.pairs, dtype="<u4").tobytes())
    out.append(b"BNDS" + np.asarray([gset.z_near, gset.z_far], dtype="<f4").tobytes())
    if refiner_params is not None:
        flat = np.asarray(refiner_params, dtype="<f4").ravel()
        out.append(b"GRFN" + struct.pack("<I", len(flat)) + flat.tobytes())
    if cameras:
        cams = sorted(cameras.values(), key=lambda c: c.id)
        splits = splits or {}
        out.append(b"CAMS" + struct.pack("<I", len(cams)) + b"".join(_camera_record(c, int(splits.get(c.id, 0))) for c in cams))
    return b"".join(out)


def decode_checkpoint(buf: bytes, path="<bytes>"):
    """Inverse of ``encode_checkpoint``; returns ``(set, refiner_params, cameras, splits)``."""
    _check_magic(buf, b"GSPT", path)
    if len(buf) < 20:
        raise DataError(f"{path}: truncated header")
    version, n_ord, n_ray, n_pairs = struct.unpack_from("<IIII", buf, 4)
    if version != CHECKPOINT_VERSION:
        raise DataError(f"{path}: unsupported checkpoint version {version}")
    off = 20
    ordr = _f32(buf, off, n_ord * ORD_FIELDS, path).reshape(n_ord, ORD_FIELDS).astype(np.float64)
    off += 4 * n_ord * ORD_FIELDS
    rayr = _f32(buf, off, n_ray * RAY_FIELDS, path).reshape(n_ray, RAY_FIELDS).astype(np.float64)
    off += 4 * n_ray * RAY_FIELDS
    if len(buf) < off + 8 * n_pairs:
        raise DataError(f"{path}: truncated pair table")
    pairs = np.frombuffer(buf, dtype="<u4", count=2 * n_pairs, offset=off).reshape(n_pairs, 2).astype(np.int64)
    off += 8 * n_pairs
    z_near, z_far = 1e-3, 1e3
    refiner = None
    cameras, splits = {}, {}
    while off < len(buf):
        tag = buf[off : off + 4]
        off += 4
        if tag == b"BNDS":
            z_near, z_far = (float(x) for x in _f32(buf, off, 2, path))
            off += 8
        elif tag == b"GRFN":
            (n,) = struct.unpack_from("<I", buf, off)
            refiner = _f32(buf, off + 4, n, path).astype(np.float64)
            off += 4 + 4 * n
        elif tag == b"CAMS":
            (n,) = struct.unpack_from("<I", buf, off)
            off += 4
            for _ in range(n):
                (cid,) = struct.unpack_from("<I", buf, off)
                fx, fy, cx, cy = _f32(buf, off + 4, 4, path)
                w, h, split = struct.unpack_from("<III", buf, off + 20)
                Rt = _f32(buf, off + 32, 12, path).astype(np.float64)
                U, _, Vt = np.linalg.svd(Rt[:9].reshape(3, 3))
                R = U @ np.diag([1.0, 1.0, np.linalg.det(U @ Vt)]) @ Vt
                K = geometry.CameraIntrinsics(float(fx), float(fy), float(cx), float(cy), int(w), int(h))
                cameras[cid] = geometry.Camera(K, geometry.CameraPose(R, Rt[9:]), cid)
                splits[cid] = split
                off += CAMERA_RECORD_BYTES
        else:
            raise DataError(f"{path}: unknown section {tag!r}")
    gset = HybridGaussianSet(
        mu=ordr[:, 0:3],
        ray_origin=rayr[:, 0:3],
        ray_dir=rayr[:, 3:6],
        z=rayr[:, 6],
        ray_view=np.rint(rayr[:, 18]).astype(np.int64),
        ray_pixel=rayr[:, 19:21],
        pairs=pairs,
        log_scale=np.concatenate([ordr[:, 3:6], rayr[:, 7:10]]),
        quat=np.concatenate([ordr[:, 6:10], rayr[:, 10:14]]),
        color=np.concatenate([ordr[:, 10:13], rayr[:, 14:17]]),
        opacity=np.concatenate([ordr[:, 13], rayr[:, 17]]),
        z_near=z_near,
        z_far=z_far,
    )
    return gset, refiner, cameras, splits


def write_checkpoint(path, gset, refiner_params=None, cameras=None, splits=None) -> None:
    atomic_write_bytes(path, encode_checkpoint(gset, refiner_params, cameras, splits))


def read_checkpoint(path):
    return decode_checkpoint(_read(path), path)
