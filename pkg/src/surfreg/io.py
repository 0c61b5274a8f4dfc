"""On-disk formats.

- Label volume ``.nvol``: little-endian binary. Magic "NVOL", u32 version,
  3x u32 dims, 3x f64 spacing, 3x f64 origin, then i32 labels in x-fastest
  order.
- Mesh / region surface: text, one point per line ``v x y z``, one triangle
  per line ``f i j k`` (0-based), with header lines ``#region <id>`` and
  ``#dup <from> <to>`` for duplicated points. Floats are written with
  shortest round-trip repr, so save/load is bit exact.
- Transform chain: a JSON file listing terms in application order. Affine
  terms embed 16 row-major reals; velocity-field terms reference two raw
  little-endian f64 blobs (N x 3 row-major) by relative path.
- Model parameters: versioned binary, JSON shape manifest followed by the
  row-major f64 tensors in manifest order; round trip is bit exact.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile

import numpy as np

from .geometry import LabelVolume, Mesh, RegionSurface
from .model import ModelParams
from .svf import AffineLogTerm, SvfSample, SvfTerm, TransformChain

NVOL_MAGIC = b"NVOL"
NVOL_VERSION = 1
PARAMS_MAGIC = b"SRPM"
PARAMS_VERSION = 1
CHAIN_VERSION = 1


def _atomic_write(path, data: bytes) -> None:
    path = os.fspath(path)
    directory = os.path.dirname(path) or "."
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_volume(path, vol: LabelVolume) -> None:
    header = struct.pack(
        "<4sI3I3d3d", NVOL_MAGIC, NVOL_VERSION,
        *vol.dims, *vol.spacing, *vol.origin)
    # x-fastest: Fortran raveling of the [x, y, z]-indexed array
    payload = vol.data.astype("<i4").ravel(order="F").tobytes()
    _atomic_write(path, header + payload)


def load_volume(path) -> LabelVolume:
    with open(path, "rb") as f:
        raw = f.read()
    magic, version = struct.unpack_from("<4sI", raw)
    if magic != NVOL_MAGIC:
        raise ValueError(f"not an NVOL file: {path}")
    if version != NVOL_VERSION:
        raise ValueError(f"unsupported NVOL version {version}")
    dims = struct.unpack_from("<3I", raw, 8)
    spacing = struct.unpack_from("<3d", raw, 20)
    origin = struct.unpack_from("<3d", raw, 44)
    data = np.frombuffer(raw, dtype="<i4", offset=68)
    if data.size != dims[0] * dims[1] * dims[2]:
        raise ValueError("label payload size does not match dims")
    return LabelVolume(data.reshape(dims, order="F").astype(np.int32),
                       np.array(spacing), np.array(origin))


def save_mesh(path, points: np.ndarray, simplices: np.ndarray,
              region: int | None = None,
              duplicated_from: dict[int, int] | None = None) -> None:
    lines = []
    if region is not None:
        lines.append(f"#region {region}")
    for dest, src in sorted((duplicated_from or {}).items()):
        lines.append(f"#dup {src} {dest}")
    for p in points:
        lines.append(f"v {float(p[0])!r} {float(p[1])!r} {float(p[2])!r}")
    for s in simplices:
        lines.append(f"f {s[0]} {s[1]} {s[2]}")
    _atomic_write(path, ("\n".join(lines) + "\n").encode())


def load_mesh(path):
    """Returns (points, simplices, region or None, duplicated_from)."""
    points, simplices, dups = [], [], {}
    region = None
    with open(path) as f:
        for line in f:
            parts = line.split()
            if not parts:
                continue
            if parts[0] == "#region":
                region = int(parts[1])
            elif parts[0] == "#dup":
                dups[int(parts[2])] = int(parts[1])
            elif parts[0] == "v":
                points.append([float(parts[1]), float(parts[2]), float(parts[3])])
            elif parts[0] == "f":
                simplices.append([int(parts[1]), int(parts[2]), int(parts[3])])
    return (np.array(points, dtype=np.float64).reshape(-1, 3),
            np.array(simplices, dtype=np.int64).reshape(-1, 3), region, dups)


def save_surface(path, surface: RegionSurface) -> None:
    save_mesh(path, surface.points, surface.simplices, surface.region,
              surface.duplicated_from)


def load_surface(path) -> RegionSurface:
    points, simplices, region, dups = load_mesh(path)
    if region is None:
        raise ValueError(f"surface file missing #region header: {path}")
    return RegionSurface(region, points, simplices, dups)


def save_chain(path, chain: TransformChain, tag: str = "") -> None:
    path = os.fspath(path)
    directory = os.path.dirname(path) or "."
    stem = os.path.splitext(os.path.basename(path))[0]
    terms = []
    blob_idx = 0
    blobs = []
    for term in chain.terms:
        if isinstance(term, AffineLogTerm):
            terms.append({"type": "affine_log", "sign": term.sign,
                          "matrix": [float(x) for x in term.log_matrix.ravel()]})
        elif isinstance(term, SvfTerm):
            cp_name = f"{stem}.term{blob_idx}.controls.f64"
            v_name = f"{stem}.term{blob_idx}.velocities.f64"
            blob_idx += 1
            blobs.append((cp_name, term.svf.control_points))
            blobs.append((v_name, term.svf.velocities))
            terms.append({
                "type": "svf", "sign": term.sign, "steps": term.steps,
                "sigma": term.svf.sigma, "epsilon": term.svf.epsilon,
                "count": len(term.svf.control_points),
                "controls": cp_name, "velocities": v_name,
            })
        else:
            raise TypeError(f"unknown chain term {type(term)!r}")
    doc = {"format": "surfreg-chain", "version": CHAIN_VERSION,
           "tag": tag, "terms": terms}
    for name, arr in blobs:
        _atomic_write(os.path.join(directory, name),
                      arr.astype("<f8").tobytes(order="C"))
    _atomic_write(path, (json.dumps(doc, indent=1, sort_keys=True) + "\n").encode())


def load_chain(path) -> TransformChain:
    path = os.fspath(path)
    directory = os.path.dirname(path) or "."
    with open(path) as f:
        doc = json.load(f)
    if doc.get("format") != "surfreg-chain":
        raise ValueError(f"not a transform chain file: {path}")
    if doc.get("version") != CHAIN_VERSION:
        raise ValueError(f"unsupported chain version {doc.get('version')}")
    terms = []
    for t in doc["terms"]:
        if t["type"] == "affine_log":
            terms.append(AffineLogTerm(
                np.array(t["matrix"], dtype=np.float64).reshape(4, 4), t["sign"]))
        elif t["type"] == "svf":
            n = t["count"]
            cp = np.fromfile(os.path.join(directory, t["controls"]),
                             dtype="<f8").reshape(n, 3)
            v = np.fromfile(os.path.join(directory, t["velocities"]),
                            dtype="<f8").reshape(n, 3)
            terms.append(SvfTerm(SvfSample(cp, v, t["sigma"], t["epsilon"]),
                                 t["sign"], t["steps"]))
        else:
            raise ValueError(f"unknown term type {t['type']!r}")
    return TransformChain(terms)


def save_params(path, params: ModelParams) -> None:
    manifest = {
        "seed": params.seed,
        "local_sizes": list(params.local_sizes),
        "global_sizes": list(params.global_sizes),
        "head_sizes": list(params.head_sizes),
        "tensors": [{"name": n, "shape": list(a.shape)}
                    for n, a in params.named_arrays()],
    }
    mbytes = json.dumps(manifest, sort_keys=True).encode()
    out = [struct.pack("<4sII", PARAMS_MAGIC, PARAMS_VERSION, len(mbytes)), mbytes]
    for _, a in params.named_arrays():
        out.append(a.astype("<f8").tobytes(order="C"))
    _atomic_write(path, b"".join(out))


def load_params(path) -> ModelParams:
    with open(path, "rb") as f:
        raw = f.read()
    magic, version, mlen = struct.unpack_from("<4sII", raw)
    if magic != PARAMS_MAGIC:
        raise ValueError(f"not a parameter file: {path}")
    if version != PARAMS_VERSION:
        raise ValueError(f"unsupported parameter version {version}")
    manifest = json.loads(raw[12:12 + mlen])
    offset = 12 + mlen
    arrays = {}
    for entry in manifest["tensors"]:
        shape = tuple(entry["shape"])
        size = int(np.prod(shape)) * 8
        arrays[entry["name"]] = np.frombuffer(
            raw, dtype="<f8", count=int(np.prod(shape)), offset=offset
        ).reshape(shape).copy()
        offset += size

    def stack(prefix, sizes):
        return [(arrays[f"{prefix}.{i}.W"], arrays[f"{prefix}.{i}.b"])
                for i in range(len(sizes))]

    return ModelParams(
        stack("local", manifest["local_sizes"]),
        stack("global", manifest["global_sizes"]),
        stack("head", manifest["head_sizes"]),
        manifest["seed"],
        tuple(manifest["local_sizes"]),
        tuple(manifest["global_sizes"]),
        tuple(manifest["head_sizes"]))
