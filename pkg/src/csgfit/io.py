"""File formats: PFM/CDPT depth, PPM label maps, PLY clouds, JSON models and
reports, CSV traces and TOML run configs.

Byte-level layouts are documented in ``docs/formats.md``.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
import os
import re
import struct
import sys
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .core import ConvexPrimitive, CsgModel, SceneTransform
from .errors import FormatError
from .losses import TERMS, LossWeights
from .optim import FitConfig, FitTrace
from .render import MarchConfig
from .sampling import Camera, DepthImage

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

CDPT_MAGIC = b"CDPT"


def _read_bytes(src) -> bytes:
    if isinstance(src, (bytes, bytearray, memoryview)):
        return bytes(src)
    return Path(src).read_bytes()


# ---------------------------------------------------------------------------
# PFM


def _pfm_token(buf: bytes, pos: int):
    """Next whitespace-delimited header token and the position after it."""
    n = len(buf)
    while pos < n and buf[pos:pos + 1].isspace():
        pos += 1
    start = pos
    while pos < n and not buf[pos:pos + 1].isspace():
        pos += 1
    if start == pos:
        raise FormatError("unexpected end of PFM header", start)
    if pos >= n:
        raise FormatError("PFM header not terminated", pos)
    return buf[start:pos], start, pos


def read_pfm(src):
    """Decode a PFM file or bytes into ``(float32 array, scale)``.

    Grayscale files give ``(H, W)`` and color files ``(H, W, 3)``, both with
    row 0 at the top.  ``scale`` keeps its sign in the returned value.
    """
    buf = _read_bytes(src)
    magic, at, pos = _pfm_token(buf, 0)
    if magic not in (b"Pf", b"PF") or at != 0:
        raise FormatError(f"bad PFM magic {magic[:8]!r}", at)
    channels = 1 if magic == b"Pf" else 3
    values = []
    for what in ("width", "height", "scale"):
        tok, at, pos = _pfm_token(buf, pos)
        try:
            values.append(float(tok) if what == "scale" else int(tok))
        except ValueError:
            raise FormatError(f"bad PFM {what} {tok[:16]!r}", at) from None
    width, height, scale = values
    if width <= 0 or height <= 0:
        raise FormatError(f"bad PFM size {width}x{height}", at)
    if scale == 0 or not math.isfinite(scale):
        raise FormatError(f"bad PFM scale {scale}", at)
    pos += 1  # single whitespace byte ends the header
    need = width * height * channels * 4
    have = len(buf) - pos
    if have < need:
        raise FormatError(f"PFM truncated: need {need} data bytes, have {have}", len(buf))
    dtype = np.dtype("<f4" if scale < 0 else ">f4")
    data = np.frombuffer(buf, dtype=dtype, count=width * height * channels, offset=pos)
    shape = (height, width) if channels == 1 else (height, width, 3)
    return data.reshape(shape)[::-1].astype(np.float32), scale


def encode_pfm(array, scale: float = 1.0, little_endian: bool = True) -> bytes:
    a = np.asarray(array, dtype=np.float32)
    if a.ndim == 2:
        magic = b"Pf"
    elif a.ndim == 3 and a.shape[2] == 3:
        magic = b"PF"
    else:
        raise ValueError(f"PFM holds (H, W) or (H, W, 3) arrays, got {a.shape}")
    if not scale > 0:
        raise ValueError("pass a positive scale; endianness sets its sign")
    s = -scale if little_endian else scale
    header = b"%s\n%d %d\n%s\n" % (magic, a.shape[1], a.shape[0], repr(float(s)).encode())
    body = a[::-1].astype("<f4" if little_endian else ">f4").tobytes()
    return header + body


def write_pfm(path, array, scale: float = 1.0, little_endian: bool = True):
    Path(path).write_bytes(encode_pfm(array, scale, little_endian))


# ---------------------------------------------------------------------------
# CDPT flat depth


def encode_cdpt(depth) -> bytes:
    d = np.asarray(depth, dtype=np.float32)
    if d.ndim != 2:
        raise ValueError("CDPT holds a 2-D depth raster")
    return CDPT_MAGIC + struct.pack("<II", d.shape[1], d.shape[0]) + d.astype("<f4").tobytes()


def read_cdpt(src) -> np.ndarray:
    buf = _read_bytes(src)
    if buf[:4] != CDPT_MAGIC:
        raise FormatError(f"bad CDPT magic {buf[:4]!r}")
    if len(buf) < 12:
        raise FormatError("CDPT header truncated", len(buf))
    width, height = struct.unpack_from("<II", buf, 4)
    need = 4 * width * height
    if len(buf) - 12 < need:
        raise FormatError(f"CDPT truncated: need {need} data bytes, have {len(buf) - 12}",
                          len(buf))
    return np.frombuffer(buf, dtype="<f4", count=width * height, offset=12) \
        .reshape(height, width).astype(np.float32)


def read_depth(path) -> DepthImage:
    """Load a PFM or CDPT depth raster, sniffed by magic bytes."""
    buf = _read_bytes(path)
    if buf[:4] == CDPT_MAGIC:
        values = read_cdpt(buf)
    else:
        values, _ = read_pfm(buf)
        if values.ndim != 2:
            raise FormatError("depth PFM must be grayscale (Pf)")
    return DepthImage(values.astype(np.float64))


# ---------------------------------------------------------------------------
# Label maps (PPM + JSON sidecar)


def triple_color(triple) -> tuple:
    """Deterministic RGB for a label triple; misses are black."""
    triple = tuple(int(v) for v in triple)
    if all(v < 0 for v in triple):
        return (0, 0, 0)
    digest = hashlib.blake2b(repr(triple).encode(), digest_size=3).digest()
    rgb = tuple(digest)
    return (1, 1, 1) if rgb == (0, 0, 0) else rgb


def encode_ppm(rgb) -> bytes:
    a = np.asarray(rgb)
    if a.ndim != 3 or a.shape[2] != 3:
        raise ValueError("PPM holds (H, W, 3) arrays")
    if a.min() < 0 or a.max() > 255:
        raise ValueError("PPM values must lie in [0, 255]")
    return b"P6\n%d %d\n255\n" % (a.shape[1], a.shape[0]) + a.astype(np.uint8).tobytes()


def read_ppm(src) -> np.ndarray:
    buf = _read_bytes(src)
    magic, at, pos = _pfm_token(buf, 0)
    if magic != b"P6":
        raise FormatError(f"bad PPM magic {magic[:8]!r}", at)
    vals = []
    for what in ("width", "height", "maxval"):
        tok, at, pos = _pfm_token(buf, pos)
        if not tok.isdigit():
            raise FormatError(f"bad PPM {what} {tok[:16]!r}", at)
        vals.append(int(tok))
    w, h, maxval = vals
    if maxval != 255:
        raise FormatError("only 8-bit PPM is supported", at)
    pos += 1
    need = w * h * 3
    if len(buf) - pos < need:
        raise FormatError(f"PPM truncated: need {need} data bytes, have {len(buf) - pos}",
                          len(buf))
    return np.frombuffer(buf, dtype=np.uint8, count=need, offset=pos).reshape(h, w, 3).copy()


def label_image(labels):
    """Color a ``(H, W, 3)`` triple raster; returns ``(rgb, color -> triple map)``."""
    labels = np.asarray(labels, dtype=np.int64)
    flat = labels.reshape(-1, 3)
    uniq, inv = np.unique(flat, axis=0, return_inverse=True)
    colors, legend, used = [], {}, {}
    for triple in map(tuple, uniq.tolist()):
        rgb = triple_color(triple)
        while rgb in used and used[rgb] != triple:  # resolve hash collisions
            rgb = ((rgb[0] + 1) % 256, rgb[1], rgb[2])
        used[rgb] = triple
        colors.append(rgb)
        legend["#%02x%02x%02x" % rgb] = list(triple)
    rgb = np.asarray(colors, dtype=np.uint8)[inv.reshape(-1)].reshape(labels.shape)
    return rgb, legend


def write_labels(path, labels):
    """Write ``path`` (PPM) plus ``path + '.json'`` mapping colors to triples."""
    rgb, legend = label_image(labels)
    Path(path).write_bytes(encode_ppm(rgb))
    write_json(str(path) + ".json", {"colors": legend})


def read_segmentation(path) -> np.ndarray:
    """Integer class raster from a label PPM; the packed RGB value is the class id."""
    rgb = read_ppm(path).astype(np.int64)
    return (rgb[..., 0] << 16) | (rgb[..., 1] << 8) | rgb[..., 2]


# ---------------------------------------------------------------------------
# Point clouds and cameras


def write_ply(path, points):
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    with open(path, "w") as f:
        f.write("ply\nformat ascii 1.0\n")
        f.write(f"element vertex {len(pts)}\n")
        f.write("property float x\nproperty float y\nproperty float z\nend_header\n")
        for x, y, z in pts.tolist():
            f.write(f"{x!r} {y!r} {z!r}\n")


def read_ply(path) -> np.ndarray:
    text = Path(path).read_text().splitlines()
    if not text or text[0] != "ply":
        raise FormatError("not a PLY file")
    try:
        end = text.index("end_header")
    except ValueError:
        raise FormatError("PLY header not terminated") from None
    m = [re.match(r"element vertex (\d+)", line) for line in text[:end]]
    count = next((int(x.group(1)) for x in m if x), None)
    if count is None:
        raise FormatError("PLY has no vertex element")
    rows = text[end + 1:end + 1 + count]
    if len(rows) < count:
        raise FormatError("PLY truncated", len("\n".join(text)))
    return np.array([[float(v) for v in r.split()[:3]] for r in rows]).reshape(-1, 3)


_CAMERA_KEYS = ("fx", "fy", "cx", "cy", "width", "height")


def camera_to_dict(cam: Camera) -> dict:
    return {k: getattr(cam, k) for k in _CAMERA_KEYS}


def camera_from_dict(d: dict) -> Camera:
    _exact_keys(d, _CAMERA_KEYS, "camera")
    return Camera(float(d["fx"]), float(d["fy"]), float(d["cx"]), float(d["cy"]),
                  int(d["width"]), int(d["height"]))


def read_camera(path) -> Camera:
    return camera_from_dict(read_json(path))


def write_camera(path, cam: Camera):
    write_json(path, camera_to_dict(cam))


# ---------------------------------------------------------------------------
# JSON models and reports


def _exact_keys(d, keys, what, optional=()):
    if not isinstance(d, dict):
        raise FormatError(f"{what} must be a JSON object")
    unknown = set(d) - set(keys) - set(optional)
    missing = set(keys) - set(d)
    if unknown:
        raise FormatError(f"unknown {what} field(s): {', '.join(sorted(unknown))}")
    if missing:
        raise FormatError(f"missing {what} field(s): {', '.join(sorted(missing))}")


def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, np.ndarray):
        return _jsonable(x.tolist())
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, (float, np.floating)):
        x = float(x)
        return x if math.isfinite(x) else None
    return x


def dumps_json(obj) -> str:
    return json.dumps(_jsonable(obj), indent=2, allow_nan=False) + "\n"


def write_json(path, obj):
    Path(path).write_text(dumps_json(obj))


def read_json(path):
    try:
        return json.loads(Path(path).read_text())
    except json.JSONDecodeError as e:
        raise FormatError(f"invalid JSON: {e.msg}", e.pos) from None


_PRIM_KEYS = ("center", "normals", "offsets", "delta", "symmetric")
_MODEL_KEYS = ("sigma", "scene_transform", "positives", "negatives")


def _prim_to_dict(p: ConvexPrimitive) -> dict:
    return {
        "center": p.center.tolist(),
        "normals": p.normals.tolist(),
        "offsets": p.offsets.tolist(),
        "delta": p.blend_delta,
        "symmetric": p.symmetric,
    }


def model_to_dict(m: CsgModel) -> dict:
    return {
        "sigma": m.sharpness_sigma,
        "scene_transform": {"scale": m.scene_transform.scale,
                            "translate": m.scene_transform.translate.tolist()},
        "positives": [_prim_to_dict(p) for p in m.positives],
        "negatives": [_prim_to_dict(p) for p in m.negatives],
    }


def _prim_from_dict(d) -> ConvexPrimitive:
    _exact_keys(d, _PRIM_KEYS, "primitive")
    if not isinstance(d["symmetric"], bool):
        raise FormatError("primitive 'symmetric' must be a boolean")
    return ConvexPrimitive(np.array(d["center"], dtype=np.float64),
                           np.array(d["normals"], dtype=np.float64),
                           np.array(d["offsets"], dtype=np.float64),
                           float(d["delta"]), d["symmetric"])


def model_from_dict(d: dict) -> CsgModel:
    _exact_keys(d, _MODEL_KEYS, "model")
    _exact_keys(d["scene_transform"], ("scale", "translate"), "scene_transform")
    try:
        return CsgModel(
            positives=[_prim_from_dict(p) for p in d["positives"]],
            negatives=[_prim_from_dict(p) for p in d["negatives"]],
            sharpness_sigma=float(d["sigma"]),
            scene_transform=SceneTransform(float(d["scene_transform"]["scale"]),
                                           np.array(d["scene_transform"]["translate"],
                                                    dtype=np.float64)),
        )
    except (TypeError, ValueError) as e:
        if isinstance(e, FormatError):
            raise
        raise FormatError(f"invalid model: {e}") from None


def dumps_model(m: CsgModel) -> str:
    # json emits repr() floats: the shortest string that round-trips exactly
    return json.dumps(model_to_dict(m), indent=2, allow_nan=False) + "\n"


def write_model(path, m: CsgModel):
    Path(path).write_text(dumps_model(m))


def read_model(path) -> CsgModel:
    return model_from_dict(read_json(path))


def write_trace_csv(path, trace: FitTrace):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(("step", "lr", "total", *TERMS))
        for row in trace.rows():
            w.writerow([row[0]] + [repr(v) for v in row[1:]])


def read_trace_csv(path) -> FitTrace:
    with open(path, newline="") as f:
        rows = list(csv.reader(f))
    if not rows or tuple(rows[0]) != ("step", "lr", "total", *TERMS):
        raise FormatError("unexpected trace CSV header")
    data = np.array([[float(v) for v in r[1:]] for r in rows[1:]]).reshape(-1, 2 + len(TERMS))
    return FitTrace(total=data[:, 1], terms=data[:, 2:], lr=data[:, 0])


# ---------------------------------------------------------------------------
# TOML run configuration


@dataclass(frozen=True)
class RunConfig:
    depth: str | None = None
    camera: str | None = None
    out: str | None = None
    seed: int = 0
    workers: int = 1
    fit: FitConfig = field(default_factory=FitConfig)
    march: MarchConfig = field(default_factory=MarchConfig)
    loss: LossWeights = field(default_factory=LossWeights)

    def as_dict(self) -> dict:
        fit = asdict(self.fit)
        fit.pop("weights")
        return {
            "depth": self.depth, "camera": self.camera, "out": self.out,
            "seed": self.seed, "workers": self.workers,
            "fit": fit, "march": asdict(self.march), "loss": asdict(self.loss),
        }


def _section(cls, table, what, skip=()):
    allowed = {f.name for f in fields(cls)} - set(skip)
    unknown = set(table) - allowed
    if unknown:
        raise FormatError(f"unknown [{what}] key(s): {', '.join(sorted(unknown))}")
    return dict(table)


def run_config_from_dict(d: dict, base_dir=None) -> RunConfig:
    top = ("depth", "camera", "out", "seed", "workers", "fit", "march", "loss")
    unknown = set(d) - set(top)
    if unknown:
        raise FormatError(f"unknown config key(s): {', '.join(sorted(unknown))}")
    loss = LossWeights(**_section(LossWeights, d.get("loss", {}), "loss"))
    fit_kw = _section(FitConfig, d.get("fit", {}), "fit", skip=("weights",))
    if "halve_at" in fit_kw:
        fit_kw["halve_at"] = tuple(fit_kw["halve_at"])
    seed = int(d.get("seed", fit_kw.get("seed", 0)))
    fit_kw.setdefault("seed", seed)
    fit = FitConfig(weights=loss, **fit_kw)
    march = MarchConfig(**_section(MarchConfig, d.get("march", {}), "march"))
    paths = {}
    for key in ("depth", "camera"):
        if d.get(key) is not None:
            p = Path(d[key])
            if base_dir is not None and not p.is_absolute():
                p = Path(base_dir) / p
            if not p.exists():
                raise FormatError(f"{key} path does not exist: {p}")
            paths[key] = str(p)
    workers = int(d.get("workers", 1))
    if workers < 1:
        raise FormatError("workers must be >= 1")
    return RunConfig(depth=paths.get("depth"), camera=paths.get("camera"), out=d.get("out"),
                     seed=seed, workers=workers, fit=fit, march=march, loss=loss)


def load_run_config(path) -> RunConfig:
    raw = _read_bytes(path)
    try:
        d = tomllib.loads(raw.decode("utf-8"))
    except tomllib.TOMLDecodeError as e:
        raise FormatError(f"invalid TOML: {e}") from None
    return run_config_from_dict(d, base_dir=Path(path).parent)


def with_overrides(cfg: RunConfig, **fit_changes) -> RunConfig:
    fit_changes = {k: v for k, v in fit_changes.items() if v is not None}
    seed = fit_changes.get("seed", cfg.seed)
    return replace(cfg, seed=seed, fit=replace(cfg.fit, **fit_changes))


def prepare_out_dir(path, force: bool = False) -> Path:
    """Create a fresh run directory; refuses to reuse a non-empty one unless forced."""
    p = Path(path)
    if p.exists() and any(p.iterdir()) and not force:
        raise FileExistsError(f"output directory {p} is not empty (use --force)")
    p.mkdir(parents=True, exist_ok=True)
    return p


def env_workers(default: int = 1) -> int:
    v = os.environ.get("CSGFIT_WORKERS")
    return default if not v else max(1, int(v))
