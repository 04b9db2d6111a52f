"""Persistence: embedding stores, checkpoints, manifests, prompt sets, rasters.

Binary layouts are little-endian and documented in ``docs/FORMATS.md``.
"""
from __future__ import annotations

import io
import json
import os
import struct
from dataclasses import asdict, dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from .exceptions import ConfigError, CorruptionError, FormatError, LookupFailure, ShapeError

STORE_MAGIC = b"CEMB"
STORE_VERSION = 1
# magic, version, dim, count, dtype byte
_STORE_HEADER = struct.Struct("<4sIIQB")
STORE_HEADER_SIZE = _STORE_HEADER.size
DTYPE_F32 = 0
FLAG_NORMALIZED = 0x10

CKPT_MAGIC = b"CCKP"
CKPT_VERSION = 1

PLACEHOLDER = "CLASSNAME"


# --- embedding store --------------------------------------------------------

@dataclass
class EmbeddingStore:
    vectors: np.ndarray  # (count, dim) float32
    ids: list[str] | None = None
    normalized: bool = False

    @property
    def dim(self) -> int:
        return int(self.vectors.shape[1])

    @property
    def count(self) -> int:
        return int(self.vectors.shape[0])

    def __len__(self):
        return self.count


def write_store(path, embeddings, ids=None, normalized: bool = False, dim: int | None = None):
    """Write ``embeddings`` (count x dim) as a CEMB file.

    ``dim`` is only needed for an empty store.
    """
    arr = np.asarray(embeddings, dtype=np.float32)
    if arr.size == 0:
        if dim is None:
            dim = arr.shape[1] if arr.ndim == 2 else 0
        arr = np.zeros((0, int(dim)), dtype=np.float32)
    if arr.ndim != 2:
        raise ShapeError("embeddings must be a 2-D array (count x dim)")
    if ids is not None and len(ids) != arr.shape[0]:
        raise ShapeError("ids length must equal embedding count")
    if normalized and arr.shape[0]:
        norms = np.linalg.norm(arr.astype(np.float64), axis=1)
        if np.any(np.abs(norms - 1.0) > 1e-3):
            raise ShapeError("store flagged normalized but a vector norm is outside [0.999, 1.001]")
    code = DTYPE_F32 | (FLAG_NORMALIZED if normalized else 0)
    buf = io.BytesIO()
    buf.write(_STORE_HEADER.pack(STORE_MAGIC, STORE_VERSION, arr.shape[1], arr.shape[0], code))
    buf.write(arr.astype("<f4").tobytes())
    if ids is not None:
        for s in ids:
            b = str(s).encode("utf-8")
            buf.write(struct.pack("<I", len(b)))
            buf.write(b)
    Path(path).write_bytes(buf.getvalue())


def parse_store(data: bytes) -> EmbeddingStore:
    if len(data) < STORE_HEADER_SIZE:
        if data[:4] != STORE_MAGIC[: len(data[:4])]:
            raise FormatError("not an embedding store (bad magic)")
        raise CorruptionError("embedding store truncated inside header")
    magic, version, dim, count, code = _STORE_HEADER.unpack_from(data, 0)
    if magic != STORE_MAGIC:
        raise FormatError("not an embedding store (bad magic)")
    if version != STORE_VERSION:
        raise FormatError(f"unsupported store version {version}")
    if code & 0x0F != DTYPE_F32 or code & ~(0x0F | FLAG_NORMALIZED):
        raise FormatError(f"unsupported dtype code {code}")
    payload = count * dim * 4
    # validate against the real size before allocating anything
    if STORE_HEADER_SIZE + payload > len(data):
        raise CorruptionError(
            f"payload shorter than header claims ({len(data) - STORE_HEADER_SIZE} < {payload} bytes)")
    vecs = np.frombuffer(data, dtype="<f4", count=count * dim, offset=STORE_HEADER_SIZE)
    vecs = vecs.astype(np.float32).reshape(count, dim)
    pos = STORE_HEADER_SIZE + payload
    ids = None
    if pos < len(data):
        ids = []
        for _ in range(count):
            if pos + 4 > len(data):
                raise CorruptionError("id block truncated")
            (n,) = struct.unpack_from("<I", data, pos)
            pos += 4
            if pos + n > len(data):
                raise CorruptionError("id string truncated")
            ids.append(data[pos:pos + n].decode("utf-8"))
            pos += n
        if pos != len(data):
            raise CorruptionError("trailing bytes after id block")
    normalized = bool(code & FLAG_NORMALIZED)
    if normalized and count:
        norms = np.linalg.norm(vecs.astype(np.float64), axis=1)
        if np.any(np.abs(norms - 1.0) > 1e-3):
            raise CorruptionError("store flagged normalized but holds a non-unit vector")
    return EmbeddingStore(vecs, ids, normalized)


def read_store(path) -> EmbeddingStore:
    return parse_store(Path(path).read_bytes())


# --- checkpoints ------------------------------------------------------------

def write_checkpoint(path, params: dict, config: dict):
    """Named float64 tensors plus a JSON config blob (see docs/FORMATS.md)."""
    cfg = json.dumps(config, sort_keys=True).encode("utf-8")
    buf = io.BytesIO()
    buf.write(struct.pack("<4sII", CKPT_MAGIC, CKPT_VERSION, len(cfg)))
    buf.write(cfg)
    buf.write(struct.pack("<I", len(params)))
    for name in sorted(params):
        arr = np.asarray(params[name], dtype="<f8")
        nb = name.encode("utf-8")
        buf.write(struct.pack("<HB", len(nb), arr.ndim))
        buf.write(nb)
        buf.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        buf.write(arr.tobytes())
    Path(path).write_bytes(buf.getvalue())


def read_checkpoint(path) -> tuple[dict, dict]:
    data = Path(path).read_bytes()
    if len(data) < 12 or data[:4] != CKPT_MAGIC:
        raise FormatError("not a checkpoint (bad magic)")
    _, version, clen = struct.unpack_from("<4sII", data, 0)
    if version != CKPT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    pos = 12
    try:
        config = json.loads(data[pos:pos + clen].decode("utf-8"))
        pos += clen
        (n,) = struct.unpack_from("<I", data, pos)
        pos += 4
        params = {}
        for _ in range(n):
            ln, ndim = struct.unpack_from("<HB", data, pos)
            pos += 3
            name = data[pos:pos + ln].decode("utf-8")
            pos += ln
            shape = struct.unpack_from(f"<{ndim}Q", data, pos)
            pos += 8 * ndim
            size = int(np.prod(shape)) if ndim else 1
            if pos + 8 * size > len(data):
                raise CorruptionError(f"tensor {name!r} truncated")
            params[name] = np.frombuffer(data, "<f8", size, pos).astype(np.float64).reshape(shape)
            pos += 8 * size
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptionError(f"checkpoint corrupt: {exc}") from exc
    if pos != len(data):
        raise CorruptionError("trailing bytes in checkpoint")
    return params, config


# --- manifests --------------------------------------------------------------

@dataclass
class SlideManifest:
    slide_id: str
    width_px: int
    height_px: int
    tile_coords: list = field(default_factory=list)  # (x, y, side), level-0 px
    store_path: str = ""
    label: int | None = None
    magnification: float = 10.0

    def validate(self, store: EmbeddingStore | None = None):
        for x, y, s in self.tile_coords:
            if x < 0 or y < 0 or x + s > self.width_px or y + s > self.height_px:
                raise ShapeError(f"tile ({x}, {y}, {s}) outside slide {self.slide_id}")
        if store is not None and store.count != len(self.tile_coords):
            raise ShapeError(
                f"manifest {self.slide_id} lists {len(self.tile_coords)} tiles, store has {store.count}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["tile_coords"] = [list(map(int, t)) for t in self.tile_coords]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SlideManifest":
        known = {k: d[k] for k in ("slide_id", "width_px", "height_px", "tile_coords",
                                   "store_path", "label", "magnification") if k in d}
        m = cls(**known)
        m.tile_coords = [tuple(int(v) for v in t) for t in m.tile_coords]
        return m


def write_manifest(path, manifest: SlideManifest):
    Path(path).write_text(json.dumps(manifest.to_dict(), sort_keys=True, indent=1) + "\n")


def read_manifest(path) -> SlideManifest:
    return SlideManifest.from_dict(json.loads(Path(path).read_text()))


def load_slide(manifest_path) -> tuple[SlideManifest, EmbeddingStore]:
    """Read a manifest and its store (path resolved relative to the manifest)."""
    manifest_path = Path(manifest_path)
    m = read_manifest(manifest_path)
    sp = Path(m.store_path)
    if not sp.is_absolute():
        sp = manifest_path.parent / sp
    store = read_store(sp)
    m.validate(store)
    return m, store


# --- prompt sets ------------------------------------------------------------

@dataclass
class PromptSet:
    templates: list[str]
    classes: list[tuple[str, list[str]]]
    name: str = ""

    def __post_init__(self):
        self.classes = [(str(lbl), list(names)) for lbl, names in self.classes]
        self.validate()

    def validate(self):
        if not self.templates:
            raise ConfigError("prompt set has no templates")
        for t in self.templates:
            if t.count(PLACEHOLDER) != 1:
                raise ConfigError(f"template {t!r} must contain {PLACEHOLDER} exactly once")
        if not self.classes:
            raise ConfigError("prompt set has no classes")
        for lbl, names in self.classes:
            if not names:
                raise ConfigError(f"class {lbl!r} has no class names")

    @property
    def labels(self) -> list[str]:
        return [lbl for lbl, _ in self.classes]

    def names_for(self, label) -> list[str]:
        for lbl, names in self.classes:
            if lbl == label:
                return names
        if isinstance(label, (int, np.integer)) and 0 <= label < len(self.classes):
            return self.classes[label][1]
        raise LookupFailure(f"unknown class {label!r}")

    def subset(self, labels) -> "PromptSet":
        return PromptSet(self.templates, [(lbl, self.names_for(lbl)) for lbl in labels], self.name)

    def to_dict(self) -> dict:
        return {"name": self.name, "templates": list(self.templates),
                "classes": [{"label": lbl, "names": names} for lbl, names in self.classes]}

    @classmethod
    def from_dict(cls, d: dict) -> "PromptSet":
        try:
            classes = [(c["label"], c["names"]) for c in d["classes"]]
            return cls(list(d["templates"]), classes, d.get("name", ""))
        except (KeyError, TypeError) as exc:
            raise ConfigError(f"malformed prompt set: {exc}") from exc


def expand_prompts(prompt_set: PromptSet, label) -> list[str]:
    """All template x class-name prompts for one class, templates outermost."""
    names = prompt_set.names_for(label)
    return [t.replace(PLACEHOLDER, n) for t in prompt_set.templates for n in names]


def read_prompt_set(path) -> PromptSet:
    try:
        d = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    return PromptSet.from_dict(d)


def write_prompt_set(path, ps: PromptSet):
    Path(path).write_text(json.dumps(ps.to_dict(), indent=1, ensure_ascii=False) + "\n", encoding="utf-8")


def builtin_prompt_set(name: str) -> PromptSet:
    """Load a bundled prompt set, e.g. ``"crc100k"`` or ``"nsclc"``."""
    try:
        text = resources.files("histovl").joinpath("prompts").joinpath(f"{name}.json").read_text(encoding="utf-8")
    except FileNotFoundError as exc:
        raise LookupFailure(f"no bundled prompt set {name!r}") from exc
    return PromptSet.from_dict(json.loads(text))


def builtin_prompt_set_names() -> list[str]:
    root = resources.files("histovl").joinpath("prompts")
    return sorted(p.name[:-5] for p in root.iterdir() if p.name.endswith(".json"))


# --- rasters ----------------------------------------------------------------

def _check_raster(image):
    img = np.asarray(image)
    if img.dtype != np.uint8 or img.ndim != 3 or img.shape[2] != 3:
        raise ShapeError("raster must be uint8 with shape (height, width, 3)")
    return img


def _read_netpbm(data: bytes, magic: bytes, channels: int):
    if data[:2] != magic:
        raise FormatError(f"expected {magic.decode()} header")
    tokens = []
    pos = 2
    while len(tokens) < 3:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise CorruptionError("header truncated")
        tokens.append(data[start:pos])
    pos += 1  # single whitespace byte before the raster
    try:
        w, h, maxval = (int(t) for t in tokens)
    except ValueError as exc:
        raise FormatError(f"malformed header: {exc}") from exc
    if maxval != 255:
        raise FormatError("only maxval 255 is supported")
    n = w * h * channels
    if len(data) - pos != n:
        raise CorruptionError(f"raster payload is {len(data) - pos} bytes, header implies {n}")
    return np.frombuffer(data, np.uint8, n, pos).reshape(h, w, channels).copy()


def write_ppm(image, path):
    img = _check_raster(image)
    h, w, _ = img.shape
    Path(path).write_bytes(f"P6\n{w} {h}\n255\n".encode("ascii") + np.ascontiguousarray(img).tobytes())


def read_ppm(path) -> np.ndarray:
    return _read_netpbm(Path(path).read_bytes(), b"P6", 3)


def write_pgm(grid, path):
    g = np.asarray(grid)
    if g.ndim != 2 or g.min(initial=0) < 0 or g.max(initial=0) > 255:
        raise ShapeError("PGM grid must be 2-D with values in [0, 255]")
    h, w = g.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + g.astype(np.uint8).tobytes())


def read_pgm(path) -> np.ndarray:
    return _read_netpbm(Path(path).read_bytes(), b"P5", 1)[:, :, 0]


def write_tile_sheet(tiles, path):
    """Square tiles stacked top to bottom into one PPM strip."""
    t = np.asarray(tiles, dtype=np.uint8)
    if t.ndim != 4 or t.shape[1] != t.shape[2] or t.shape[3] != 3 or len(t) == 0:
        raise ShapeError("tiles must be a nonempty (N, s, s, 3) array")
    write_ppm(t.reshape(-1, t.shape[2], 3), path)


def read_tile_sheet(path) -> np.ndarray:
    img = read_ppm(path)
    side = img.shape[1]
    if img.shape[0] % side:
        raise CorruptionError(f"{path}: strip height {img.shape[0]} is not a multiple of {side}")
    return img.reshape(-1, side, side, 3)


# --- JSON lines -------------------------------------------------------------

def write_jsonl(path, rows):
    with open(path, "w", encoding="utf-8") as fh:
        for r in rows:
            fh.write(json.dumps(r, sort_keys=True) + "\n")


def read_jsonl(path, skip_meta: bool = True) -> list[dict]:
    """Rows of a JSON-lines file; a leading ``{"_meta": ...}`` record is dropped."""
    with open(path, encoding="utf-8") as fh:
        try:
            rows = [json.loads(line) for line in fh if line.strip()]
        except json.JSONDecodeError as exc:
            raise FormatError(f"{path}: {exc}") from exc
    if skip_meta:
        rows = [r for r in rows if "_meta" not in r]
    return rows


def resolve(base, rel) -> str:
    rel = str(rel)
    return rel if os.path.isabs(rel) else str(Path(base) / rel)
