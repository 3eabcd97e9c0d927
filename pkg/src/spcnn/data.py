"""Dataset manifests, raster I/O, mean images and the synthetic quadrant task."""

from __future__ import annotations

import os
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import ConfigurationError, DataError
from .pyramid import RasterImage, resize_bilinear

EIMM_CLASSES = (
    "concert", "graduation", "meeting", "mountain trip",
    "picnic", "sea holiday", "ski holiday", "wedding",
)
SED_CLASSES = (
    "concert", "conference", "exhibition", "fashion",
    "protest", "sport", "theater/dance",
)

ROLES = ("train", "test")
KINDS = ("image", "video")


class ManifestError(DataError):
    def __init__(self, message, path=None, line=None):
        where = f"{path}:{line}: " if line is not None else (f"{path}: " if path else "")
        super().__init__(where + message)
        self.path, self.line = path, line


class ImageFormatError(DataError):
    pass


class MalformedImageError(ImageFormatError):
    pass


class TruncatedImageError(ImageFormatError):
    pass


class UnsupportedImageError(ImageFormatError):
    pass


@dataclass(frozen=True)
class ManifestEntry:
    path: str
    label: int
    kind: str = "image"
    role: str = "train"


@dataclass
class SplitStats:
    role_counts: dict
    # role -> per-class counts, indexed by label
    class_counts: dict

    @property
    def total(self) -> int:
        return sum(self.role_counts.values())


@dataclass
class DatasetManifest:
    class_names: tuple
    entries: list = field(default_factory=list)
    # directory that relative entry paths are resolved against
    root: str = "."

    def select(self, role: str) -> list[ManifestEntry]:
        return [e for e in self.entries if e.role == role]

    def resolve(self, entry: ManifestEntry) -> str:
        return os.path.join(self.root, entry.path)

    def stats(self) -> SplitStats:
        roles = Counter(e.role for e in self.entries)
        per_class = {}
        for role in ROLES:
            counts = [0] * len(self.class_names)
            for e in self.entries:
                if e.role == role:
                    counts[e.label] += 1
            per_class[role] = counts
        return SplitStats({r: roles.get(r, 0) for r in ROLES}, per_class)

    def to_text(self) -> str:
        lines = ["classes: " + ",".join(self.class_names)]
        for e in self.entries:
            lines.append(f"{e.role}\t{e.kind}\t{self.class_names[e.label]}\t{e.path}")
        return "\n".join(lines) + "\n"


def parse_manifest(text: str, source: str = "<manifest>", root: str = ".") -> DatasetManifest:
    class_names = None
    entries, seen = [], set()
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.rstrip("\r\n")
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        if class_names is None:
            if not line.startswith("classes:"):
                raise ManifestError("expected 'classes:' header", source, lineno)
            class_names = tuple(c.strip() for c in line[len("classes:"):].split(","))
            if any(not c for c in class_names) or len(set(class_names)) != len(class_names):
                raise ManifestError("class list has empty or duplicate names", source, lineno)
            lookup = {c: i for i, c in enumerate(class_names)}
            continue
        fields = line.split("\t")
        if len(fields) != 4:
            raise ManifestError(
                f"expected 4 tab-separated fields, got {len(fields)}", source, lineno)
        role, kind, label, path = fields
        if role not in ROLES:
            raise ManifestError(f"unknown role {role!r}", source, lineno)
        if kind not in KINDS:
            raise ManifestError(f"unknown kind {kind!r}", source, lineno)
        if label not in lookup:
            raise ManifestError(f"unknown class name {label!r}", source, lineno)
        if path in seen:
            raise ManifestError(f"duplicate path {path!r}", source, lineno)
        if kind == "video" and role == "train":
            raise ManifestError(
                "video entries are test-only; found video in train role", source, lineno)
        seen.add(path)
        entries.append(ManifestEntry(path, lookup[label], kind, role))
    if class_names is None:
        raise ManifestError("missing 'classes:' header", source)
    return DatasetManifest(class_names, entries, root)


def load_manifest(path) -> tuple[DatasetManifest, SplitStats]:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ManifestError(f"cannot read manifest: {exc.strerror}", str(path)) from None
    manifest = parse_manifest(text, str(path), str(path.parent))
    return manifest, manifest.stats()


def write_manifest(manifest: DatasetManifest, path) -> None:
    Path(path).write_text(manifest.to_text())


# -- images -----------------------------------------------------------------

def _ppm_tokens(data: bytes, count: int):
    """Read ``count`` whitespace-separated header tokens, skipping comments."""
    tokens, pos = [], 0
    while len(tokens) < count:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if pos >= len(data):
            raise TruncatedImageError("PPM header ends early")
        if data[pos:pos + 1] == b"#":
            end = data.find(b"\n", pos)
            if end < 0:
                raise TruncatedImageError("PPM header ends inside a comment")
            pos = end + 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace() and data[pos:pos + 1] != b"#":
            pos += 1
        tokens.append(data[start:pos])
    if pos >= len(data):
        raise TruncatedImageError("PPM header not terminated")
    # exactly one whitespace byte separates the header from the raster
    return tokens, pos + 1


def decode_ppm(data: bytes) -> RasterImage:
    if data[:2] != b"P6":
        raise MalformedImageError("not a binary PPM (P6) file")
    tokens, offset = _ppm_tokens(data, 4)
    try:
        width, height, maxval = (int(t) for t in tokens[1:])
    except ValueError:
        raise MalformedImageError(f"PPM header has non-integer fields {tokens[1:]}") from None
    if width < 1 or height < 1:
        raise MalformedImageError(f"PPM dimensions {width}x{height} invalid")
    if maxval != 255:
        raise UnsupportedImageError(f"PPM maxval {maxval} unsupported (only 255)")
    need = width * height * 3
    payload = data[offset:offset + need]
    if len(payload) < need:
        raise TruncatedImageError(f"PPM payload has {len(payload)} of {need} bytes")
    pixels = np.frombuffer(payload, dtype=np.uint8).reshape(height, width, 3).copy()
    return RasterImage(pixels)


def encode_ppm(img: RasterImage) -> bytes:
    return f"P6\n{img.width} {img.height}\n255\n".encode() + img.pixels.tobytes()


def write_ppm(path, img: RasterImage) -> None:
    Path(path).write_bytes(encode_ppm(img))


def _decode_png(path) -> RasterImage:
    try:
        from PIL import Image
    except ImportError:
        raise UnsupportedImageError(
            f"{path}: PNG support needs Pillow (install the 'png' extra)") from None
    try:
        with Image.open(path) as im:
            return RasterImage(np.asarray(im.convert("RGB"), dtype=np.uint8).copy())
    except OSError as exc:
        raise MalformedImageError(f"{path}: {exc}") from None


def load_image(path) -> RasterImage:
    try:
        with open(path, "rb") as fh:
            data = fh.read()
    except OSError as exc:
        raise DataError(f"cannot read image {path}: {exc.strerror}") from None
    if data.startswith(b"\x89PNG\r\n\x1a\n"):
        return _decode_png(path)
    if data[:1] == b"P" and data[1:2] != b"6":
        raise UnsupportedImageError(f"{path}: PNM variant {data[:2]!r} unsupported")
    try:
        return decode_ppm(data)
    except ImageFormatError as exc:
        raise type(exc)(f"{path}: {exc}") from None


def load_frame_sequence(dir_path) -> list[RasterImage]:
    """Frames in lexicographic filename order; name them zero-padded."""
    try:
        names = sorted(n for n in os.listdir(dir_path) if not n.startswith("."))
    except OSError as exc:
        raise DataError(f"cannot list frame directory {dir_path}: {exc.strerror}") from None
    if not names:
        raise DataError(f"frame directory {dir_path} is empty")
    return [load_image(os.path.join(dir_path, n)) for n in names]


def compute_mean_image(manifest: DatasetManifest, canonical_size: int,
                       role: str = "train", loader=load_image) -> np.ndarray:
    """Per-pixel, per-channel CHW mean of the resized images of ``role``.

    Sums are accumulated in float64; the result is float32.
    """
    entries = [e for e in manifest.select(role) if e.kind == "image"]
    if not entries:
        raise ConfigurationError(f"no {role} images to compute a mean image from")
    total = np.zeros((canonical_size, canonical_size, 3), dtype=np.float64)
    for e in entries:
        img = resize_bilinear(loader(manifest.resolve(e)), canonical_size, canonical_size)
        total += img.pixels
    mean = total / len(entries)
    return np.ascontiguousarray(mean.transpose(2, 0, 1), dtype=np.float32)


# -- synthetic quadrant task --------------------------------------------------

FLAT, HSTRIPES, VSTRIPES = 0, 1, 2
STRIPE_AMPLITUDE = 40


@dataclass(frozen=True)
class SyntheticClass:
    name: str
    colors: tuple     # four RGB triples, quadrant order TL, TR, BL, BR
    textures: tuple   # four texture codes, same order
    partner: Optional[int] = None


def synthetic_classes(class_count: int) -> list[SyntheticClass]:
    """Class table of the synthetic task.

    Classes come in quadrant-swap pairs (2k, 2k+1): identical quadrant colours,
    horizontal/vertical stripes exchanged between the diagonals. Pair members
    have identical block means at any downsampling that averages whole stripe
    periods, so only position-aware texture cues separate them. An odd last
    class is flat-textured.
    """
    if not 2 <= class_count <= 16:
        raise ConfigurationError(f"synthetic class_count must be in 2..16, got {class_count}")
    # fixed palette: independent of the sample seed
    rng = np.random.default_rng(20160601)
    classes = []
    used = set()
    for c in range(class_count):
        pair = c // 2
        if c % 2 == 0:
            while True:
                colors = tuple(tuple(int(v) for v in rng.integers(60, 196, 3)) for _ in range(4))
                if colors not in used:
                    used.add(colors)
                    break
        else:
            colors = classes[-1].colors
        if c % 2 == 0 and c + 1 < class_count:
            textures, partner = (HSTRIPES, VSTRIPES, VSTRIPES, HSTRIPES), c + 1
        elif c % 2 == 1:
            textures, partner = (VSTRIPES, HSTRIPES, HSTRIPES, VSTRIPES), c - 1
        else:
            textures, partner = (FLAT,) * 4, None
        classes.append(SyntheticClass(f"synth{c:02d}_pair{pair}", colors, textures, partner))
    return classes


def render_synthetic(cls: SyntheticClass, size: int, rng: np.random.Generator,
                     noise: float) -> RasterImage:
    """Draw one sample of ``cls`` at ``size`` x ``size``.

    Each quadrant is a flat colour carrying a striped patch half the
    quadrant wide. Patch corners sit on a grid of ``size // 8`` pixels, so
    every grid block holds whole stripe periods and has the quadrant colour
    as its mean. With ``noise > 0`` the patch position and stripe phase are
    jittered and Gaussian pixel noise with std ``noise`` is added; at
    ``noise == 0`` every sample of a class is identical.
    """
    if size % 16:
        raise ConfigurationError(f"synthetic canonical size must be divisible by 16, got {size}")
    q, cell = size // 2, size // 8
    patch = q // 2
    img = np.empty((size, size, 3), dtype=np.float64)
    ys, xs = np.mgrid[0:patch, 0:patch]
    for idx, (color, tex) in enumerate(zip(cls.colors, cls.textures)):
        gy, gx = divmod(idx, 2)
        block = np.broadcast_to(np.asarray(color, dtype=np.float64), (q, q, 3)).copy()
        if noise > 0:
            py, px = rng.integers(0, (q - patch) // cell + 1, 2) * cell
            phase = int(rng.integers(0, 2))
        else:
            py = px = (q - patch) // 2
            phase = 0
        if tex == HSTRIPES:
            stripes = np.where((ys + phase) % 2, 1, -1)
        elif tex == VSTRIPES:
            stripes = np.where((xs + phase) % 2, 1, -1)
        else:
            stripes = np.zeros((patch, patch))
        block[py:py + patch, px:px + patch] += STRIPE_AMPLITUDE * stripes[..., None]
        img[gy * q:(gy + 1) * q, gx * q:(gx + 1) * q] = block
    if noise > 0:
        img += rng.normal(0.0, noise, img.shape)
    return RasterImage(np.clip(np.rint(img), 0, 255).astype(np.uint8))


def gen_synthetic(class_count: int, samples_per_class: int, canonical_size: int,
                  seed: int, noise: float, out_dir, test_per_class: int = 0,
                  videos_per_class: int = 0, frames_per_video: int = 3) -> DatasetManifest:
    """Write the synthetic quadrant dataset as PPM files plus ``manifest.txt``."""
    classes = synthetic_classes(class_count)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    entries = []
    for c, cls in enumerate(classes):
        for role, count in (("train", samples_per_class), ("test", test_per_class)):
            for i in range(count):
                rel = f"{role}/{c:02d}_{i:04d}.ppm"
                (out / role).mkdir(exist_ok=True)
                write_ppm(out / rel, render_synthetic(cls, canonical_size, rng, noise))
                entries.append(ManifestEntry(rel, c, "image", role))
        for v in range(videos_per_class):
            rel = f"video/{c:02d}_{v:04d}"
            (out / rel).mkdir(parents=True, exist_ok=True)
            for f in range(frames_per_video):
                write_ppm(out / rel / f"frame_{f:04d}.ppm",
                          render_synthetic(cls, canonical_size, rng, noise))
            entries.append(ManifestEntry(rel, c, "video", "test"))
    manifest = DatasetManifest(tuple(c.name for c in classes), entries, str(out))
    write_manifest(manifest, out / "manifest.txt")
    return manifest


def quadrant_features(img: RasterImage) -> np.ndarray:
    """Per-quadrant mean colour and mean absolute x/y differences (20 values)."""
    px = img.pixels.astype(np.float64)
    h, w = px.shape[0] // 2, px.shape[1] // 2
    feats = []
    for gy in range(2):
        for gx in range(2):
            q = px[gy * h:(gy + 1) * h, gx * w:(gx + 1) * w]
            feats.extend(q.mean(axis=(0, 1)))
            feats.append(np.abs(np.diff(q, axis=1)).mean())
            feats.append(np.abs(np.diff(q, axis=0)).mean())
    return np.asarray(feats)


def block_downsample(img: RasterImage, size: int) -> np.ndarray:
    """Box-filter average down to ``size`` x ``size`` (flattened)."""
    px = img.pixels.astype(np.float64)
    f = px.shape[0] // size
    return px.reshape(size, f, size, f, 3).mean(axis=(1, 3)).ravel()
