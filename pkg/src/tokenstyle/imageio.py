"""Binary PPM (P6, 8-bit) images and the dataset directory format.

A dataset directory holds ``NNNNNN.ppm`` files plus ``manifest.tsv`` with one
line per sample: filename, caption, background color, shape, shape color,
center x, center y, size, style (empty when unstyled).
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ArtifactIOError
from .toyworld import SceneSpec

MANIFEST = "manifest.tsv"


def to_uint8(image: np.ndarray) -> np.ndarray:
    return np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)


def encode_ppm(image: np.ndarray) -> bytes:
    if image.ndim != 3 or image.shape[2] != 3:
        raise ArtifactIOError(f"PPM needs an (H, W, 3) image, got {image.shape}")
    pixels = image if image.dtype == np.uint8 else to_uint8(image)
    h, w, _ = pixels.shape
    return f"P6\n{w} {h}\n255\n".encode("ascii") + pixels.tobytes()


def decode_ppm(blob: bytes) -> np.ndarray:
    """Return the image as floats in [0, 1]."""
    fields, pos = [], 0

    def skip_space(p):
        while p < len(blob):
            if blob[p:p + 1] == b"#":
                while p < len(blob) and blob[p:p + 1] not in (b"\n", b"\r"):
                    p += 1
            elif blob[p:p + 1].isspace():
                p += 1
            else:
                break
        return p

    while len(fields) < 4:
        pos = skip_space(pos)
        start = pos
        while pos < len(blob) and not blob[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ArtifactIOError("truncated PPM header")
        fields.append(blob[start:pos])
    if fields[0] != b"P6":
        raise ArtifactIOError("only binary P6 PPM is supported")
    try:
        w, h, maxval = (int(f) for f in fields[1:])
    except ValueError:
        raise ArtifactIOError("malformed PPM header") from None
    if maxval != 255:
        raise ArtifactIOError("only 8-bit PPM is supported")
    pos += 1  # single whitespace after maxval
    data = blob[pos:pos + w * h * 3]
    if len(data) != w * h * 3:
        raise ArtifactIOError("truncated PPM pixel data")
    return np.frombuffer(data, dtype=np.uint8).reshape(h, w, 3).astype(np.float64) / 255.0


def write_ppm(path: str | Path, image: np.ndarray) -> None:
    try:
        Path(path).write_bytes(encode_ppm(image))
    except OSError as exc:
        raise ArtifactIOError(f"cannot write {path}: {exc}") from None


def read_ppm(path: str | Path) -> np.ndarray:
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise ArtifactIOError(f"cannot read {path}: {exc}") from None
    return decode_ppm(blob)


@dataclass
class Sample:
    filename: str
    caption: str
    scene: SceneSpec
    style: str | None = None


def write_dataset(directory: str | Path, samples, images) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    lines = []
    for sample, image in zip(samples, images):
        write_ppm(directory / sample.filename, image)
        s = sample.scene
        row = [sample.filename, sample.caption, s.background_color, s.shape, s.shape_color,
               str(s.center[0]), str(s.center[1]), str(s.size), sample.style or ""]
        lines.append("\t".join(row) + "\n")
    (directory / MANIFEST).write_text("".join(lines), encoding="utf-8")


def read_manifest(directory: str | Path) -> list[Sample]:
    path = Path(directory) / MANIFEST
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ArtifactIOError(f"cannot read {path}: {exc}") from None
    samples = []
    for lineno, line in enumerate(text.splitlines(), 1):
        parts = line.split("\t")
        if len(parts) != 9:
            raise ArtifactIOError(f"{path}:{lineno}: expected 9 fields, got {len(parts)}")
        name, cap, bg, shape, fg, x, y, size, style = parts
        scene = SceneSpec(bg, shape, fg, (int(x), int(y)), int(size))
        samples.append(Sample(name, cap, scene, style or None))
    return samples


def read_dataset(directory: str | Path, limit: int | None = None):
    samples = read_manifest(directory)
    if limit is not None:
        samples = samples[:limit]
    images = [read_ppm(Path(directory) / s.filename) for s in samples]
    return samples, images
