"""File formats: PFM float maps, 8-bit PNG images/masks, and the flat key=value dialect.

Depth maps use PFM (portable float map), little-endian, rows bottom-up as the
format requires. Non-finite depths (holes / sky) are serialized as the literal
1e30 and mapped back to +inf on load.
"""
from __future__ import annotations

import re
from pathlib import Path

import numpy as np
from PIL import Image

DEPTH_INF_SENTINEL = 1e30


def write_pfm(path: str | Path, data: np.ndarray) -> None:
    """Write a (H, W) or (H, W, 3) float array as little-endian PFM."""
    data = np.asarray(data, dtype=np.float32)
    if data.ndim == 2:
        header = b"Pf\n"
    elif data.ndim == 3 and data.shape[2] == 3:
        header = b"PF\n"
    else:
        raise ValueError(f"PFM supports (H, W) or (H, W, 3), got {data.shape}")
    h, w = data.shape[:2]
    with open(path, "wb") as f:
        f.write(header)
        f.write(f"{w} {h}\n".encode("ascii"))
        f.write(b"-1.0\n")  # negative scale = little-endian
        f.write(np.flipud(data).astype("<f4").tobytes())


def read_pfm(path: str | Path) -> np.ndarray:
    with open(path, "rb") as f:
        magic = f.readline().strip()
        if magic not in (b"PF", b"Pf"):
            raise ValueError(f"not a PFM file: {path}")
        dims = f.readline().split()
        w, h = int(dims[0]), int(dims[1])
        scale = float(f.readline().strip())
        count = w * h * (3 if magic == b"PF" else 1)
        raw = np.frombuffer(f.read(count * 4), dtype="<f4" if scale < 0 else ">f4")
    if raw.size != count:
        raise ValueError(f"truncated PFM file: {path}")
    shape = (h, w, 3) if magic == b"PF" else (h, w)
    return np.flipud(raw.reshape(shape)).astype(np.float64)


def write_depth_pfm(path: str | Path, depth: np.ndarray) -> None:
    out = np.asarray(depth, dtype=np.float64).copy()
    out[~np.isfinite(out)] = DEPTH_INF_SENTINEL
    write_pfm(path, out)


def read_depth_pfm(path: str | Path) -> np.ndarray:
    depth = read_pfm(path)
    depth[depth >= DEPTH_INF_SENTINEL / 2] = np.inf
    return depth


def write_image_png(path: str | Path, image: np.ndarray) -> None:
    """Write an (H, W, 3) float image in [0, 1] as 8-bit RGB PNG."""
    arr = np.asarray(image, dtype=np.float64)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ValueError(f"expected (H, W, 3) image, got {arr.shape}")
    u8 = np.rint(np.clip(arr, 0.0, 1.0) * 255.0).astype(np.uint8)
    Image.fromarray(u8, mode="RGB").save(path, format="PNG")


def read_image_png(path: str | Path) -> np.ndarray:
    img = Image.open(path).convert("RGB")
    return np.asarray(img, dtype=np.float64) / 255.0


def write_mask_png(path: str | Path, mask: np.ndarray) -> None:
    """Boolean mask as 8-bit grayscale PNG, 255 = valid."""
    u8 = np.where(np.asarray(mask, dtype=bool), 255, 0).astype(np.uint8)
    Image.fromarray(u8, mode="L").save(path, format="PNG")


def read_mask_png(path: str | Path) -> np.ndarray:
    img = Image.open(path).convert("L")
    return np.asarray(img, dtype=np.uint8) >= 128


def write_gray_png(path: str | Path, values: np.ndarray) -> None:
    """Scalar map in [0, 1] (e.g. alpha) as 8-bit grayscale PNG."""
    u8 = np.rint(np.clip(np.asarray(values, dtype=np.float64), 0.0, 1.0) * 255.0)
    Image.fromarray(u8.astype(np.uint8), mode="L").save(path, format="PNG")


_KV_LINE = re.compile(r"^\s*([A-Za-z0-9_.\-]+)\s*=\s*(.*?)\s*$")


def parse_kv_text(text: str) -> dict[str, str]:
    """Parse the flat key=value dialect: one pair per line, '#' starts a comment."""
    out: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        m = _KV_LINE.match(stripped)
        if not m:
            raise ValueError(f"bad key=value line {lineno}: {line!r}")
        out[m.group(1)] = m.group(2)
    return out


def read_kv_file(path: str | Path) -> dict[str, str]:
    return parse_kv_text(Path(path).read_text())


def format_kv(pairs: dict[str, str | int | float | bool]) -> str:
    lines = []
    for key, value in pairs.items():
        if isinstance(value, bool):
            value = "true" if value else "false"
        elif isinstance(value, float):
            value = repr(value)
        lines.append(f"{key} = {value}")
    return "\n".join(lines) + "\n"


def write_kv_file(path: str | Path, pairs: dict) -> None:
    Path(path).write_text(format_kv(pairs))


def kv_bool(raw: str) -> bool:
    low = raw.strip().lower()
    if low in ("true", "1", "yes", "on"):
        return True
    if low in ("false", "0", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {raw!r}")


def kv_floats(raw: str) -> tuple[float, ...]:
    return tuple(float(tok) for tok in raw.split())
