"""Image persistence: binary PPM (P6, maxval 255) and optional PNG via Pillow."""

from __future__ import annotations

from pathlib import Path

import numpy as np


def quantize(img: np.ndarray) -> np.ndarray:
    return np.clip(np.round(np.asarray(img) * 255.0), 0, 255).astype(np.uint8)


def write_ppm(path, img: np.ndarray) -> None:
    q = quantize(img)
    if q.ndim != 3 or q.shape[2] != 3:
        raise ValueError(f"expected HxWx3 image, got {q.shape}")
    h, w, _ = q.shape
    Path(path).write_bytes(f"P6\n{w} {h}\n255\n".encode("ascii") + q.tobytes())


def read_ppm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        start = pos
        while not raw[pos:pos + 1].isspace():
            pos += 1
        tokens.append(raw[start:pos])
    if tokens[0] != b"P6" or int(tokens[3]) != 255:
        raise ValueError(f"{path}: only binary P6 with maxval 255 is supported")
    w, h = int(tokens[1]), int(tokens[2])
    data = np.frombuffer(raw[pos + 1:pos + 1 + w * h * 3], dtype=np.uint8)
    return data.reshape(h, w, 3).astype(np.float64) / 255.0


def write_png(path, img: np.ndarray) -> None:
    from PIL import Image

    Image.fromarray(quantize(img)).save(path)


def write_image(path, img: np.ndarray) -> None:
    path = Path(path)
    if path.suffix.lower() == ".png":
        write_png(path, img)
    else:
        write_ppm(path, img)


def read_image(path) -> np.ndarray:
    path = Path(path)
    if path.suffix.lower() == ".png":
        from PIL import Image

        return np.asarray(Image.open(path).convert("RGB"), dtype=np.float64) / 255.0
    return read_ppm(path)


def image_grid(images, cols: int | None = None, pad: int = 1, fill: float = 1.0) -> np.ndarray:
    """Tile equally-sized images row-major into one canvas."""
    images = [np.asarray(im) for im in images]
    if not images:
        raise ValueError("no images to tile")
    n = len(images)
    cols = cols or n
    rows = -(-n // cols)
    h, w, c = images[0].shape
    canvas = np.full((rows * (h + pad) + pad, cols * (w + pad) + pad, c), fill)
    for k, im in enumerate(images):
        r, q = divmod(k, cols)
        y, x = pad + r * (h + pad), pad + q * (w + pad)
        canvas[y:y + h, x:x + w] = im
    return canvas
