"""File formats: binary PPM images, binary little-endian PLY Gaussians, and
flat ``key = value`` config files with sections."""

from __future__ import annotations

import configparser
from pathlib import Path

import numpy as np

PLY_PROPERTIES = (
    "x", "y", "z", "opacity", "scale_0", "scale_1", "scale_2",
    "rot_0", "rot_1", "rot_2", "rot_3", "red", "green", "blue",
)


# -- PPM -------------------------------------------------------------------------

def write_ppm(path, image: np.ndarray) -> None:
    """Write an [H, W, 3] float image in [0, 1] as binary P6."""
    img = np.clip(np.rint(np.asarray(image, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)
    h, w = img.shape[:2]
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(img.tobytes())


def read_ppm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while data[pos : pos + 1].isspace():
            pos += 1
        if data[pos : pos + 1] == b"#":
            while data[pos : pos + 1] not in (b"\n", b""):
                pos += 1
            continue
        start = pos
        while not data[pos : pos + 1].isspace():
            pos += 1
        tokens.append(data[start:pos])
    if tokens[0] != b"P6":
        raise ValueError(f"{path}: not a binary PPM")
    w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    pos += 1
    img = np.frombuffer(data, dtype=np.uint8, count=w * h * 3, offset=pos).reshape(h, w, 3)
    return img.astype(np.float32) / float(maxval)


# -- PLY -------------------------------------------------------------------------

def write_ply(path, gaussians) -> None:
    """Write a GaussianSet (numpy fields) as binary little-endian PLY."""
    g = gaussians.numpy()
    cols = np.concatenate(
        [g.centers, g.opacities[:, None], g.scales, g.rotations, g.colors], axis=1
    ).astype("<f4")
    header = ["ply", "format binary_little_endian 1.0", f"element vertex {len(cols)}"]
    header += [f"property float {p}" for p in PLY_PROPERTIES]
    header.append("end_header")
    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        fh.write(np.ascontiguousarray(cols).tobytes())


def read_ply(path):
    from .splat import GaussianSet

    data = Path(path).read_bytes()
    end = data.index(b"end_header\n") + len(b"end_header\n")
    lines = data[:end].decode("ascii").splitlines()
    if "format binary_little_endian 1.0" not in lines:
        raise ValueError(f"{path}: expected binary little-endian PLY")
    count = next(int(l.split()[2]) for l in lines if l.startswith("element vertex"))
    props = [l.split()[2] for l in lines if l.startswith("property")]
    if tuple(props) != PLY_PROPERTIES:
        raise ValueError(f"{path}: unexpected properties {props}")
    arr = np.frombuffer(data, dtype="<f4", count=count * len(props), offset=end).reshape(count, len(props))
    arr = arr.astype(np.float64)
    return GaussianSet(arr[:, 0:3], arr[:, 4:7], arr[:, 7:11], arr[:, 3], arr[:, 11:14])


# -- structured text ---------------------------------------------------------------

def format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (list, tuple, np.ndarray)):
        return ", ".join(format_value(x) for x in np.asarray(v).reshape(-1).tolist())
    if isinstance(v, float):
        return repr(v)
    return str(v)


def parse_value(s: str):
    s = s.strip()
    if s.lower() in ("true", "false"):
        return s.lower() == "true"
    if "," in s:
        return [parse_value(x) for x in s.split(",")]
    for cast in (int, float):
        try:
            return cast(s)
        except ValueError:
            pass
    return s


def write_config(path, sections: dict[str, dict]) -> None:
    cp = configparser.ConfigParser()
    cp.optionxform = str
    for name, values in sections.items():
        cp[name] = {k: format_value(v) for k, v in values.items()}
    with open(path, "w") as fh:
        cp.write(fh)


def read_config(path) -> dict[str, dict]:
    cp = configparser.ConfigParser()
    cp.optionxform = str
    if not cp.read(path):
        raise FileNotFoundError(path)
    return {s: {k: parse_value(v) for k, v in cp[s].items()} for s in cp.sections()}
