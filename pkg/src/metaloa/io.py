"""File formats: complex images, 16-bit PGM magnitudes, masks and task datasets.

* ``.cimg``: ASCII header line ``CIMG h w`` terminated by a newline, then
  h*w little-endian float32 (re, im) pairs, row-major.
* ``.pgm``: binary P5, maxval 65535 (big-endian samples as the format
  requires), magnitude scaled so the peak maps to 65535.
* mask text: first line ``MASK h w``, then h rows of w space-separated 0/1
  in display layout (DC in the center), then optional ``# key value``
  trailer lines carrying the pattern and nominal ratio.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .autodiff import CDTYPE
from .mri import SamplingMask, TaskDataset

SPLITS = ("train", "val", "test")


class FormatError(ValueError):
    """A file exists but does not parse."""


def _as_numpy(x) -> np.ndarray:
    if isinstance(x, torch.Tensor):
        x = x.detach().cpu().numpy()
    return np.asarray(x)


def write_cimg(path, img) -> None:
    a = _as_numpy(img).astype(np.complex128)
    if a.ndim != 2:
        raise ValueError(f"expected a 2-D image, got shape {a.shape}")
    h, w = a.shape
    pairs = np.stack([a.real, a.imag], axis=-1).astype("<f4")
    with open(path, "wb") as fh:
        fh.write(f"CIMG {h} {w}\n".encode("ascii"))
        fh.write(pairs.tobytes(order="C"))


def read_cimg(path) -> torch.Tensor:
    data = Path(path).read_bytes()
    nl = data.find(b"\n")
    head = data[:nl].decode("ascii", errors="replace").split() if nl > 0 else []
    if len(head) != 3 or head[0] != "CIMG":
        raise FormatError(f"{path}: missing 'CIMG h w' header")
    try:
        h, w = int(head[1]), int(head[2])
    except ValueError:
        raise FormatError(f"{path}: bad dimensions in header") from None
    body = data[nl + 1:]
    if len(body) != h * w * 8:
        raise FormatError(f"{path}: expected {h * w * 8} payload bytes, found {len(body)}")
    pairs = np.frombuffer(body, dtype="<f4").reshape(h, w, 2).astype(np.float64)
    return torch.from_numpy(pairs[..., 0] + 1j * pairs[..., 1]).to(CDTYPE)


def write_pgm(path, img, peak: float | None = None) -> None:
    mag = np.abs(_as_numpy(img)).astype(np.float64)
    top = mag.max() if peak is None else peak
    scaled = np.zeros_like(mag) if top <= 0 else np.clip(mag / top, 0.0, 1.0)
    data = np.round(scaled * 65535).astype(">u2")
    h, w = mag.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n65535\n".encode("ascii"))
        fh.write(data.tobytes(order="C"))


def read_pgm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError(f"{path}: truncated PGM header")
        tokens.append(data[start:pos].decode("ascii"))
    if tokens[0] != "P5":
        raise FormatError(f"{path}: not a binary PGM")
    w, h, maxval = (int(t) for t in tokens[1:])
    dt = ">u2" if maxval > 255 else "u1"
    body = data[pos + 1:]
    n = w * h * np.dtype(dt).itemsize
    if len(body) != n:
        raise FormatError(f"{path}: expected {n} payload bytes, found {len(body)}")
    return np.frombuffer(body, dtype=dt).reshape(h, w).astype(np.uint16)


def write_mask(path, mask: SamplingMask) -> None:
    h, w = mask.shape
    lines = [f"MASK {h} {w}"]
    lines += [" ".join(str(int(v)) for v in row) for row in mask.centered()]
    lines += [f"# pattern {mask.pattern}", f"# ratio {mask.ratio!r}"]
    Path(path).write_text("\n".join(lines) + "\n")


def read_mask(path) -> SamplingMask:
    lines = Path(path).read_text().splitlines()
    if not lines:
        raise FormatError(f"{path}: empty mask file")
    head = lines[0].split()
    if len(head) != 3 or head[0] != "MASK":
        raise FormatError(f"{path}: missing 'MASK h w' header")
    h, w = int(head[1]), int(head[2])
    rows = lines[1:1 + h]
    if len(rows) != h:
        raise FormatError(f"{path}: expected {h} rows, found {len(rows)}")
    try:
        vals = np.array([[int(v) for v in r.split()] for r in rows], dtype=np.uint8)
    except ValueError:
        raise FormatError(f"{path}: non-integer mask entry") from None
    if vals.shape != (h, w) or not np.isin(vals, (0, 1)).all():
        raise FormatError(f"{path}: rows must hold {w} entries of 0/1")
    meta = {}
    for line in lines[1 + h:]:
        parts = line[1:].split() if line.startswith("#") else []
        if len(parts) == 2:
            meta[parts[0]] = parts[1]
    pattern = meta.get("pattern", "unknown")
    ratio = float(meta["ratio"]) if "ratio" in meta else float(vals.mean())
    return SamplingMask(np.ascontiguousarray(np.fft.ifftshift(vals)), pattern, ratio)


# -- datasets -------------------------------------------------------------------------


def save_dataset(path, tasks: Sequence[TaskDataset], meta: dict | None = None) -> Path:
    """``<task>/mask.txt`` plus ``<task>/<split>/NNN_y.cimg`` and ``NNN_x.cimg``."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    entries = []
    for t in tasks:
        tdir = path / t.task_id
        tdir.mkdir(exist_ok=True)
        write_mask(tdir / "mask.txt", t.mask)
        counts = {}
        for split in SPLITS:
            ys, xs = getattr(t, f"y_{split}"), getattr(t, f"x_{split}")
            n = 0 if ys is None else int(ys.shape[0])
            counts[split] = n
            sdir = tdir / split
            sdir.mkdir(exist_ok=True)
            for i in range(n):
                write_cimg(sdir / f"{i:03d}_y.cimg", ys[i])
                write_cimg(sdir / f"{i:03d}_x.cimg", xs[i])
        entries.append({"task_id": t.task_id, "counts": counts, "meta": t.meta})
    manifest = {"format": "metaloa-dataset/1", "tasks": entries, **(meta or {})}
    (path / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True, default=str))
    return path


def load_dataset(path) -> tuple[list[TaskDataset], dict]:
    path = Path(path)
    mf = path / "manifest.json"
    if not mf.exists():
        raise FileNotFoundError(f"no dataset manifest in {path}")
    try:
        manifest = json.loads(mf.read_text())
    except json.JSONDecodeError as e:
        raise FormatError(f"corrupt dataset manifest: {e}") from None
    tasks = []
    for e in manifest["tasks"]:
        tdir = path / e["task_id"]
        mask = read_mask(tdir / "mask.txt")
        parts = {}
        for split in SPLITS:
            n = e["counts"].get(split, 0)
            ys = [read_cimg(tdir / split / f"{i:03d}_y.cimg") for i in range(n)]
            xs = [read_cimg(tdir / split / f"{i:03d}_x.cimg") for i in range(n)]
            empty = torch.zeros((0,) + mask.shape, dtype=CDTYPE)
            parts[split] = (torch.stack(ys) if ys else empty, torch.stack(xs) if xs else empty)
        tasks.append(TaskDataset(
            e["task_id"], mask, *parts["train"], *parts["val"], *parts["test"], meta=e["meta"],
        ))
    return tasks, manifest
