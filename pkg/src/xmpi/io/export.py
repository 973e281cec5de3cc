"""Programmatic visual export of volume sequences: MIP PNGs, isosurface meshes, view montages.

Mesh files are plain text::

    # xmpi-mesh 1
    vertices <V>
    faces <F>
    v <x> <y> <z>        (V lines, µm)
    f <i> <j> <k>        (F lines, 0-based vertex indices)
"""

from __future__ import annotations

import io
from pathlib import Path

import numpy as np
from PIL import Image

from ..forward import FrameStack, project_points
from ..phantom import ScalarField4D
from ..recon.field import detector_grid
from .formats import atomic_write

MODES = ("mip", "mesh", "montage")
_AXES = {"x": 3, "y": 2, "z": 1}


def _png16(img: np.ndarray) -> bytes:
    buf = io.BytesIO()
    Image.fromarray(np.ascontiguousarray(img, dtype=np.uint16)).save(buf, format="PNG")
    return buf.getvalue()


def _to_u16(img: np.ndarray, lo: float, hi: float) -> np.ndarray:
    if hi <= lo:
        return np.zeros(img.shape, np.uint16)
    return np.round(np.clip((img - lo) / (hi - lo), 0, 1) * 65535).astype(np.uint16)


def mip(volume: ScalarField4D, axis: str = "z") -> np.ndarray:
    """Maximum-intensity projections ``(T, ...)`` along a world axis."""
    return volume.data.max(axis=_AXES[axis])


def isosurface(vol3d: np.ndarray, level: float, pitch: float, origin) -> tuple[np.ndarray, np.ndarray]:
    """Marching-cubes surface of a (Z, Y, X) array in world (x, y, z) µm; empty if ``level`` is not crossed."""
    from skimage.measure import marching_cubes

    if not vol3d.min() < level < vol3d.max():
        return np.zeros((0, 3)), np.zeros((0, 3), int)
    verts, faces, _, _ = marching_cubes(vol3d.astype(np.float64), level=level, spacing=(pitch,) * 3)
    return verts[:, ::-1] + np.asarray(origin, float), faces


def mesh_text(verts: np.ndarray, faces: np.ndarray) -> str:
    lines = ["# xmpi-mesh 1", f"vertices {len(verts)}", f"faces {len(faces)}"]
    lines += [f"v {x:.6f} {y:.6f} {z:.6f}" for x, y, z in verts]
    lines += [f"f {i} {j} {k}" for i, j, k in faces]
    return "\n".join(lines) + "\n"


def read_mesh(path) -> tuple[np.ndarray, np.ndarray]:
    lines = Path(path).read_text().splitlines()
    if not lines or not lines[0].startswith("# xmpi-mesh"):
        raise ValueError(f"{path}: not an xmpi mesh file")
    nv, nf = int(lines[1].split()[1]), int(lines[2].split()[1])
    body = lines[3:]
    verts = np.array([[float(x) for x in ln.split()[1:]] for ln in body[:nv]]).reshape(nv, 3)
    faces = np.array([[int(x) for x in ln.split()[1:]] for ln in body[nv:nv + nf]], int).reshape(nf, 3)
    return verts, faces


def _frame_at(stack: FrameStack, t: float):
    k = int(np.argmin(np.abs(stack.timestamps - t)))
    return np.asarray(stack.frames[k], float) if abs(stack.timestamps[k] - t) < 1e-3 else None


def montage_tiles(volume: ScalarField4D, k: int, measured, render_angles, shape, pitch) -> list[np.ndarray]:
    """Two measured views (or, without measurements, volume projections at the measured angles) and two renders."""
    t = float(volume.times[k])
    tiles = []
    for st in measured or ():
        fr = _frame_at(st, t)
        if fr is not None:
            tiles.append(fr)
    uu, vv = detector_grid(shape, pitch)
    for a in render_angles:
        tiles.append(project_points(volume, float(a), t, uu, vv))
    return tiles


def _tile_row(tiles: list[np.ndarray], gap: int = 2) -> np.ndarray:
    h = max(t.shape[0] for t in tiles)
    w = sum(t.shape[1] for t in tiles) + gap * (len(tiles) - 1)
    out = np.ones((h, w))
    c = 0
    for t in tiles:
        out[:t.shape[0], c:c + t.shape[1]] = t
        c += t.shape[1] + gap
    return out


def export_visuals(volume: ScalarField4D, out_dir, mode: str, axis: str = "z", threshold: float | None = None,
                   measured=None, view_angles=None, render_angles=None, prefix: str = "frame") -> list[Path]:
    """Write one file per time point of ``volume`` for ``mode`` and return their paths.

    ``mip``: 16-bit PNG maximum-intensity projections along ``axis``, scaled
    by the sequence maximum. ``mesh``: marching-cubes isosurface at
    ``threshold`` (default half the sequence maximum). ``montage``: 16-bit
    PNG tiling the two measured views (from ``measured`` stacks) and two
    projections of the volume at ``render_angles``, transmission 0..1.
    """
    if mode not in MODES:
        raise ValueError(f"unknown export mode {mode!r}; expected one of {', '.join(MODES)}")
    if not volume.is_gridded or volume.data.shape[0] == 0:
        raise ValueError("export needs a non-empty gridded volume sequence")
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise OSError(f"cannot create output directory {out}: {e.strerror}") from e
    if not out.is_dir():
        raise OSError(f"output path {out} is not a directory")
    paths = []
    vmax = float(volume.data.max())
    nt = volume.data.shape[0]
    if mode == "mip":
        m = mip(volume, axis)
        for k in range(nt):
            p = out / f"{prefix}_{k:04d}_mip_{axis}.png"
            atomic_write(p, _png16(_to_u16(m[k], 0.0, vmax)))
            paths.append(p)
    elif mode == "mesh":
        level = 0.5 * vmax if threshold is None else threshold
        for k in range(nt):
            v, f = isosurface(volume.data[k], level, volume.voxel_pitch, volume.origin)
            p = out / f"{prefix}_{k:04d}.mesh"
            atomic_write(p, mesh_text(v, f))
            paths.append(p)
    else:
        if render_angles is None:
            if view_angles is None:
                raise ValueError("montage needs render_angles or the measured view_angles")
            a, b = view_angles
            render_angles = ((a + b) / 2, (a + b) / 2 + 90.0)
        n = volume.data.shape[-1]
        if measured:
            shape, pitch = measured[0].frames.shape[-2:], measured[0].pixel_pitch
        else:
            shape, pitch = (n, n), volume.voxel_pitch
        angles = list(render_angles)
        if not measured and view_angles is not None:
            angles = list(view_angles) + angles
        for k in range(nt):
            tiles = montage_tiles(volume, k, measured, angles, shape, pitch)
            p = out / f"{prefix}_{k:04d}_montage.png"
            atomic_write(p, _png16(_to_u16(_tile_row(tiles), 0.0, 1.0)))
            paths.append(p)
    return paths
