"""File formats: PGM images, CSV point clouds, polyline JSON, SVG renders.

Coordinates of image-derived Diracs live in the unit square with the
``y`` axis pointing up: pixel ``(r, c)`` of an ``H x W`` image sits at
``((c + 0.5) / W, 1 - (r + 0.5) / H)``.
"""
from __future__ import annotations

import csv
import json
import platform
import sys
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from .errors import IoError, ParseError, ZeroTotalMass
from .measures import AtomicMeasure, PolylineMeasure

BRIGHT = "bright"
DARK = "dark"


# --------------------------------------------------------------------- PGM

def _pgm_tokens(data: bytes, count: int, pos: int):
    """Read ``count`` whitespace-separated header tokens, skipping comments."""
    tokens = []
    n = len(data)
    while len(tokens) < count:
        while pos < n and data[pos:pos + 1].isspace():
            pos += 1
        if pos < n and data[pos:pos + 1] == b"#":
            while pos < n and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < n and not data[pos:pos + 1].isspace() and data[pos:pos + 1] != b"#":
            pos += 1
        if start == pos:
            raise ParseError("truncated PGM header")
        tokens.append(data[start:pos])
    return tokens, pos


def read_pgm(path) -> np.ndarray:
    """Grayscale image from a binary (P5) or plain (P2) PGM file.

    Returns a float array of shape ``(H, W)`` with the raw sample values.
    """
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc
    magic = data[:2]
    if magic not in (b"P2", b"P5"):
        raise ParseError(f"not a PGM file (magic {magic!r})")
    (w, h, maxval), pos = _pgm_tokens(data, 3, 2)
    try:
        w, h, maxval = int(w), int(h), int(maxval)
    except ValueError as exc:
        raise ParseError(f"bad PGM header: {exc}") from exc
    if w < 1 or h < 1 or not 0 < maxval < 65536:
        raise ParseError(f"bad PGM dimensions {w}x{h} maxval {maxval}")
    if magic == b"P5":
        pos += 1  # single whitespace byte after maxval
        dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
        need = w * h * dtype.itemsize
        raster = data[pos:pos + need]
        if len(raster) < need:
            raise ParseError(f"PGM raster truncated: {len(raster)} of {need} bytes")
        img = np.frombuffer(raster, dtype=dtype).reshape(h, w)
    else:
        fields = data[pos:].split()
        if len(fields) < w * h:
            raise ParseError(f"PGM raster truncated: {len(fields)} of {w * h} samples")
        try:
            img = np.array([int(v) for v in fields[:w * h]]).reshape(h, w)
        except ValueError as exc:
            raise ParseError(f"bad PGM sample: {exc}") from exc
    return img.astype(np.float64)


def write_pgm(path, image, maxval: int = 255) -> None:
    """Write a binary PGM; values are rounded and clipped to ``[0, maxval]``."""
    img = np.clip(np.rint(np.asarray(image, dtype=np.float64)), 0, maxval)
    h, w = img.shape
    dtype = ">u2" if maxval > 255 else "u1"
    header = f"P5\n{w} {h}\n{maxval}\n".encode("ascii")
    try:
        Path(path).write_bytes(header + img.astype(dtype).tobytes())
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc


def image_to_diracs(image, mode: str = BRIGHT, threshold: float = 0.0) -> AtomicMeasure:
    """One Dirac per pixel whose weight exceeds ``threshold * max(weight)``.

    ``mode='bright'`` weighs pixels by intensity, ``'dark'`` by
    ``max(intensity) - intensity``.  Masses are normalised to sum to one.
    """
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 2 or img.size == 0:
        raise ValueError(f"expected a non-empty 2-D grayscale image, got shape {img.shape}")
    if mode == BRIGHT:
        weight = img
    elif mode == DARK:
        weight = img.max() - img
    else:
        raise ValueError(f"mode must be {BRIGHT!r} or {DARK!r}, got {mode!r}")
    h, w = img.shape
    wmax = weight.max()
    keep = weight > threshold * wmax
    keep &= weight > 0
    if not keep.any():
        raise ZeroTotalMass("no pixel carries positive weight")
    r, c = np.nonzero(keep)
    pos = np.column_stack([(c + 0.5) / w, 1.0 - (r + 0.5) / h])
    m = weight[r, c]
    return AtomicMeasure(pos, m / m.sum())


# --------------------------------------------------------------------- CSV

def _is_number(s: str) -> bool:
    try:
        float(s)
        return True
    except ValueError:
        return False


def load_catalog(path, columns=None, mass_column=None, delimiter: str = ",") -> AtomicMeasure:
    """Point cloud from a CSV file.

    ``columns`` picks the coordinate columns by header name or index
    (default: the first two, or all non-mass columns when there are three).
    A header row is detected when its first field is not numeric.  Masses
    default to ``1/n``; a ``mass_column`` is honoured and normalised.
    Blank lines and lines starting with ``#`` are skipped.
    """
    try:
        fh = open(path, newline="")
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc
    with fh:
        rows = [(k, row) for k, row in enumerate(csv.reader(fh, delimiter=delimiter), start=1)
                if row and any(f.strip() for f in row) and not row[0].lstrip().startswith("#")]
    if not rows:
        raise ParseError("empty catalog", line=1)
    header = None
    if not _is_number(rows[0][1][0].strip()):
        header = [f.strip() for f in rows[0][1]]
        rows = rows[1:]
    if not rows:
        raise ParseError("catalog has a header but no data", line=2)
    width = len(rows[0][1])

    def resolve(spec):
        if isinstance(spec, str) and not spec.lstrip("-").isdigit():
            if header is None or spec not in header:
                raise ParseError(f"unknown column {spec!r}")
            return header.index(spec)
        idx = int(spec)
        if not -width <= idx < width:
            raise ParseError(f"column index {idx} out of range for {width} columns")
        return idx % width

    mass_idx = resolve(mass_column) if mass_column is not None else None
    if columns is None:
        avail = [j for j in range(width) if j != mass_idx]
        cols = avail[:3] if len(avail) == 3 else avail[:2]
    else:
        cols = [resolve(c) for c in columns]
    if len(cols) not in (2, 3):
        raise ParseError(f"need 2 or 3 coordinate columns, got {len(cols)}")

    pts = np.empty((len(rows), len(cols)))
    masses = np.empty(len(rows)) if mass_idx is not None else None
    for r, (line, row) in enumerate(rows):
        if len(row) != width:
            raise ParseError(f"expected {width} fields, found {len(row)}", line=line)
        try:
            pts[r] = [float(row[j]) for j in cols]
            if masses is not None:
                masses[r] = float(row[mass_idx])
        except ValueError as exc:
            raise ParseError(str(exc), line=line) from None
        if not np.all(np.isfinite(pts[r])):
            raise ParseError("non-finite coordinate", line=line)
    if masses is None:
        return AtomicMeasure.uniform(pts)
    if np.any(masses < 0):
        raise ParseError("negative mass")
    total = masses.sum()
    if total <= 0:
        raise ZeroTotalMass("catalog masses sum to zero")
    return AtomicMeasure(pts, masses / total)


def write_points(path, mu: AtomicMeasure) -> None:
    """CSV with columns ``x, y[, z], mass``."""
    names = ["x", "y", "z"][:mu.dim] + ["mass"]
    try:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(names)
            for x, m in zip(mu.positions, mu.masses):
                w.writerow([repr(float(v)) for v in x] + [repr(float(m))])
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc


# ------------------------------------------------------------ polyline JSON

def polyline_to_dict(nu: PolylineMeasure, **metadata) -> dict:
    out = {
        "vertices": nu.vertices.tolist(),
        "densities": nu.densities.tolist(),
        "disjoint_mode": bool(nu.disjoint_mode),
    }
    if metadata:
        out["metadata"] = metadata
    return out


def polyline_from_dict(obj: dict) -> PolylineMeasure:
    try:
        V = np.asarray(obj["vertices"], dtype=np.float64)
        disjoint = bool(obj.get("disjoint_mode", False))
        if "densities" in obj:
            return PolylineMeasure(V, np.asarray(obj["densities"], dtype=np.float64), disjoint)
    except (KeyError, TypeError, ValueError) as exc:
        raise ParseError(f"bad polyline record: {exc}") from exc
    return PolylineMeasure.from_vertices(V, disjoint)


def write_polyline(path, nu: PolylineMeasure, **metadata) -> None:
    """Polyline as JSON; floats are written with round-trip precision."""
    try:
        Path(path).write_text(json.dumps(polyline_to_dict(nu, **metadata), indent=1) + "\n")
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc


def read_polyline(path) -> PolylineMeasure:
    """Inverse of :func:`write_polyline`; densities default to normalised lengths."""
    try:
        obj = json.loads(Path(path).read_text())
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ParseError(exc.msg, line=exc.lineno) from exc
    return polyline_from_dict(obj)


# -------------------------------------------------------------- initialisers

def random_walk_polyline(p: int, seed=0, box=((0.0, 0.0), (1.0, 1.0)), step=None,
                         disjoint_mode: bool = False) -> PolylineMeasure:
    """Seeded random walk of ``p`` segments reflected into ``box``.

    The default step length is ``2 * side / sqrt(p)``, so the walk covers
    the box at roughly uniform density.
    """
    if p < 1:
        raise ValueError("p must be at least 1")
    lo, hi = (np.asarray(b, dtype=np.float64) for b in box)
    side = hi - lo
    rng = np.random.default_rng(seed)
    if step is None:
        step = 2.0 * float(side.min()) / np.sqrt(p)
    V = np.empty((p + 1, lo.size))
    V[0] = lo + side * rng.uniform(0.25, 0.75, size=lo.size)
    steps = rng.standard_normal((p, lo.size))
    steps *= step / np.linalg.norm(steps, axis=1, keepdims=True)
    for a in range(p):
        q = V[a] + steps[a]
        # reflect at the walls
        q = np.where(q < lo, 2 * lo - q, q)
        q = np.where(q > hi, 2 * hi - q, q)
        V[a + 1] = np.clip(q, lo, hi)
    return PolylineMeasure.from_vertices(V, disjoint_mode)


def serpentine_polyline(p: int, box=((0.0, 0.0), (1.0, 1.0)), rows=None,
                        disjoint_mode: bool = False,
                        tilt: float = (3.0 - np.sqrt(5.0)) / 2.0) -> PolylineMeasure:
    """Boustrophedon path with ``p`` segments sweeping a 2-D ``box`` row by row.

    Each pass rises by ``2 * tilt`` row spacings across the box.  Horizontal
    passes would be orthogonal to the vertical differences of pixel-grid
    Diracs, leaving whole columns of cells competing for a single point of
    the curve; the default tilt keeps every pass well away from that.
    """
    if p < 1:
        raise ValueError("p must be at least 1")
    if not 0.0 <= tilt < 0.5:
        raise ValueError("tilt must lie in [0, 0.5)")
    lo, hi = (np.asarray(b, dtype=np.float64) for b in box)
    if rows is None:
        rows = max(1, int(round(np.sqrt(p / 2))))
    # walk along a boustrophedon of total arclength split into p equal pieces
    dy = (hi[1] - lo[1]) / rows
    ys = lo[1] + (np.arange(rows) + 0.5) * dy
    corners = []
    for r, y in enumerate(ys):
        xs = (lo[0], hi[0]) if r % 2 == 0 else (hi[0], lo[0])
        corners += [(xs[0], y - tilt * dy), (xs[1], y + tilt * dy)]
    corners = np.asarray(corners)
    seglen = np.linalg.norm(np.diff(corners, axis=0), axis=1)
    arc = np.concatenate([[0.0], np.cumsum(seglen)])
    s = np.linspace(0.0, arc[-1], p + 1)
    V = np.column_stack([np.interp(s, arc, corners[:, 0]), np.interp(s, arc, corners[:, 1])])
    return PolylineMeasure.from_vertices(V, disjoint_mode)


# ---------------------------------------------------------------------- SVG

_DEFAULT_STYLE = {
    "size": 512,
    "margin": 8,
    "stroke": "#000000",
    "stroke_width": 1.0,
    "point_fill": "#c03030",
    "point_radius": 2.0,
    "background": "#ffffff",
}


def _fmt(v: float) -> str:
    s = f"{v:.3f}".rstrip("0").rstrip(".")
    return "0" if s in ("-0", "") else s


def polyline_pieces(nu: PolylineMeasure):
    """Vertex index runs ``[(first, last), ...]`` of the pieces carrying mass."""
    pieces = []
    start = None
    for a, r in enumerate(nu.densities):
        if r > 0:
            if start is None:
                start = a
        elif start is not None:
            pieces.append((start, a))
            start = None
    if start is not None:
        pieces.append((start, nu.p))
    return pieces


def render_svg(nu: PolylineMeasure, path=None, mu: AtomicMeasure = None, style: dict = None,
               bounds=None) -> str:
    """Deterministic SVG of the polyline, split at zero-mass segments.

    With ``mu`` a point layer is drawn below the curve, each circle's area
    proportional to its mass (``point_radius`` is the radius of a mass of
    ``1/n``).  ``bounds`` is ``((xmin, ymin), (xmax, ymax))``; by default
    the unit square grown to contain everything.  Returns the SVG text and
    writes it to ``path`` when given.
    """
    st = dict(_DEFAULT_STYLE)
    if style:
        st.update(style)
    if nu.dim != 2:
        raise ValueError("SVG rendering needs 2-D data")
    if bounds is None:
        pts = [nu.vertices] + ([mu.positions] if mu is not None else [])
        allp = np.vstack(pts)
        lo = np.minimum(allp.min(axis=0), 0.0)
        hi = np.maximum(allp.max(axis=0), 1.0)
    else:
        lo, hi = (np.asarray(b, dtype=np.float64) for b in bounds)
    size, margin = float(st["size"]), float(st["margin"])
    scale = (size - 2 * margin) / float(max(hi - lo))

    def tx(P):
        return margin + (P[..., 0] - lo[0]) * scale, size - margin - (P[..., 1] - lo[1]) * scale

    out = [
        '<?xml version="1.0" encoding="UTF-8"?>',
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{_fmt(size)}" height="{_fmt(size)}" '
        f'viewBox="0 0 {_fmt(size)} {_fmt(size)}">',
        f'<rect width="100%" height="100%" fill="{st["background"]}"/>',
    ]
    if mu is not None:
        out.append(f'<g fill="{st["point_fill"]}" stroke="none">')
        px, py = tx(mu.positions)
        radii = st["point_radius"] * np.sqrt(mu.masses * mu.n)
        for x, y, r in zip(px, py, radii):
            if r > 0:
                out.append(f'<circle cx="{_fmt(x)}" cy="{_fmt(y)}" r="{_fmt(r)}"/>')
        out.append("</g>")
    out.append(f'<g fill="none" stroke="{st["stroke"]}" stroke-width="{_fmt(st["stroke_width"])}" '
               'stroke-linejoin="round" stroke-linecap="round">')
    for first, last in polyline_pieces(nu):
        xs, ys = tx(nu.vertices[first:last + 1])
        d = "M" + " L".join(f"{_fmt(x)} {_fmt(y)}" for x, y in zip(xs, ys))
        out.append(f'<path d="{d}"/>')
    out.append("</g>")
    out.append("</svg>")
    text = "\n".join(out) + "\n"
    if path is not None:
        try:
            Path(path).write_text(text)
        except OSError as exc:
            raise IoError(f"cannot write {path}: {exc}") from exc
    return text


# ----------------------------------------------------------------- manifest

def _versions() -> dict:
    import numba
    import scipy

    from . import __version__

    return {
        "polyot": __version__,
        "python": sys.version.split()[0],
        "numpy": np.__version__,
        "scipy": scipy.__version__,
        "numba": numba.__version__,
        "platform": platform.platform(),
    }


def write_manifest(path, config: dict, seed=None, outputs=None) -> dict:
    """JSON record of a run: configuration, seed, outputs and library versions."""
    manifest = {
        "created": datetime.now(timezone.utc).isoformat(timespec="seconds"),
        "seed": seed,
        "config": config,
        "outputs": outputs or {},
        "versions": _versions(),
    }
    try:
        Path(path).write_text(json.dumps(manifest, indent=2, sort_keys=True, default=str) + "\n")
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc
    return manifest
