"""Triangle/TetGen style ``.node``/``.ele`` files and nodal field files."""

from __future__ import annotations

import os
import tempfile

import numpy as np

from .errors import IndexBaseError, ParseError
from .mesh import FIXED_VERTEX, FREE_VERTEX, SimplicialMesh


def _records(text):
    """Yield ``(line_number, tokens)`` for non-blank lines, comments stripped."""
    for lineno, line in enumerate(text.splitlines(), start=1):
        body = line.split("#", 1)[0].split()
        if body:
            yield lineno, body


def _ints(tokens, lineno, what):
    try:
        return [int(t) for t in tokens]
    except ValueError:
        raise ParseError(f"expected integers in {what}: {' '.join(tokens)!r}", lineno) from None


def _floats(tokens, lineno):
    try:
        return [float(t) for t in tokens]
    except ValueError:
        raise ParseError(f"bad coordinate in {' '.join(tokens)!r}", lineno) from None


def _header(records, what, n_min):
    try:
        lineno, tok = next(records)
    except StopIteration:
        raise ParseError(f"{what} file is empty") from None
    if len(tok) < n_min:
        raise ParseError(f"{what} header needs at least {n_min} fields", lineno)
    return lineno, _ints(tok, lineno, f"{what} header")


def _rows(records, count, width, what, last_line):
    out = []
    for _ in range(count):
        try:
            lineno, tok = next(records)
        except StopIteration:
            raise ParseError(f"{what} file ends after {len(out)} of {count} rows",
                             last_line) from None
        if len(tok) < width:
            raise ParseError(f"{what} row has {len(tok)} fields, expected {width}", lineno)
        out.append((lineno, tok))
        last_line = lineno
    extra = next(records, None)
    if extra is not None:
        raise ParseError(f"unexpected data after {count} {what} rows", extra[0])
    return out


def _detect_base(indices, count, lineno, what):
    """0 or 1, from the first listed index; the listing must be consecutive."""
    base = indices[0]
    if base not in (0, 1):
        raise IndexBaseError(f"{what} indices start at {base}, expected 0 or 1", lineno)
    if not np.array_equal(indices, np.arange(base, base + count)):
        raise IndexBaseError(f"{what} indices are not consecutive from {base}", lineno)
    return base


def parse_node(text):
    """Vertices, markers and index base from ``.node`` text."""
    recs = _records(text)
    lineno, head = _header(recs, "node", 2)
    nv, d = head[0], head[1]
    has_marker = len(head) > 3 and head[3] != 0
    n_attr = head[2] if len(head) > 2 else 0
    if d not in (2, 3):
        raise ParseError(f"unsupported dimension {d}", lineno)
    rows = _rows(recs, nv, 1 + d, "node", lineno)
    idx = np.empty(nv, dtype=np.int64)
    x = np.empty((nv, d))
    markers = np.zeros(nv, dtype=np.int64)
    for r, (ln, tok) in enumerate(rows):
        idx[r] = _ints(tok[:1], ln, "node index")[0]
        x[r] = _floats(tok[1:1 + d], ln)
        if has_marker:
            if len(tok) < 2 + d + n_attr:
                raise ParseError("missing boundary marker", ln)
            markers[r] = _ints([tok[1 + d + n_attr]], ln, "boundary marker")[0]
    base = _detect_base(idx, nv, rows[0][0] if rows else lineno, "node")
    return x, markers, base


def parse_ele(text, base=None):
    """Element connectivity (0-based) from ``.ele`` text.

    ``base`` is the vertex index base; by default it is taken from the first
    element index.
    """
    recs = _records(text)
    lineno, head = _header(recs, "ele", 2)
    n, nper = head[0], head[1]
    if nper not in (3, 4):
        raise ParseError(f"{nper} vertices per element; only simplices are supported", lineno)
    rows = _rows(recs, n, 1 + nper, "ele", lineno)
    idx = np.empty(n, dtype=np.int64)
    el = np.empty((n, nper), dtype=np.int64)
    for r, (ln, tok) in enumerate(rows):
        vals = _ints(tok[:1 + nper], ln, "element row")
        idx[r], el[r] = vals[0], vals[1:]
    first = rows[0][0] if rows else lineno
    ele_base = _detect_base(idx, n, first, "element")
    base = ele_base if base is None else base
    if n and el.min() < base:
        raise IndexBaseError(f"vertex index {el.min()} below index base {base}", first)
    return el - base


def read_mesh(node_text, ele_text):
    """Build a :class:`SimplicialMesh` from ``.node`` and ``.ele`` text.

    Vertices with a nonzero boundary marker are Fixed, the rest Free.
    """
    x, markers, base = parse_node(node_text)
    el = parse_ele(ele_text, base)
    if el.shape[1] != x.shape[1] + 1:
        raise ParseError(f"{el.shape[1]}-vertex elements in a {x.shape[1]}D mesh")
    if el.size and el.max() >= len(x):
        raise IndexBaseError(f"vertex index {el.max() + base} beyond {len(x)} vertices")
    constraints = [FIXED_VERTEX if m else FREE_VERTEX for m in markers]
    return SimplicialMesh(x, el, constraints, markers)


def write_mesh(mesh):
    """``(node_text, ele_text)``, 1-based, coordinates at 17 significant digits."""
    d = mesh.dim
    lines = [f"{mesh.n_vertices} {d} 0 1"]
    for i, (p, m) in enumerate(zip(mesh.vertices, mesh.markers), start=1):
        lines.append(f"{i} " + " ".join(f"{v:.17g}" for v in p) + f" {int(m)}")
    node = "\n".join(lines) + "\n"
    lines = [f"{mesh.n_elements} {d + 1} 0"]
    for k, e in enumerate(mesh.elements + 1, start=1):
        lines.append(f"{k} " + " ".join(str(int(v)) for v in e))
    ele = "\n".join(lines) + "\n"
    return node, ele


def parse_field(text, n_vertices=None):
    """Nodal scalar values, whitespace separated, ``#`` comments allowed."""
    vals = []
    for lineno, tok in _records(text):
        vals.extend(_floats(tok, lineno))
    vals = np.array(vals)
    if n_vertices is not None and len(vals) != n_vertices:
        raise ParseError(f"field has {len(vals)} values for {n_vertices} vertices")
    return vals


def format_field(values):
    return "".join(f"{v:.17g}\n" for v in np.asarray(values, dtype=float).ravel())


def atomic_write(path, text):
    """Write ``text`` to a temporary file next to ``path`` and rename it into place."""
    path = os.fspath(path)
    folder = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=folder, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_mesh(node_path, ele_path):
    with open(node_path) as fh:
        node = fh.read()
    with open(ele_path) as fh:
        ele = fh.read()
    return read_mesh(node, ele)


def save_mesh(mesh, stem):
    """Write ``stem.node`` and ``stem.ele``; returns the two paths."""
    node, ele = write_mesh(mesh)
    paths = (f"{stem}.node", f"{stem}.ele")
    atomic_write(paths[0], node)
    atomic_write(paths[1], ele)
    return paths
