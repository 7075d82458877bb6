"""Grid serialization: a dense little-endian binary layout plus CSV exports.

Binary layout, in file order: an 8-byte magic, the order n, one length per
axis, the axis values, then the data in row-major order.  All integers are
unsigned 64-bit and all floats are 64-bit, little-endian regardless of host.
"""

from __future__ import annotations

import numpy as np

MAGIC = b"WQGRID01"


class GridFormatError(ValueError):
    pass


def write_grid(path, axes, values) -> None:
    """Write axes (list of 1D arrays) and a matching dense array."""
    axes = [np.asarray(ax, dtype="<f8") for ax in axes]
    values = np.ascontiguousarray(values, dtype="<f8")
    if values.shape != tuple(ax.size for ax in axes):
        raise ValueError(f"values shape {values.shape} does not match axes")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(np.array([len(axes)], dtype="<u8").tobytes())
        fh.write(np.array([ax.size for ax in axes], dtype="<u8").tobytes())
        for ax in axes:
            fh.write(ax.tobytes())
        fh.write(values.tobytes())


def read_grid(path):
    """Read a binary grid back; returns (axes, values)."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:8] != MAGIC:
        raise GridFormatError(f"{path}: bad magic {blob[:8]!r}")
    pos = 8

    def take(count, dtype):
        nonlocal pos
        width = count * np.dtype(dtype).itemsize
        if pos + width > len(blob):
            raise GridFormatError(f"{path}: truncated at byte {pos}")
        out = np.frombuffer(blob, dtype=dtype, count=count, offset=pos)
        pos += width
        return out

    order = int(take(1, "<u8")[0])
    if order < 1 or order > 8:
        raise GridFormatError(f"{path}: implausible order {order}")
    lengths = take(order, "<u8").astype(int)
    axes = [take(n, "<f8").copy() for n in lengths]
    values = take(int(np.prod(lengths)), "<f8").reshape(tuple(lengths)).copy()
    if pos != len(blob):
        raise GridFormatError(f"{path}: {len(blob) - pos} trailing bytes")
    return axes, values


def write_csv_grid(path, axes, values, axis_names=None) -> None:
    """One CSV row per index tuple: axis coordinates then the value."""
    axes = [np.asarray(ax, dtype=float) for ax in axes]
    values = np.asarray(values, dtype=float)
    if values.shape != tuple(ax.size for ax in axes):
        raise ValueError(f"values shape {values.shape} does not match axes")
    if axis_names is None:
        axis_names = [f"t{i + 1}_ns" for i in range(len(axes))]
    with open(path, "w") as fh:
        fh.write(",".join(list(axis_names) + ["value"]) + "\n")
        for idx in np.ndindex(values.shape):
            coords = [repr(float(axes[d][i])) for d, i in enumerate(idx)]
            fh.write(",".join(coords + [repr(float(values[idx]))]) + "\n")


def write_jacobi_csv(path, jmap) -> None:
    """JacobiMap rows as j1_ns, j2_ns, value."""
    write_csv_grid(path, [jmap.j1, jmap.j2], jmap.values,
                   axis_names=["j1_ns", "j2_ns"])


def write_columns_csv(path, columns: dict) -> None:
    """Named 1D columns of equal length, one header row."""
    names = list(columns)
    arrays = [np.asarray(columns[n], dtype=float) for n in names]
    length = arrays[0].size
    if any(a.size != length for a in arrays):
        raise ValueError("columns differ in length")
    with open(path, "w") as fh:
        fh.write(",".join(names) + "\n")
        for i in range(length):
            fh.write(",".join(repr(float(a[i])) for a in arrays) + "\n")


def read_columns_csv(path) -> dict:
    data = np.genfromtxt(path, delimiter=",", names=True)
    names = data.dtype.names
    if data.shape == ():
        return {n: np.array([data[n]]) for n in names}
    return {n: np.asarray(data[n]) for n in names}
