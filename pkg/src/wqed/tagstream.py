"""Time-tag ingestion and coincidence histogram construction.

Tag files come in two flavors sharing one logical layout: a header of
``key=value`` pairs followed by records ``(pulse_index, channel_id,
time_ps)`` sorted by ``(pulse_index, time_ps)``.  Channel ids 0..2 are the
forward detector fan-out, 3..5 the backward one.  Times are integer
picoseconds relative to the pulse peak.

Text format: one ``#key=value`` line per header entry, then one
``pulse,channel,time`` line per record.  Binary format: the 8-byte magic
``WQTAGS01``, a little-endian uint32 byte length of the UTF-8 header block
(same ``#key=value`` lines), the block itself, a little-endian uint64
record count, then packed little-endian records (int64 pulse, uint8
channel, int64 time).

Histograms bin click times on an edge-aligned lattice ``floor(t/width)``
and count coincidence tuples across pulse offsets.  Two-fold histograms
count each unordered distinct-detector pair once, with the base-pulse
click on the lower detector id.  Three-fold histograms require one click
on each of the three detectors of a direction; the correlated (0,0,0)
configuration places detectors 0,1,2 on axes 1,2,3 and counts each triple
once, while the partially correlated and uncorrelated configurations sum
over the six detector-to-axis assignments, with the divisor 6 recorded in
``meta["n_combos"]`` so counts stay integers.
"""

from __future__ import annotations

import struct
import warnings
from collections import Counter
from dataclasses import dataclass, replace
from itertools import permutations
from pathlib import Path

import numpy as np

from . import analysis
from .trajectories import TAG_DTYPE, TagStream

MAGIC = b"WQTAGS01"
DIRECTION_IDS = {"forward": (0, 1, 2), "backward": (3, 4, 5)}
G2_BIN_WIDTH_PS = 16.0
G3_BIN_WIDTH_PS = 32.0
G3_REBIN_FACTOR = 4
G3_OFFSETS = ((0, 0, 0), (0, 0, 1), (0, 1, 2))
# dense int64 cap, 256 MB; sparse accumulation cannot finalize past this
DENSE_LIMIT = 2**25


class TagFormatError(ValueError):
    """A tag file or stream violates the format contract."""


@dataclass(eq=False)
class HistogramSet:
    """Coincidence counts for one pulse-offset configuration.

    axes hold the shared bin centers in ps, one array per histogram axis;
    counts is the dense integer array over those axes.  meta records the
    opportunity count (pulses that could contribute a tuple), the
    detector-combination divisor n_combos, and the binning parameters.
    """

    order: int
    pulse_offsets: tuple[int, ...]
    direction: str
    axes: tuple[np.ndarray, ...]
    counts: np.ndarray
    meta: dict


def _check_order(records: np.ndarray, label) -> None:
    ids = records["channel_id"]
    bad = np.flatnonzero(ids > 5)
    if bad.size:
        i = int(bad[0])
        raise TagFormatError(f"{label(i)}: unknown channel id {int(ids[i])}")
    if len(records) > 1:
        p, t = records["pulse_index"], records["time_ps"]
        later = (p[:-1] > p[1:]) | ((p[:-1] == p[1:]) & (t[:-1] > t[1:]))
        bad = np.flatnonzero(later)
        if bad.size:
            i = int(bad[0]) + 1
            raise TagFormatError(
                f"{label(i)}: records not sorted by (pulse_index, time_ps)")


def _header_lines(header: dict) -> str:
    return "".join(f"#{key}={value}\n" for key, value in header.items())


def _parse_header_line(body: str, where: str) -> tuple[str, str]:
    key, sep, value = body.partition("=")
    if not sep or not key:
        raise TagFormatError(f"{where}: malformed header line {body!r}")
    return key, value


def write_tags(stream: TagStream, path, binary: bool = False) -> None:
    """Write a stream to a tag file; see the module docstring for layout."""
    _check_order(stream.records, lambda i: f"record {i + 1}")
    records = np.ascontiguousarray(stream.records, dtype=TAG_DTYPE)
    if binary:
        head = _header_lines(stream.header).encode("utf-8")
        blob = b"".join([
            MAGIC,
            struct.pack("<I", len(head)),
            head,
            struct.pack("<Q", len(records)),
            records.tobytes(),
        ])
        Path(path).write_bytes(blob)
        return
    lines = [_header_lines(stream.header)]
    for rec in records:
        lines.append(
            f"{rec['pulse_index']},{rec['channel_id']},{rec['time_ps']}\n")
    Path(path).write_text("".join(lines))


def read_tags(path) -> TagStream:
    """Read a text or binary tag file, validating layout and ordering."""
    raw = Path(path).read_bytes()
    if raw[:len(MAGIC)] == MAGIC:
        return _read_binary(raw)
    try:
        text = raw.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise TagFormatError(f"not a text tag file: {exc}") from None
    return _read_text(text)


def _read_text(text: str) -> TagStream:
    header: dict = {}
    rows: list[tuple[int, int, int]] = []
    lineno: list[int] = []
    in_header = True
    for i, line in enumerate(text.split("\n"), start=1):
        if not line:
            continue
        if line.startswith("#"):
            if not in_header:
                raise TagFormatError(f"line {i}: header line after records")
            key, value = _parse_header_line(line[1:], f"line {i}")
            header[key] = value
            continue
        in_header = False
        parts = line.split(",")
        if len(parts) != 3:
            raise TagFormatError(f"line {i}: malformed record {line!r}")
        try:
            pulse, channel, time_ps = (int(part) for part in parts)
        except ValueError:
            raise TagFormatError(
                f"line {i}: malformed record {line!r}") from None
        if not 0 <= channel <= 5:
            raise TagFormatError(f"line {i}: unknown channel id {channel}")
        rows.append((pulse, channel, time_ps))
        lineno.append(i)
    records = np.array(rows, dtype=TAG_DTYPE) if rows \
        else np.empty(0, dtype=TAG_DTYPE)
    _check_order(records, lambda i: f"line {lineno[i]}")
    return TagStream(header, records)


def _read_binary(raw: bytes) -> TagStream:
    base = len(MAGIC)
    if len(raw) < base + 4:
        raise TagFormatError("binary tag file truncated in header length")
    (head_len,) = struct.unpack_from("<I", raw, base)
    offset = base + 4
    if len(raw) < offset + head_len + 8:
        raise TagFormatError("binary tag file truncated in header")
    head = raw[offset:offset + head_len].decode("utf-8")
    header: dict = {}
    for i, line in enumerate(head.split("\n"), start=1):
        if not line:
            continue
        if not line.startswith("#"):
            raise TagFormatError(f"header entry {i}: missing '#' prefix")
        key, value = _parse_header_line(line[1:], f"header entry {i}")
        header[key] = value
    offset += head_len
    (n_records,) = struct.unpack_from("<Q", raw, offset)
    offset += 8
    expected = offset + n_records * TAG_DTYPE.itemsize
    if len(raw) != expected:
        raise TagFormatError(
            f"binary tag file holds {len(raw) - offset} record bytes, "
            f"expected {n_records * TAG_DTYPE.itemsize}")
    records = np.frombuffer(raw, dtype=TAG_DTYPE, count=n_records,
                            offset=offset).copy()
    _check_order(records, lambda i: f"record {i + 1}")
    return TagStream(header, records)


def _pulse_total(stream: TagStream) -> int:
    if "n_pulses" in stream.header:
        return int(stream.header["n_pulses"])
    if len(stream.records) == 0:
        return 0
    return int(stream.records["pulse_index"].max()) + 1


def _folded_bins(time_ps: np.ndarray, bin_width_ps: float,
                 rebin_factor: int) -> np.ndarray:
    base = np.floor(time_ps / bin_width_ps).astype(np.int64)
    if rebin_factor > 1:
        base = (base + rebin_factor // 2) // rebin_factor
    return base


def _axis(lo: int, hi: int, bin_width_ps: float, rebin_factor: int):
    k = np.arange(lo, hi + 1, dtype=np.int64)
    return (k * rebin_factor + 0.5 * (rebin_factor % 2)) * bin_width_ps


def _detector_groups(stream: TagStream, direction: str, bin_width_ps: float,
                     rebin_factor: int):
    """Per-detector {pulse: folded bin indices} plus the shared bin span."""
    if direction not in DIRECTION_IDS:
        raise ValueError(f"direction must be forward or backward, "
                         f"got {direction!r}")
    records = stream.records
    groups = []
    lo = hi = None
    for channel_id in DIRECTION_IDS[direction]:
        sel = records["channel_id"] == channel_id
        pulses = records["pulse_index"][sel]
        bins = _folded_bins(records["time_ps"][sel], bin_width_ps,
                            rebin_factor)
        if bins.size:
            lo = int(bins.min()) if lo is None else min(lo, int(bins.min()))
            hi = int(bins.max()) if hi is None else max(hi, int(bins.max()))
        uniq, start = np.unique(pulses, return_index=True)
        groups.append(dict(zip(uniq.tolist(), np.split(bins, start[1:]))))
    return groups, lo, hi


class _Accumulator:
    """Sparse tuple counter that densifies past 10 percent occupancy."""

    def __init__(self, shape: tuple[int, ...]):
        self.shape = shape
        self.volume = int(np.prod(shape))
        self.sparse: Counter | None = Counter()
        self.dense: np.ndarray | None = None

    def add(self, index_arrays) -> None:
        if index_arrays[0].size == 0:
            return
        if self.dense is not None:
            np.add.at(self.dense, tuple(index_arrays), 1)
            return
        self.sparse.update(zip(*(a.tolist() for a in index_arrays)))
        if 10 * len(self.sparse) > self.volume:
            self._densify()

    def _densify(self) -> None:
        if self.volume > DENSE_LIMIT:
            raise ValueError(
                f"histogram volume {self.volume} exceeds the dense limit; "
                "use a larger bin width or rebin factor")
        self.dense = np.zeros(self.shape, dtype=np.int64)
        for key, count in self.sparse.items():
            self.dense[key] = count
        self.sparse = None

    def result(self) -> np.ndarray:
        if self.dense is None:
            self._densify()
        return self.dense


def hist_g2(stream: TagStream, pulse_offset: int = 0,
            bin_width_ps: float = G2_BIN_WIDTH_PS, direction: str = "forward",
            rebin_factor: int = 1) -> HistogramSet:
    """Two-fold coincidence histogram at the given pulse offset.

    Counts pairs (click on detector a in pulse p, click on detector b in
    pulse p+offset) over the three unordered pairs a < b, into
    (t1, t2) bins.  Offset 0 is the correlated configuration, offset 1 the
    uncorrelated G1*G1 reference.
    """
    offset = int(pulse_offset)
    if offset < 0:
        raise ValueError("pulse_offset must be nonnegative")
    groups, lo, hi = _detector_groups(stream, direction, bin_width_ps,
                                      rebin_factor)
    n_pulses = _pulse_total(stream)
    if lo is None:
        axis = np.empty(0)
        counts = np.zeros((0, 0), dtype=np.int64)
    else:
        axis = _axis(lo, hi, bin_width_ps, rebin_factor)
        acc = _Accumulator((axis.size, axis.size))
        for a in range(3):
            for b in range(a + 1, 3):
                other = groups[b]
                for pulse, bins_a in groups[a].items():
                    bins_b = other.get(pulse + offset)
                    if bins_b is None:
                        continue
                    acc.add((np.repeat(bins_a, bins_b.size) - lo,
                             np.tile(bins_b, bins_a.size) - lo))
        counts = acc.result()
    meta = {
        "n_opportunities": max(n_pulses - offset, 0),
        "n_combos": 1,
        "n_pulses": n_pulses,
        "bin_width_ps": float(bin_width_ps),
        "rebin_factor": int(rebin_factor),
    }
    return HistogramSet(2, (0, offset), direction, (axis, axis), counts, meta)


def hist_g3(stream: TagStream, pulse_offsets=(0, 0, 0),
            bin_width_ps: float = G3_BIN_WIDTH_PS, direction: str = "forward",
            rebin_factor: int = G3_REBIN_FACTOR) -> HistogramSet:
    """Three-fold coincidence histogram across the given pulse offsets.

    Requires one click on each of the three detectors of the direction.
    The correlated configuration (0,0,0) counts each triple once with
    detector k on axis k; (0,0,1) and (0,1,2) sum over the six
    detector-to-axis assignments (meta["n_combos"] = 6).
    """
    offsets = tuple(int(o) for o in pulse_offsets)
    if offsets not in G3_OFFSETS:
        raise ValueError(f"pulse_offsets must be one of {G3_OFFSETS}, "
                         f"got {offsets}")
    assignments = [(0, 1, 2)] if offsets == (0, 0, 0) \
        else list(permutations(range(3)))
    groups, lo, hi = _detector_groups(stream, direction, bin_width_ps,
                                      rebin_factor)
    n_pulses = _pulse_total(stream)
    if lo is None:
        axis = np.empty(0)
        counts = np.zeros((0, 0, 0), dtype=np.int64)
    else:
        axis = _axis(lo, hi, bin_width_ps, rebin_factor)
        acc = _Accumulator((axis.size,) * 3)
        for c1, c2, c3 in assignments:
            g2_, g3_ = groups[c2], groups[c3]
            for pulse, bins_1 in groups[c1].items():
                bins_2 = g2_.get(pulse + offsets[1])
                if bins_2 is None:
                    continue
                bins_3 = g3_.get(pulse + offsets[2])
                if bins_3 is None:
                    continue
                mesh = np.meshgrid(bins_1, bins_2, bins_3, indexing="ij")
                acc.add(tuple(m.ravel() - lo for m in mesh))
        counts = acc.result()
    meta = {
        "n_opportunities": max(n_pulses - max(offsets), 0),
        "n_combos": len(assignments),
        "n_pulses": n_pulses,
        "bin_width_ps": float(bin_width_ps),
        "rebin_factor": int(rebin_factor),
    }
    return HistogramSet(3, offsets, direction, (axis,) * 3, counts, meta)


def rebin_histogram(hist: HistogramSet, factor: int) -> HistogramSet:
    """Block-sum an existing histogram by an integer factor per axis.

    Centers become block means; totals are conserved when the factor
    divides each axis (trailing bins are dropped with a warning otherwise).
    """
    f = int(factor)
    if f < 1:
        raise ValueError("rebin factor must be a positive integer")
    if f == 1:
        return replace(hist, meta=dict(hist.meta))
    axes = []
    counts = hist.counts
    for axis_index, axis in enumerate(hist.axes):
        n_blocks = axis.size // f
        if axis.size % f:
            warnings.warn(f"axis {axis_index}: dropping {axis.size % f} "
                          f"trailing bins in rebin by {f}")
        axes.append(axis[:n_blocks * f].reshape(n_blocks, f).mean(axis=1))
        index = [slice(None)] * counts.ndim
        index[axis_index] = slice(0, n_blocks * f)
        counts = counts[tuple(index)]
        shape = (counts.shape[:axis_index] + (n_blocks, f)
                 + counts.shape[axis_index + 1:])
        counts = counts.reshape(shape).sum(axis=axis_index + 1)
    meta = dict(hist.meta)
    meta["rebin_factor"] = meta.get("rebin_factor", 1) * f
    return replace(hist, axes=tuple(axes), counts=counts, meta=meta)


def merge_histograms(parts: list[HistogramSet]) -> HistogramSet:
    """Merge histograms built from disjoint base-pulse ranges.

    Counts and opportunity totals add; the merge is associative and
    order-independent, so partitions can be histogrammed concurrently.
    """
    if not parts:
        raise ValueError("nothing to merge")
    base = parts[0]
    counts = base.counts.copy()
    meta = dict(base.meta)
    for part in parts[1:]:
        same = (part.order == base.order
                and part.pulse_offsets == base.pulse_offsets
                and part.direction == base.direction
                and len(part.axes) == len(base.axes)
                and all(np.array_equal(x, y)
                        for x, y in zip(part.axes, base.axes)))
        if not same:
            raise ValueError("histograms to merge must share configuration "
                             "and axes")
        counts += part.counts
        meta["n_opportunities"] += part.meta["n_opportunities"]
        meta["n_pulses"] += part.meta["n_pulses"]
    return replace(base, counts=counts, meta=meta)


def _per_opportunity(hist: HistogramSet) -> np.ndarray:
    n_opp = hist.meta["n_opportunities"]
    if n_opp <= 0:
        raise ValueError("histogram has no contributing pulse opportunities")
    return hist.counts.astype(float) / (n_opp * hist.meta["n_combos"])


def estimate_correlations(hists: dict, window_ps=None) -> dict:
    """Normalized correlation estimates from a histogram configuration set.

    For order 2, hists maps {(0,0), (0,1)} to histograms; the result holds
    the delay profile normalized by the uncorrelated window mean and the
    windowed zero-delay g2.  For order 3, hists maps {(0,0,0), (0,0,1),
    (0,1,2)}; the result holds normalized Jacobi maps and windowed
    zero-delay values for g3 and its connected component g3_c, the latter
    built from the three pairings of the partially correlated histogram.
    Window defaults follow the regression chain: 256 ps for order 2,
    417 x 362 ps for order 3.
    """
    keys = set(hists)
    if keys == {(0, 0), (0, 1)}:
        order = 2
    elif keys == set(G3_OFFSETS):
        order = 3
    else:
        raise ValueError("histogram keys must be {(0,0), (0,1)} or "
                         f"{set(G3_OFFSETS)}, got {keys}")
    values = list(hists.values())
    base = values[0]
    for hist in values[1:]:
        same = (hist.direction == base.direction
                and all(np.array_equal(x, y)
                        for x, y in zip(hist.axes, base.axes)))
        if not same:
            raise ValueError("histogram configurations must share axes and "
                             "direction")
    axis_ps = np.asarray(base.axes[0], dtype=float)
    if axis_ps.size < 2:
        raise ValueError("histograms are too small to normalize")
    axis_ns = axis_ps / 1000.0

    if order == 2:
        window = tuple(window_ps) if window_ps is not None \
            else analysis.G2_WINDOW_PS
        taus, num = analysis.tau_project(_per_opportunity(hists[(0, 0)]),
                                         axis_ns)
        _, den = analysis.tau_project(_per_opportunity(hists[(0, 1)]),
                                      axis_ns)
        profile, zero, meta = analysis.normalize(num, den, (taus,), window)
        return {"order": 2, "tau": taus, "g2_profile": profile,
                "g2_zero": zero, "meta": meta}

    window = tuple(window_ps) if window_ps is not None \
        else analysis.G3_WINDOW_PS
    corr = _per_opportunity(hists[(0, 0, 0)])
    part = _per_opportunity(hists[(0, 0, 1)])
    unc = _per_opportunity(hists[(0, 1, 2)])
    # the (0,0,1) histogram estimates G2(t1,t2) G1(t3); transposes give the
    # other two pairings of the cumulant subtraction
    pairings = [part, part.transpose(0, 2, 1), part.transpose(1, 2, 0)]
    connected = analysis.connected_component(corr, pairings, unc)

    j_corr = analysis.jacobi_project(corr, axis_ns)
    j_unc = analysis.jacobi_project(unc, axis_ns)
    j_conn = analysis.jacobi_project(connected, axis_ns)
    axes = (j_corr.j1, j_corr.j2)
    g3_map, g3_zero, meta = analysis.normalize(j_corr.values, j_unc.values,
                                               axes, window)
    g3c_map, g3c_zero, _ = analysis.normalize(j_conn.values, j_unc.values,
                                              axes, window)
    return {
        "order": 3,
        "g3_zero": g3_zero,
        "g3c_zero": g3c_zero,
        "g3_map": replace(j_corr, values=g3_map),
        "g3c_map": replace(j_conn, values=g3c_map),
        "meta": meta,
    }
