"""Event streams, annotations, file formats and dataset construction.

Streams are stored as structure-of-arrays (t, x, y, p as numpy vectors)
with sensor geometry attached; individual ``Event`` records are views for
convenience. All operations are pure.

Supported formats:
  .dat   Prophesee GEN1-style binary (see parse_dat for the bit layout)
  .evt1  canonical ASCII: "EVT1 <w> <h> <count>" header then "t x y p" lines
  .evt1b canonical packed binary: same header line, then little-endian
         records of u64 t, u16 x, u16 y, u8 p
  .npy   structured array of box annotations (v1.0 / v2.0 headers)
"""

from __future__ import annotations

import ast
import math
import struct
from dataclasses import dataclass, field, replace

import numpy as np


@dataclass(frozen=True)
class Event:
    t: int  # microseconds since recording start
    x: int
    y: int
    polarity: int  # 0 = OFF, 1 = ON


@dataclass(frozen=True)
class BoxAnnotation:
    t: int
    x: float
    y: float
    w: float
    h: float
    class_id: int
    track_id: int = 0
    confidence: float = 1.0


class EventStream:
    """Time-sorted event sequence with sensor geometry."""

    def __init__(self, ts, xs, ys, ps, width, height, check=True):
        self.ts = np.asarray(ts, dtype=np.int64)
        self.xs = np.asarray(xs, dtype=np.int32)
        self.ys = np.asarray(ys, dtype=np.int32)
        self.ps = np.asarray(ps, dtype=np.int8)
        self.width = int(width)
        self.height = int(height)
        if check:
            self._validate()

    def _validate(self):
        n = self.ts.size
        if not (self.xs.size == self.ys.size == self.ps.size == n):
            raise ValueError("t/x/y/p length mismatch")
        if n == 0:
            return
        if np.any(np.diff(self.ts) < 0):
            raise ValueError("events not sorted by timestamp")
        if self.ts[0] < 0:
            raise ValueError("negative timestamp")
        if np.any((self.xs < 0) | (self.xs >= self.width)) or np.any((self.ys < 0) | (self.ys >= self.height)):
            bad = int(np.flatnonzero((self.xs < 0) | (self.xs >= self.width) | (self.ys < 0) | (self.ys >= self.height))[0])
            raise ValueError(
                f"event {bad} at ({self.xs[bad]}, {self.ys[bad]}) outside sensor {self.width}x{self.height}"
            )
        if np.any((self.ps != 0) & (self.ps != 1)):
            raise ValueError("polarity must be 0 or 1")

    @classmethod
    def from_events(cls, events, width, height):
        ev = list(events)
        return cls(
            [e.t for e in ev], [e.x for e in ev], [e.y for e in ev], [e.polarity for e in ev], width, height
        )

    @classmethod
    def empty(cls, width, height):
        return cls([], [], [], [], width, height)

    @property
    def events(self):
        return [Event(int(t), int(x), int(y), int(p)) for t, x, y, p in zip(self.ts, self.xs, self.ys, self.ps)]

    def __len__(self):
        return int(self.ts.size)

    def __eq__(self, other):
        if not isinstance(other, EventStream):
            return NotImplemented
        return (
            self.width == other.width
            and self.height == other.height
            and np.array_equal(self.ts, other.ts)
            and np.array_equal(self.xs, other.xs)
            and np.array_equal(self.ys, other.ys)
            and np.array_equal(self.ps, other.ps)
        )


@dataclass
class ClassificationSample:
    stream: EventStream
    label: int
    duration: int = 100_000  # microseconds
    metadata: dict = field(default_factory=dict)


# --------------------------------------------------------------------------
# DAT format
#
# Zero or more '%'-prefixed ASCII header lines, then one event-type byte and
# one event-size byte, then 8-byte records: little-endian u32 timestamp and a
# little-endian u32 word with x in bits 0-13, y in bits 14-27, polarity in
# bit 28 (Prophesee GEN1 2-D event convention).
# --------------------------------------------------------------------------

_DAT_KNOWN_KEYS = {"width", "height", "date", "version", "format", "geometry"}


def parse_dat(data: bytes, default_size=(304, 240), strict=False):
    pos = 0
    width, height = default_size
    headers = []
    while pos < len(data) and data[pos : pos + 1] == b"%":
        end = data.find(b"\n", pos)
        if end == -1:
            end = len(data)
        line = data[pos:end].decode("latin-1")
        headers.append(line)
        parts = line[1:].strip().split(None, 1)
        if parts:
            key = parts[0].lower()
            if key == "width" and len(parts) > 1:
                width = int(parts[1])
            elif key == "height" and len(parts) > 1:
                height = int(parts[1])
            elif strict and key not in _DAT_KNOWN_KEYS:
                raise ValueError(f"unknown DAT header key: {parts[0]!r}")
        pos = end + 1
    if pos >= len(data):
        if headers:
            raise ValueError("DAT data ends before the event type/size bytes")
        return EventStream.empty(width, height)
    if len(data) - pos < 2:
        raise ValueError(f"DAT data truncated in type/size bytes at offset {pos}")
    event_size = data[pos + 1]
    pos += 2
    if event_size != 8:
        raise ValueError(f"unsupported DAT event size {event_size} (expected 8)")
    body = data[pos:]
    if len(body) % 8 != 0:
        raise ValueError(f"truncated DAT record at byte offset {pos + len(body) - len(body) % 8}")
    words = np.frombuffer(body, dtype="<u4").reshape(-1, 2)
    ts = words[:, 0].astype(np.int64)
    addr = words[:, 1]
    xs = (addr & 0x3FFF).astype(np.int32)
    ys = ((addr >> 14) & 0x3FFF).astype(np.int32)
    ps = ((addr >> 28) & 0x1).astype(np.int8)
    bad = np.flatnonzero((xs >= width) | (ys >= height))
    if bad.size:
        i = int(bad[0])
        raise ValueError(f"DAT record {i}: event at ({xs[i]}, {ys[i]}) outside declared sensor {width}x{height}")
    stream = EventStream(ts, xs, ys, ps, width, height)
    stream.headers = headers
    return stream


def write_dat(stream: EventStream, headers=None) -> bytes:
    if headers is None:
        headers = getattr(stream, "headers", None)
    if headers is None:
        headers = [f"% Width {stream.width}", f"% Height {stream.height}"]
    out = bytearray()
    for line in headers:
        out += line.encode("latin-1") + b"\n"
    out += bytes([0x00, 0x08])  # event type (2D), event size
    addr = (
        (stream.xs.astype(np.uint32) & 0x3FFF)
        | ((stream.ys.astype(np.uint32) & 0x3FFF) << 14)
        | ((stream.ps.astype(np.uint32) & 0x1) << 28)
    )
    rec = np.empty((len(stream), 2), dtype="<u4")
    rec[:, 0] = stream.ts.astype(np.uint32)
    rec[:, 1] = addr
    out += rec.tobytes()
    return bytes(out)


# --------------------------------------------------------------------------
# NPY structured-array box annotations
# --------------------------------------------------------------------------

_NPY_MAGIC = b"\x93NUMPY"
_REQUIRED_FIELDS = ("t", "x", "y", "w", "h", "class_id")


def _parse_npy_header(data: bytes):
    if data[:6] != _NPY_MAGIC:
        raise ValueError("not an NPY file")
    major = data[6]
    if major == 1:
        (hlen,) = struct.unpack("<H", data[8:10])
        start = 10
    elif major == 2:
        (hlen,) = struct.unpack("<I", data[8:12])
        start = 12
    else:
        raise ValueError(f"unsupported NPY version {major}.{data[7]}")
    header = data[start : start + hlen].decode("latin-1")
    meta = ast.literal_eval(header)
    return meta, start + hlen


def parse_npy_boxes(data: bytes, sensor_size=None):
    """Parse an NPY structured array of box annotations.

    Required fields: t, x, y, w, h, class_id. Optional: track_id
    (default 0) and confidence/class_confidence (default 1.0). When
    ``sensor_size`` is given, boxes are clipped to the sensor bounds.
    """
    meta, offset = _parse_npy_header(data)
    descr = meta["descr"]
    if not isinstance(descr, list):
        raise ValueError("NPY file does not contain a structured array")
    for _, fmt, *rest in descr:
        if fmt[0] == ">":
            raise ValueError(f"big-endian field dtype {fmt!r} not supported")
    dtype = np.dtype(descr)
    shape = meta["shape"]
    count = int(np.prod(shape)) if shape else 1
    if meta.get("fortran_order"):
        raise ValueError("fortran-ordered NPY arrays not supported")
    arr = np.frombuffer(data, dtype=dtype, count=count, offset=offset)
    names = arr.dtype.names or ()
    for f in _REQUIRED_FIELDS:
        if f not in names:
            raise ValueError(f"NPY boxes missing required field {f!r}")
    track = arr["track_id"] if "track_id" in names else np.zeros(count, dtype=np.int64)
    if "confidence" in names:
        conf = arr["confidence"]
    elif "class_confidence" in names:
        conf = arr["class_confidence"]
    else:
        conf = np.ones(count)
    boxes = []
    for i in range(count):
        x, y, w, h = float(arr["x"][i]), float(arr["y"][i]), float(arr["w"][i]), float(arr["h"][i])
        if sensor_size is not None:
            sw, sh = sensor_size
            x0, y0 = max(x, 0.0), max(y, 0.0)
            x1, y1 = min(x + w, sw), min(y + h, sh)
            x, y, w, h = x0, y0, x1 - x0, y1 - y0
        if w <= 0 or h <= 0:
            raise ValueError(f"NPY box {i} has non-positive size after clipping: {w}x{h}")
        boxes.append(
            BoxAnnotation(
                t=int(arr["t"][i]),
                x=x,
                y=y,
                w=w,
                h=h,
                class_id=int(arr["class_id"][i]),
                track_id=int(track[i]),
                confidence=float(conf[i]),
            )
        )
    return boxes


# --------------------------------------------------------------------------
# Canonical EVT1 format
# --------------------------------------------------------------------------


def write_evt1_text(stream: EventStream) -> bytes:
    lines = [f"EVT1 {stream.width} {stream.height} {len(stream)}"]
    for t, x, y, p in zip(stream.ts, stream.xs, stream.ys, stream.ps):
        lines.append(f"{t} {x} {y} {p}")
    return ("\n".join(lines) + "\n").encode("ascii")


def parse_evt1_text(data: bytes) -> EventStream:
    lines = data.decode("ascii").splitlines()
    if not lines or not lines[0].startswith("EVT1 "):
        raise ValueError("not an EVT1 file")
    _, w, h, count = lines[0].split()
    w, h, count = int(w), int(h), int(count)
    rows = [line.split() for line in lines[1 : 1 + count]]
    if len(rows) != count:
        raise ValueError(f"EVT1 header declares {count} events, found {len(rows)}")
    if rows:
        arr = np.array(rows, dtype=np.int64)
        return EventStream(arr[:, 0], arr[:, 1], arr[:, 2], arr[:, 3], w, h)
    return EventStream.empty(w, h)


_EVT1B_DTYPE = np.dtype([("t", "<u8"), ("x", "<u2"), ("y", "<u2"), ("p", "u1")])


def write_evt1_binary(stream: EventStream) -> bytes:
    header = f"EVT1 {stream.width} {stream.height} {len(stream)}\n".encode("ascii")
    rec = np.empty(len(stream), dtype=_EVT1B_DTYPE)
    rec["t"] = stream.ts
    rec["x"] = stream.xs
    rec["y"] = stream.ys
    rec["p"] = stream.ps
    return header + rec.tobytes()


def parse_evt1_binary(data: bytes) -> EventStream:
    end = data.find(b"\n")
    if end == -1 or not data[:5] == b"EVT1 ":
        raise ValueError("not an EVT1 binary file")
    _, w, h, count = data[:end].decode("ascii").split()
    w, h, count = int(w), int(h), int(count)
    body = data[end + 1 :]
    if len(body) != count * _EVT1B_DTYPE.itemsize:
        raise ValueError(f"EVT1 binary body has {len(body)} bytes, expected {count * _EVT1B_DTYPE.itemsize}")
    rec = np.frombuffer(body, dtype=_EVT1B_DTYPE)
    return EventStream(rec["t"].astype(np.int64), rec["x"], rec["y"], rec["p"], w, h)


def load_events(path) -> EventStream:
    path = str(path)
    with open(path, "rb") as fh:
        data = fh.read()
    if path.endswith(".dat"):
        return parse_dat(data)
    if path.endswith(".evt1b"):
        return parse_evt1_binary(data)
    if path.endswith(".evt1"):
        return parse_evt1_text(data)
    raise ValueError(f"unrecognized event file extension: {path}")


def save_events(path, stream: EventStream):
    path = str(path)
    if path.endswith(".dat"):
        data = write_dat(stream)
    elif path.endswith(".evt1b"):
        data = write_evt1_binary(stream)
    elif path.endswith(".evt1"):
        data = write_evt1_text(stream)
    else:
        raise ValueError(f"unrecognized event file extension: {path}")
    with open(path, "wb") as fh:
        fh.write(data)


# --------------------------------------------------------------------------
# Stream transforms
# --------------------------------------------------------------------------


def slice_time(stream: EventStream, t0: int, t1: int) -> EventStream:
    """Events with t0 <= t < t1, re-based to t - t0."""
    if t0 >= t1:
        raise ValueError(f"empty time window [{t0}, {t1})")
    lo = int(np.searchsorted(stream.ts, t0, side="left"))
    hi = int(np.searchsorted(stream.ts, t1, side="left"))
    return EventStream(
        stream.ts[lo:hi] - t0, stream.xs[lo:hi], stream.ys[lo:hi], stream.ps[lo:hi],
        stream.width, stream.height, check=False,
    )


def crop_spatial(stream: EventStream, x0: int, y0: int, w: int, h: int) -> EventStream:
    """Events inside the rectangle, re-based to the crop origin."""
    if w <= 0 or h <= 0:
        raise ValueError(f"zero-area crop {w}x{h}")
    keep = (stream.xs >= x0) & (stream.xs < x0 + w) & (stream.ys >= y0) & (stream.ys < y0 + h)
    return EventStream(
        stream.ts[keep], stream.xs[keep] - x0, stream.ys[keep] - y0, stream.ps[keep], w, h, check=False
    )


def flip_horizontal(stream: EventStream) -> EventStream:
    return EventStream(
        stream.ts, stream.width - 1 - stream.xs, stream.ys, stream.ps,
        stream.width, stream.height, check=False,
    )


def filter_small_boxes(annotations, min_diagonal=30.0):
    """Keep boxes whose diagonal is at least min_diagonal pixels."""
    return [b for b in annotations if math.hypot(b.w, b.h) >= min_diagonal]


# --------------------------------------------------------------------------
# Synthetic scenes
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class SceneObject:
    w: int
    h: int
    x0: float
    y0: float
    vx: float = 0.0  # pixels per second
    vy: float = 0.0
    class_id: int = 0
    shape: str = "rectangle"


@dataclass(frozen=True)
class SyntheticSceneSpec:
    width: int
    height: int
    duration_us: int
    objects: tuple
    micro_step_us: int = 1000
    annotation_period_us: int = 0  # 0 = single annotation at the end
    drop_probability: float = 0.0  # event-threshold noise: chance an event is missed
    seed: int = 0


def _occupancy(spec: SyntheticSceneSpec, t_us: int):
    occ = np.zeros((spec.height, spec.width), dtype=bool)
    for obj in spec.objects:
        if obj.shape != "rectangle":
            raise ValueError(f"unsupported object shape {obj.shape!r}")
        x = int(round(obj.x0 + obj.vx * t_us / 1e6))
        y = int(round(obj.y0 + obj.vy * t_us / 1e6))
        x1, y1 = x + obj.w, y + obj.h
        xc0, yc0 = max(x, 0), max(y, 0)
        xc1, yc1 = min(x1, spec.width), min(y1, spec.height)
        if xc1 > xc0 and yc1 > yc0:
            occ[yc0:yc1, xc0:xc1] = True
    return occ


def _object_box(spec, obj, t_us):
    x = round(obj.x0 + obj.vx * t_us / 1e6)
    y = round(obj.y0 + obj.vy * t_us / 1e6)
    return BoxAnnotation(t=t_us, x=float(x), y=float(y), w=float(obj.w), h=float(obj.h), class_id=obj.class_id)


def generate_synthetic_scene(spec: SyntheticSceneSpec):
    """Simulate rigid rectangles; pixels whose occupancy changes between
    consecutive micro-steps emit one event with polarity = sign of change.

    Returns (EventStream, [BoxAnnotation]). Deterministic under the seed.
    """
    for obj in spec.objects:
        if (
            obj.x0 < 0
            or obj.y0 < 0
            or obj.x0 + obj.w > spec.width
            or obj.y0 + obj.h > spec.height
        ):
            raise ValueError(f"object initially outside sensor: {obj}")
    rng = np.random.default_rng(spec.seed)
    ts, xs, ys, ps = [], [], [], []
    prev = _occupancy(spec, 0)
    n_steps = (spec.duration_us - 1) // spec.micro_step_us
    for k in range(1, n_steps + 1):
        t = k * spec.micro_step_us
        occ = _occupancy(spec, t)
        diff = occ.astype(np.int8) - prev.astype(np.int8)
        on_y, on_x = np.nonzero(diff > 0)
        off_y, off_x = np.nonzero(diff < 0)
        for ex, ey, pol in ((on_x, on_y, 1), (off_x, off_y, 0)):
            if ex.size == 0:
                continue
            if spec.drop_probability > 0:
                keep = rng.random(ex.size) >= spec.drop_probability
                ex, ey = ex[keep], ey[keep]
            xs.append(ex)
            ys.append(ey)
            ts.append(np.full(ex.size, t, dtype=np.int64))
            ps.append(np.full(ex.size, pol, dtype=np.int8))
        prev = occ
    if ts:
        stream = EventStream(
            np.concatenate(ts), np.concatenate(xs), np.concatenate(ys), np.concatenate(ps),
            spec.width, spec.height,
        )
    else:
        stream = EventStream.empty(spec.width, spec.height)
    boxes = []
    period = spec.annotation_period_us or spec.duration_us
    t_ann = period
    while t_ann <= spec.duration_us:
        for obj in spec.objects:
            boxes.append(_object_box(spec, obj, t_ann))
        t_ann += period
    return stream, boxes


# --------------------------------------------------------------------------
# Classification dataset construction
# --------------------------------------------------------------------------


def _sample_from_annotation(stream: EventStream, box: BoxAnnotation, window: int):
    t0 = max(0, box.t - window)
    short = box.t < window
    sliced = slice_time(stream, t0, box.t) if box.t > t0 else EventStream.empty(stream.width, stream.height)
    x0, y0 = int(math.floor(box.x)), int(math.floor(box.y))
    x0, y0 = max(x0, 0), max(y0, 0)
    w = min(int(math.ceil(box.w)), stream.width - x0)
    h = min(int(math.ceil(box.h)), stream.height - y0)
    cropped = crop_spatial(sliced, x0, y0, w, h)
    return ClassificationSample(
        stream=cropped,
        label=box.class_id,
        duration=box.t - t0,
        metadata={"short_window": short, "t_box": box.t},
    )


def build_classification_dataset(streams_and_annotations, window=100_000, rebalance=False, seed=0):
    """One sample per annotation: the ``window`` of events preceding the box,
    cropped to the box. With ``rebalance``, the majority class is randomly
    undersampled and the minority class oversampled with horizontal flips
    until the counts differ by at most one.
    """
    samples = []
    for stream, boxes in streams_and_annotations:
        for box in boxes:
            samples.append(_sample_from_annotation(stream, box, window))
    if not rebalance:
        return samples
    rng = np.random.default_rng(seed)
    by_class = {}
    for s in samples:
        by_class.setdefault(s.label, []).append(s)
    if len(by_class) < 2:
        return samples
    counts = {c: len(v) for c, v in by_class.items()}
    maj = max(counts, key=counts.get)
    mino = min(counts, key=counts.get)
    target = (counts[maj] + counts[mino] + 1) // 2
    keep_idx = rng.permutation(counts[maj])[:target]
    majority = [by_class[maj][i] for i in sorted(keep_idx)]
    minority = list(by_class[mino])
    while len(minority) < target:
        src = minority[int(rng.integers(counts[mino]))]
        minority.append(
            ClassificationSample(
                stream=flip_horizontal(src.stream),
                label=src.label,
                duration=src.duration,
                metadata=dict(src.metadata, flipped=True),
            )
        )
    rest = [s for c, v in by_class.items() if c not in (maj, mino) for s in v]
    return majority + minority + rest
