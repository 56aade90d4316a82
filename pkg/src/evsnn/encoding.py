"""Binary voxel-cube encoding of event streams.

A sample of duration d is split into T timesteps of dt = d/T, each timestep
into n micro time bins. An event at time t with polarity p lands in
timestep k = t // dt, micro bin b = (t - k*dt) // (dt/n), and channel
c = p*n + b (OFF polarity first, micro bins contiguous per polarity).
Accumulation is binary: the cube is a {0,1} tensor of shape (2n, T, H, W).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .events import EventStream


@dataclass(frozen=True)
class EncoderConfig:
    sample_duration: int  # microseconds
    timesteps: int
    micro_bins: int
    height: int
    width: int

    def __post_init__(self):
        if self.timesteps < 1 or self.micro_bins < 1:
            raise ValueError("timesteps and micro_bins must be >= 1")
        if self.sample_duration % self.timesteps != 0:
            raise ValueError(f"duration {self.sample_duration} not divisible by T={self.timesteps}")
        if self.timestep_us % self.micro_bins != 0:
            raise ValueError(f"timestep {self.timestep_us} us not divisible by n={self.micro_bins}")

    @property
    def timestep_us(self):
        return self.sample_duration // self.timesteps

    @property
    def bin_us(self):
        return self.timestep_us // self.micro_bins

    @property
    def channels(self):
        return 2 * self.micro_bins


class VoxelCube:
    """Binary 4-D tensor of shape (C, T, H, W) with C = 2 * micro_bins."""

    def __init__(self, data):
        data = np.asarray(data)
        if data.ndim != 4:
            raise ValueError(f"voxel cube must be 4-D (C,T,H,W), got shape {data.shape}")
        if not np.isin(data, (0, 1)).all():
            raise ValueError("voxel cube values must be binary")
        self.data = data.astype(np.uint8)

    @property
    def shape(self):
        return self.data.shape

    def __eq__(self, other):
        if not isinstance(other, VoxelCube):
            return NotImplemented
        return np.array_equal(self.data, other.data)


def encode_voxel_cube(stream: EventStream, config: EncoderConfig) -> VoxelCube:
    if len(stream) and (stream.ts[0] < 0 or stream.ts[-1] >= config.sample_duration):
        bad = stream.ts[-1] if stream.ts[-1] >= config.sample_duration else stream.ts[0]
        raise ValueError(f"event at t={bad} outside [0, {config.sample_duration}); slice the stream first")
    if stream.width > config.width or stream.height > config.height:
        raise ValueError(
            f"stream sensor {stream.width}x{stream.height} exceeds cube {config.width}x{config.height}"
        )
    cube = np.zeros((config.channels, config.timesteps, config.height, config.width), dtype=np.uint8)
    if len(stream):
        k = stream.ts // config.timestep_us
        b = (stream.ts - k * config.timestep_us) // config.bin_us
        c = stream.ps.astype(np.int64) * config.micro_bins + b
        cube[c, k, stream.ys, stream.xs] = 1
    return VoxelCube(cube)


def resize_nearest(cube: VoxelCube, height: int, width: int) -> VoxelCube:
    """Nearest-neighbor resize per (c, t) plane; source index for output i
    is floor((i + 0.5) * src / dst), so the result stays binary."""
    if height < 1 or width < 1:
        raise ValueError("target size must be >= 1")
    c, t, h, w = cube.shape
    if (h, w) == (height, width):
        return VoxelCube(cube.data.copy())
    yi = np.minimum(((np.arange(height) + 0.5) * h / height).astype(np.int64), h - 1)
    xi = np.minimum(((np.arange(width) + 0.5) * w / width).astype(np.int64), w - 1)
    return VoxelCube(cube.data[:, :, yi[:, None], xi[None, :]])


def flip_cube_horizontal(cube: VoxelCube) -> VoxelCube:
    return VoxelCube(cube.data[:, :, :, ::-1])


# --------------------------------------------------------------------------
# VXC dump format: header "VXC <C> <T> <H> <W>" then the CTHW bits packed
# little-endian (row-major order, 8 cells per byte, LSB first).
# --------------------------------------------------------------------------


def write_vxc(cube: VoxelCube) -> bytes:
    c, t, h, w = cube.shape
    header = f"VXC {c} {t} {h} {w}\n".encode("ascii")
    packed = np.packbits(cube.data.reshape(-1), bitorder="little")
    return header + packed.tobytes()


def parse_vxc(data: bytes) -> VoxelCube:
    end = data.find(b"\n")
    if end == -1 or data[:4] != b"VXC ":
        raise ValueError("not a VXC dump")
    _, c, t, h, w = data[:end].decode("ascii").split()
    c, t, h, w = int(c), int(t), int(h), int(w)
    count = c * t * h * w
    body = np.frombuffer(data[end + 1 :], dtype=np.uint8)
    bits = np.unpackbits(body, bitorder="little")[:count]
    return VoxelCube(bits.reshape(c, t, h, w))


def batch_cubes(cubes) -> np.ndarray:
    """Stack voxel cubes into a float32 (N, C, T, H, W) network input."""
    return np.stack([c.data for c in cubes]).astype(np.float32)
