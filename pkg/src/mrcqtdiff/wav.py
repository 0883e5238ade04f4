"""RIFF/WAVE reading and writing for PCM16, PCM24 and 32-bit float.

PCM is quantised by rounding to the nearest level with clipping (no dither),
so an in-range sample is off by at most half an LSB after a round trip.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass

import numpy as np

from .errors import FormatError

FORMATS = {"pcm16": (1, 16), "pcm24": (1, 24), "float32": (3, 32)}
_PCM, _FLOAT, _EXTENSIBLE = 1, 3, 0xFFFE


@dataclass
class WavFile:
    sample_rate: int
    channels: int
    bits: int
    is_float: bool
    samples: np.ndarray  # (frames, channels), float64 in [-1, 1) for PCM

    @property
    def duration(self) -> float:
        return self.samples.shape[0] / self.sample_rate

    def mono(self) -> np.ndarray:
        """Mono mixdown; stereo uses 0.5 (L + R), i.e. -6 dB per channel."""
        if self.channels == 1:
            return self.samples[:, 0].copy()
        if self.channels == 2:
            return 0.5 * (self.samples[:, 0] + self.samples[:, 1])
        raise FormatError(f"{self.channels}-channel audio is not supported")


def _chunks(data: bytes, path):
    if len(data) < 12 or data[:4] != b"RIFF" or data[8:12] != b"WAVE":
        raise FormatError(f"{path}: not a RIFF/WAVE file (RIFF header)")
    pos = 12
    while pos + 8 <= len(data):
        cid, size = struct.unpack_from("<4sI", data, pos)
        body = data[pos + 8:pos + 8 + size]
        if len(body) < size:
            raise FormatError(f"{path}: chunk {cid.decode('latin-1')!r} truncated "
                              f"({len(body)} of {size} bytes)")
        yield cid, body
        pos += 8 + size + (size & 1)


def read_wav(path) -> WavFile:
    with open(path, "rb") as fh:
        data = fh.read()
    fmt = None
    payload = None
    for cid, body in _chunks(data, path):
        if cid == b"fmt ":
            if len(body) < 16:
                raise FormatError(f"{path}: 'fmt ' chunk too short")
            fmt = struct.unpack_from("<HHIIHH", body, 0)
            if fmt[0] == _EXTENSIBLE:
                if len(body) < 40:
                    raise FormatError(f"{path}: extensible 'fmt ' chunk too short")
                sub = struct.unpack_from("<H", body, 24)[0]
                fmt = (sub,) + fmt[1:]
        elif cid == b"data":
            payload = body
    if fmt is None:
        raise FormatError(f"{path}: missing 'fmt ' chunk")
    if payload is None:
        raise FormatError(f"{path}: missing 'data' chunk")
    tag, channels, rate, _, align, bits = fmt
    if (tag, bits) not in {(_PCM, 16), (_PCM, 24), (_FLOAT, 32)}:
        raise FormatError(f"{path}: 'fmt ' chunk declares unsupported format tag {tag} with {bits} bits")
    if channels not in (1, 2):
        raise FormatError(f"{path}: 'fmt ' chunk declares {channels} channels")
    width = bits // 8
    if align != width * channels or len(payload) % align:
        raise FormatError(f"{path}: 'data' chunk size {len(payload)} is not a whole number of frames")
    if tag == _FLOAT:
        x = np.frombuffer(payload, dtype="<f4").astype(np.float64)
    elif bits == 16:
        x = np.frombuffer(payload, dtype="<i2").astype(np.float64) / 2**15
    else:
        b = np.frombuffer(payload, dtype=np.uint8).reshape(-1, 3).astype(np.int32)
        v = b[:, 0] | (b[:, 1] << 8) | (b[:, 2] << 16)
        v = np.where(v >= 2**23, v - 2**24, v)
        x = v.astype(np.float64) / 2**23
    return WavFile(rate, channels, bits, tag == _FLOAT, x.reshape(-1, channels))


def load_wav(path) -> tuple[np.ndarray, int]:
    """Mono float64 samples and the sample rate."""
    w = read_wav(path)
    return w.mono(), w.sample_rate


def _quantise(x, bits):
    full = 2 ** (bits - 1)
    return np.clip(np.round(x * full), -full, full - 1).astype(np.int32)


def save_wav(path, signal, sample_rate: int, fmt: str = "float32"):
    """Write ``(frames,)`` or ``(frames, channels)`` samples."""
    if fmt not in FORMATS:
        raise FormatError(f"unsupported output format {fmt!r}; choose from {sorted(FORMATS)}")
    x = np.asarray(signal, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    if x.ndim != 2 or x.shape[1] not in (1, 2):
        raise FormatError(f"signal shape {x.shape} is not mono or stereo")
    tag, bits = FORMATS[fmt]
    channels = x.shape[1]
    if fmt == "float32":
        payload = x.astype("<f4").tobytes()
    elif bits == 16:
        payload = _quantise(x, 16).astype("<i2").tobytes()
    else:
        v = _quantise(x, 24).reshape(-1) & 0xFFFFFF
        payload = np.stack([v & 0xFF, (v >> 8) & 0xFF, (v >> 16) & 0xFF], axis=1).astype(np.uint8).tobytes()
    align = channels * bits // 8
    fmt_chunk = struct.pack("<HHIIHH", tag, channels, int(sample_rate), int(sample_rate) * align, align, bits)
    body = b"WAVE" + b"fmt " + struct.pack("<I", len(fmt_chunk)) + fmt_chunk
    body += b"data" + struct.pack("<I", len(payload)) + payload
    if len(payload) & 1:
        body += b"\x00"
    tmp = f"{os.fspath(path)}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(b"RIFF" + struct.pack("<I", len(body)) + body)
    os.replace(tmp, path)
