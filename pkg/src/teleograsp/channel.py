"""Master-to-slave datagram channel.

Packets carry the full desired state, so the receiver only ever needs the
newest one: everything older than the highest deliverable sequence number
is discarded (latest-wins), and when nothing arrives the slave keeps the
last applied state.

Two code paths implement the same channel:

* :class:`Channel` processes packets one at a time (``send``/``receive``);
* :func:`applied_schedule` computes, for a whole trial at once, which packet
  is applied at every control tick.

Both draw their randomness from the same two PCG64 streams (one for drops,
one for jitter), consumed one value per packet, so they agree exactly.
"""
from __future__ import annotations

import heapq
import socket
import struct
from dataclasses import dataclass

import numpy as np

from .model import rng_from

MAGIC = b"TGRP"
VERSION = 1
_WIRE = struct.Struct("<4sBQQ7d")
DATAGRAM_SIZE = _WIRE.size  # 77
_TICK_EPS = 1e-6


class ProtocolError(ValueError):
    """Malformed datagram or out-of-order send."""


@dataclass(frozen=True)
class Datagram:
    seq: int
    t_send: float
    desired: tuple  # 7 floats in state-vector order

    def encode(self) -> bytes:
        return encode(self)


@dataclass(frozen=True)
class ChannelConfig:
    delay_mean: float = 0.0
    delay_jitter_sd: float = 0.0
    drop_prob: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.drop_prob <= 1.0:
            raise ValueError("drop_prob must lie in [0, 1]")
        if self.delay_mean < 0 or self.delay_jitter_sd < 0:
            raise ValueError("delay_mean and delay_jitter_sd must be >= 0")

    @property
    def is_identity(self) -> bool:
        return self.delay_mean == 0 and self.delay_jitter_sd == 0 and self.drop_prob == 0


def encode(dg: Datagram) -> bytes:
    if len(dg.desired) != 7:
        raise ProtocolError("desired state must have 7 components")
    t_us = int(round(dg.t_send * 1e6))
    if dg.seq < 0 or t_us < 0:
        raise ProtocolError("seq and timestamp must be non-negative")
    return _WIRE.pack(MAGIC, VERSION, int(dg.seq), t_us, *(float(v) for v in dg.desired))


def decode(buf: bytes) -> Datagram:
    if len(buf) != DATAGRAM_SIZE:
        raise ProtocolError(f"expected {DATAGRAM_SIZE} bytes, got {len(buf)}")
    magic, version, seq, t_us, *desired = _WIRE.unpack(buf)
    if magic != MAGIC:
        raise ProtocolError(f"bad magic {magic!r}")
    if version != VERSION:
        raise ProtocolError(f"unsupported version {version}")
    return Datagram(seq, t_us * 1e-6, tuple(desired))


def _streams(seed: int):
    return rng_from(seed, 0x4452), rng_from(seed, 0x4A54)


class Channel:
    """Stateful lossy/delayed channel with latest-wins delivery."""

    def __init__(self, config: ChannelConfig | None = None):
        self.config = config or ChannelConfig()
        self._drop_rng, self._jitter_rng = _streams(self.config.seed)
        self._queue: list = []
        self.last_sent = -1
        self.last_applied = -1
        self.n_sent = 0
        self.n_dropped = 0

    def send(self, dg: Datagram, now: float) -> "Channel":
        if dg.seq <= self.last_sent:
            raise ProtocolError(f"non-monotonic seq {dg.seq} after {self.last_sent}")
        self.last_sent = dg.seq
        self.n_sent += 1
        # always consume one value from each stream so behaviour depends only on the schedule
        u = self._drop_rng.random()
        z = self._jitter_rng.standard_normal()
        if u < self.config.drop_prob:
            self.n_dropped += 1
            return self
        delay = max(0.0, self.config.delay_mean + self.config.delay_jitter_sd * z)
        heapq.heappush(self._queue, (now + delay, dg.seq, dg))
        return self

    def receive(self, now: float) -> Datagram | None:
        best = None
        while self._queue and self._queue[0][0] <= now + 1e-9:
            _, seq, dg = heapq.heappop(self._queue)
            if seq > self.last_applied and (best is None or seq > best.seq):
                best = dg
        if best is not None:
            self.last_applied = best.seq
        return best


def channel_send(state: Channel, datagram: Datagram, now: float) -> Channel:
    return state.send(datagram, now)


def channel_receive(state: Channel, now: float):
    return state, state.receive(now)


def applied_schedule(config: ChannelConfig, n_ticks: int, dt: float) -> np.ndarray:
    """Index of the packet applied at each tick (``-1`` before the first arrival).

    Packet ``k`` is sent at tick ``k``. This is the vectorised equivalent of
    feeding every tick through :class:`Channel`.
    """
    idx = np.arange(n_ticks)
    if config.is_identity:
        return idx
    drop_rng, jitter_rng = _streams(config.seed)
    dropped = drop_rng.random(n_ticks) < config.drop_prob
    delay = np.maximum(0.0, config.delay_mean + config.delay_jitter_sd * jitter_rng.standard_normal(n_ticks))
    arrive = idx + np.ceil(delay / dt - _TICK_EPS).astype(np.int64)
    arrive = np.maximum(arrive, idx)
    keep = ~dropped & (arrive < n_ticks)
    best = np.full(n_ticks, -1, dtype=np.int64)
    np.maximum.at(best, arrive[keep], idx[keep])
    return np.maximum.accumulate(best)


def delivered_fraction(schedule: np.ndarray) -> float:
    """Fraction of distinct packets ever applied."""
    applied = np.unique(schedule[schedule >= 0])
    return applied.size / schedule.size


# -- two-process mode over real sockets --------------------------------------

class UdpSender:
    """Master endpoint: stamps and sends desired states."""

    def __init__(self, addr, sock: socket.socket | None = None):
        self.addr = addr
        self.sock = sock or socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
        self.seq = 0

    def send(self, desired, t_send: float) -> Datagram:
        dg = Datagram(self.seq, t_send, tuple(float(v) for v in desired))
        self.sock.sendto(encode(dg), self.addr)
        self.seq += 1
        return dg

    def close(self):
        self.sock.close()


class UdpReceiver:
    """Slave endpoint: non-blocking poll returning only the newest datagram."""

    def __init__(self, host: str = "127.0.0.1", port: int = 0):
        self.sock = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
        self.sock.bind((host, port))
        self.sock.setblocking(False)
        self.last_applied = -1
        self.n_malformed = 0

    @property
    def addr(self):
        return self.sock.getsockname()

    def poll(self) -> Datagram | None:
        best = None
        while True:
            try:
                buf = self.sock.recv(2048)
            except (BlockingIOError, InterruptedError):
                break
            try:
                dg = decode(buf)
            except ProtocolError:
                self.n_malformed += 1
                continue
            if dg.seq > self.last_applied and (best is None or dg.seq > best.seq):
                best = dg
        if best is not None:
            self.last_applied = best.seq
        return best

    def close(self):
        self.sock.close()

