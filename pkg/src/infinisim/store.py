"""Capacity-enforced tiered storage: device / host in memory, NVMe as files.

Writes and reads return tickets; ``flush`` waits for completion and is the
only ordering guarantee (a read issued before its write's flush may not see
the key). NVMe transfers stream through a fixed pool of reusable buffers so
transient memory stays bounded no matter how large the tensors are, and
files become visible only via an atomic rename, so a key is never readable
with partial content.

NVMe shard file layout (little-endian):

    magic   4 bytes  b"ZINF"
    version u32      1
    dtype   u8       0 = float32, 1 = float16, 2 = float64
    pad     3 bytes  zero
    count   u64      element count
    payload count * itemsize bytes, raw little-endian
"""

from __future__ import annotations

import enum
import itertools
import os
import threading
import urllib.parse
from concurrent.futures import Future, ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

SHARD_MAGIC = b"ZINF"
SHARD_VERSION = 1
SHARD_HEADER_BYTES = 20
NVME_ROOT_ENV = "INFINISIM_NVME_ROOT"

_DTYPE_CODE = {np.dtype("<f4"): 0, np.dtype("<f2"): 1, np.dtype("<f8"): 2}
_CODE_DTYPE = {code: dt for dt, code in _DTYPE_CODE.items()}

DEFAULT_BUFFER_BYTES = 4 * 2**20
DEFAULT_BUFFER_COUNT = 8


class TierKind(enum.Enum):
    DEVICE = "device"
    HOST = "host"
    NVME = "nvme"


# Faster tiers first; used for ranking preferences elsewhere.
TIER_SPEED_ORDER = (TierKind.DEVICE, TierKind.HOST, TierKind.NVME)


class StoreError(Exception):
    pass


class CapacityExceeded(StoreError):
    pass


class KeyNotFound(StoreError, KeyError):
    pass


class PoolExhausted(StoreError):
    pass


class ShardFormatError(StoreError, OSError):
    """Raised when an NVMe shard file fails the magic/version/dtype check."""


def _as_shard_dtype(dtype) -> np.dtype:
    dt = np.dtype(dtype).newbyteorder("<")
    if dt not in _DTYPE_CODE:
        raise ValueError(f"unsupported dtype {np.dtype(dtype)}; use float16/32/64")
    return dt


class BufferPool:
    """Fixed set of reusable transfer buffers.

    Total pooled bytes are fixed at construction; acquire blocks (default)
    or raises PoolExhausted when all buffers are handed out, it never
    allocates beyond the pool. ``waits`` counts the times an acquire had to
    block.
    """

    def __init__(self, buffer_bytes: int = DEFAULT_BUFFER_BYTES,
                 buffer_count: int = DEFAULT_BUFFER_COUNT, blocking: bool = True):
        if buffer_bytes < 1 or buffer_count < 1:
            raise ValueError("buffer size and count must be >= 1")
        self.buffer_bytes = buffer_bytes
        self.buffer_count = buffer_count
        self.blocking = blocking
        self._free = [bytearray(buffer_bytes) for _ in range(buffer_count)]
        self._cond = threading.Condition()
        self.waits = 0

    def acquire(self) -> bytearray:
        with self._cond:
            if not self._free:
                if not self.blocking:
                    raise PoolExhausted("all transfer buffers in use")
                self.waits += 1
                while not self._free:
                    self._cond.wait()
            return self._free.pop()

    def release(self, buf: bytearray) -> None:
        if len(buf) != self.buffer_bytes:
            raise ValueError("buffer does not belong to this pool")
        with self._cond:
            if len(self._free) >= self.buffer_count:
                raise ValueError("pool over-released")
            self._free.append(buf)
            self._cond.notify()

    @property
    def free_count(self) -> int:
        with self._cond:
            return len(self._free)


class IoTicket:
    """Handle for one asynchronous read or write; completes exactly once."""

    _ids = itertools.count()

    def __init__(self, kind: str, key: str, tier: TierKind):
        self.ticket_id = next(IoTicket._ids)
        self.kind = kind
        self.key = key
        self.tier = tier
        self._future: Future = Future()

    def done(self) -> bool:
        return self._future.done()

    def wait(self, timeout: float | None = None):
        """Block until completion; returns the array for reads, None for writes."""
        return self._future.result(timeout)

    def _finish(self, result=None) -> None:
        self._future.set_result(result)

    def _fail(self, exc: BaseException) -> None:
        self._future.set_exception(exc)

    def __repr__(self):
        state = "done" if self.done() else "pending"
        return f"IoTicket({self.kind} {self.key!r} -> {self.tier.value}, {state})"


@dataclass
class TierStats:
    capacity: int | None
    used: int = 0
    peak_used: int = 0
    bytes_read: int = 0
    bytes_written: int = 0

    def snapshot(self) -> "TierStats":
        return TierStats(self.capacity, self.used, self.peak_used,
                         self.bytes_read, self.bytes_written)


@dataclass
class StoreStats:
    tiers: dict
    buffer_waits: int = 0
    buffers_free: int = 0
    buffers_total: int = 0


class TierStore:
    """Three storage tiers with byte accounting and an NVMe file backend.

    Device and host writes are immediate in-memory copies; NVMe operations
    may be serviced by background workers (``sync_io=True`` forces inline
    servicing for deterministic debugging). Capacity is reserved when a
    write is issued and enforced for every tier with a finite capacity;
    pass ``nvme_capacity=None`` to leave NVMe bounded only by the disk.
    """

    def __init__(self, device_capacity: int, host_capacity: int,
                 nvme_root: str | os.PathLike | None = None,
                 nvme_capacity: int | None = None,
                 pool: BufferPool | None = None,
                 sync_io: bool = False, workers: int = 4):
        if device_capacity < 0 or host_capacity < 0:
            raise ValueError("capacities must be nonnegative")
        root = nvme_root if nvme_root is not None else os.environ.get(NVME_ROOT_ENV)
        if root is None:
            raise ValueError(f"nvme_root required (or set {NVME_ROOT_ENV})")
        self.nvme_root = os.fspath(root)
        os.makedirs(self.nvme_root, exist_ok=True)
        if not os.path.isdir(self.nvme_root):
            raise NotADirectoryError(self.nvme_root)
        probe = os.path.join(self.nvme_root, ".zinf-probe")
        with open(probe, "wb"):
            pass
        os.unlink(probe)

        self.pool = pool if pool is not None else BufferPool()
        self.sync_io = sync_io
        self._workers = workers
        self._executor: ThreadPoolExecutor | None = None
        self._lock = threading.RLock()
        self._mem = {TierKind.DEVICE: {}, TierKind.HOST: {}}
        # Issue-time byte reservations and completion-time visibility for NVMe.
        self._nvme_reserved: dict[str, tuple[int, int]] = {}  # key -> (bytes, ticket id)
        self._nvme_meta: dict[str, tuple[np.dtype, int]] = {}  # key -> (dtype, count)
        self._stats = {
            TierKind.DEVICE: TierStats(device_capacity),
            TierKind.HOST: TierStats(host_capacity),
            TierKind.NVME: TierStats(nvme_capacity),
        }

    # -- lifecycle ------------------------------------------------------------

    def close(self) -> None:
        if self._executor is not None:
            self._executor.shutdown(wait=True)
            self._executor = None

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
        return False

    def _submit(self, ticket: IoTicket, fn, *args) -> IoTicket:
        def run():
            try:
                ticket._finish(fn(*args))
            except BaseException as exc:
                ticket._fail(exc)

        if self.sync_io:
            run()
            return ticket
        if self._executor is None:
            self._executor = ThreadPoolExecutor(
                max_workers=self._workers, thread_name_prefix="tierstore")
        self._executor.submit(run)
        return ticket

    # -- accounting helpers -----------------------------------------------------

    def _charge(self, tier: TierKind, key: str, new_bytes: int, old_bytes: int) -> None:
        """Reserve new_bytes for key (releasing old_bytes), or raise CapacityExceeded."""
        st = self._stats[tier]
        projected = st.used - old_bytes + new_bytes
        if st.capacity is not None and projected > st.capacity:
            raise CapacityExceeded(
                f"{tier.value} tier over capacity: need {projected} of {st.capacity} "
                f"bytes writing {key!r}")
        st.used = projected
        st.peak_used = max(st.peak_used, st.used)

    def _nvme_path(self, key: str) -> str:
        return os.path.join(self.nvme_root,
                            urllib.parse.quote(key, safe="") + ".shard")

    # -- core operations ----------------------------------------------------------

    def write(self, key: str, data: np.ndarray, tier: TierKind) -> IoTicket:
        """Store a 1-D float16/32/64 array under key in the given tier."""
        if not key:
            raise ValueError("key must be nonempty")
        data = np.asarray(data)
        if data.ndim != 1 or data.size == 0:
            raise ValueError("data must be a nonempty 1-D array")
        dt = _as_shard_dtype(data.dtype)
        data = np.ascontiguousarray(data, dtype=dt)
        ticket = IoTicket("write", key, tier)

        if tier in self._mem:
            with self._lock:
                old = self._mem[tier].get(key)
                self._charge(tier, key, data.nbytes, old.nbytes if old is not None else 0)
                self._mem[tier][key] = data.copy()
                self._stats[tier].bytes_written += data.nbytes
            ticket._finish()
            return ticket

        file_bytes = SHARD_HEADER_BYTES + data.nbytes
        with self._lock:
            old_res = self._nvme_reserved.get(key)
            self._charge(tier, key, file_bytes, old_res[0] if old_res else 0)
            self._nvme_reserved[key] = (file_bytes, ticket.ticket_id)
        return self._submit(ticket, self._nvme_write, ticket, key, data, old_res)

    def read(self, key: str, tier: TierKind) -> IoTicket:
        """Fetch the array stored under key; data available via ticket.wait()."""
        ticket = IoTicket("read", key, tier)
        with self._lock:
            if tier in self._mem:
                arr = self._mem[tier].get(key)
                if arr is None:
                    raise KeyNotFound(f"{key!r} not in {tier.value} tier")
                self._stats[tier].bytes_read += arr.nbytes
                ticket._finish(arr.copy())
                return ticket
            if key not in self._nvme_meta:
                raise KeyNotFound(f"{key!r} not in nvme tier")
        return self._submit(ticket, self._nvme_read, key)

    def read_range(self, key: str, tier: TierKind, start: int, count: int) -> IoTicket:
        """Fetch count elements starting at element offset start."""
        if start < 0 or count < 1:
            raise ValueError("need start >= 0 and count >= 1")
        ticket = IoTicket("read", key, tier)
        with self._lock:
            if tier in self._mem:
                arr = self._mem[tier].get(key)
                if arr is None:
                    raise KeyNotFound(f"{key!r} not in {tier.value} tier")
                if start + count > arr.size:
                    raise ValueError(f"range [{start}, {start + count}) outside {key!r}")
                out = arr[start:start + count].copy()
                self._stats[tier].bytes_read += out.nbytes
                ticket._finish(out)
                return ticket
            meta = self._nvme_meta.get(key)
            if meta is None:
                raise KeyNotFound(f"{key!r} not in nvme tier")
            if start + count > meta[1]:
                raise ValueError(f"range [{start}, {start + count}) outside {key!r}")
        return self._submit(ticket, self._nvme_read_range, key, start, count)

    def write_range(self, key: str, tier: TierKind, start: int, data: np.ndarray) -> IoTicket:
        """Overwrite elements in place starting at element offset start.

        Supports streamed updates of an existing key (e.g. optimizer-state
        chunks); unlike write(), an in-flight NVMe range write is not atomic.
        """
        data = np.asarray(data)
        if data.ndim != 1 or data.size == 0:
            raise ValueError("data must be a nonempty 1-D array")
        if start < 0:
            raise ValueError("start must be >= 0")
        dt = _as_shard_dtype(data.dtype)
        data = np.ascontiguousarray(data, dtype=dt)
        ticket = IoTicket("write", key, tier)
        with self._lock:
            if tier in self._mem:
                arr = self._mem[tier].get(key)
                if arr is None:
                    raise KeyNotFound(f"{key!r} not in {tier.value} tier")
                if arr.dtype != dt:
                    raise ValueError(f"dtype mismatch for {key!r}")
                if start + data.size > arr.size:
                    raise ValueError(f"range write outside {key!r}")
                arr[start:start + data.size] = data
                self._stats[tier].bytes_written += data.nbytes
                ticket._finish()
                return ticket
            meta = self._nvme_meta.get(key)
            if meta is None:
                raise KeyNotFound(f"{key!r} not in nvme tier")
            if meta[0] != dt:
                raise ValueError(f"dtype mismatch for {key!r}")
            if start + data.size > meta[1]:
                raise ValueError(f"range write outside {key!r}")
        return self._submit(ticket, self._nvme_write_range, key, start, data)

    def flush(self, tickets=()) -> None:
        """Return only after all given tickets complete; first error propagates."""
        for t in tickets:
            t.wait()

    def delete(self, key: str, tier: TierKind) -> None:
        with self._lock:
            if tier in self._mem:
                arr = self._mem[tier].pop(key, None)
                if arr is None:
                    raise KeyNotFound(f"{key!r} not in {tier.value} tier")
                self._stats[tier].used -= arr.nbytes
                return
            if key not in self._nvme_meta:
                raise KeyNotFound(f"{key!r} not in nvme tier")
            del self._nvme_meta[key]
            reserved, _ = self._nvme_reserved.pop(key)
            self._stats[TierKind.NVME].used -= reserved
            path = self._nvme_path(key)
        os.unlink(path)

    def move(self, key: str, src: TierKind, dst: TierKind) -> IoTicket:
        """Relocate key between tiers; on destination failure the source is intact."""
        ticket = IoTicket("move", key, dst)
        if src is dst:
            if not self.exists(key, src):
                raise KeyNotFound(f"{key!r} not in {src.value} tier")
            ticket._finish()
            return ticket
        data = self.read(key, src).wait()
        self.write(key, data, dst).wait()
        self.delete(key, src)
        ticket._finish()
        return ticket

    def exists(self, key: str, tier: TierKind) -> bool:
        with self._lock:
            if tier in self._mem:
                return key in self._mem[tier]
            return key in self._nvme_meta

    def keys(self, tier: TierKind) -> list[str]:
        with self._lock:
            if tier in self._mem:
                return sorted(self._mem[tier])
            return sorted(self._nvme_meta)

    def length(self, key: str, tier: TierKind) -> int:
        """Element count of a stored array."""
        with self._lock:
            if tier in self._mem:
                arr = self._mem[tier].get(key)
                if arr is None:
                    raise KeyNotFound(f"{key!r} not in {tier.value} tier")
                return arr.size
            meta = self._nvme_meta.get(key)
            if meta is None:
                raise KeyNotFound(f"{key!r} not in nvme tier")
            return meta[1]

    def stats(self) -> StoreStats:
        with self._lock:
            return StoreStats(
                tiers={tier: st.snapshot() for tier, st in self._stats.items()},
                buffer_waits=self.pool.waits,
                buffers_free=self.pool.free_count,
                buffers_total=self.pool.buffer_count,
            )

    # -- NVMe backend --------------------------------------------------------------

    def _nvme_write(self, ticket: IoTicket, key: str, data: np.ndarray,
                    old_res: tuple[int, int] | None) -> None:
        path = self._nvme_path(key)
        tmp = f"{path}.tmp{os.getpid()}.{threading.get_ident()}"
        header = (SHARD_MAGIC
                  + SHARD_VERSION.to_bytes(4, "little")
                  + bytes([_DTYPE_CODE[data.dtype]]) + b"\x00\x00\x00"
                  + data.size.to_bytes(8, "little"))
        raw = memoryview(data).cast("B")
        try:
            with open(tmp, "wb") as f:
                f.write(header)
                off = 0
                while off < len(raw):
                    buf = self.pool.acquire()
                    try:
                        n = min(len(buf), len(raw) - off)
                        buf[:n] = raw[off:off + n]
                        f.write(memoryview(buf)[:n])
                        off += n
                    finally:
                        self.pool.release(buf)
            os.replace(tmp, path)
        except BaseException:
            if os.path.exists(tmp):
                os.unlink(tmp)
            with self._lock:
                # Roll the reservation back unless a later write superseded it.
                res = self._nvme_reserved.get(key)
                if res is not None and res[1] == ticket.ticket_id:
                    if old_res is not None:
                        self._nvme_reserved[key] = old_res
                        self._stats[TierKind.NVME].used -= res[0] - old_res[0]
                    else:
                        del self._nvme_reserved[key]
                        self._stats[TierKind.NVME].used -= res[0]
            raise
        with self._lock:
            self._nvme_meta[key] = (data.dtype, data.size)
            self._stats[TierKind.NVME].bytes_written += SHARD_HEADER_BYTES + data.nbytes

    def _read_header(self, f, key: str) -> tuple[np.dtype, int]:
        head = f.read(SHARD_HEADER_BYTES)
        if len(head) != SHARD_HEADER_BYTES or head[:4] != SHARD_MAGIC:
            raise ShardFormatError(f"bad shard magic in {key!r}")
        version = int.from_bytes(head[4:8], "little")
        if version != SHARD_VERSION:
            raise ShardFormatError(f"unsupported shard version {version} in {key!r}")
        code = head[8]
        if code not in _CODE_DTYPE:
            raise ShardFormatError(f"unknown dtype code {code} in {key!r}")
        count = int.from_bytes(head[12:20], "little")
        return _CODE_DTYPE[code], count

    def _nvme_read(self, key: str) -> np.ndarray:
        path = self._nvme_path(key)
        with open(path, "rb") as f:
            dtype, count = self._read_header(f, key)
            out = np.empty(count, dtype=dtype)
            raw = memoryview(out).cast("B")
            off = 0
            while off < len(raw):
                buf = self.pool.acquire()
                try:
                    n = min(len(buf), len(raw) - off)
                    got = f.readinto(memoryview(buf)[:n])
                    if got != n:
                        raise ShardFormatError(f"truncated shard payload in {key!r}")
                    raw[off:off + n] = memoryview(buf)[:n]
                    off += n
                finally:
                    self.pool.release(buf)
        with self._lock:
            self._stats[TierKind.NVME].bytes_read += SHARD_HEADER_BYTES + out.nbytes
        return out

    def _nvme_read_range(self, key: str, start: int, count: int) -> np.ndarray:
        path = self._nvme_path(key)
        with open(path, "rb") as f:
            dtype, total = self._read_header(f, key)
            if start + count > total:
                raise ValueError(f"range [{start}, {start + count}) outside {key!r}")
            f.seek(SHARD_HEADER_BYTES + start * dtype.itemsize)
            out = np.empty(count, dtype=dtype)
            raw = memoryview(out).cast("B")
            off = 0
            while off < len(raw):
                buf = self.pool.acquire()
                try:
                    n = min(len(buf), len(raw) - off)
                    got = f.readinto(memoryview(buf)[:n])
                    if got != n:
                        raise ShardFormatError(f"truncated shard payload in {key!r}")
                    raw[off:off + n] = memoryview(buf)[:n]
                    off += n
                finally:
                    self.pool.release(buf)
        with self._lock:
            self._stats[TierKind.NVME].bytes_read += out.nbytes
        return out

    def _nvme_write_range(self, key: str, start: int, data: np.ndarray) -> None:
        path = self._nvme_path(key)
        raw = memoryview(data).cast("B")
        with open(path, "r+b") as f:
            dtype, total = self._read_header(f, key)
            f.seek(SHARD_HEADER_BYTES + start * dtype.itemsize)
            off = 0
            while off < len(raw):
                buf = self.pool.acquire()
                try:
                    n = min(len(buf), len(raw) - off)
                    buf[:n] = raw[off:off + n]
                    f.write(memoryview(buf)[:n])
                    off += n
                finally:
                    self.pool.release(buf)
        with self._lock:
            self._stats[TierKind.NVME].bytes_written += data.nbytes


def create_store(device_capacity: int, host_capacity: int,
                 nvme_root: str | os.PathLike | None = None, **kwargs) -> TierStore:
    return TierStore(device_capacity, host_capacity, nvme_root, **kwargs)
