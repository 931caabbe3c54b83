"""Edge/cloud deployment: wire format, endpoints and compression accounting.

Message layout (multi-byte fields little-endian)::

    offset  size  field
    0       4     magic "EFQ1"
    4       1     version (1)
    5       2     K   codebook size
    7       2     D   codebook dimension
    9       2     M   number of indices
    11      4     sample_id
    15      1     flags (bit 0: label byte present)
    16      0/1   label
    ..      P     payload, P = ceil(M * b / 8), b = ceil(log2 K), MSB-first
    ..      4     CRC-32 (IEEE) of everything before it

The header is 16 bytes (17 with a label); with the CRC trailer the fixed
per-message overhead is 20 or 21 bytes.
"""

from __future__ import annotations

import io
import math
import multiprocessing as mp
import socket
import struct
import time
import zlib
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import BinaryIO, Iterator

import numpy as np

from . import model as mdl
from .model import CLOUD, EDGE, ModelParameters
from .quantizer import CorruptMessageError, dequantize
from .tensor_core import InputError

MAGIC = b"EFQ1"
VERSION = 1
_HEADER = struct.Struct("<4sBHHHIB")
HEADER_BYTES = _HEADER.size  # 16
CRC_BYTES = 4
FLAG_LABEL = 0x01

# amplitude-only cost of one second of paper-preset CSI: 3 x 114 x 500 floats
PAPER_ORIGINAL_BYTES = 3 * 114 * 500 * 4


class ProtocolError(ValueError):
    """Message cannot be accepted by this endpoint."""


class CRCError(ProtocolError):
    pass


def bits_per_index(K: int) -> int:
    if K < 1:
        raise InputError("codebook size must be positive")
    return (K - 1).bit_length()  # == ceil(log2 K)


def payload_size(K: int, M: int) -> int:
    return (M * bits_per_index(K) + 7) // 8


def pack_indices(indices, K: int) -> bytes:
    """Fixed-width MSB-first packing; the last byte is zero-padded."""
    idx = np.asarray(indices, dtype=np.int64).reshape(-1)
    if idx.size == 0:
        return b""
    if idx.min() < 0 or idx.max() >= K:
        raise InputError(f"index out of range for K={K}")
    b = bits_per_index(K)
    if b == 0:
        return b""
    shifts = np.arange(b - 1, -1, -1, dtype=np.int64)
    bits = ((idx[:, None] >> shifts[None, :]) & 1).astype(np.uint8)
    return np.packbits(bits.reshape(-1)).tobytes()


def unpack_indices(data: bytes, K: int, M: int) -> np.ndarray:
    b = bits_per_index(K)
    expected = payload_size(K, M)
    if len(data) != expected:
        raise CorruptMessageError(f"payload is {len(data)} bytes, expected {expected} for M={M}, K={K}")
    if M == 0 or b == 0:
        return np.zeros(M, dtype=np.int64)
    bits = np.unpackbits(np.frombuffer(data, dtype=np.uint8))[: M * b].reshape(M, b)
    weights = (1 << np.arange(b - 1, -1, -1, dtype=np.int64))
    idx = bits.astype(np.int64) @ weights
    if idx.max() >= K:
        raise CorruptMessageError(f"decoded index {int(idx.max())} >= K={K}")
    return idx


# ---------------------------------------------------------------------------
# messages


@dataclass
class QuantizedMessage:
    K: int
    D: int
    indices: np.ndarray
    sample_id: int = 0
    label: int | None = None
    version: int = VERSION

    @property
    def M(self) -> int:
        return int(np.asarray(self.indices).size)

    def header_bytes(self) -> bytes:
        flags = FLAG_LABEL if self.label is not None else 0
        head = _HEADER.pack(MAGIC, self.version, self.K, self.D, self.M, self.sample_id, flags)
        return head + (bytes([self.label]) if self.label is not None else b"")

    def to_bytes(self) -> bytes:
        body = self.header_bytes() + pack_indices(self.indices, self.K)
        return body + struct.pack("<I", zlib.crc32(body))

    @classmethod
    def from_bytes(cls, data: bytes) -> "QuantizedMessage":
        msg, used = _parse(data)
        if used != len(data):
            raise ProtocolError(f"{len(data) - used} trailing bytes after message")
        return msg


def _parse(data: bytes) -> tuple[QuantizedMessage, int]:
    if len(data) < HEADER_BYTES:
        raise CorruptMessageError("truncated header")
    magic, version, K, D, M, sample_id, flags = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise ProtocolError(f"bad magic {magic!r}")
    if version != VERSION:
        raise ProtocolError(f"unsupported version {version}")
    pos = HEADER_BYTES
    label = None
    if flags & FLAG_LABEL:
        if len(data) < pos + 1:
            raise CorruptMessageError("truncated header")
        label = data[pos]
        pos += 1
    end = pos + payload_size(K, M)
    if len(data) < end + CRC_BYTES:
        raise CorruptMessageError("truncated message")
    (crc,) = struct.unpack_from("<I", data, end)
    if zlib.crc32(data[:end]) != crc:
        raise CRCError(f"CRC mismatch for sample {sample_id}")
    indices = unpack_indices(data[pos:end], K, M)
    return QuantizedMessage(K, D, indices, sample_id, label, version), end + CRC_BYTES


def _read_exact(stream: BinaryIO, n: int) -> bytes:
    buf = bytearray()
    while len(buf) < n:
        chunk = stream.read(n - len(buf))
        if not chunk:
            break
        buf += chunk
    return bytes(buf)


def read_message(stream: BinaryIO) -> QuantizedMessage | None:
    """Read one self-delimiting message; ``None`` on clean end of stream."""
    head = _read_exact(stream, HEADER_BYTES)
    if not head:
        return None
    if len(head) < HEADER_BYTES:
        raise CorruptMessageError("stream ended inside a header")
    magic, _, K, _, M, _, flags = _HEADER.unpack(head)
    if magic != MAGIC:
        raise ProtocolError(f"bad magic {magic!r}")
    rest = (1 if flags & FLAG_LABEL else 0) + payload_size(K, M) + CRC_BYTES
    tail = _read_exact(stream, rest)
    if len(tail) < rest:
        raise CorruptMessageError("stream ended inside a message")
    return QuantizedMessage.from_bytes(head + tail)


def iter_messages(stream: BinaryIO) -> Iterator[QuantizedMessage]:
    while (msg := read_message(stream)) is not None:
        yield msg


# ---------------------------------------------------------------------------
# endpoints


def _require(params: ModelParameters, prefixes: tuple[str, ...], role: str) -> None:
    missing = [p for p in prefixes if not params.has(p)]
    if missing:
        raise InputError(f"{role} endpoint needs parameters {missing} (got view {params.view!r})")


def encode_frame(x: np.ndarray, edge: ModelParameters, sample_id: int = 0,
                 label: int | None = None) -> QuantizedMessage:
    """Edge side: encode, quantize and wrap one CSI frame."""
    _require(edge, ("norm.", "enc.", "codebook"), "edge")
    x = np.asarray(x)
    if x.shape != tuple(edge.config.input_shape):
        raise InputError(f"frame shape {x.shape} does not match model input {edge.config.input_shape}")
    _, idx, _ = mdl.encode(x, edge)
    K, D = edge.codebook.shape
    return QuantizedMessage(K, D, idx.reshape(-1), int(sample_id), label)


def decode_frame(msg: QuantizedMessage, cloud: ModelParameters,
                 log: "ReconstructionLog | None" = None) -> tuple[np.ndarray, int, np.ndarray]:
    """Cloud side: (reconstructed frame, predicted class, class probabilities)."""
    _require(cloud, ("norm.", "dec.", "cls.", "codebook"), "cloud")
    K, D = cloud.codebook.shape
    M = mdl.latent_length(cloud.config)
    if (msg.K, msg.D, msg.M) != (K, D, M):
        raise ProtocolError(f"message (K={msg.K}, D={msg.D}, M={msg.M}) does not match "
                            f"cloud model (K={K}, D={D}, M={M})")
    e_hat = dequantize(np.asarray(msg.indices).reshape(1, M), cloud.codebook)
    recon = mdl.decode(e_hat, cloud)[0]
    probs = mdl.classify(e_hat, cloud)[0]
    if log is not None:
        log.append(msg.sample_id, recon)
    return recon, int(probs.argmax()), probs


class ReconstructionLog:
    """Append-only record store: u32 sample_id | u32 count | count float32 LE."""

    _REC = struct.Struct("<II")

    def __init__(self, path: str | Path):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)

    def append(self, sample_id: int, frame: np.ndarray) -> None:
        data = np.ascontiguousarray(frame, dtype="<f4")
        with open(self.path, "ab") as fh:
            fh.write(self._REC.pack(sample_id, data.size))
            fh.write(data.tobytes())

    def read(self) -> Iterator[tuple[int, np.ndarray]]:
        if not self.path.exists():
            return
        with open(self.path, "rb") as fh:
            while head := fh.read(self._REC.size):
                sid, n = self._REC.unpack(head)
                yield sid, np.frombuffer(fh.read(4 * n), dtype="<f4").copy()


# ---------------------------------------------------------------------------
# compression accounting


def gamma_paper(K: int) -> float:
    """Codebook-size compression rate: 684000 raw bytes over K log2 K."""
    if K < 64 or K > 1024 or K & (K - 1):
        raise InputError(f"K must be a power of two in [64, 1024], got {K}")
    return PAPER_ORIGINAL_BYTES / (K * math.log2(K))


@dataclass
class CompressionReport:
    original_bytes: int
    payload_bytes: float
    header_bytes: int
    gamma_payload: float
    gamma_paper: float | None
    K: int
    M: int

    def to_dict(self) -> dict:
        return asdict(self)


def gamma_payload(config: mdl.ArchitectureConfig, K: int | None = None,
                  label: bool = False) -> CompressionReport:
    """True wire cost of one frame versus its raw float32 amplitude size.

    ``payload_bytes`` is the exact bit cost M*b/8; the wire rounds it up to
    whole bytes.
    """
    K = config.codebook_size if K is None else K
    c, s, t = config.input_shape
    original = c * s * t * 4
    M = mdl.latent_length(config)
    payload = M * bits_per_index(K) / 8
    try:
        gp = gamma_paper(K)
    except InputError:
        gp = None
    return CompressionReport(original, payload, HEADER_BYTES + int(label) + CRC_BYTES,
                             original / payload, gp, K, M)


# ---------------------------------------------------------------------------
# sessions


@dataclass
class SessionReport:
    transport: str
    n_frames: int
    accuracy: float
    nmse_db: float
    bytes_transferred: int
    header_bytes_total: int
    payload_bytes_total: int
    seconds: float
    frames_per_sec: float
    predictions: list[int]

    def to_dict(self) -> dict:
        return asdict(self)


def _edge_stream(x: np.ndarray, labels, ids, edge: ModelParameters, sink: BinaryIO) -> None:
    for i in range(len(x)):
        label = int(labels[i]) if labels is not None else None
        sink.write(encode_frame(x[i], edge, int(ids[i]), label).to_bytes())
    sink.flush()


def _edge_process(port: int, x, labels, ids, arrays, config_dict, view) -> None:
    from . import tensor_core as tc
    cfg = mdl.ArchitectureConfig.from_dict(config_dict)
    edge = ModelParameters(cfg, {n: tc.parameter(a) for n, a in arrays.items()}, view)
    with socket.create_connection(("127.0.0.1", port)) as sock:
        with sock.makefile("wb") as fh:
            _edge_stream(x, labels, ids, edge, fh)


def simulate_session(data, edge: ModelParameters, cloud: ModelParameters,
                     transport: str = "memory", port: int = 0,
                     log_path: str | Path | None = None) -> SessionReport:
    """Stream every frame edge -> bytes -> cloud and aggregate the results.

    ``transport="memory"`` uses an in-process byte buffer; ``"tcp"`` runs the
    edge encoder in a separate process connected over a local socket.
    """
    from .eval_metrics import accuracy, nmse_db

    edge = edge.subset(EDGE) if edge.view != EDGE else edge
    cloud = cloud.subset(CLOUD) if cloud.view != CLOUD else cloud
    log = ReconstructionLog(log_path) if log_path else None
    recs, preds = [], []
    n_bytes = 0
    start = time.perf_counter()

    def consume(stream: BinaryIO) -> None:
        nonlocal n_bytes
        for msg in iter_messages(stream):
            rec, pred, _ = decode_frame(msg, cloud, log)
            recs.append(rec)
            preds.append(pred)
            n_bytes += len(msg.to_bytes())

    if transport == "memory":
        buf = io.BytesIO()
        _edge_stream(data.x, data.labels, data.sample_ids, edge, buf)
        buf.seek(0)
        consume(buf)
    elif transport == "tcp":
        with socket.create_server(("127.0.0.1", port)) as server:
            ctx = mp.get_context("spawn")
            proc = ctx.Process(target=_edge_process, args=(
                server.getsockname()[1], data.x, data.labels, data.sample_ids,
                edge.arrays(), edge.config.to_dict(), edge.view))
            proc.start()
            try:
                server.settimeout(120)
                conn, _ = server.accept()
                with conn, conn.makefile("rb") as fh:
                    consume(fh)
            finally:
                proc.join(timeout=60)
            if proc.exitcode != 0:
                raise ProtocolError(f"edge process exited with code {proc.exitcode}")
    else:
        raise InputError(f"unknown transport {transport!r}")
    elapsed = time.perf_counter() - start

    if len(preds) != len(data):
        raise ProtocolError(f"received {len(preds)} of {len(data)} frames")
    n = len(preds)
    label_bytes = int(data.labels is not None)
    header_total = n * (HEADER_BYTES + label_bytes + CRC_BYTES)
    return SessionReport(
        transport=transport,
        n_frames=n,
        accuracy=accuracy(preds, data.labels),
        nmse_db=nmse_db(data.x, np.stack(recs)),
        bytes_transferred=n_bytes,
        header_bytes_total=header_total,
        payload_bytes_total=n_bytes - header_total,
        seconds=elapsed,
        frames_per_sec=n / elapsed if elapsed > 0 else float("inf"),
        predictions=[int(p) for p in preds],
    )
