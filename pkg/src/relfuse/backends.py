"""Sources of per-step next-token distributions.

Three kinds of backend cover testing and desk-scale experiments: exact
table lookups, additive-smoothed n-gram models trained on token streams,
and remote servers speaking a newline-delimited JSON protocol over a
subprocess pipe or a stream socket.  Co-occurrence embeddings for the
n-gram world are built here as well (PPMI matrix, truncated SVD).

All built-in backends are deterministic: the same context always yields
the same distribution.
"""

from __future__ import annotations

import json
import logging
import queue
import socket
import subprocess
import threading
from abc import ABC, abstractmethod
from collections import Counter
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import (
    ArgumentError,
    BackendError,
    ProtocolError,
    RetryableTimeout,
)
from .fusion import AbsoluteDistribution
from .relspace import EmbeddingTable
from .vocab import Vocabulary

logger = logging.getLogger(__name__)


class ModelBackend(ABC):
    """A named model with a vocabulary that produces next-token distributions."""

    name: str
    vocabulary: Vocabulary
    embeddings: EmbeddingTable | None

    @abstractmethod
    def next_distribution(self, context_ids: Sequence[int]) -> AbsoluteDistribution:
        """Distribution over this model's vocabulary given the context."""

    def close(self) -> None:
        """Release any held resources; a no-op for in-process backends."""


class TableModel(ModelBackend):
    """Exact context-to-distribution lookup, for tests and trace replay.

    Unknown contexts fall back to the default distribution.
    """

    def __init__(
        self,
        vocabulary: Vocabulary,
        table: Mapping[tuple[int, ...], Sequence[float]],
        default: Sequence[float],
        name: str = "table",
        embeddings: EmbeddingTable | None = None,
    ):
        self.name = name
        self.vocabulary = vocabulary
        self.embeddings = embeddings
        self._table = {}
        for ctx, dist in table.items():
            checked = AbsoluteDistribution(np.asarray(dist, dtype=np.float64))
            if len(checked) != vocabulary.size:
                raise ArgumentError(
                    f"table entry for {ctx} has length {len(checked)}, "
                    f"vocabulary has {vocabulary.size}"
                )
            self._table[tuple(ctx)] = checked.values
        checked = AbsoluteDistribution(np.asarray(default, dtype=np.float64))
        if len(checked) != vocabulary.size:
            raise ArgumentError("default distribution length mismatch")
        self._default = checked.values

    def next_distribution(self, context_ids: Sequence[int]) -> AbsoluteDistribution:
        values = self._table.get(tuple(context_ids), self._default)
        return AbsoluteDistribution(values.copy())


class NGramModel(ModelBackend):
    """Additive-smoothed n-gram model with backoff to shorter contexts.

    P(w | ctx) = (count(ctx, w) + delta) / (count(ctx) + delta * |V|);
    a context with no observations backs off to the next shorter one,
    bottoming out at the unigram distribution.
    """

    def __init__(
        self,
        vocabulary: Vocabulary,
        order: int,
        delta: float,
        counts: Mapping[tuple[int, ...], Counter],
        name: str = "ngram",
        embeddings: EmbeddingTable | None = None,
    ):
        self.name = name
        self.vocabulary = vocabulary
        self.embeddings = embeddings
        self.order = order
        self.delta = delta
        self._counts = dict(counts)
        self._totals = {ctx: sum(c.values()) for ctx, c in self._counts.items()}

    def next_distribution(self, context_ids: Sequence[int]) -> AbsoluteDistribution:
        ctx = tuple(context_ids[-(self.order - 1):]) if self.order > 1 else ()
        while ctx and self._totals.get(ctx, 0) == 0:
            ctx = ctx[1:]
        size = self.vocabulary.size
        values = np.full(size, self.delta, dtype=np.float64)
        counter = self._counts.get(ctx)
        total = 0
        if counter:
            total = self._totals[ctx]
            for token_id, count in counter.items():
                values[token_id] += count
        values /= total + self.delta * size
        return AbsoluteDistribution(values)


def train_ngram(
    corpus: Iterable[Sequence[int]],
    order: int,
    delta: float,
    vocabulary: Vocabulary,
    name: str = "ngram",
    embeddings: EmbeddingTable | None = None,
) -> NGramModel:
    """Count n-gram statistics at every context length up to order-1."""
    if order < 1:
        raise ArgumentError(f"order must be >= 1, got {order}")
    if delta <= 0.0:
        raise ArgumentError(f"smoothing delta must be > 0, got {delta}")
    counts: dict[tuple[int, ...], Counter] = {}
    tokens_seen = 0
    for sequence in corpus:
        seq = list(sequence)
        tokens_seen += len(seq)
        for i, token_id in enumerate(seq):
            if not 0 <= token_id < vocabulary.size:
                raise ArgumentError(
                    f"corpus token id {token_id} outside vocabulary of "
                    f"{vocabulary.size}"
                )
            for width in range(min(order - 1, i) + 1):
                ctx = tuple(seq[i - width : i])
                counts.setdefault(ctx, Counter())[token_id] += 1
    if tokens_seen == 0:
        raise ArgumentError("empty corpus")
    return NGramModel(vocabulary, order, delta, counts, name=name, embeddings=embeddings)


def cooccurrence_ppmi(
    corpus: Iterable[Sequence[int]], window: int, vocab_size: int
) -> np.ndarray:
    """Positive pointwise mutual information over symmetric window counts."""
    if window < 1:
        raise ArgumentError(f"window must be >= 1, got {window}")
    co = np.zeros((vocab_size, vocab_size), dtype=np.float64)
    for sequence in corpus:
        seq = list(sequence)
        for i, token_id in enumerate(seq):
            lo = max(0, i - window)
            hi = min(len(seq), i + window + 1)
            for j in range(lo, hi):
                if j != i:
                    co[token_id, seq[j]] += 1.0
    total = co.sum()
    if total == 0.0:
        return co
    row = co.sum(axis=1)
    col = co.sum(axis=0)
    with np.errstate(divide="ignore", invalid="ignore"):
        pmi = np.log(co * total / np.outer(row, col))
    pmi[~np.isfinite(pmi)] = 0.0
    return np.maximum(pmi, 0.0)


def build_embeddings(
    corpus: Sequence[Sequence[int]],
    window: int,
    dim: int,
    vocab_size: int,
    name: str = "",
) -> EmbeddingTable:
    """Factorize the PPMI co-occurrence matrix into token embeddings.

    Row i of the result is the first dim left singular vectors scaled by
    their singular values.  Sign convention: the largest-magnitude
    component of each singular vector is made positive, so the output is
    reproducible across runs.  Asking for more dimensions than the matrix
    rank pads with zero columns and warns.
    """
    if not 1 <= dim <= vocab_size:
        raise ArgumentError(f"dim must be in 1..{vocab_size}, got {dim}")
    ppmi = cooccurrence_ppmi(corpus, window, vocab_size)
    u, s, _ = np.linalg.svd(ppmi, full_matrices=False)
    tol = max(ppmi.shape) * np.finfo(np.float64).eps * (s[0] if s.size else 0.0)
    rank = int(np.sum(s > max(tol, 1e-10)))
    usable = min(dim, rank)
    emb = np.zeros((vocab_size, dim), dtype=np.float64)
    for k in range(usable):
        column = u[:, k]
        pivot = int(np.argmax(np.abs(column)))
        if column[pivot] < 0.0:
            column = -column
        emb[:, k] = column * s[k]
    if dim > rank:
        logger.warning(
            "requested %d embedding dimensions but PPMI rank is %d; "
            "trailing columns are zero",
            dim,
            rank,
        )
    return EmbeddingTable(emb, name=name)


def ngram_from_text(
    vocabulary: Vocabulary,
    text: str,
    order: int = 3,
    delta: float = 0.1,
    name: str = "ngram",
    dim: int | None = None,
    window: int = 2,
    sentence_sep: str = "\n",
) -> NGramModel:
    """Tokenize raw text and train an n-gram backend with embeddings.

    Each line of the text is treated as one training sequence.  The
    embedding table is factorized from the same token stream; pass
    dim=None to skip embeddings entirely.
    """
    from .vocab import GreedyTokenizer

    tokenizer = GreedyTokenizer(vocabulary)
    sequences = [
        tokenizer.encode(chunk)
        for chunk in text.split(sentence_sep)
        if chunk
    ]
    embeddings = None
    if dim is not None:
        embeddings = build_embeddings(
            sequences, window=window, dim=dim, vocab_size=vocabulary.size, name=name
        )
    return train_ngram(
        sequences, order, delta, vocabulary, name=name, embeddings=embeddings
    )


# --- wire protocol -------------------------------------------------------

_HANDSHAKE_TIMEOUT = 10.0


def _encode_frame(frame: dict) -> bytes:
    return (json.dumps(frame, separators=(",", ":")) + "\n").encode("utf-8")


class _StdioTransport:
    """Frames over the stdin/stdout of a spawned server process."""

    def __init__(self, command: Sequence[str]):
        try:
            self._proc = subprocess.Popen(
                list(command),
                stdin=subprocess.PIPE,
                stdout=subprocess.PIPE,
            )
        except OSError as exc:
            raise BackendError(f"cannot spawn {command!r}: {exc}") from exc
        self._lines: queue.Queue[bytes | None] = queue.Queue()
        self._reader = threading.Thread(target=self._pump, daemon=True)
        self._reader.start()

    def _pump(self) -> None:
        assert self._proc.stdout is not None
        for line in self._proc.stdout:
            self._lines.put(line)
        self._lines.put(None)

    def send(self, frame: dict) -> None:
        assert self._proc.stdin is not None
        try:
            self._proc.stdin.write(_encode_frame(frame))
            self._proc.stdin.flush()
        except (BrokenPipeError, OSError) as exc:
            raise BackendError(f"server pipe closed: {exc}") from exc

    def recv_line(self, timeout: float) -> bytes:
        try:
            line = self._lines.get(timeout=timeout)
        except queue.Empty:
            raise RetryableTimeout(f"no frame within {timeout}s") from None
        if line is None:
            raise ProtocolError("server closed the stream")
        return line

    def close(self) -> None:
        if self._proc.stdin:
            try:
                self._proc.stdin.close()
            except OSError:
                pass
        try:
            self._proc.wait(timeout=2.0)
        except subprocess.TimeoutExpired:
            self._proc.kill()
            self._proc.wait()


class _SocketTransport:
    """Frames over a connected stream socket."""

    def __init__(self, host: str, port: int, timeout: float = _HANDSHAKE_TIMEOUT):
        try:
            self._sock = socket.create_connection((host, port), timeout=timeout)
        except OSError as exc:
            raise BackendError(f"cannot connect to {host}:{port}: {exc}") from exc
        self._file = self._sock.makefile("rb")

    def send(self, frame: dict) -> None:
        try:
            self._sock.sendall(_encode_frame(frame))
        except OSError as exc:
            raise BackendError(f"socket send failed: {exc}") from exc

    def recv_line(self, timeout: float) -> bytes:
        self._sock.settimeout(timeout)
        try:
            line = self._file.readline()
        except socket.timeout:
            raise RetryableTimeout(f"no frame within {timeout}s") from None
        except OSError as exc:
            raise ProtocolError(f"socket read failed: {exc}") from exc
        if not line:
            raise ProtocolError("server closed the connection")
        return line

    def close(self) -> None:
        try:
            self._file.close()
            self._sock.close()
        except OSError:
            pass


class RemoteBackend(ModelBackend):
    """Client for a distribution server speaking the line-JSON protocol.

    The server greets with {"type":"hello","name":...,"vocab_size":...};
    a size that disagrees with the registered vocabulary is fatal.  Each
    request is {"type":"next","context_ids":[...]} answered by a dense
    or sparse distribution frame; sparse frames spread their remaining
    "rest" mass uniformly over unlisted ids.
    """

    def __init__(
        self,
        vocabulary: Vocabulary,
        transport,
        timeout: float = 5.0,
        embeddings: EmbeddingTable | None = None,
    ):
        self.vocabulary = vocabulary
        self.embeddings = embeddings
        self._transport = transport
        self._timeout = timeout
        hello = self._read_frame(_HANDSHAKE_TIMEOUT)
        if hello.get("type") != "hello":
            raise ProtocolError(f"expected hello frame, got {hello!r}")
        size = hello.get("vocab_size")
        if size != vocabulary.size:
            raise BackendError(
                f"server vocab_size {size} does not match registered "
                f"vocabulary of {vocabulary.size} tokens",
                model=str(hello.get("name")),
            )
        self.name = str(hello.get("name", "remote"))

    def _read_frame(self, timeout: float) -> dict:
        line = self._transport.recv_line(timeout)
        try:
            frame = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ProtocolError(
                f"malformed frame {line!r}: {exc}", model=getattr(self, "name", None)
            ) from exc
        if not isinstance(frame, dict):
            raise ProtocolError(
                f"malformed frame {line!r}: not an object",
                model=getattr(self, "name", None),
            )
        return frame

    def _densify(self, frame: dict) -> np.ndarray:
        size = self.vocabulary.size
        ids = frame.get("ids")
        probs = frame.get("probs")
        rest = frame.get("rest")
        if (
            not isinstance(ids, list)
            or not isinstance(probs, list)
            or len(ids) != len(probs)
            or not isinstance(rest, (int, float))
        ):
            raise ProtocolError(f"malformed sparse frame {frame!r}", model=self.name)
        unlisted = size - len(ids)
        if unlisted < 0 or len(set(ids)) != len(ids):
            raise ProtocolError(f"malformed sparse frame {frame!r}", model=self.name)
        if unlisted == 0:
            if abs(rest) > 1e-9:
                raise ProtocolError(
                    f"sparse frame lists every id but rest={rest}", model=self.name
                )
            values = np.zeros(size, dtype=np.float64)
        else:
            values = np.full(size, rest / unlisted, dtype=np.float64)
        for token_id, prob in zip(ids, probs):
            if not 0 <= token_id < size:
                raise ProtocolError(
                    f"sparse frame id {token_id} out of range", model=self.name
                )
            values[token_id] = prob
        return values

    def next_distribution(self, context_ids: Sequence[int]) -> AbsoluteDistribution:
        self._transport.send(
            {"type": "next", "context_ids": [int(i) for i in context_ids]}
        )
        frame = self._read_frame(self._timeout)
        kind = frame.get("type")
        if kind == "dist":
            probs = frame.get("probs")
            if not isinstance(probs, list) or len(probs) != self.vocabulary.size:
                raise ProtocolError(
                    f"dist frame with {len(probs) if isinstance(probs, list) else '?'} "
                    f"probs, expected {self.vocabulary.size}",
                    model=self.name,
                )
            values = np.asarray(probs, dtype=np.float64)
        elif kind == "dist_sparse":
            values = self._densify(frame)
        else:
            raise ProtocolError(f"unexpected frame {frame!r}", model=self.name)
        try:
            return AbsoluteDistribution(values)
        except ArgumentError as exc:
            raise ProtocolError(
                f"server sent an invalid distribution: {exc}", model=self.name
            ) from exc

    def close(self) -> None:
        try:
            self._transport.send({"type": "bye"})
        except BackendError:
            pass
        self._transport.close()


def remote_backend(
    endpoint: Sequence[str] | tuple[str, int] | str,
    transport: str,
    vocabulary: Vocabulary,
    timeout: float = 5.0,
    embeddings: EmbeddingTable | None = None,
) -> RemoteBackend:
    """Connect to a distribution server.

    transport "stdio" spawns endpoint as a command line; "socket" dials
    endpoint given as (host, port) or "host:port".
    """
    if transport == "stdio":
        if isinstance(endpoint, str):
            endpoint = endpoint.split()
        channel = _StdioTransport(endpoint)
    elif transport == "socket":
        if isinstance(endpoint, str):
            host, _, port_text = endpoint.rpartition(":")
            try:
                endpoint = (host, int(port_text))
            except ValueError:
                raise ArgumentError(f"bad socket endpoint {endpoint!r}") from None
        host, port = endpoint
        channel = _SocketTransport(host, int(port))
    else:
        raise ArgumentError(f"unknown transport {transport!r} (stdio or socket)")
    try:
        return RemoteBackend(vocabulary, channel, timeout=timeout, embeddings=embeddings)
    except Exception:
        channel.close()
        raise


def serve_connection(backend: ModelBackend, rfile, wfile) -> None:
    """Serve one client on a pair of binary line streams.

    Sends the hello frame, answers next requests until bye or EOF, and
    closes on any malformed input (continuing would desynchronize the
    request/response pairing).
    """
    wfile.write(
        _encode_frame(
            {
                "type": "hello",
                "name": backend.name,
                "vocab_size": backend.vocabulary.size,
            }
        )
    )
    wfile.flush()
    for line in rfile:
        if not line.strip():
            continue
        try:
            frame = json.loads(line)
            kind = frame.get("type")
        except (json.JSONDecodeError, AttributeError):
            logger.warning("malformed client frame %r; closing", line[:200])
            return
        if kind == "bye":
            return
        if kind != "next" or not isinstance(frame.get("context_ids"), list):
            logger.warning("unexpected client frame %r; closing", line[:200])
            return
        dist = backend.next_distribution([int(i) for i in frame["context_ids"]])
        wfile.write(_encode_frame({"type": "dist", "probs": dist.values.tolist()}))
        wfile.flush()


def serve_stdio(backend: ModelBackend, stdin=None, stdout=None) -> None:
    """Serve a single session over this process's standard streams."""
    import sys

    rfile = stdin if stdin is not None else sys.stdin.buffer
    wfile = stdout if stdout is not None else sys.stdout.buffer
    serve_connection(backend, rfile, wfile)


def serve_socket(
    backend: ModelBackend,
    host: str = "127.0.0.1",
    port: int = 0,
    ready_callback=None,
    max_sessions: int | None = 1,
) -> None:
    """Listen on a socket and serve sessions sequentially.

    port 0 picks a free port; ready_callback receives the bound (host,
    port) before the first accept.  max_sessions=None serves forever.
    """
    with socket.socket(socket.AF_INET, socket.SOCK_STREAM) as server:
        server.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        server.bind((host, port))
        server.listen(1)
        if ready_callback is not None:
            ready_callback(server.getsockname())
        served = 0
        while max_sessions is None or served < max_sessions:
            conn, _ = server.accept()
            with conn:
                rfile = conn.makefile("rb")
                wfile = conn.makefile("wb")
                try:
                    serve_connection(backend, rfile, wfile)
                finally:
                    rfile.close()
                    wfile.close()
            served += 1
