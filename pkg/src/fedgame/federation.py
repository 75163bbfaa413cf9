"""Center/agent round protocol over interchangeable transports.

Frames are single-line UTF-8 JSON objects {"type": ..., "payload": ...} with
type in {hello, broadcast, report, bye, error}.  Floats ride as JSON numbers
in shortest round-trip decimal, so a remote run reproduces the in-process
arithmetic bit for bit.  Two transports ship: thread-queue channels (tests,
in-process runs) and TCP sockets.

Protocol per run:
  agent -> center   hello {protocol_version, agent_id, digest}
  center -> agent   hello {protocol_version, run_id, n, m}   (acceptance)
  center -> agent   broadcast {run_id, t, phase, w, s}       (each round)
  agent -> center   report {run_id, t, agent_id, s_next?, d?}
  center -> agent   bye {reason}
Either side may send error {message} and drop the connection.  The center
holds a round barrier: it never broadcasts round t+1 before holding all n
reports for round t; a missing report after the timeout aborts the run.
"""

from __future__ import annotations

import hashlib
import json
import queue
import socket
import threading
import time
from dataclasses import dataclass

import numpy as np

from .core import ConfigError, FederationError, GameInstance
from .dynamics import AgentReply, AgentWorker, RunConfig, run_dynamic
from .traceio import instance_digest

PROTOCOL_VERSION = 1
MAX_FRAME_BYTES = 16 * 1024 * 1024
FRAME_TYPES = ("hello", "broadcast", "report", "bye", "error")
DEFAULT_TIMEOUT = 30.0


class DecodeError(FederationError):
    """Malformed wire data; offset is the byte position when known."""

    def __init__(self, message: str, offset: int = 0) -> None:
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


def encode_frame(ftype: str, payload: dict) -> bytes:
    if ftype not in FRAME_TYPES:
        raise ConfigError(f"unknown frame type {ftype!r}")
    try:
        body = json.dumps(
            {"type": ftype, "payload": payload},
            sort_keys=True,
            separators=(",", ":"),
            allow_nan=False,
        )
    except ValueError as exc:
        raise FederationError(f"unencodable frame payload: {exc}") from None
    data = (body + "\n").encode("utf-8")
    if len(data) > MAX_FRAME_BYTES:
        raise FederationError(f"frame too large: {len(data)} bytes")
    return data


def _reject_constant(token: str):
    raise DecodeError(f"non-finite number {token!r} in frame")


def decode_frame(line: bytes) -> tuple[str, dict]:
    if len(line) > MAX_FRAME_BYTES:
        raise DecodeError("frame exceeds 16 MiB", 0)
    if not line.strip():
        raise DecodeError("empty frame", 0)
    try:
        text = line.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise DecodeError(f"bad UTF-8: {exc.reason}", exc.start) from None
    try:
        obj = json.loads(text, parse_constant=_reject_constant)
    except json.JSONDecodeError as exc:
        raise DecodeError(f"bad JSON: {exc.msg}", exc.pos) from None
    if not isinstance(obj, dict):
        raise DecodeError("frame is not a JSON object", 0)
    ftype = obj.get("type")
    if ftype not in FRAME_TYPES:
        raise DecodeError(f"unknown frame type {ftype!r}", 0)
    payload = obj.get("payload")
    if not isinstance(payload, dict):
        raise DecodeError("missing payload object", 0)
    return ftype, payload


# ---------------------------------------------------------------------------
# Channels: blocking byte-line endpoints.


class QueueChannel:
    """One endpoint of an in-process duplex pipe built on two Queues."""

    def __init__(self, inbox: queue.Queue, outbox: queue.Queue) -> None:
        self._inbox = inbox
        self._outbox = outbox
        self._closed = False

    def send_bytes(self, data: bytes) -> None:
        if self._closed:
            raise FederationError("channel closed")
        self._outbox.put(data)

    def recv_line(self) -> bytes:
        data = self._inbox.get()
        if data == b"":
            self._inbox.put(b"")  # keep EOF sticky for any later reader
        return data

    def close(self) -> None:
        if not self._closed:
            self._closed = True
            self._outbox.put(b"")
            self._inbox.put(b"")  # wake local readers blocked on recv_line


def channel_pair() -> tuple[QueueChannel, QueueChannel]:
    a_to_b: queue.Queue = queue.Queue()
    b_to_a: queue.Queue = queue.Queue()
    return QueueChannel(b_to_a, a_to_b), QueueChannel(a_to_b, b_to_a)


class SocketChannel:
    """Line-framed TCP endpoint."""

    def __init__(self, sock: socket.socket) -> None:
        self._sock = sock
        self._sock.settimeout(None)
        self._file = sock.makefile("rb")

    def send_bytes(self, data: bytes) -> None:
        try:
            self._sock.sendall(data)
        except OSError as exc:
            raise FederationError(f"socket send failed: {exc}") from None

    def recv_line(self) -> bytes:
        try:
            line = self._file.readline(MAX_FRAME_BYTES + 2)
        except OSError:
            return b""
        if len(line) > MAX_FRAME_BYTES:
            raise DecodeError("frame exceeds 16 MiB", 0)
        return line

    def close(self) -> None:
        # shutdown first: it forces a reader blocked in readline to see EOF
        # and drop the buffer lock that _file.close() must acquire
        try:
            self._sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        try:
            self._file.close()
        except OSError:
            pass
        self._sock.close()


def send_frame(channel, ftype: str, payload: dict) -> None:
    channel.send_bytes(encode_frame(ftype, payload))


def _best_effort(channel, ftype: str, payload: dict) -> None:
    try:
        send_frame(channel, ftype, payload)
    except (FederationError, OSError):
        pass


def derive_run_id(g: GameInstance, cfg: RunConfig, algorithm: str) -> str:
    blob = json.dumps(
        {
            "digest": instance_digest(g),
            "algorithm": algorithm,
            "gamma": cfg.gamma,
            "eta": cfg.eta,
            "rounds": cfg.rounds,
            "eps": cfg.eps,
            "eps_s": cfg.eps_s,
            "seed": cfg.seed,
            "updater": cfg.updater,
            "w_grad_at": cfg.w_grad_at,
            "learn_rate": cfg.learn_rate,
        },
        sort_keys=True,
        separators=(",", ":"),
    )
    return hashlib.sha256(blob.encode()).hexdigest()[:32]


# ---------------------------------------------------------------------------
# Center side.


class RemotePool:
    """Drop-in replacement for dynamics.LocalPool backed by agent channels.

    One reader thread per channel feeds a single queue; step() implements the
    round barrier by waiting until every agent's report for round t arrived.
    """

    def __init__(
        self,
        game: GameInstance,
        cfg: RunConfig,
        algorithm: str,
        channels,
        timeout: float = DEFAULT_TIMEOUT,
    ) -> None:
        if len(channels) != game.n:
            raise ConfigError(f"need exactly {game.n} agent channels, got {len(channels)}")
        self.game = game
        self.cfg = cfg
        self.timeout = timeout
        self.run_id = derive_run_id(game, cfg, algorithm)
        self.digest = instance_digest(game)
        self._channels = list(channels)
        self._by_agent: dict[int, object] = {}
        self._queue: queue.Queue = queue.Queue()
        self._threads: list[threading.Thread] = []
        self._done = False

    # reader threads tag frames with the channel index; agent identity is
    # established by the hello handshake.
    def _reader(self, idx: int, channel) -> None:
        while True:
            try:
                line = channel.recv_line()
            except FederationError as exc:
                self._queue.put((idx, "fail", str(exc)))
                return
            if line == b"":
                self._queue.put((idx, "closed", ""))
                return
            try:
                frame = decode_frame(line)
            except DecodeError as exc:
                self._queue.put((idx, "fail", str(exc)))
                return
            self._queue.put((idx, "frame", frame))

    def _get(self, deadline: float):
        remaining = deadline - time.monotonic()
        if remaining <= 0.0:
            raise queue.Empty
        return self._queue.get(timeout=remaining)

    def handshake(self) -> None:
        for idx, ch in enumerate(self._channels):
            th = threading.Thread(target=self._reader, args=(idx, ch), daemon=True)
            th.start()
            self._threads.append(th)
        deadline = time.monotonic() + self.timeout
        pending = set(range(len(self._channels)))
        chan_agent: dict[int, int] = {}
        while pending:
            try:
                idx, kind, item = self._get(deadline)
            except queue.Empty:
                raise FederationError(
                    f"timeout waiting for hello on {len(pending)} connection(s)"
                ) from None
            ch = self._channels[idx]
            if kind != "frame":
                raise FederationError(f"connection {idx} failed before hello: {item}")
            ftype, payload = item
            if ftype == "error":
                raise FederationError(f"connection {idx} sent error: {payload.get('message')}")
            if ftype != "hello":
                _best_effort(ch, "error", {"message": "expected hello"})
                raise FederationError(f"connection {idx} sent {ftype} before hello")
            if payload.get("protocol_version") != PROTOCOL_VERSION:
                _best_effort(ch, "error", {"message": "unsupported protocol version"})
                raise FederationError(
                    f"connection {idx}: protocol version {payload.get('protocol_version')!r}"
                )
            if payload.get("digest") != self.digest:
                _best_effort(ch, "error", {"message": "instance digest mismatch"})
                raise FederationError(f"connection {idx}: instance digest mismatch")
            aid = payload.get("agent_id")
            if not isinstance(aid, int) or not 0 <= aid < self.game.n:
                _best_effort(ch, "error", {"message": "agent_id out of range"})
                raise FederationError(f"connection {idx}: bad agent id {aid!r}")
            if aid in self._by_agent:
                _best_effort(ch, "error", {"message": "duplicate agent_id"})
                raise FederationError(f"duplicate hello for agent {aid}")
            self._by_agent[aid] = ch
            chan_agent[idx] = aid
            pending.discard(idx)
        self._chan_agent = chan_agent
        ack = {
            "protocol_version": PROTOCOL_VERSION,
            "run_id": self.run_id,
            "n": self.game.n,
            "m": self.game.m,
        }
        for aid in sorted(self._by_agent):
            send_frame(self._by_agent[aid], "hello", ack)

    def _parse_report(self, t: int, phase: str, payload: dict) -> AgentReply:
        aid = payload.get("agent_id")
        s_next = payload.get("s_next")
        d = payload.get("d")
        if phase in ("1", "single") and not isinstance(s_next, (int, float)):
            raise FederationError(f"agent {aid}: report missing s_next in phase {phase}")
        if phase == "2" and s_next is not None:
            raise FederationError(f"agent {aid}: unexpected s_next in phase 2")
        if phase in ("2", "single"):
            if not isinstance(d, list) or len(d) != self.game.m:
                raise FederationError(f"agent {aid}: report carries no valid gradient")
        elif d is not None:
            raise FederationError(f"agent {aid}: unexpected gradient in phase 1")
        return AgentReply(
            agent_id=int(aid),
            s_next=None if s_next is None else float(s_next),
            d=None if d is None else np.array([float(v) for v in d]),
        )

    def step(self, t: int, phase: str, w: np.ndarray, s: np.ndarray) -> list[AgentReply]:
        payload = {
            "run_id": self.run_id,
            "t": int(t),
            "phase": phase,
            "w": [float(v) for v in w],
            "s": [float(v) for v in s],
        }
        for aid in sorted(self._by_agent):
            send_frame(self._by_agent[aid], "broadcast", payload)
        replies: dict[int, AgentReply] = {}
        deadline = time.monotonic() + self.timeout
        while len(replies) < self.game.n:
            try:
                idx, kind, item = self._get(deadline)
            except queue.Empty:
                missing = sorted(set(range(self.game.n)) - set(replies))
                raise FederationError(
                    f"no report from agent(s) {missing} within {self.timeout}s"
                ) from None
            aid = self._chan_agent.get(idx)
            if kind == "closed":
                raise FederationError(f"agent {aid} disconnected")
            if kind == "fail":
                raise FederationError(f"agent {aid} channel failed at round {t}: {item}")
            ftype, payload_in = item
            if ftype == "error":
                raise FederationError(
                    f"agent {aid} reported an error: {payload_in.get('message')}"
                )
            if ftype != "report":
                raise FederationError(f"agent {aid} sent unexpected {ftype}")
            if payload_in.get("run_id") != self.run_id or payload_in.get("t") != t:
                # stale or foreign report: tell the agent and keep waiting
                _best_effort(
                    self._by_agent[aid], "error",
                    {"message": f"dropped report with run_id/t mismatch at round {t}"},
                )
                continue
            if payload_in.get("agent_id") != aid:
                raise FederationError(
                    f"agent {aid} sent report claiming id {payload_in.get('agent_id')}"
                )
            if aid in replies:
                raise FederationError(f"agent {aid} sent a duplicate report for round {t}")
            replies[aid] = self._parse_report(t, phase, payload_in)
        return [replies[aid] for aid in sorted(replies)]

    def close(self, ok: bool = True) -> None:
        if self._done:
            return
        self._done = True
        for ch in self._channels:
            _best_effort(ch, "bye", {"reason": "done" if ok else "aborted"})
        for ch in self._channels:
            try:
                ch.close()
            except OSError:
                pass
        for th in self._threads:
            th.join(timeout=5.0)


def serve_center(
    g: GameInstance,
    cfg: RunConfig,
    algorithm: str,
    channels,
    w0: np.ndarray | None = None,
    s0: np.ndarray | None = None,
    timeout: float = DEFAULT_TIMEOUT,
    strict: bool = True,
):
    """Run the selected dynamic with remote agents; returns the Trace."""
    pool = RemotePool(g, cfg, algorithm, channels, timeout)
    try:
        pool.handshake()
        trace = run_dynamic(g, cfg, algorithm, w0=w0, s0=s0, pool=pool, strict=strict)
    except BaseException:
        pool.close(ok=False)
        raise
    pool.close()
    return trace


# ---------------------------------------------------------------------------
# Agent side.


def run_agent(g: GameInstance, agent_id: int, cfg: RunConfig, channel, notify=None) -> int:
    """Agent loop: handshake, answer broadcasts, exit on bye.  Returns a
    process-style status (0 clean, nonzero on protocol failure).  notify, if
    given, is called with a one-line reason on every failure path."""
    note = notify if notify is not None else lambda msg: None
    worker = AgentWorker(g, agent_id, cfg)
    send_frame(
        channel,
        "hello",
        {
            "protocol_version": PROTOCOL_VERSION,
            "agent_id": agent_id,
            "digest": instance_digest(g),
        },
    )
    line = channel.recv_line()
    if line == b"":
        note("connection closed during handshake")
        return 1
    try:
        ftype, payload = decode_frame(line)
    except DecodeError:
        _best_effort(channel, "error", {"message": "malformed handshake"})
        note("malformed handshake from center")
        return 1
    if ftype == "error":
        note(f"center rejected hello: {payload.get('message', '')}")
        return 1
    if ftype == "bye":
        note("center shut down before the run started")
        return 1
    if ftype != "hello":
        _best_effort(channel, "error", {"message": "expected hello acceptance"})
        note(f"expected hello acceptance, got {ftype}")
        return 1
    run_id = payload.get("run_id")
    last_t: int | None = None
    while True:
        line = channel.recv_line()
        if line == b"":
            note("connection closed by center")
            return 1
        try:
            ftype, payload = decode_frame(line)
        except DecodeError as exc:
            _best_effort(channel, "error", {"message": f"malformed broadcast: {exc}"})
            note(f"malformed broadcast: {exc}")
            return 1
        if ftype == "bye":
            if payload.get("reason") == "aborted":
                note("center aborted the run")
                return 1
            return 0
        if ftype == "error":
            note(f"center reported an error: {payload.get('message', '')}")
            return 1
        if ftype != "broadcast":
            _best_effort(channel, "error", {"message": f"unexpected frame {ftype}"})
            note(f"unexpected frame {ftype}")
            return 1
        t = payload.get("t")
        phase = payload.get("phase")
        w = payload.get("w")
        s = payload.get("s")
        if payload.get("run_id") != run_id:
            _best_effort(channel, "error", {"message": "broadcast run_id mismatch"})
            note("broadcast run_id mismatch")
            return 1
        if not isinstance(t, int) or (last_t is not None and t <= last_t):
            _best_effort(channel, "error", {"message": "out-of-order broadcast"})
            note("out-of-order broadcast")
            return 1
        if (
            phase not in ("1", "2", "single")
            or not isinstance(w, list) or len(w) != g.m
            or not isinstance(s, list) or len(s) != g.n
        ):
            _best_effort(channel, "error", {"message": "malformed broadcast fields"})
            note("malformed broadcast fields")
            return 1
        reply = worker.step(t, phase, np.array(w, dtype=float), np.array(s, dtype=float))
        report = {"run_id": run_id, "t": t, "agent_id": agent_id}
        if reply.s_next is not None:
            report["s_next"] = reply.s_next
        if reply.d is not None:
            report["d"] = [float(v) for v in reply.d]
        send_frame(channel, "report", report)
        last_t = t


# ---------------------------------------------------------------------------
# Transport helpers.


@dataclass
class InProcessRun:
    trace: object
    agent_status: list[int]


def run_inprocess_federation(
    g: GameInstance,
    cfg: RunConfig,
    algorithm: str,
    w0: np.ndarray | None = None,
    s0: np.ndarray | None = None,
    timeout: float = DEFAULT_TIMEOUT,
    strict: bool = True,
) -> InProcessRun:
    """Full protocol run with every agent on its own thread and queue pipes."""
    center_ends, agent_ends = [], []
    for _ in range(g.n):
        c_end, a_end = channel_pair()
        center_ends.append(c_end)
        agent_ends.append(a_end)
    status = [None] * g.n

    def agent_main(i: int) -> None:
        try:
            status[i] = run_agent(g, i, cfg, agent_ends[i])
        except Exception:
            status[i] = 2

    threads = [threading.Thread(target=agent_main, args=(i,), daemon=True) for i in range(g.n)]
    for th in threads:
        th.start()
    trace = serve_center(g, cfg, algorithm, center_ends, w0, s0, timeout, strict)
    for th in threads:
        th.join(timeout=10.0)
    return InProcessRun(trace=trace, agent_status=[x if x is not None else 2 for x in status])


def open_listener(host: str, port: int) -> socket.socket:
    srv = socket.create_server((host, port))
    srv.listen(64)
    return srv


def accept_agents(listener: socket.socket, count: int, timeout: float = DEFAULT_TIMEOUT):
    """Accept exactly `count` connections before the per-round protocol starts."""
    channels = []
    deadline = time.monotonic() + timeout
    listener.settimeout(1.0)
    while len(channels) < count:
        if time.monotonic() > deadline:
            for ch in channels:
                ch.close()
            raise FederationError(
                f"timeout: only {len(channels)} of {count} agents connected"
            )
        try:
            sock, _addr = listener.accept()
        except socket.timeout:
            continue
        channels.append(SocketChannel(sock))
    return channels


def connect_agent(
    g: GameInstance,
    agent_id: int,
    cfg: RunConfig,
    host: str,
    port: int,
    timeout: float = DEFAULT_TIMEOUT,
    notify=None,
) -> int:
    try:
        sock = socket.create_connection((host, port), timeout=timeout)
    except OSError as exc:
        raise FederationError(f"cannot reach center at {host}:{port}: {exc}") from None
    channel = SocketChannel(sock)
    try:
        return run_agent(g, agent_id, cfg, channel, notify=notify)
    finally:
        channel.close()
