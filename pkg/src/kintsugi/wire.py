"""Length-framed TCP transport: frame codec, node daemon and client driver.

Frame: ``u32 little-endian length || envelope``, length capped at 1 MiB.
Each client request gets its own connection and exactly one reply frame.
The channel is plain TCP; transport security is out of scope here.
"""

from __future__ import annotations

import asyncio
import logging
import struct
from typing import Iterable

from .client import NodeContact, Outgoing, Session
from .errors import ConnectionClosed, FrameTooLarge, KintsugiError, MalformedMessage
from .group import Group
from .messages import NodeInfo, NodeInfoRequest, decode_header, decode_message, encode_message, new_session_id
from .node import RecoveryNode

log = logging.getLogger(__name__)

MAX_FRAME = 1 << 20
HEADER = struct.Struct("<I")


def frame(payload: bytes) -> bytes:
    if len(payload) > MAX_FRAME:
        raise FrameTooLarge(f"{len(payload)} byte frame exceeds {MAX_FRAME}")
    return HEADER.pack(len(payload)) + payload


class FrameDecoder:
    """Incremental splitter: feed arbitrary chunks, get whole payloads back."""

    def __init__(self, max_frame: int = MAX_FRAME):
        self.max_frame = max_frame
        self._buf = bytearray()

    def feed(self, chunk: bytes) -> list[bytes]:
        self._buf += chunk
        out = []
        while len(self._buf) >= HEADER.size:
            (n,) = HEADER.unpack_from(self._buf)
            if n > self.max_frame:
                raise FrameTooLarge(f"declared length {n} exceeds {self.max_frame}")
            if len(self._buf) < HEADER.size + n:
                break
            out.append(bytes(self._buf[HEADER.size : HEADER.size + n]))
            del self._buf[: HEADER.size + n]
        return out

    @property
    def pending(self) -> int:
        return len(self._buf)


async def read_frame(reader: asyncio.StreamReader, max_frame: int = MAX_FRAME) -> bytes:
    try:
        head = await reader.readexactly(HEADER.size)
    except asyncio.IncompleteReadError as exc:
        raise ConnectionClosed("peer closed before a frame header") from exc
    (n,) = HEADER.unpack(head)
    if n > max_frame:
        raise FrameTooLarge(f"declared length {n} exceeds {max_frame}")
    try:
        return await reader.readexactly(n)
    except asyncio.IncompleteReadError as exc:
        raise ConnectionClosed(f"peer closed mid-frame ({len(exc.partial)} of {n} bytes)") from exc


async def write_frame(writer: asyncio.StreamWriter, payload: bytes) -> None:
    writer.write(frame(payload))
    await writer.drain()


# -- daemon -------------------------------------------------------------------


def split_address(address: str) -> tuple[str, int]:
    host, sep, port = address.rpartition(":")
    if not sep or not port.isdigit():
        raise ValueError(f"address {address!r} is not host:port")
    return host or "127.0.0.1", int(port)


class NodeServer:
    """Serve one :class:`RecoveryNode`; the rate-limit source is the peer IP."""

    def __init__(self, node: RecoveryNode, listen: str):
        self.node = node
        self.host, self.port = split_address(listen)
        self._server: asyncio.base_events.Server | None = None

    async def _serve_conn(self, reader: asyncio.StreamReader, writer: asyncio.StreamWriter) -> None:
        peer = writer.get_extra_info("peername")
        source = peer[0] if isinstance(peer, tuple) else str(peer)
        try:
            while True:
                data = await read_frame(reader)
                # handlers may block on per-user locks and disk; keep the loop free
                replies = await asyncio.to_thread(self.node.handle, source, data)
                for reply in replies:
                    await write_frame(writer, reply)
        except ConnectionClosed:
            pass
        except FrameTooLarge as exc:
            log.warning("%s: dropping %s: %s", self.node.node_id, source, exc)
        except (ConnectionError, OSError) as exc:
            log.debug("%s: connection error from %s: %s", self.node.node_id, source, exc)
        finally:
            writer.close()
            try:
                await writer.wait_closed()
            except (ConnectionError, OSError):
                pass

    async def start(self) -> None:
        self._server = await asyncio.start_server(self._serve_conn, self.host, self.port)
        self.port = self._server.sockets[0].getsockname()[1]
        log.info("%s listening on %s:%d", self.node.node_id, self.host, self.port)

    async def serve_forever(self) -> None:
        if self._server is None:
            await self.start()
        async with self._server:
            await self._server.serve_forever()

    async def close(self) -> None:
        if self._server is not None:
            self._server.close()
            await self._server.wait_closed()

    @property
    def address(self) -> str:
        return f"{self.host}:{self.port}"


# -- client driver ------------------------------------------------------------


async def request(address: str, data: bytes, timeout: float = 10.0) -> bytes:
    """One request frame out, one reply frame back."""
    host, port = split_address(address)

    async def go() -> bytes:
        reader, writer = await asyncio.open_connection(host, port)
        try:
            await write_frame(writer, data)
            return await read_frame(reader)
        finally:
            writer.close()
            try:
                await writer.wait_closed()
            except (ConnectionError, OSError):
                pass

    return await asyncio.wait_for(go(), timeout)


async def drive_session(
    session: Session,
    group: Group,
    addresses: dict[str, str],
    timeout: float = 10.0,
    sent_types: list[str] | None = None,
) -> Session:
    """Run ``session`` over TCP until it finishes or nothing is left in flight.

    Unreachable nodes and timeouts simply never answer, exactly like an
    offline node in the simulator; a session left waiting is cancelled.
    """
    in_flight: dict[asyncio.Task, str] = {}

    def resolve(node_id: str) -> str | None:
        if node_id in addresses:
            return addresses[node_id]
        # committee members learned from the directory carry their own address
        for attr in ("entry", "new_committee"):
            holder = getattr(session, attr, None)
            members = getattr(holder, "committee", holder) or ()
            for m in members:
                if m.node_id == node_id:
                    return m.address
        return None

    def launch(outgoing: Iterable[Outgoing]) -> None:
        for out in outgoing:
            if sent_types is not None:
                sent_types.append(out.message.type_name)
            address = resolve(out.node_id)
            if address is None:
                log.warning("no address for %s", out.node_id)
                continue
            data = encode_message(out.message, group, session.session_id)
            in_flight[asyncio.ensure_future(request(address, data, timeout))] = out.node_id

    launch(session.start())
    # keep draining after the session finishes so trailing messages
    # (e.g. commits to departing nodes) are still delivered
    while in_flight:
        finished, _ = await asyncio.wait(in_flight, return_when=asyncio.FIRST_COMPLETED)
        for task in finished:
            node_id = in_flight.pop(task)
            try:
                raw = task.result()
            except (OSError, asyncio.TimeoutError, KintsugiError) as exc:
                log.debug("no reply from %s: %s", node_id, exc)
                continue
            try:
                env = decode_message(raw, group)
                if env.session_id != session.session_id:
                    continue
                reply = env.message
            except MalformedMessage as exc:
                try:
                    decode_header(raw)
                except MalformedMessage:
                    continue
                reply = exc
            launch(session.on_reply(node_id, reply))
    if not session.done:
        session.cancel()
    return session


async def fetch_contacts(addresses: Iterable[str], group: Group, timeout: float = 10.0) -> dict[str, NodeContact]:
    """Ask each node for its id and transport key."""
    addresses = list(addresses)
    sid = new_session_id()
    probe = encode_message(NodeInfoRequest(), group, sid)
    replies = await asyncio.gather(*(request(a, probe, timeout) for a in addresses))
    contacts = {}
    for address, raw in zip(addresses, replies):
        info = decode_message(raw, group).message
        if not isinstance(info, NodeInfo):
            raise MalformedMessage(f"{address} answered NodeInfoRequest with {info.type_name}", 1)
        if info.group != group.name:
            raise MalformedMessage(f"{address} runs group {info.group!r}, expected {group.name!r}", 0)
        contacts[info.node_id] = NodeContact(info.node_id, address, info.transport_pubkey)
    return contacts
