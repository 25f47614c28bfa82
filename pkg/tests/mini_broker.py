"""Just enough of an MQTT 3.1.1 broker to exercise the paho-based endpoint.

Supports CONNECT, PUBLISH (QoS 0/1), SUBSCRIBE with single-level ``+``
filters, UNSUBSCRIBE, PINGREQ and DISCONNECT. No retained messages, no
persistence, no auth.
"""

from __future__ import annotations

import socket
import struct
import threading


def _matches(filt: str, topic: str) -> bool:
    f, t = filt.split("/"), topic.split("/")
    return len(f) == len(t) and all(a == "+" or a == b for a, b in zip(f, t))


def _encode_length(n: int) -> bytes:
    out = bytearray()
    while True:
        byte, n = n % 128, n // 128
        out.append(byte | (0x80 if n else 0))
        if not n:
            return bytes(out)


def _string(s: str) -> bytes:
    b = s.encode()
    return struct.pack("!H", len(b)) + b


class _Client:
    def __init__(self, broker: "MiniBroker", sock: socket.socket):
        self.broker = broker
        self.sock = sock
        self.lock = threading.Lock()
        self.filters: dict[str, int] = {}
        self.next_id = 1

    def send(self, data: bytes) -> None:
        with self.lock:
            try:
                self.sock.sendall(data)
            except OSError:
                pass

    def _read(self, n: int) -> bytes:
        buf = b""
        while len(buf) < n:
            chunk = self.sock.recv(n - len(buf))
            if not chunk:
                raise ConnectionError
            buf += chunk
        return buf

    def _packet(self):
        first = self._read(1)[0]
        mult, length = 1, 0
        while True:
            byte = self._read(1)[0]
            length += (byte & 0x7F) * mult
            mult *= 128
            if not byte & 0x80:
                break
        return first >> 4, first & 0x0F, self._read(length)

    def deliver(self, topic: str, payload: bytes, qos: int) -> None:
        header = _string(topic)
        if qos:
            with self.lock:
                pid, self.next_id = self.next_id, self.next_id % 65535 + 1
            header += struct.pack("!H", pid)
        body = header + payload
        self.send(bytes([0x30 | (qos << 1)]) + _encode_length(len(body)) + body)

    def serve(self) -> None:
        try:
            while True:
                kind, flags, body = self._packet()
                if kind == 1:  # CONNECT
                    self.send(b"\x20\x02\x00\x00")
                elif kind == 3:  # PUBLISH
                    qos = (flags >> 1) & 3
                    tlen = struct.unpack("!H", body[:2])[0]
                    topic = body[2 : 2 + tlen].decode()
                    pos = 2 + tlen
                    if qos:
                        pid = body[pos : pos + 2]
                        pos += 2
                        self.send(b"\x40\x02" + pid)
                    self.broker.route(topic, body[pos:], qos)
                elif kind == 8:  # SUBSCRIBE
                    pid, pos, granted = body[:2], 2, b""
                    while pos < len(body):
                        flen = struct.unpack("!H", body[pos : pos + 2])[0]
                        filt = body[pos + 2 : pos + 2 + flen].decode()
                        qos = body[pos + 2 + flen]
                        pos += 3 + flen
                        with self.broker.lock:
                            self.filters[filt] = qos
                        granted += bytes([qos])
                    self.send(b"\x90" + _encode_length(2 + len(granted)) + pid + granted)
                elif kind == 10:  # UNSUBSCRIBE
                    pid, pos = body[:2], 2
                    while pos < len(body):
                        flen = struct.unpack("!H", body[pos : pos + 2])[0]
                        with self.broker.lock:
                            self.filters.pop(body[pos + 2 : pos + 2 + flen].decode(), None)
                        pos += 2 + flen
                    self.send(b"\xb0\x02" + pid)
                elif kind == 12:  # PINGREQ
                    self.send(b"\xd0\x00")
                elif kind == 14:  # DISCONNECT
                    break
        except (ConnectionError, OSError):
            pass
        finally:
            self.broker.drop(self)
            self.sock.close()


class MiniBroker:
    def __init__(self):
        self.lock = threading.Lock()
        self.clients: list[_Client] = []
        self.published: list[tuple[str, bytes]] = []
        self._server = socket.socket()
        self._server.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        self._server.bind(("127.0.0.1", 0))
        self._server.listen()
        self.port = self._server.getsockname()[1]
        self._thread = threading.Thread(target=self._accept, daemon=True)
        self._thread.start()

    def _accept(self) -> None:
        while True:
            try:
                sock, _ = self._server.accept()
            except OSError:
                return
            client = _Client(self, sock)
            with self.lock:
                self.clients.append(client)
            threading.Thread(target=client.serve, daemon=True).start()

    def route(self, topic: str, payload: bytes, qos: int) -> None:
        with self.lock:
            self.published.append((topic, payload))
            targets = [
                (c, min(qos, max(q for f, q in c.filters.items() if _matches(f, topic))))
                for c in self.clients
                if any(_matches(f, topic) for f in c.filters)
            ]
        for client, q in targets:
            client.deliver(topic, payload, q)

    def drop(self, client: _Client) -> None:
        with self.lock:
            if client in self.clients:
                self.clients.remove(client)

    def kick_all(self) -> None:
        """Sever every client connection, as a broker restart would."""
        with self.lock:
            clients = list(self.clients)
        for c in clients:
            try:
                c.sock.shutdown(socket.SHUT_RDWR)
            except OSError:
                pass

    def close(self) -> None:
        self._server.close()
        self.kick_all()
