"""Background load for the callback-difference runs: CPU spinners plus loopback UDP noise."""

from __future__ import annotations

import socket
import subprocess
import sys
import threading
import time

from rimbus import _net

SPIN_CODE = "while True:\n    pass\n"


class LoadGenerator:
    def __init__(self, spinners: int = 2, noise_mbytes_s: float = 50.0, datagram: int = 60000):
        self.spinners = spinners
        self.rate = noise_mbytes_s * 1e6
        self.datagram = datagram
        self.sent = 0
        self.received = 0
        self._procs: list[subprocess.Popen] = []
        self._stop = threading.Event()
        self._threads: list[threading.Thread] = []

    def start(self) -> LoadGenerator:
        for _ in range(self.spinners):
            self._procs.append(subprocess.Popen([sys.executable, "-c", SPIN_CODE]))
        if self.rate > 0:
            rx = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
            _net.grow_buffer(rx, 4 << 20)
            rx.bind(("127.0.0.1", 0))
            rx.settimeout(0.2)
            self._threads = [threading.Thread(target=self._sink, args=(rx,), daemon=True),
                             threading.Thread(target=self._source, args=(rx.getsockname(),), daemon=True)]
            for t in self._threads:
                t.start()
        return self

    def _source(self, addr) -> None:
        tx = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
        chunk = b"\xa5" * self.datagram
        t0 = time.perf_counter()
        while not self._stop.is_set():
            due = t0 + self.sent / self.rate
            delay = due - time.perf_counter()
            if delay > 0:
                time.sleep(delay)
            try:
                tx.sendto(chunk, addr)
            except OSError:
                pass
            self.sent += len(chunk)
        tx.close()

    def _sink(self, rx: socket.socket) -> None:
        buf = bytearray(65536)
        while not self._stop.is_set():
            try:
                self.received += rx.recv_into(buf)
            except (TimeoutError, OSError):
                continue
        rx.close()

    def stop(self) -> None:
        self._stop.set()
        for t in self._threads:
            t.join(timeout=2)
        for p in self._procs:
            p.kill()
            p.wait()
        self._procs.clear()
