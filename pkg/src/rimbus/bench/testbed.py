"""Single-host testbed: chip processes under one supervisor.

The supervisor talks to every child over one local TCP connection carrying
length-prefixed envelope frames on the ``_ctl`` topic; each payload is a
JSON object.  Children connect, say hello, receive their setup, report
ready, then answer requests until told to stop.
"""

from __future__ import annotations

import itertools
import json
import logging
import os
import random
import shutil
import socket
import subprocess
import sys
import tempfile
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path

from rimbus.core import (MessageEnvelope, RimbusError, SegmentConfig, SystemConfig, TopicKey,
                         decode_envelope, now_ns)
from rimbus.stream import encode_frame, read_frame

log = logging.getLogger(__name__)

CTL_TOPIC = TopicKey.local("_ctl")
CTL_MAX_FRAME = 64 << 20


class BenchError(RimbusError):
    pass


class CtlChannel:
    """JSON messages over length-prefixed ``_ctl`` envelopes."""

    def __init__(self, sock: socket.socket):
        self.sock = sock
        self._seq = itertools.count()
        self._lock = threading.Lock()

    @classmethod
    def connect(cls, addr: tuple[str, int], timeout: float = 10.0) -> CtlChannel:
        s = socket.create_connection(addr, timeout=timeout)
        s.settimeout(None)
        s.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        return cls(s)

    def send(self, obj: dict) -> None:
        env = MessageEnvelope(CTL_TOPIC, next(self._seq), now_ns(), json.dumps(obj).encode())
        with self._lock:
            self.sock.sendall(encode_frame(env, CTL_MAX_FRAME))

    def recv(self, timeout: float | None = None) -> dict:
        self.sock.settimeout(timeout)
        try:
            frame = read_frame(self.sock, CTL_MAX_FRAME + 1024)
        except (TimeoutError, socket.timeout) as exc:
            raise TimeoutError("control channel timed out") from exc
        if frame is None:
            raise BenchError("control channel closed by peer")
        env = decode_envelope(frame, CTL_MAX_FRAME)
        if env.topic != CTL_TOPIC:
            raise BenchError(f"unexpected control topic {env.topic}")
        return json.loads(env.payload)

    def close(self) -> None:
        try:
            self.sock.close()
        except OSError:
            pass


@dataclass
class ChipProcessSpec:
    """One child process.  Several processes may share a chip id (a chip is a process group)."""

    name: str
    chip_id: str
    role: str
    script: dict = field(default_factory=dict)
    env: dict = field(default_factory=dict)


def bench_config(base: SystemConfig | None = None, *, shaping: dict | None = None,
                 loss_rate: float = 0.0, seed: int = 0, routes: list | None = None,
                 port_base: int | None = None, shm_dir: str | None = None) -> SystemConfig:
    """A config with a private port block and SHM directory so runs never collide."""
    base = base or SystemConfig()
    pb = port_base or random.Random().randrange(20000, 40000, 200)
    cfg = base.for_chip(base.chip_id)
    cfg.segments = SegmentConfig(base.segments.vehicle_group, pb, base.segments.local_group, pb + 10,
                                 base.segments.interface)
    cfg.doorbell_base_port = pb + 40
    cfg.stream_base_port = pb + 100
    cfg.beacon_interval_ms = min(base.beacon_interval_ms, 200)
    cfg.loss_rate = loss_rate
    cfg.seed = seed
    if shaping is not None:
        cfg.shaping_mbps = dict(shaping)
    if routes is not None:
        cfg.bridge_routes = list(routes)
        cfg.bridge_config = None
    cfg.shm_dir = shm_dir or tempfile.mkdtemp(prefix="rimbus-bench-", dir="/dev/shm" if os.path.isdir("/dev/shm") else None)
    cfg.validate()
    return cfg


class Testbed:
    """Starts child processes, waits for them to be ready, relays requests."""

    def __init__(self, cfg: SystemConfig, specs: list[ChipProcessSpec], workdir: str | Path | None = None,
                 ready_timeout: float = 10.0):
        names = [s.name for s in specs]
        if len(names) != len(set(names)):
            raise BenchError(f"process names must be unique: {names}")
        self.cfg = cfg
        self.specs = {s.name: s for s in specs}
        self.ready_timeout = ready_timeout
        self.workdir = Path(workdir) if workdir else Path(tempfile.mkdtemp(prefix="rimbus-tb-"))
        self._own_workdir = workdir is None
        self.procs: dict[str, subprocess.Popen] = {}
        self.channels: dict[str, CtlChannel] = {}
        self._req = itertools.count()
        self._srv: socket.socket | None = None

    def __enter__(self) -> Testbed:
        self.start()
        return self

    def __exit__(self, *exc) -> None:
        self.close()

    def start(self) -> None:
        self._srv = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        self._srv.bind(("127.0.0.1", 0))
        self._srv.listen(len(self.specs) + 4)
        port = self._srv.getsockname()[1]
        env = dict(os.environ)
        env["RIMBUS_RUN_DIR"] = str(self.workdir)
        env.setdefault("PYTHONUNBUFFERED", "1")
        for proc in self.specs.values():
            log_path = self.workdir / f"{proc.name}.log"
            cmd = [sys.executable, "-m", "rimbus.bench.worker", "--ctl", f"127.0.0.1:{port}", "--name", proc.name]
            with open(log_path, "w") as fh:
                self.procs[proc.name] = subprocess.Popen(cmd, stdout=fh, stderr=subprocess.STDOUT,
                                                         env={**env, **proc.env})
        deadline = time.monotonic() + self.ready_timeout + 10.0
        try:
            while len(self.channels) < len(self.specs):
                self._srv.settimeout(max(0.1, deadline - time.monotonic()))
                try:
                    conn, _ = self._srv.accept()
                except (TimeoutError, socket.timeout):
                    raise BenchError("children did not connect: " + self._diagnostic()) from None
                ch = CtlChannel(conn)
                hello = ch.recv(timeout=10.0)
                name = hello.get("name")
                if name not in self.specs or name in self.channels:
                    ch.close()
                    continue
                proc = self.specs[name]
                ch.send({"op": "setup", "role": proc.role, "chip": proc.chip_id, "script": proc.script,
                         "config": self.cfg.to_dict()})
                self.channels[name] = ch
            for name, ch in self.channels.items():
                msg = ch.recv(timeout=max(1.0, deadline - time.monotonic()))
                if not msg.get("ok", False):
                    raise BenchError(f"{name} failed to start: {msg.get('error')}")
        except BaseException:
            self.close()
            raise

    def request(self, name: str, op: str, timeout: float = 120.0, **kw) -> dict:
        ch = self.channels[name]
        rid = next(self._req)
        ch.send({"op": op, "id": rid, **kw})
        try:
            reply = ch.recv(timeout=timeout)
        except (TimeoutError, BenchError) as exc:
            raise BenchError(f"{name}: {op} failed ({exc}); " + self._diagnostic(name)) from exc
        if not reply.get("ok", False):
            raise BenchError(f"{name}: {op} failed: {reply.get('error')}")
        return reply

    def _diagnostic(self, only: str | None = None) -> str:
        parts = []
        for name, p in self.procs.items():
            if only and name != only:
                continue
            tail = ""
            path = self.workdir / f"{name}.log"
            if path.exists():
                tail = " | ".join(path.read_text().strip().splitlines()[-5:])
            parts.append(f"{name}(rc={p.poll()}): {tail}")
        return "; ".join(parts)

    def close(self) -> None:
        for name, ch in list(self.channels.items()):
            try:
                ch.send({"op": "stop", "id": -1})
            except OSError:
                pass
        deadline = time.monotonic() + 5.0
        for p in self.procs.values():
            try:
                p.wait(timeout=max(0.1, deadline - time.monotonic()))
            except subprocess.TimeoutExpired:
                p.kill()
                p.wait()
        for ch in self.channels.values():
            ch.close()
        self.channels.clear()
        if self._srv is not None:
            self._srv.close()
            self._srv = None
        if self.cfg.shm_dir.startswith("/dev/shm/rimbus-bench-"):
            shutil.rmtree(self.cfg.shm_dir, ignore_errors=True)
        if self._own_workdir:
            shutil.rmtree(self.workdir, ignore_errors=True)
