"""Child process entry point for the testbed: ``python -m rimbus.bench.worker --ctl HOST:PORT --name N``.

Roles:
    chip    nodes with publishers and/or recording subscribers
    bridge  the message bridge daemon of one chip
    load    CPU spinners plus UDP noise
"""

from __future__ import annotations

import argparse
import logging
import threading
import time
import traceback

import numpy as np

from rimbus.bench.load import LoadGenerator
from rimbus.bench.testbed import CtlChannel
from rimbus.bridge import Bridge
from rimbus.core import Scope, SizeClass, SystemConfig, TopicKey, now_ns
from rimbus.node import Context, create_node

log = logging.getLogger("rimbus.worker")


def topic_of(d: dict) -> TopicKey:
    return TopicKey(Scope.parse(d.get("scope", "VehicleArea")), d["topic"])


class Recorder:
    """Subscription callback that stores (seq, publish_ts, callback_ts, transport)."""

    def __init__(self):
        self.rows: list[tuple] = []
        self.bad = 0
        self._lock = threading.Lock()

    def __call__(self, meta, payload) -> None:
        t = now_ns()
        with self._lock:
            self.rows.append((meta.seq, meta.publish_ts, t, meta.transport.value, len(payload)))

    def take(self) -> list[tuple]:
        with self._lock:
            rows, self.rows = self.rows, []
        return rows


class ChipRole:
    def __init__(self, cfg: SystemConfig, script: dict):
        self.cfg = cfg
        self.ctx = Context(cfg)
        self.nodes = {}
        self.pubs = {}
        self.recorders: dict[str, Recorder] = {}
        self.subs = {}
        for s in script.get("subs", []):
            node = self._node(s["node"])
            rec = Recorder()
            self.recorders[s["node"]] = rec
            self.subs[s["node"]] = node.subscribe(topic_of(s), rec, depth=int(s.get("depth", 16)),
                                                  via=s.get("via", "auto"))
        for p in script.get("pubs", []):
            node = self._node(p["node"])
            self.pubs[topic_of(p)] = node.advertise(topic_of(p))
        self._payloads: dict[tuple, bytes] = {}

    def _node(self, name: str):
        if name not in self.nodes:
            self.nodes[name] = create_node(self.cfg, name, ctx=self.ctx, settle=False)
        return self.nodes[name]

    def op_wait_routes(self, topic: str, scope: str, count: int, wait: float = 10.0, **_) -> dict:
        pub = self.pubs[topic_of({"topic": topic, "scope": scope})]
        deadline = time.monotonic() + wait
        while True:
            plan = pub.plan(SizeClass.SMALL)
            if len(plan) >= count or time.monotonic() > deadline:
                break
            time.sleep(0.02)
        return {"converged": len(plan) >= count,
                "routes": [[a.node, a.chip, t.value if t else None] for a, t in plan]}

    def op_publish(self, topic: str, scope: str, size: int, samples: int, period: float,
                   seed: int = 0, reseed: str | None = None, **_) -> dict:
        pub = self.pubs[topic_of({"topic": topic, "scope": scope})]
        if reseed is not None:
            pub.reseed_loss(reseed)
        key = (size, seed)
        if key not in self._payloads:
            self._payloads[key] = np.random.default_rng(seed).bytes(size)
        payload = self._payloads[key]
        wire0 = pub.wire_bytes
        msgs0 = dict(pub.messages)
        errors0 = pub.route_errors
        t0 = time.perf_counter()
        seqs = []
        for i in range(samples):
            delay = t0 + i * period - time.perf_counter()
            if delay > 0:
                time.sleep(delay)
            seqs.append(pub.publish(payload).seq)
        elapsed = time.perf_counter() - t0
        return {"sent": samples, "first_seq": seqs[0] if seqs else None, "elapsed": elapsed,
                "wire_bytes": pub.wire_bytes - wire0,
                "messages": {t.value: pub.messages[t] - msgs0.get(t, 0) for t in pub.messages},
                "route_errors": pub.route_errors - errors0,
                "routes": [[n, t.value if t else None] for n, t in pub.last_routes]}

    def op_counts(self, **_) -> dict:
        return {"counts": {n: len(r.rows) for n, r in self.recorders.items()}}

    def op_collect(self, **_) -> dict:
        out = {n: r.take() for n, r in self.recorders.items()}
        stats = {n: {"gaps": s.stats.gaps, "queue_drops": s.stats.queue_drops,
                     "reordered": s.stats.reordered} for n, s in self.subs.items()}
        return {"records": out, "stats": stats}

    def close(self) -> None:
        self.ctx.close()


class BridgeRole:
    def __init__(self, cfg: SystemConfig, script: dict):
        self.bridge = Bridge(cfg)

    def op_wait_connected(self, wait: float = 10.0, **_) -> dict:
        return {"connected": self.bridge.wait_connected(wait)}

    def op_stats(self, **_) -> dict:
        rows = []
        for topic, dest, s in self.bridge.stats.rows():
            rows.append({"topic": topic.name, "scope": topic.scope.label, "dest": dest, **vars(s)})
        for e in self.bridge.egress:
            for r in rows:
                if r["topic"] == e.route.topic.name and r["dest"] == e.dest:
                    r["wire_bytes"] = e.sender.bytes_sent
                    r["slow_drops"] = e.sender.slow_drops
                    r["down_drops"] = e.sender.down_drops
        self.bridge.dump_stats()
        return {"rows": rows}

    def close(self) -> None:
        self.bridge.dump_stats()
        self.bridge.close()


class LoadRole:
    def __init__(self, cfg: SystemConfig, script: dict):
        self.gen = LoadGenerator(int(script.get("spinners", 2)), float(script.get("noise_mbytes_s", 50.0))).start()

    def op_stats(self, **_) -> dict:
        return {"sent": self.gen.sent, "received": self.gen.received}

    def close(self) -> None:
        self.gen.stop()


ROLES = {"chip": ChipRole, "bridge": BridgeRole, "load": LoadRole}


def serve(ch: CtlChannel, name: str) -> int:
    ch.send({"op": "hello", "name": name})
    setup = ch.recv(timeout=30.0)
    cfg = SystemConfig.from_dict(setup["config"]).for_chip(setup["chip"])
    try:
        role = ROLES[setup["role"]](cfg, setup.get("script", {}))
    except Exception as exc:
        ch.send({"op": "ready", "ok": False, "error": f"{type(exc).__name__}: {exc}"})
        traceback.print_exc()
        return 1
    ch.send({"op": "ready", "ok": True})
    try:
        while True:
            msg = ch.recv()
            op = msg.pop("op")
            rid = msg.pop("id", None)
            if op == "stop":
                return 0
            fn = getattr(role, f"op_{op.replace('-', '_')}", None)
            if fn is None:
                ch.send({"id": rid, "ok": False, "error": f"unknown op {op!r}"})
                continue
            try:
                ch.send({"id": rid, "ok": True, **fn(**msg)})
            except Exception as exc:
                traceback.print_exc()
                ch.send({"id": rid, "ok": False, "error": f"{type(exc).__name__}: {exc}"})
    finally:
        role.close()


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(prog="rimbus-worker")
    ap.add_argument("--ctl", required=True, help="supervisor address host:port")
    ap.add_argument("--name", required=True)
    ap.add_argument("--log-level", default="WARNING")
    args = ap.parse_args(argv)
    logging.basicConfig(level=args.log_level, format=f"%(asctime)s {args.name} %(name)s %(levelname)s %(message)s")
    host, _, port = args.ctl.rpartition(":")
    ch = CtlChannel.connect((host, int(port)))
    try:
        return serve(ch, args.name)
    finally:
        ch.close()


if __name__ == "__main__":
    raise SystemExit(main())
