"""Application-facing API: nodes, publishers, subscriptions and services.

A :class:`Context` holds the per-process machinery (discovery participant,
in-process bus, one shared-memory dispatcher per topic).  Nodes are cheap
handles on a context.  Tests may build several contexts with distinct
``pid`` values in one interpreter to stand in for separate processes.
"""

from __future__ import annotations

import atexit
import itertools
import logging
import os
import random
import struct
import threading
import time
from collections import OrderedDict, defaultdict
from dataclasses import dataclass
from typing import Callable

from rimbus.bridge import is_bridged, new_writer_id
from rimbus.core import (MessageEnvelope, RimbusError, Scope, SizeClass, SystemConfig, TopicKey,
                         classify_size, encode_envelope, now_ns, pack_header)
from rimbus.dgram import DatagramEndpoint, DatagramReceiver, LossInjector, SendError, send_fanout
from rimbus.discovery import (NODE_TOPIC, Participant, Role, RouteUnavailable, Transport,
                              local_segment, segment_for, select_transport)
from rimbus.link import Lane, shaper_for
from rimbus.shm import (BoundedQueue, ShmMessage, ShmReader, doorbell_for, segment_name,
                        shm_create_or_open)

log = logging.getLogger(__name__)

VIA_CHOICES = ("auto", "datagram", "bridge")
DEFAULT_DEPTH = 16


class DuplicateNode(RimbusError):
    pass


class DuplicateService(RimbusError):
    pass


class NoProvider(RimbusError):
    pass


class RemoteError(RimbusError):
    pass


@dataclass(frozen=True)
class Delivery:
    """Metadata handed to a subscription callback next to the payload."""

    topic: TopicKey
    seq: int
    publish_ts: int
    recv_ts: int
    transport: Transport
    source: object = None


class Context:
    """Per-process state shared by every node of one chip process."""

    def __init__(self, cfg: SystemConfig, pid: int | None = None):
        self.cfg = cfg
        self.chip = cfg.chip_id
        self.pid = os.getpid() if pid is None else pid
        self.participant = Participant(cfg, self.pid)
        self.view = self.participant.view
        self.routes = cfg.routes()
        self.nodes: dict[str, Node] = {}
        self.services: dict[TopicKey, _Service] = {}
        self.writer_ids: set[int] = set()
        self._segments: dict[TopicKey, object] = {}
        self._dispatchers: dict[TopicKey, _ShmDispatcher] = {}
        self._subs: dict[TopicKey, list[Subscription]] = defaultdict(list)
        self._client: _ServiceClient | None = None
        self._lock = threading.RLock()
        self._closed = False

    # -- shared memory --------------------------------------------------------
    def segment(self, topic: TopicKey):
        with self._lock:
            seg = self._segments.get(topic)
            if seg is None:
                seg = shm_create_or_open(segment_name(self.chip, topic), self.cfg.shm_slot_count,
                                         self.cfg.shm_slot_size, self.cfg.shm_dir)
                seg.doorbell = doorbell_for(self.cfg)
                self._segments[topic] = seg
            return seg

    def bridged_from_here(self, topic: TopicKey) -> bool:
        return any(r.topic == topic and r.source == self.chip for r in self.routes)

    def bridged(self, topic: TopicKey, dest: str) -> bool:
        return is_bridged(self.routes, topic, self.chip, dest)

    # -- local subscriptions ----------------------------------------------------
    def local_subs(self, topic: TopicKey) -> list[Subscription]:
        with self._lock:
            return list(self._subs.get(topic, ()))

    def _attach(self, sub: Subscription) -> None:
        with self._lock:
            self._subs[sub.topic].append(sub)
            if sub.topic not in self._dispatchers:
                self._dispatchers[sub.topic] = _ShmDispatcher(self, sub.topic)

    def _detach(self, sub: Subscription) -> None:
        with self._lock:
            subs = self._subs.get(sub.topic, [])
            if sub in subs:
                subs.remove(sub)
            if not subs:
                disp = self._dispatchers.pop(sub.topic, None)
                if disp is not None:
                    disp.close()

    @property
    def client(self) -> _ServiceClient:
        with self._lock:
            if self._client is None:
                self._client = _ServiceClient(self)
            return self._client

    def close(self) -> None:
        with self._lock:
            if self._closed:
                return
            self._closed = True
            nodes = list(self.nodes.values())
        for n in nodes:
            n.close()
        for d in list(self._dispatchers.values()):
            d.close()
        self._dispatchers.clear()
        if self._client is not None:
            self._client.close()
        self.participant.close()
        for seg in self._segments.values():
            if seg.doorbell is not None:
                seg.doorbell.close()
            seg.close()
        _contexts.pop((self.chip, self.pid), None)


_contexts: dict[tuple[str, int], Context] = {}
_contexts_lock = threading.Lock()


def get_context(cfg: SystemConfig, pid: int | None = None) -> Context:
    key = (cfg.chip_id, os.getpid() if pid is None else pid)
    with _contexts_lock:
        ctx = _contexts.get(key)
        if ctx is None or ctx._closed:
            ctx = _contexts[key] = Context(cfg, key[1])
        return ctx


@atexit.register
def _close_all() -> None:
    for ctx in list(_contexts.values()):
        try:
            ctx.close()
        except Exception:  # pragma: no cover - best effort at interpreter exit
            pass


class _ShmDispatcher:
    """One ring reader per topic per process, fanning out to every local subscription."""

    def __init__(self, ctx: Context, topic: TopicKey):
        self.ctx = ctx
        self.topic = topic
        self.reader = ShmReader(ctx.segment(topic), doorbell=doorbell_for(ctx.cfg))
        self._stop = threading.Event()
        self._thread = threading.Thread(target=self._loop, daemon=True, name=f"rimbus-shm-{topic.name}")
        self._thread.start()

    def _loop(self) -> None:
        small_limit = self.ctx.cfg.large_threshold_bytes
        while not self._stop.is_set():
            items = self.reader.read(timeout=0.2)
            if not items:
                continue
            subs = self.ctx.local_subs(self.topic)
            for item in items:
                if not isinstance(item, ShmMessage):
                    for s in subs:
                        s.stats.gaps += item.count
                    continue
                if item.writer_id in self.ctx.writer_ids:
                    continue  # own publishers reach local subscriptions over the bus
                env = item.env
                recv = now_ns()
                if item.bridged:
                    meta = Delivery(env.topic, env.seq, env.publish_ts, recv, Transport.BRIDGED_STREAM, item.writer_id)
                    small_va = self.topic.scope is Scope.VEHICLE_AREA and len(env.payload) < small_limit
                    for s in subs:
                        if s.via == "datagram" or (s.via == "auto" and small_va):
                            continue  # that copy arrives by datagram
                        s._deliver_inline(meta, env.payload)
                else:
                    meta = Delivery(env.topic, env.seq, env.publish_ts, recv, Transport.SHM, item.writer_id)
                    for s in subs:
                        s._deliver_inline(meta, env.payload)

    def close(self) -> None:
        self._stop.set()
        self._thread.join(timeout=2)
        self.reader.close()


# ---------------------------------------------------------------------------

class Node:
    def __init__(self, ctx: Context, name: str):
        self.ctx = ctx
        self.name = name
        self.chip_id = ctx.chip
        self.publishers: list[Publisher] = []
        self.subscriptions: list[Subscription] = []
        self.services: list[_Service] = []
        self.ctx.participant.add(name, NODE_TOPIC, Role.NODE, segment=local_segment(ctx.cfg))

    @property
    def participant(self) -> Participant:
        return self.ctx.participant

    def advertise(self, topic: TopicKey | str) -> Publisher:
        pub = Publisher(self, _topic(topic))
        self.publishers.append(pub)
        return pub

    def subscribe(self, topic: TopicKey | str, callback: Callable[[Delivery, bytes], None],
                  depth: int = DEFAULT_DEPTH, via: str = "auto") -> Subscription:
        sub = Subscription(self, _topic(topic), callback, depth, via)
        self.subscriptions.append(sub)
        return sub

    def close(self) -> None:
        for s in self.subscriptions:
            s.close()
        for p in self.publishers:
            p.close()
        for svc in self.services:
            svc.close()
        self.ctx.participant.remove((self.chip_id, self.name, NODE_TOPIC, Role.NODE))
        self.ctx.nodes.pop(self.name, None)


def _topic(t: TopicKey | str) -> TopicKey:
    return t if isinstance(t, TopicKey) else TopicKey.local(t)


def create_node(cfg: SystemConfig, name: str, ctx: Context | None = None, settle: bool = True) -> Node:
    """Create a node; names are unique per chip.

    ``settle`` waits for one beacon round on a fresh context so that a
    same-named node in another process has been heard before we decide.
    """
    ctx = ctx or get_context(cfg)
    if name in ctx.nodes:
        raise DuplicateNode(f"node {name!r} already exists on chip {ctx.chip}")
    if settle:
        remaining = ctx.cfg.beacon_interval_s * 1.2 - (time.monotonic() - ctx.participant.started_at)
        if remaining > 0:
            time.sleep(remaining)
    others = [a for a in ctx.view.entries(NODE_TOPIC, Role.NODE, chip=ctx.chip, node=name) if a.pid != ctx.pid]
    if others:
        raise DuplicateNode(f"node {name!r} already exists on chip {ctx.chip} (pid {others[0].pid})")
    node = Node(ctx, name)
    ctx.nodes[name] = node
    return node


class Publisher:
    """Routes each publish to every known subscriber over the transport chosen for it."""

    def __init__(self, node: Node, topic: TopicKey):
        self.node = node
        self.ctx = node.ctx
        self.topic = topic
        self.cfg = node.ctx.cfg
        self.writer_id = new_writer_id(self.ctx.pid)
        self.ctx.writer_ids.add(self.writer_id)
        self.messages: dict[Transport, int] = defaultdict(int)
        self.bytes: dict[Transport, int] = defaultdict(int)
        self.route_errors = 0
        self.last_routes: list[tuple[str, Transport]] = []
        self._seq = itertools.count()
        self._seq_lock = threading.Lock()
        self._endpoints: dict[tuple, DatagramEndpoint] = {}
        self._send_lock = threading.Lock()
        hints = {}
        if self.ctx.bridged_from_here(topic):
            hints["shm"] = segment_name(self.ctx.chip, topic)
        self.ann = self.ctx.participant.add(node.name, topic, Role.PUBLISHER, hints)

    def next_seq(self) -> int:
        with self._seq_lock:
            return next(self._seq)

    def _endpoint(self, sub) -> DatagramEndpoint:
        key = (sub.chip, sub.pid, sub.node, int(sub.hints["dgram_port"]))
        ep = self._endpoints.get(key)
        if ep is None:
            loss = None
            if self.cfg.loss_rate > 0:
                loss = LossInjector(self.cfg.loss_rate,
                                    f"{self.cfg.seed}:{self.topic}:{sub.chip}:{sub.node}")
            shaper = shaper_for(self.cfg, Lane.ETHERNET) if sub.chip != self.ctx.chip else None
            ep = DatagramEndpoint((self.cfg.segments.interface, key[3]), self.cfg.datagram_cap_bytes,
                                  shaper, loss)
            self._endpoints[key] = ep
        return ep

    def plan(self, size: SizeClass) -> list[tuple[object, Transport]]:
        """(subscriber announcement, transport) for every remote-or-other-process subscriber."""
        me = (self.ctx.chip, self.ctx.pid)
        out = []
        for sub in self.ctx.view.entries(self.topic, Role.SUBSCRIBER):
            if (sub.chip, sub.pid) == me:
                continue  # reached through the in-process bus
            bridged = sub.chip != self.ctx.chip and self.ctx.bridged(self.topic, sub.chip)
            t = select_transport(me, (sub.chip, sub.pid), size, bridged).transport
            via = sub.hints.get("via", "auto")
            if t in (Transport.DATAGRAM, Transport.BRIDGED_STREAM):
                if via == "datagram":
                    t = Transport.DATAGRAM
                elif via == "bridge" and bridged:
                    t = Transport.BRIDGED_STREAM
                elif via == "bridge":
                    t = None  # asked for the bridge but no route exists
            out.append((sub, t))
        return out

    def publish(self, payload: bytes) -> MessageEnvelope:
        env = MessageEnvelope(self.topic, self.next_seq(), now_ns(), bytes(payload))
        self.publish_envelope(env)
        return env

    def publish_envelope(self, env: MessageEnvelope) -> None:
        size = classify_size(len(env.payload), self.cfg.large_threshold_bytes)
        n_local = 0
        subs = self.ctx.local_subs(self.topic)
        if subs:
            meta = Delivery(env.topic, env.seq, env.publish_ts, now_ns(), Transport.INTRA, self.writer_id)
            for s in subs:
                s._deliver(meta, env.payload)
            n_local = len(subs)
        if n_local:
            self.messages[Transport.INTRA] += 1
        plan = self.plan(size)
        need_shm = self.ctx.bridged_from_here(self.topic) or any(
            t in (Transport.SHM, Transport.BRIDGED_STREAM) for _, t in plan)
        routes = []
        with self._send_lock:
            if need_shm:
                try:
                    hdr = pack_header(env.topic, env.seq, env.publish_ts, len(env.payload), env.checksum)
                    self.ctx.segment(self.topic).publish_parts(hdr, env.payload, self.writer_id)
                    self.messages[Transport.SHM] += 1
                    self.bytes[Transport.SHM] += len(hdr) + len(env.payload)
                except RimbusError as exc:
                    self.route_errors += 1
                    log.warning("shm publish of %s failed: %s", self.topic, exc)
            targets = []
            for sub, t in plan:
                routes.append((sub.node, t))
                if t is None:
                    self.route_errors += 1
                elif t is Transport.DATAGRAM:
                    if "dgram_port" in sub.hints:
                        targets.append(self._endpoint(sub))
                    else:
                        self.route_errors += 1
                        log.debug("%s", RouteUnavailable(f"{sub.node}@{sub.chip} announced no datagram port"))
            if targets:
                frame = encode_envelope(env, self.cfg.max_payload_bytes)
                failed = send_fanout(targets, frame)
                for ep, exc in failed:
                    self.route_errors += 1
                    log.debug("route to %s failed: %s", ep.peer, exc)
                ok = len(targets) - len(failed)
                self.messages[Transport.DATAGRAM] += ok
                self.bytes[Transport.DATAGRAM] += ok * len(frame)
        self.last_routes = routes

    def reseed_loss(self, tag: str) -> None:
        """Restart every loss injector from a seed derived from ``tag`` (repeatable bench cells)."""
        for key, ep in self._endpoints.items():
            if ep.loss is not None:
                ep.loss = LossInjector(ep.loss.rate, f"{self.cfg.seed}:{tag}:{self.topic}:{key[0]}:{key[2]}")

    @property
    def wire_bytes(self) -> int:
        """Datagram bytes put on the wire, fragment headers included."""
        return sum(ep.bytes_sent for ep in self._endpoints.values())

    def close(self) -> None:
        self.ctx.participant.remove(self.ann.key)
        for ep in self._endpoints.values():
            ep.close()
        self._endpoints.clear()


@dataclass
class SubscriptionStats:
    count: int = 0
    last_seq: int = -1
    gaps: int = 0
    queue_drops: int = 0
    reordered: int = 0


class Subscription:
    """Funnels every transport into one queue; callbacks run serially under one lock.

    The worker thread normally runs the callback.  The shared-memory
    dispatcher may run it inline when the subscription is idle, so every
    local subscriber of one ring message is served back to back by one
    thread instead of waiting on separate thread wake-ups.
    """

    def __init__(self, node: Node, topic: TopicKey, callback: Callable[[Delivery, bytes], None],
                 depth: int = DEFAULT_DEPTH, via: str = "auto"):
        if callback is None:
            raise ValueError("subscribe needs a callback")
        if via not in VIA_CHOICES:
            raise ValueError(f"via must be one of {VIA_CHOICES}")
        self.node = node
        self.ctx = node.ctx
        self.topic = topic
        self.callback = callback
        self.via = via
        self.stats = SubscriptionStats()
        self.errors = 0
        self.queue = BoundedQueue(depth)
        self.inline = 0
        self._serial = threading.Lock()
        self._last: dict[tuple, int] = {}
        self._stop = threading.Event()
        self._rx: DatagramReceiver | None = None
        hints = {"via": via}
        if topic.scope is Scope.VEHICLE_AREA:
            cfg = self.ctx.cfg
            self._rx = DatagramReceiver(self._on_datagram, port=0, host=cfg.segments.interface,
                                        reassembly_timeout_s=cfg.reassembly_timeout_ms / 1000.0,
                                        max_payload=cfg.max_payload_bytes)
            hints["dgram_port"] = self._rx.port
        self._worker = threading.Thread(target=self._run, daemon=True, name=f"rimbus-sub-{topic.name}")
        self._worker.start()
        self.ctx._attach(self)
        self.ann = self.ctx.participant.add(node.name, topic, Role.SUBSCRIBER, hints)

    def _on_datagram(self, env: MessageEnvelope) -> None:
        self._deliver(Delivery(env.topic, env.seq, env.publish_ts, now_ns(), Transport.DATAGRAM), env.payload)

    def _deliver(self, meta: Delivery, payload: bytes) -> None:
        before = self.queue.dropped
        self.queue.put((meta, payload))
        if self.queue.dropped != before:
            self.stats.queue_drops += 1
            self.stats.gaps += 1

    def _deliver_inline(self, meta: Delivery, payload: bytes) -> None:
        """Run the callback in the caller's thread if idle with nothing queued, else enqueue."""
        if self._serial.acquire(blocking=False):
            try:
                if not len(self.queue) and not self._stop.is_set():
                    self.inline += 1
                    self._process(meta, payload)
                    return
            finally:
                self._serial.release()
        self._deliver(meta, payload)

    def _run(self) -> None:
        while not self._stop.is_set():
            if not self.queue.wait(timeout=0.2):
                continue
            with self._serial:  # pop under the lock: an inline delivery cannot overtake this item
                item = self.queue.get(timeout=0)
                if item is not None:
                    self._process(*item)

    def _process(self, meta: Delivery, payload: bytes) -> None:
        key = (meta.transport, meta.source)
        last = self._last.get(key)
        if last is not None:
            if meta.seq > last + 1:
                self.stats.gaps += meta.seq - last - 1
            elif meta.seq <= last:
                self.stats.reordered += 1
        self._last[key] = meta.seq
        self.stats.count += 1
        self.stats.last_seq = meta.seq
        try:
            self.callback(meta, payload)
        except Exception:
            self.errors += 1
            log.exception("callback for %s failed", self.topic)

    @property
    def port(self) -> int | None:
        return self._rx.port if self._rx is not None else None

    def close(self) -> None:
        if self._stop.is_set():
            return
        self.ctx.participant.remove(self.ann.key)
        self.ctx._detach(self)
        self._stop.set()
        self.queue.close()
        self._worker.join(timeout=2)
        if self._rx is not None:
            self._rx.close()


# ---------------------------------------------------------------------------
# request / reply over the datagram path

REQ = struct.Struct("<QH")    # call_id | reply_port
RESP = struct.Struct("<QB")   # call_id | status
OK, FAILED = 0, 1


class _Service:
    def __init__(self, node: Node, topic: TopicKey, handler: Callable[[bytes], bytes]):
        self.node = node
        self.ctx = node.ctx
        self.topic = topic
        self.handler = handler
        self.calls = 0
        self._replies: OrderedDict[tuple, bytes | None] = OrderedDict()
        self._endpoints: dict[int, DatagramEndpoint] = {}
        self._work = BoundedQueue(256)
        self._stop = threading.Event()
        self._rx = DatagramReceiver(self._work.put, host=self.ctx.cfg.segments.interface)
        self._thread = threading.Thread(target=self._loop, daemon=True, name=f"rimbus-srv-{topic.name}")
        self._thread.start()
        self.ann = self.ctx.participant.add(node.name, topic, Role.SERVICE, {"dgram_port": self._rx.port})

    def _loop(self) -> None:
        while not self._stop.is_set():
            env = self._work.get(timeout=0.2)
            if env is None:
                continue
            if len(env.payload) < REQ.size:
                continue
            call_id, reply_port = REQ.unpack_from(env.payload)
            key = (reply_port, call_id)
            if key in self._replies:
                cached = self._replies[key]
                if cached is not None:
                    self._send(reply_port, cached)  # retransmitted request: resend, do not re-run
                continue
            self._replies[key] = None
            self.calls += 1
            try:
                body = bytes(self.handler(env.payload[REQ.size:]))
                reply = RESP.pack(call_id, OK) + body
            except Exception as exc:
                reply = RESP.pack(call_id, FAILED) + str(exc).encode("utf-8", "replace")
            self._replies[key] = reply
            while len(self._replies) > 1024:
                self._replies.popitem(last=False)
            self._send(reply_port, reply)

    def _send(self, port: int, body: bytes) -> None:
        ep = self._endpoints.get(port)
        if ep is None:
            ep = self._endpoints[port] = DatagramEndpoint((self.ctx.cfg.segments.interface, port),
                                                          self.ctx.cfg.datagram_cap_bytes)
        env = MessageEnvelope(self.topic, 0, now_ns(), body)
        try:
            ep.send_frame(encode_envelope(env))
        except SendError as exc:
            log.warning("service reply on %s failed: %s", self.topic, exc)

    def close(self) -> None:
        if self._stop.is_set():
            return
        self.ctx.participant.remove(self.ann.key)
        self.ctx.services.pop(self.topic, None)
        self._stop.set()
        self._work.close()
        self._thread.join(timeout=2)
        self._rx.close()
        for ep in self._endpoints.values():
            ep.close()


class _ServiceClient:
    def __init__(self, ctx: Context):
        self.ctx = ctx
        self.retransmits = 0
        self._ids = itertools.count(random.getrandbits(32))
        self._pending: dict[int, list] = {}
        self._lock = threading.Lock()
        self._rx = DatagramReceiver(self._on_reply, host=ctx.cfg.segments.interface)
        self._endpoints: dict[int, DatagramEndpoint] = {}

    def _on_reply(self, env: MessageEnvelope) -> None:
        if len(env.payload) < RESP.size:
            return
        call_id, status = RESP.unpack_from(env.payload)
        with self._lock:
            slot = self._pending.get(call_id)
        if slot is not None and not slot[0].is_set():
            slot[1] = (status, env.payload[RESP.size:])
            slot[0].set()

    def call(self, topic: TopicKey, request: bytes, timeout: float) -> bytes:
        self.ctx.participant.join(segment_for(topic, self.ctx.cfg))
        providers = self._providers(topic)
        if not providers:
            # one full beacon round plus slack, so a live provider has been heard
            self.ctx.view.wait_for(lambda v: bool(self._providers(topic)), 1.5 * self.ctx.cfg.beacon_interval_s)
            providers = self._providers(topic)
        if not providers:
            raise NoProvider(f"no provider for service {topic}")
        port = int(providers[0].hints["dgram_port"])
        call_id = next(self._ids) & 0xFFFFFFFFFFFFFFFF
        slot = [threading.Event(), None]
        with self._lock:
            self._pending[call_id] = slot
        frame = encode_envelope(MessageEnvelope(topic, call_id, now_ns(),
                                                REQ.pack(call_id, self._rx.port) + bytes(request)))
        try:
            ep = self._endpoints.get(port)
            if ep is None:
                ep = self._endpoints[port] = DatagramEndpoint((self.ctx.cfg.segments.interface, port),
                                                              self.ctx.cfg.datagram_cap_bytes)
            ep.send_frame(frame)
            if not slot[0].wait(timeout / 2):
                self.retransmits += 1
                ep.send_frame(frame)
                if not slot[0].wait(timeout / 2):
                    raise TimeoutError(f"service {topic} did not answer within {timeout:.3f}s")
        finally:
            with self._lock:
                self._pending.pop(call_id, None)
        status, body = slot[1]
        if status != OK:
            raise RemoteError(body.decode("utf-8", "replace"))
        return body

    def _providers(self, topic: TopicKey) -> list:
        found = [a for a in self.ctx.view.entries(topic, Role.SERVICE) if "dgram_port" in a.hints]
        # prefer a provider on this chip
        return sorted(found, key=lambda a: (a.chip != self.ctx.chip, a.chip, a.node))

    def close(self) -> None:
        self._rx.close()
        for ep in self._endpoints.values():
            ep.close()


def _service_topic(name: str | TopicKey, scope: Scope) -> TopicKey:
    return name if isinstance(name, TopicKey) else TopicKey(scope, name)


def service_register(node: Node, name: str | TopicKey, handler: Callable[[bytes], bytes],
                     scope: Scope = Scope.VEHICLE_AREA) -> _Service:
    topic = _service_topic(name, scope)
    ctx = node.ctx
    if topic in ctx.services:
        raise DuplicateService(f"service {topic} already registered on chip {ctx.chip}")
    others = [a for a in ctx.view.entries(topic, Role.SERVICE, chip=ctx.chip) if a.pid != ctx.pid]
    if others:
        raise DuplicateService(f"service {topic} already provided by {others[0].node} on chip {ctx.chip}")
    svc = _Service(node, topic, handler)
    ctx.services[topic] = svc
    node.services.append(svc)
    return svc


def service_call(node: Node, name: str | TopicKey, request: bytes, timeout: float = 1.0,
                 scope: Scope = Scope.VEHICLE_AREA) -> bytes:
    return node.ctx.client.call(_service_topic(name, scope), request, timeout)


def advertise(node: Node, topic: TopicKey | str) -> Publisher:
    return node.advertise(topic)


def publish(pub: Publisher, payload: bytes) -> MessageEnvelope:
    return pub.publish(payload)


def subscribe(node: Node, topic: TopicKey | str, callback, **kw) -> Subscription:
    return node.subscribe(topic, callback, **kw)
