"""Simulated networks of peers and the scenario runner.

:class:`SimNetwork` owns a :class:`Simulator` and the peers living on it,
and knows the global-view oracles: the sorted live-ID ring and a single
centralized store holding the union of every live peer's triples.

A scenario is a JSON array of event records ``{"at": ms, "action": ...}``
in non-decreasing time order.  An optional leading ``setup`` record
carries the simulator settings, the cluster mapping and node defaults.
"""

from __future__ import annotations

import json
import logging
import math
import os
from collections import Counter
from importlib import resources

from .net.sim import SimConfig, Simulator
from .node import ContextPeer, NodeConfig, build_wrapper
from .rdql import ResultSet, evaluate_local, parse_query
from .ring import arcs_contiguous, ideal_ring
from .semantic import ClusterMapping, PartialResult
from .store import TripleStore
from .terms import parse_triple

log = logging.getLogger(__name__)


class ScenarioError(ValueError):
    """The scenario file itself is malformed."""


class SimNetwork:
    """A set of ContextPeers sharing one simulator."""

    def __init__(self, sim_config: SimConfig = None, mapping: ClusterMapping = None,
                 defaults: dict = None):
        self.sim = Simulator(sim_config or SimConfig())
        self.mapping = mapping or ClusterMapping()
        self.defaults = dict(defaults or {})
        self.peers = {}
        self.departed = {}

    # -- membership -----------------------------------------------------------

    def spawn(self, address, triples=(), **overrides) -> ContextPeer:
        if address in self.peers:
            raise ScenarioError(f"node {address} already exists")
        opts = dict(self.defaults)
        opts.update(overrides)
        opts["address"] = address
        cfg = NodeConfig.from_dict(opts)
        peer = ContextPeer(cfg, self.sim, mapping=self.mapping)
        for t in triples:
            peer.store.insert(parse_triple(t) if isinstance(t, str) else t)
        peer.record_changes = True
        self.peers[address] = peer
        return peer

    def start(self, address, bootstrap=None):
        peer = self.peers[address]
        if bootstrap is None:
            live = self.live()
            bootstrap = live[0].address if live else None
        peer.config.bootstrap = bootstrap
        return peer.start()

    def join(self, address, triples=(), bootstrap=None, wait=True, **overrides):
        """Spawn and start a peer; by default run until its join completes."""
        self.spawn(address, triples, **overrides)
        fut = self.start(address, bootstrap)
        if wait:
            self.sim.run_until_done(fut, limit=60_000)
            if fut.exception() is not None:
                raise fut.exception()
        return fut

    def leave(self, address):
        peer = self.peers.pop(address)
        peer.shutdown()
        self.departed[address] = peer

    def crash(self, address):
        peer = self.peers.pop(address)
        peer.crash()
        self.departed[address] = peer

    def live(self):
        return [p for _, p in sorted(self.peers.items()) if p.running and p.ring is not None]

    def peer(self, address) -> ContextPeer:
        try:
            return self.peers[address]
        except KeyError:
            raise ScenarioError(f"unknown node {address}") from None

    # -- time -----------------------------------------------------------------

    @property
    def period(self):
        return self.defaults.get("stabilize_period", NodeConfig.stabilize_period)

    def rounds(self, n=1):
        self.sim.run_for(n * self.period)

    def settle(self, max_rounds=None) -> int:
        """Run stabilization rounds until the ring matches the oracle.

        Returns the number of rounds taken, or -1 if ``max_rounds`` passed.
        """
        if max_rounds is None:
            max_rounds = 4 * max(1, math.ceil(math.log2(max(2, len(self.peers))))) + 20
        for k in range(max_rounds + 1):
            if self.ring_converged():
                return k
            self.rounds(1)
        return -1

    # -- oracles --------------------------------------------------------------

    def ring_mismatches(self) -> list:
        live = self.live()
        if not live:
            return []
        by_id = {p.ring.me.id: p for p in live}
        ideal = ideal_ring(by_id)
        bad = []
        for node_id, (pred, succ) in ideal.items():
            p = by_id[node_id]
            have_succ = p.ring.successor.id
            have_pred = p.ring.predecessor.id if p.ring.predecessor else None
            want_pred = pred if len(live) > 1 else None
            if have_succ != succ or have_pred != want_pred:
                bad.append(p.address)
        return bad

    def ring_converged(self) -> bool:
        return not self.ring_mismatches()

    def arcs_ok(self) -> bool:
        return arcs_contiguous([p.ring.me.id for p in self.live()],
                               self.live()[0].config.prefix_bits if self.live() else 16)

    def central_store(self) -> TripleStore:
        store = TripleStore(mapping=self.mapping)
        for p in self.live():
            for t in p.store:
                store.insert(t)
        return store

    def oracle(self, text) -> ResultSet:
        q = parse_query(text) if isinstance(text, str) else text
        return evaluate_local(q, self.central_store())

    # -- client helpers -------------------------------------------------------

    def wait(self, fut, limit=60_000):
        self.sim.run_until_done(fut, limit=limit)
        if not fut.done():
            raise TimeoutError("simulated operation did not finish")
        return fut.result()

    def query(self, at, text, **kw):
        return self.wait(self.peer(at).query(text, **kw))

    def hop_histogram(self) -> Counter:
        hist = Counter()
        for p in list(self.peers.values()) + list(self.departed.values()):
            if p.ring is not None:
                hist.update(p.ring.hop_hist)
        return hist


# -- scenario runner ---------------------------------------------------------

ACTIONS = ("setup", "spawn", "join", "leave", "crash", "insert", "remove", "query",
           "subscribe", "unsubscribe", "tick", "cut", "heal", "settle", "assert")


def load_scenario(source):
    """Parse a scenario from a path, a bundled fixture name or JSON text."""
    if isinstance(source, (list, dict)):
        data = source
    else:
        text = None
        if os.path.exists(source):
            with open(source, encoding="utf-8") as fh:
                text = fh.read()
        else:
            name = source if source.endswith(".scenario") else source + ".scenario"
            bundled = resources.files("ctxpeers") / "scenarios" / name
            if bundled.is_file():
                text = bundled.read_text(encoding="utf-8")
            elif source.lstrip().startswith(("[", "{")):
                text = source
        if text is None:
            raise ScenarioError(f"no scenario {source!r}")
        try:
            data = json.loads(text)
        except ValueError as exc:
            raise ScenarioError(f"scenario is not JSON: {exc}") from None
    if isinstance(data, dict):
        events = data.get("events", [])
        if not isinstance(events, list):
            raise ScenarioError("'events' must be a JSON array")
        setup = {k: v for k, v in data.items() if k != "events"}
        data = ([dict(setup, action="setup", at=0)] if setup else []) + events
    if not isinstance(data, list):
        raise ScenarioError("scenario must be a JSON array of events")
    last = 0
    for i, ev in enumerate(data):
        if not isinstance(ev, dict) or ev.get("action") not in ACTIONS:
            raise ScenarioError(f"event {i}: unknown or missing action")
        at = ev.get("at", last)
        if not isinstance(at, int) or at < last:
            raise ScenarioError(f"event {i}: time {at!r} precedes {last}")
        if ev["action"] == "setup" and i != 0:
            raise ScenarioError(f"event {i}: setup must come first")
        last = at
    return data


class ScenarioRunner:
    def __init__(self, events, seed=None, base_dir=None):
        self.events = events
        self.seed = seed
        self.base_dir = base_dir
        self.net = None
        self.queries = {}
        self.subs = {}
        self.results = []

    def _setup(self, ev):
        sim = dict(ev.get("sim", {}))
        if self.seed is not None:
            sim["seed"] = self.seed
        elif "seed" in ev:
            sim["seed"] = ev["seed"]
        sim.setdefault("codec", True)
        mapping = ClusterMapping.parse(ev.get("mapping", []))
        self.net = SimNetwork(SimConfig(**sim), mapping, ev.get("defaults", {}))

    def run(self) -> dict:
        events = self.events
        if not events or events[0]["action"] != "setup":
            events = [{"action": "setup", "at": 0}] + list(events)
        for i, ev in enumerate(events):
            if ev["action"] == "setup":
                self._setup(ev)
                continue
            self.net.sim.run_until(ev.get("at", self.net.sim.now()))
            try:
                getattr(self, "do_" + ev["action"])(ev)
            except ScenarioError:
                raise
            except (KeyError, TypeError, ValueError) as exc:
                raise ScenarioError(f"event {i} ({ev['action']}): {exc!r}") from None
        return self.report()

    def report(self) -> dict:
        sim = self.net.sim
        failed = [r for r in self.results if not r["ok"]]
        hist = self.net.hop_histogram()
        return {
            "seed": sim.seed,
            "passed": not failed,
            "asserts": self.results,
            "first_failure": failed[0] if failed else None,
            "metrics": dict(sim.report(),
                            hops={str(k): hist[k] for k in sorted(hist)},
                            nodes=len(self.net.live()),
                            log_digest=sim.digest()),
        }

    # -- actions --------------------------------------------------------------

    def _config(self, ev):
        cfg = dict(ev.get("config", {}))
        for key in ("wrappers",):
            if key in ev:
                cfg[key] = ev[key]
        return cfg

    def do_spawn(self, ev):
        peer = self.net.spawn(ev["node"], ev.get("triples", ()), **self._config(ev))
        peer.base_dir = self.base_dir
        if ev.get("join", True):
            self.net.start(ev["node"], ev.get("bootstrap"))

    def do_join(self, ev):
        if ev["node"] not in self.net.peers:
            self.do_spawn(dict(ev, join=True))
        else:
            self.net.start(ev["node"], ev.get("bootstrap"))

    def do_leave(self, ev):
        self.net.leave(ev["node"])

    def do_crash(self, ev):
        self.net.crash(ev["node"])

    def _triples(self, ev):
        items = ev.get("triples") or [ev["triple"]]
        return [parse_triple(t) for t in items]

    def do_insert(self, ev):
        peer = self.net.peer(ev["node"])
        for t in self._triples(ev):
            peer.put(t)

    def do_remove(self, ev):
        peer = self.net.peer(ev["node"])
        for t in self._triples(ev):
            peer.remove(t)

    def do_query(self, ev):
        name = ev.get("name", f"q{len(self.queries) + 1}")
        peer = self.net.peer(ev["node"])
        q = parse_query(ev["text"])
        oracle = evaluate_local(q, self.net.central_store())
        self.queries[name] = (peer.query(q, ev.get("partial_ok")), oracle)

    def do_subscribe(self, ev):
        name = ev.get("name", f"s{len(self.subs) + 1}")
        peer = self.net.peer(ev["node"])
        got = []
        fut = peer.subscribe(ev["pattern"], ev.get("filters", ()), ev.get("lease"),
                             tuple(ev.get("events", ("added", "removed"))),
                             callback=lambda *args: got.append(args),
                             auto_renew=ev.get("auto_renew", True))
        self.subs[name] = {"future": fut, "node": ev["node"], "callbacks": got,
                           "since": self.net.sim.now()}

    def do_unsubscribe(self, ev):
        entry = self.subs[ev["name"]]
        sub_id = entry["future"].result()[0]
        self.net.peer(entry["node"]).unsubscribe(sub_id)

    def do_tick(self, ev):
        nodes = [ev["node"]] if "node" in ev else sorted(self.net.peers)
        for addr in nodes:
            self.net.peer(addr).tick_wrappers()

    def do_cut(self, ev):
        self.net.sim.cut(ev["a"], ev["b"])

    def do_heal(self, ev):
        self.net.sim.heal(ev["a"], ev["b"])

    def do_settle(self, ev):
        self.net.settle(ev.get("rounds"))

    # -- asserts --------------------------------------------------------------

    def do_assert(self, ev):
        check = ev["check"]
        fn = getattr(self, "check_" + check, None)
        if fn is None:
            raise ScenarioError(f"unknown assert {check!r}")
        ok, detail = fn(ev)
        self.results.append({"at": self.net.sim.now(), "check": check,
                             "label": ev.get("label", check), "ok": bool(ok), "detail": detail})

    def _query(self, ev):
        name = ev["query"]
        if name not in self.queries:
            raise ScenarioError(f"assert references undefined query {name!r}")
        return self.queries[name]

    def check_ring(self, ev):
        bad = self.net.ring_mismatches()
        arcs = self.net.arcs_ok()
        return not bad and arcs, {"mismatched": bad, "arcs_contiguous": arcs}

    def check_query_oracle(self, ev):
        fut, oracle = self._query(ev)
        if not fut.done():
            return False, "query still pending"
        if fut.exception() is not None:
            return False, f"query failed: {fut.exception()}"
        res = fut.result()
        if isinstance(res, PartialResult):
            res = res.results
        return res == oracle, {"rows": len(res), "oracle_rows": len(oracle)}

    def check_query_rows(self, ev):
        fut, _ = self._query(ev)
        if not fut.done() or fut.exception() is not None:
            return False, "query did not succeed"
        res = fut.result()
        if isinstance(res, PartialResult):
            res = res.results
        if "rows" in ev:
            want = ResultSet(ev.get("variables", res.variables),
                             [tuple(parse_term_cell(c) for c in row) for row in ev["rows"]])
            return res == want, {"rows": [list(map(str, r)) for r in res.sorted_rows()]}
        return len(res) == ev["count"], {"rows": len(res)}

    def check_query_error(self, ev):
        fut, _ = self._query(ev)
        if not fut.done():
            return False, "query still pending"
        exc = fut.exception()
        if exc is None:
            return False, "query unexpectedly succeeded"
        want = ev.get("contains", "")
        return want in f"{type(exc).__name__}: {exc}", f"{type(exc).__name__}: {exc}"

    def check_notifications(self, ev):
        entry = self.subs.get(ev["subscription"])
        if entry is None:
            raise ScenarioError(f"assert references undefined subscription {ev['subscription']!r}")
        fut = entry["future"]
        if not fut.done() or fut.exception() is not None:
            return False, f"subscription not active: {fut.exception() if fut.done() else 'pending'}"
        sub_id = fut.result()[0]
        got = sorted((kind, str(t)) for _, kind, t, _ in entry["callbacks"])
        detail = {"delivered": len(got)}
        ok = True
        if "count" in ev:
            ok = ok and len(got) == ev["count"]
        if "contains" in ev:
            want = sorted((c["kind"], str(parse_triple(c["triple"]))) for c in ev["contains"])
            ok = ok and all(w in got for w in want)
        if ev.get("oracle"):
            expected = self.replay_oracle(entry["node"], sub_id, entry["since"])
            detail["oracle"] = len(expected)
            ok = ok and got == expected
        return ok, detail

    def replay_oracle(self, subscriber, sub_id, since):
        """Replay every peer's change log through the subscription's filter."""
        local = self.net.peer(subscriber).pubsub.own.get(sub_id)
        if local is None:
            return []
        sub = local.sub
        out = []
        peers = list(self.net.peers.values()) + list(self.net.departed.values())
        for p in peers:
            for when, cs in p.change_log:
                if when < since:
                    continue
                for kind, t in cs.changes():
                    if sub.accepts(kind, t):
                        out.append((kind, str(t)))
        return sorted(out)

    def check_metric(self, ev):
        value = _lookup(self.report()["metrics"], ev["path"])
        op, want = ev.get("op", "=="), ev["value"]
        ok = {"==": value == want, "<=": value <= want, ">=": value >= want,
              "<": value < want, ">": value > want}[op]
        return ok, {"value": value}


def parse_term_cell(text):
    from .terms import parse_term
    return parse_term(text)


def _lookup(obj, path):
    for part in path.split("."):
        obj = obj[part]
    return obj


def run_scenario(source, seed=None) -> dict:
    base_dir = None
    if isinstance(source, str) and os.path.exists(source):
        base_dir = os.path.dirname(os.path.abspath(source))
    runner = ScenarioRunner(load_scenario(source), seed, base_dir)
    report = runner.run()
    return report


def event_log(source, seed=None):
    """Run a scenario and return ``(report, event_log_lines)``."""
    runner = ScenarioRunner(load_scenario(source), seed)
    report = runner.run()
    return report, list(runner.net.sim.log)


__all__ = ["SimNetwork", "ScenarioError", "ScenarioRunner", "load_scenario", "run_scenario",
           "event_log", "build_wrapper"]
