"""``ctxpeer`` command line: run a node, talk to one, or run a simulation.

Exit codes: 0 ok, 1 usage, 2 assertion or scenario failure, 3 network failure.
"""

from __future__ import annotations

import argparse
import asyncio
import json
import logging
import os
import signal
import sys

from .net.codec import MessageType
from .net.transport import AsyncRuntime, Client

EXIT_OK, EXIT_USAGE, EXIT_FAILED, EXIT_NETWORK = 0, 1, 2, 3

USAGE_ERRORS = ("QuerySyntaxError", "QuerySemanticError", "ValidationError",
                "SubscriptionError", "BroadcastDisabled")


class UsageError(Exception):
    pass


def _parser():
    p = argparse.ArgumentParser(prog="ctxpeer", description="Semantic P2P context lookup node")
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="start a node on the TCP transport")
    run.add_argument("--config", help="JSON config (default: $CTXPEER_CONFIG)")

    q = sub.add_parser("query", help="run an RDQL query at a node")
    q.add_argument("--at", required=True, metavar="ADDR")
    q.add_argument("--partial-ok", action="store_true")
    q.add_argument("--timeout", type=float, default=30.0)
    q.add_argument("text")

    s = sub.add_parser("subscribe", help="stream notifications for one pattern")
    s.add_argument("--at", required=True, metavar="ADDR")
    s.add_argument("--pattern", required=True)
    s.add_argument("--filter", action="append", default=[], dest="filters")
    s.add_argument("--lease", type=float, required=True, help="seconds")
    s.add_argument("--events", default="added,removed")
    s.add_argument("--count", type=int, default=0, help="exit after this many events")

    for name in ("put", "rm"):
        c = sub.add_parser(name, help=f"{'insert' if name == 'put' else 'remove'} one triple")
        c.add_argument("--at", required=True, metavar="ADDR")
        c.add_argument("triple")

    sim = sub.add_parser("sim", help="run a simulator scenario and print its report")
    sim.add_argument("--scenario", required=True)
    sim.add_argument("--seed", type=int)
    sim.add_argument("--log", help="write the event log to this file")
    return p


def _reply_code(reply):
    err = reply.payload.get("error", "")
    print(err, file=sys.stderr)
    return EXIT_USAGE if err.split(":", 1)[0] in USAGE_ERRORS else EXIT_NETWORK


async def _with_client(addr, body):
    client = Client(addr)
    try:
        await client.connect()
        return await body(client)
    finally:
        await client.close()


async def _query(args):
    async def body(client):
        reply = await client.request(MessageType.CLIENT_QUERY,
                                     {"text": args.text, "partial_ok": args.partial_ok},
                                     timeout=args.timeout)
        if not reply.payload["ok"]:
            return _reply_code(reply)
        sys.stdout.write(reply.payload["result"])
        if reply.payload.get("status"):
            print(json.dumps(reply.payload["status"], sort_keys=True), file=sys.stderr)
        return EXIT_OK
    return await _with_client(args.at, body)


async def _put(args):
    kind = MessageType.CLIENT_PUT if args.command == "put" else MessageType.CLIENT_RM

    async def body(client):
        reply = await client.request(kind, {"triple": args.triple})
        if not reply.payload["ok"]:
            return _reply_code(reply)
        print("changed" if reply.payload.get("changed") else "unchanged")
        return EXIT_OK
    return await _with_client(args.at, body)


async def _subscribe(args):
    lease_ms = int(args.lease * 1000)
    if lease_ms <= 0:
        raise UsageError("--lease must be positive")
    events = [e for e in args.events.split(",") if e]

    async def body(client):
        reply = await client.request(MessageType.CLIENT_SUBSCRIBE, {
            "pattern": args.pattern, "filters": args.filters, "lease": lease_ms,
            "events": events})
        if not reply.payload["ok"]:
            return _reply_code(reply)
        print(f"# subscribed {reply.payload['sub']} at {reply.payload['acks']} producers",
              flush=True)
        seen = 0
        deadline = asyncio.get_running_loop().time() + args.lease
        while True:
            left = deadline - asyncio.get_running_loop().time()
            if left <= 0:
                return EXIT_OK
            try:
                msg = await asyncio.wait_for(client.receive(), left)
            except asyncio.TimeoutError:
                return EXIT_OK
            if msg.type != MessageType.CLIENT_EVENT:
                continue
            p = msg.payload
            print(f"{p['kind']}\t{p['triple']}\t{p['producer']}", flush=True)
            seen += 1
            if args.count and seen >= args.count:
                return EXIT_OK
    return await _with_client(args.at, body)


async def _run(args):
    from .node import ConfigError, ContextPeer, NodeConfig
    from .ring import JoinError, RpcTimeout
    try:
        cfg = NodeConfig.load(args.config)
    except ConfigError as exc:
        raise UsageError(str(exc)) from None
    base = os.path.dirname(os.path.abspath(args.config)) if args.config else None
    runtime = AsyncRuntime()
    try:
        await runtime.listen(cfg.address)
    except (OSError, ValueError) as exc:
        print(f"cannot listen on {cfg.address}: {exc}", file=sys.stderr)
        return EXIT_NETWORK
    peer = ContextPeer(cfg, runtime, base_dir=base)
    started = peer.start()
    done = asyncio.get_running_loop().create_future()
    started.add_done_callback(lambda f: done.done() or done.set_result(f))
    await done
    if started.exception() is not None:
        exc = started.exception()
        print(f"join failed: {exc}", file=sys.stderr)
        await runtime.close()
        return EXIT_NETWORK if isinstance(exc, (JoinError, RpcTimeout)) else EXIT_FAILED
    logging.getLogger("ctxpeers").info("node %s up (cluster %s)", peer.ring.me, peer.label)
    print(f"{peer.ring.me} up, cluster {peer.label}", flush=True)
    stop = asyncio.Event()
    loop = asyncio.get_running_loop()
    for sig in (signal.SIGINT, signal.SIGTERM):
        try:
            loop.add_signal_handler(sig, stop.set)
        except (NotImplementedError, RuntimeError):
            pass
    await stop.wait()
    peer.shutdown()
    await asyncio.sleep(0.3)  # let the handoff frames drain
    await runtime.close()
    return EXIT_OK


def _sim(args):
    from .scenario import ScenarioError, ScenarioRunner, load_scenario
    try:
        events = load_scenario(args.scenario)
    except ScenarioError as exc:
        if not os.path.exists(args.scenario) and "no scenario" in str(exc):
            raise UsageError(str(exc)) from None
        print(f"scenario error: {exc}", file=sys.stderr)
        return EXIT_FAILED
    base = os.path.dirname(os.path.abspath(args.scenario)) if os.path.exists(args.scenario) else None
    runner = ScenarioRunner(events, args.seed, base)
    try:
        report = runner.run()
    except ScenarioError as exc:
        print(f"scenario error: {exc}", file=sys.stderr)
        return EXIT_FAILED
    if args.log:
        with open(args.log, "w", encoding="utf-8") as fh:
            fh.write("\n".join(runner.net.sim.log) + "\n")
    json.dump(report, sys.stdout, indent=2, sort_keys=True)
    sys.stdout.write("\n")
    if not report["passed"]:
        first = report["first_failure"]
        print(f"assert failed at t={first['at']}: {first['label']} {first['detail']}",
              file=sys.stderr)
        return EXIT_FAILED
    return EXIT_OK


def main(argv=None) -> int:
    parser = _parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        if args.command == "sim":
            return _sim(args)
        handler = {"run": _run, "query": _query, "subscribe": _subscribe,
                   "put": _put, "rm": _put}[args.command]
        return asyncio.run(handler(args))
    except UsageError as exc:
        print(f"ctxpeer: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, ConnectionError, asyncio.TimeoutError) as exc:
        print(f"ctxpeer: network failure: {exc!r}", file=sys.stderr)
        return EXIT_NETWORK
    except KeyboardInterrupt:
        return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
