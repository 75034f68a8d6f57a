"""Command-line client for the attnforge service.

Every subcommand builds a request, sends it over HTTP, and prints the
report it gets back.  By default the service runs in-process over an
ASGI transport, so no server or network is involved; pass --server to
talk to a remote instance, or run `attnforge serve` to start one.

Exit codes: 0 all checks passed, 1 a check or semantic failure, 2
malformed input.  The seed defaults to $ATTNFORGE_SEED when set.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import httpx

from .report import render, to_json


def _default_seed() -> int:
    raw = os.environ.get("ATTNFORGE_SEED")
    if raw is None:
        return 0
    try:
        return int(raw)
    except ValueError:
        print(f"error[input]: ATTNFORGE_SEED is not an integer: {raw!r}",
              file=sys.stderr)
        raise SystemExit(2)


def _add_variant_args(p: argparse.ArgumentParser, repeated: bool = False):
    if repeated:
        p.add_argument("--variant", action="append", default=[],
                       metavar="NAME", help="builtin variant name "
                       "(repeatable)")
        p.add_argument("--file", action="append", default=[],
                       metavar="PATH", help="variant definition file "
                       "(repeatable)")
    else:
        p.add_argument("--variant", metavar="NAME",
                       help="builtin variant name")
        p.add_argument("--file", metavar="PATH",
                       help="variant definition file")
    p.add_argument("--scale", type=float, default=1.0,
                   help="multiply sequence lengths (default 1.0)")
    for flag, key in (("--batch", "batch"), ("--heads", "heads"),
                      ("--seqq", "seq_q"), ("--seqk", "seq_k"),
                      ("--dqk", "d_qk"), ("--dv", "d_v")):
        p.add_argument(flag, type=int, default=None, dest=key,
                       help=f"override {key}")


def _overrides(args) -> dict:
    return {k: getattr(args, k)
            for k in ("batch", "heads", "seq_q", "seq_k", "d_qk", "d_v")}


def _read(path: str) -> str:
    try:
        with open(path, encoding="utf-8") as f:
            return f.read()
    except OSError as e:
        print(f"error[input]: cannot read {path}: {e.strerror}",
              file=sys.stderr)
        raise SystemExit(2)


def _variant_body(args) -> dict:
    if args.variant and args.file:
        print("error[input]: --variant and --file are mutually exclusive",
              file=sys.stderr)
        raise SystemExit(2)
    if not args.variant and not args.file:
        print("error[input]: one of --variant or --file is required",
              file=sys.stderr)
        raise SystemExit(2)
    body: dict = {"scale": args.scale, "overrides": _overrides(args)}
    if args.variant:
        body["variant"] = args.variant
    else:
        body["variant_text"] = _read(args.file)
    return body


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="attnforge",
        description="define, check, schedule, and emit attention kernels")
    p.add_argument("--server", metavar="URL", default=None,
                   help="remote service URL (default: in-process)")
    p.add_argument("--json", action="store_true",
                   help="print the machine-readable report")
    # the same flags are accepted after the subcommand; SUPPRESS keeps a
    # subparser's default from clobbering a value given before it
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--server", metavar="URL",
                        default=argparse.SUPPRESS)
    common.add_argument("--json", action="store_true",
                        default=argparse.SUPPRESS)
    sub = p.add_subparsers(dest="command", required=True)

    sub.add_parser("list", help="list builtin variants", parents=[common])

    c = sub.add_parser("check", parents=[common],
                       help="compare tiled/chunked execution "
                       "against the reference")
    _add_variant_args(c)
    c.add_argument("--seed", type=int, default=_default_seed())
    c.add_argument("--block", action="append", type=int, default=None,
                   metavar="N", help="key block size (repeatable)")
    c.add_argument("--chunk", action="append", type=int, default=None,
                   metavar="N", help="recurrent chunk length (repeatable)")

    g = sub.add_parser("gradcheck", parents=[common],
                       help="compare reverse-mode gradients "
                       "against central differences")
    _add_variant_args(g)
    g.add_argument("--seed", type=int, default=_default_seed())
    g.add_argument("--eps", type=float, default=1e-5)
    g.add_argument("--samples", type=int, default=24,
                   help="coordinates probed per tensor (0 = exhaustive)")

    s = sub.add_parser("schedule", parents=[common],
                       help="search tile configs and memory "
                       "placements for the cheapest plan")
    _add_variant_args(s)
    s.add_argument("--device", metavar="PATH", default=None,
                   help="device description file (default: built-in desk)")
    s.add_argument("--mode", choices=("analytic", "measured"),
                   default="analytic")
    s.add_argument("--verify", action="store_true",
                   help="cross-check against brute-force enumeration")
    s.add_argument("--seed", type=int, default=_default_seed())

    e = sub.add_parser("emit", parents=[common],
                       help="lower the scheduled kernel to "
                       "dialect text")
    _add_variant_args(e)
    e.add_argument("--device", metavar="PATH", default=None)
    e.add_argument("--check", action="store_true",
                   help="also execute the emitted plan against the "
                   "reference")
    e.add_argument("--seed", type=int, default=_default_seed())
    e.add_argument("-o", "--output", metavar="PATH", default=None,
                   help="write kernel text here (default: stdout note "
                   "with sha256 only)")

    b = sub.add_parser("bench", parents=[common],
                       help="time reference vs tiled/chunked "
                       "executors")
    _add_variant_args(b, repeated=True)
    b.add_argument("--seed", type=int, default=_default_seed())
    b.add_argument("--repeats", type=int, default=3)
    b.add_argument("--block", action="append", type=int, default=None,
                   metavar="N")
    b.add_argument("--chunk", action="append", type=int, default=None,
                   metavar="N")

    v = sub.add_parser("serve", help="run the HTTP service")
    v.add_argument("--host", default="127.0.0.1")
    v.add_argument("--port", type=int, default=8787)

    return p


class Client:
    """Thin HTTP client; in-process ASGI unless a server URL is given."""

    def __init__(self, server: str | None):
        self._server = server
        if server is None:
            from .service.app import create_app
            self._app = create_app()

    def _local(self, method: str, path: str, body: dict | None) -> dict:
        import asyncio

        async def go():
            transport = httpx.ASGITransport(app=self._app)
            async with httpx.AsyncClient(
                    transport=transport,
                    base_url="http://attnforge.local",
                    timeout=None) as http:
                r = await http.request(method, path, json=body)
                return r.json()

        return asyncio.run(go())

    def _remote(self, method: str, path: str, body: dict | None) -> dict:
        with httpx.Client(base_url=self._server, timeout=None) as http:
            return http.request(method, path, json=body).json()

    def _request(self, method: str, path: str,
                 body: dict | None = None) -> dict:
        if self._server is None:
            return self._local(method, path, body)
        return self._remote(method, path, body)

    def get(self, path: str) -> dict:
        return self._request("GET", path)

    def post(self, path: str, body: dict) -> dict:
        return self._request("POST", path, body)

    def close(self):
        pass


def _emit_output(args, report: dict):
    """Persist kernel text client-side; the wire report keeps it inline."""
    if report["exit_code"] == 2 or args.output is None:
        return
    with open(args.output, "w", encoding="utf-8") as f:
        f.write(report["kernel_text"])
    report["path"] = args.output


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)

    if args.command == "serve":
        import uvicorn
        uvicorn.run("attnforge.service.app:app", host=args.host,
                    port=args.port)
        return 0

    client = Client(args.server)
    try:
        if args.command == "list":
            report = client.get("/v1/variants")
        elif args.command == "check":
            body = _variant_body(args)
            body.update(seed=args.seed, blocks=args.block,
                        chunks=args.chunk)
            report = client.post("/v1/check", body)
        elif args.command == "gradcheck":
            body = _variant_body(args)
            body.update(seed=args.seed, eps=args.eps,
                        samples=args.samples or None)
            report = client.post("/v1/gradcheck", body)
        elif args.command == "schedule":
            body = _variant_body(args)
            body.update(mode=args.mode, verify=args.verify,
                        seed=args.seed)
            if args.device is not None:
                body["device_text"] = _read(args.device)
            report = client.post("/v1/schedule", body)
        elif args.command == "emit":
            body = _variant_body(args)
            body.update(check=args.check, seed=args.seed)
            if args.device is not None:
                body["device_text"] = _read(args.device)
            report = client.post("/v1/emit", body)
            _emit_output(args, report)
        elif args.command == "bench":
            if not args.variant and not args.file:
                print("error[input]: bench needs --variant or --file",
                      file=sys.stderr)
                return 2
            body = {"variants": args.variant,
                    "variant_texts": [_read(f) for f in args.file],
                    "scale": args.scale, "seed": args.seed,
                    "repeats": args.repeats, "blocks": args.block,
                    "chunks": args.chunk, "overrides": _overrides(args)}
            report = client.post("/v1/bench", body)
        else:  # pragma: no cover - argparse enforces the choices
            return 2
    finally:
        client.close()

    if args.json:
        print(to_json(report))
    else:
        print(render(report))
    return int(report["exit_code"])


def entry() -> None:
    raise SystemExit(main())


if __name__ == "__main__":
    entry()
