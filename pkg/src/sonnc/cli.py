"""Command-line client.

The CLI contains no engine logic: every subcommand builds an HTTP
request and sends it to the service, by default through an in-process
ASGI transport (no socket, fully deterministic) or to a remote server
given --server.  Exit codes: 0 success, 1 invalid graph or arguments,
2 missing or invalid tune table.

Subcommands::

    sonnc calibrate --max-dim N --max-block N --max-threads N --reps N --out PATH
    sonnc plan      --graph FILE --table FILE [--no-fusion] [--no-hoist]
    sonnc run       --graph FILE --table FILE [--threads N] [--seed N]
    sonnc bench     --algo A --sparsity S --rows N --cols N --hidden N
                    [--field N] [--runs N] [--iters N] [--no-fusion] [--no-hoist]
                    [--force-b N --force-t N] --table FILE --out PATH
    sonnc serve     [--host H] [--port P]
"""

from __future__ import annotations

import argparse
import json
import sys
from typing import Optional

import httpx

from . import __version__
from .autotune import TABLE_VERSION

EXIT_OK = 0
EXIT_GRAPH = 1
EXIT_TABLE = 2


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # flag validation failures exit 1, not argparse's 2
        print(f"error: {message}", file=sys.stderr)
        sys.exit(EXIT_GRAPH)


class _Service:
    """Thin transport wrapper: POST to a remote server, or call the same
    service operations in-process when no server is configured."""

    def __init__(self, server: Optional[str]):
        self.server = server
        self._client = httpx.Client(base_url=server, timeout=None) if server else None

    def close(self):
        if self._client is not None:
            self._client.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def post(self, path: str, payload: dict) -> dict:
        if self._client is not None:
            resp = self._client.post(path, json=payload)
            if resp.status_code == 200:
                return resp.json()
            try:
                detail = resp.json().get("detail", {})
            except ValueError:
                detail = {}
            self._bail(detail.get("kind", "args"), detail.get("message", resp.text))
        from fastapi import HTTPException

        from . import service

        ops = {
            "/validate": (service.op_validate, service.ValidateRequest),
            "/plan": (service.op_plan, service.PlanRequest),
            "/run": (service.op_run, service.RunRequest),
            "/calibrate": (service.op_calibrate, service.CalibrateRequest),
            "/bench": (service.op_bench, service.BenchRequest),
        }
        op, model = ops[path]
        try:
            return op(model(**payload)).model_dump()
        except HTTPException as e:
            detail = e.detail if isinstance(e.detail, dict) else {}
            self._bail(detail.get("kind", "args"), detail.get("message", str(e.detail)))

    @staticmethod
    def _bail(kind: str, message: str):
        print(f"error ({kind}): {message}", file=sys.stderr)
        sys.exit(EXIT_TABLE if kind == "table" else EXIT_GRAPH)


def _read_graph(path: str) -> dict:
    try:
        with open(path, encoding="utf-8") as f:
            return json.load(f)
    except OSError as e:
        print(f"error (graph): cannot read {path!r}: {e}", file=sys.stderr)
        sys.exit(EXIT_GRAPH)
    except json.JSONDecodeError as e:
        print(f"error (graph): malformed JSON in {path!r}: {e}", file=sys.stderr)
        sys.exit(EXIT_GRAPH)


def _read_table(path: Optional[str], required: bool) -> Optional[str]:
    if path is None:
        if required:
            print("error (table): --table is required", file=sys.stderr)
            sys.exit(EXIT_TABLE)
        return None
    try:
        with open(path, encoding="utf-8") as f:
            return f.read()
    except OSError as e:
        print(f"error (table): cannot read {path!r}: {e}", file=sys.stderr)
        sys.exit(EXIT_TABLE)


def main(argv: Optional[list[str]] = None) -> int:
    parser = _Parser(prog="sonnc", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version",
                        version=f"sonnc {__version__} (tune-table format v{TABLE_VERSION})")
    parser.add_argument("--server", help="remote service URL (default: run in-process)")
    parser.add_argument("--verbose", action="store_true")
    sub = parser.add_subparsers(dest="cmd", required=True)

    p = sub.add_parser("calibrate", help="time the machine and write a tune table")
    p.add_argument("--max-dim", type=int, default=4096)
    p.add_argument("--max-block", type=int, default=512)
    p.add_argument("--max-threads", type=int, default=None)
    p.add_argument("--reps", type=int, default=3)
    p.add_argument("--out", required=True)

    p = sub.add_parser("plan", aliases=["dump-plan"], help="compile a graph and dump the plan")
    p.add_argument("--graph", required=True)
    p.add_argument("--table")
    p.add_argument("--no-fusion", action="store_true")
    p.add_argument("--no-hoist", action="store_true")
    p.add_argument("--force-b", type=int)
    p.add_argument("--force-t", type=int)

    p = sub.add_parser("run", help="compile and execute a graph document")
    p.add_argument("--graph", required=True)
    p.add_argument("--table")
    p.add_argument("--threads", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--force-b", type=int)
    p.add_argument("--force-t", type=int)

    p = sub.add_parser("bench", help="run the timing protocol")
    p.add_argument("--algo", required=True, choices=["backprop", "rbm", "ae", "ista"])
    p.add_argument("--sparsity", required=True, choices=["dense", "lrf", "unstructured"])
    p.add_argument("--rows", type=int, required=True)
    p.add_argument("--cols", type=int, required=True)
    p.add_argument("--hidden", type=int, required=True)
    p.add_argument("--field", type=int, default=4)
    p.add_argument("--fill", type=float, default=0.1)
    p.add_argument("--runs", type=int, default=10)
    p.add_argument("--iters", type=int, default=100)
    p.add_argument("--no-fusion", action="store_true")
    p.add_argument("--no-hoist", action="store_true")
    p.add_argument("--force-b", type=int)
    p.add_argument("--force-t", type=int)
    p.add_argument("--table")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("serve", help="run the HTTP service")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8440)

    args = parser.parse_args(argv)

    if args.cmd == "serve":
        import uvicorn

        from .service import create_app

        uvicorn.run(create_app(), host=args.host, port=args.port)
        return EXIT_OK

    with _Service(args.server) as client:
        if args.cmd == "calibrate":
            if args.reps < 3:
                print("error: --reps must be >= 3", file=sys.stderr)
                return EXIT_GRAPH
            payload = {"max_dim": args.max_dim, "max_block": args.max_block,
                       "max_threads": args.max_threads, "reps": args.reps}
            out = client.post("/calibrate", payload)
            with open(args.out, "w", encoding="utf-8") as f:
                f.write(out["table"])
            print(json.dumps({"out": args.out, "entries": out["entries"]}))
            return EXIT_OK

        if args.cmd in ("plan", "dump-plan"):
            payload = {
                "graph": _read_graph(args.graph),
                "table": _read_table(args.table, required=args.force_b is None),
                "force_b": args.force_b, "force_t": args.force_t,
                "no_fusion": args.no_fusion, "no_hoist": args.no_hoist,
            }
            out = client.post("/plan", payload)
            sys.stdout.write(out["text"])
            return EXIT_OK

        if args.cmd == "run":
            payload = {
                "graph": _read_graph(args.graph),
                "table": _read_table(args.table, required=args.force_b is None),
                "threads": args.threads, "seed": args.seed,
                "force_b": args.force_b, "force_t": args.force_t,
            }
            out = client.post("/run", payload)
            sys.stdout.write(json.dumps(out) + "\n")
            return EXIT_OK

        if args.cmd == "bench":
            payload = {
                "algo": args.algo, "sparsity": args.sparsity, "rows": args.rows,
                "cols": args.cols, "hidden": args.hidden, "field": args.field,
                "fill": args.fill, "runs": args.runs, "iters": args.iters,
                "table": _read_table(args.table, required=args.force_b is None),
                "no_fusion": args.no_fusion, "no_hoist": args.no_hoist,
                "force_b": args.force_b, "force_t": args.force_t, "seed": args.seed,
            }
            out = client.post("/bench", payload)
            with open(args.out, "w", encoding="utf-8") as f:
                f.write(out["csv"])
            sys.stdout.write(out["csv"])
            return EXIT_OK

    raise AssertionError(f"unhandled command {args.cmd}")


if __name__ == "__main__":
    sys.exit(main())
