"""Command line: `posbridge serve` for real checkpoints, `posbridge mock`
for the canned protocol behaviors."""

from __future__ import annotations

import argparse
import sys

from .protocol import ProtocolError
from .service import DEFAULT_MAX_BATCH, mock_serve, serve


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="posbridge",
        description="Serve transformer checkpoints behind the posbench wire protocol",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("serve", help="serve a real checkpoint")
    p.add_argument("--model", required=True, help="checkpoint path or hub name")
    p.add_argument("--port", type=int, default=8080)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--max-input-tokens", type=int, default=512)
    p.add_argument("--max-batch-size", type=int, default=DEFAULT_MAX_BATCH)

    p = sub.add_parser("mock", help="serve canned behaviors")
    p.add_argument(
        "--mode",
        required=True,
        help="echo_targets, empty, or position_cutoff:N",
    )
    p.add_argument("--docs", help="corpus.jsonl for span reconstruction")
    p.add_argument("--port", type=int, default=8080)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--dim", type=int, default=16)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--max-batch-size", type=int, default=DEFAULT_MAX_BATCH)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "serve":
            serve(
                args.model,
                port=args.port,
                host=args.host,
                max_input_tokens=args.max_input_tokens,
                max_batch_size=args.max_batch_size,
            )
        else:
            mock_serve(
                args.mode,
                port=args.port,
                host=args.host,
                docs_path=args.docs,
                dim=args.dim,
                seed=args.seed,
                max_batch_size=args.max_batch_size,
            )
    except ProtocolError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # startup errors (bad checkpoint, busy port)
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


def entry() -> None:
    sys.exit(main())
