"""Command-line entry point.

    stackbsde <subcommand> --config run.json [--seed S] [--paths M] [--steps N]
              [--backend affine|mc|both] [--out DIR] [--tol-riccati x] ...

Exit status: 0 on success, 2 on schema/structure errors, 3 on numerical
failure, 1 otherwise. Failures print a JSON object on stderr and leave the
same object in <out>/error.json.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path
from typing import List, Optional

from .config import load_config, parse_config
from .errors import SchemaError, StackBSDEError
from .export import write_json

SUBCOMMANDS = ("validate", "riccati", "follower", "equilibrium", "pension", "verify")
TOL_FLAGS = ("riccati", "relation", "se_multiplier", "r2")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="stackbsde", description="Stackelberg LQ BSDE game solver and verifier")
    p.add_argument("command", choices=SUBCOMMANDS)
    p.add_argument("--config", required=True, help="scenario JSON")
    p.add_argument("--seed", type=int)
    p.add_argument("--paths", type=int, help="Monte Carlo paths M")
    p.add_argument("--steps", type=int, help="time steps N")
    p.add_argument("--backend", choices=("affine", "mc", "both"))
    p.add_argument("--out", help="output directory")
    for name in TOL_FLAGS:
        p.add_argument(f"--tol-{name.replace('_', '-')}", type=float, dest=f"tol_{name}")
    return p


def _apply_overrides(cfg, args):
    upd = {}
    if args.seed is not None:
        upd["seed"] = args.seed
    if args.paths is not None:
        upd["M"] = args.paths
    if args.backend is not None:
        upd["backend"] = args.backend
    if args.out is not None:
        upd["output"] = args.out
    raw = cfg.model_dump(by_alias=True)
    raw.update(upd)
    if args.steps is not None:
        raw["grid"]["N"] = args.steps
        for block in ("lq", "pension"):
            if raw["scenario"].get(block) is not None:
                raw["scenario"][block]["N"] = args.steps
    for name in TOL_FLAGS:
        v = getattr(args, f"tol_{name}")
        if v is not None:
            raw["tolerances"][name] = v
    # drop unset optional blocks so the one-of validators see the original shape
    raw["scenario"] = {k: v for k, v in raw["scenario"].items() if v is not None}
    return parse_config(_strip_none(raw))


def _strip_none(obj):
    if isinstance(obj, dict):
        return {k: _strip_none(v) for k, v in obj.items() if v is not None}
    if isinstance(obj, list):
        return [_strip_none(v) for v in obj]
    return obj


def _print_table(summary: dict, stream=sys.stdout):
    def flat(prefix, obj):
        if isinstance(obj, dict):
            for k in sorted(obj):
                yield from flat(f"{prefix}.{k}" if prefix else str(k), obj[k])
        elif isinstance(obj, list) and obj and isinstance(obj[0], dict):
            for r in obj:
                if "criterion" in r:
                    mark = "PASS" if r["pass"] else "FAIL"
                    yield f"{r['criterion']}.{r['quantity']}", f"{r['value']:.6g} (threshold {r['threshold']:.3g}) {mark}"
        else:
            yield prefix, obj

    rows = list(flat("", summary))
    width = max((len(k) for k, _ in rows), default=0)
    for k, v in rows:
        if isinstance(v, float):
            v = f"{v:.6g}"
        print(f"{k:<{width}}  {v}", file=stream)


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    out = Path(args.out) if args.out else None
    try:
        cfg = _apply_overrides(load_config(args.config), args)
        out = Path(cfg.output)
        from .pipeline import STAGES, Context
        ctx = Context(cfg)
        summary = STAGES[args.command](ctx, out)
    except StackBSDEError as exc:
        return _fail(exc.to_dict(), exc.exit_code, out)
    except (ValueError, TypeError) as exc:
        # bad values that slipped past the schema (shapes, option names)
        return _fail(SchemaError(str(exc)).to_dict(), SchemaError.exit_code, out)
    _print_table(summary)
    return 0


def _fail(info: dict, code: int, out: Optional[Path]) -> int:
    info = dict(info, exit_code=code)
    print(json.dumps(info, sort_keys=True), file=sys.stderr)
    if out is not None:
        try:
            write_json(info, out / "error.json")
        except StackBSDEError:
            pass
    return code


def entry():
    sys.exit(main())


if __name__ == "__main__":
    entry()
