#!/usr/bin/env python3
"""Side-by-side diff of two JSON reports written by `headbias analyze`
(or any two JSON files with the same layout).

    python3 scripts/diff_reports.py runs/lambda1/analysis.json runs/lambda0/analysis.json
"""
import argparse
import json
import sys


def flatten(value, prefix=""):
    if isinstance(value, dict):
        for k in value:
            yield from flatten(value[k], f"{prefix}{k}.")
    elif isinstance(value, list):
        for i, v in enumerate(value):
            yield from flatten(v, f"{prefix}{i}.")
    else:
        yield prefix[:-1], value


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("a")
    ap.add_argument("b")
    ap.add_argument("--all", action="store_true", help="also list fields that are equal")
    args = ap.parse_args()
    with open(args.a) as f:
        a = dict(flatten(json.load(f)))
    with open(args.b) as f:
        b = dict(flatten(json.load(f)))

    keys = list(a) + [k for k in b if k not in a]
    width = max(len(k) for k in keys)
    print(f"{'field':<{width}}  {'a':>14}  {'b':>14}  {'b - a':>14}")
    changed = 0
    for k in keys:
        va, vb = a.get(k), b.get(k)
        if va == vb and not args.all:
            continue
        changed += va != vb
        numeric = all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in (va, vb))
        delta = f"{vb - va:>14.6g}" if numeric else f"{'':>14}"
        fmt = lambda v: f"{v:>14.6g}" if isinstance(v, float) else f"{str(v):>14}"
        print(f"{k:<{width}}  {fmt(va)}  {fmt(vb)}  {delta}")
    print(f"{changed} field(s) differ", file=sys.stderr)


if __name__ == "__main__":
    main()
