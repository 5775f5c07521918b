"""Run, or reuse, the default sweep of every bundled scenario for the acceptance suite.

Results live under .acceptance_cache/<source hash>/<scenario>[-w<workers>]/ so
any change to the package code or scenario files starts a fresh cache.

    python tools/acceptance_sweeps.py             # fill the cache
    python tools/acceptance_sweeps.py --status    # show what is cached
"""
from __future__ import annotations

import argparse
import hashlib
import shutil
from pathlib import Path

ROOT = Path(__file__).resolve().parents[1]
SRC = ROOT / "src" / "mixflow"
CACHE = ROOT / ".acceptance_cache"
SCENARIOS = ("route19", "route15", "us33", "cosi")
# route15 is swept a second time with many workers to compare bytes
EXTRA = (("route15", 8),)


def source_hash() -> str:
    h = hashlib.sha256()
    for p in sorted(SRC.rglob("*")):
        if p.suffix in (".py", ".json") and "__pycache__" not in p.parts:
            h.update(str(p.relative_to(SRC)).encode())
            h.update(p.read_bytes())
    return h.hexdigest()[:16]


def sweep_dir(scenario: str, workers: int = 1, run: bool = True) -> Path | None:
    name = scenario if workers == 1 else f"{scenario}-w{workers}"
    d = CACHE / source_hash() / name
    if (d / "sweep_meta.json").exists():
        return d
    if not run:
        return None
    from mixflow.cli import main

    tmp = d.with_name(name + ".partial")
    shutil.rmtree(tmp, ignore_errors=True)
    code = main(["sweep", "--scenario", scenario, "--out", str(tmp), "--workers", str(workers), "-q"])
    if code != 0:
        raise RuntimeError(f"sweep of {scenario} exited with {code}")
    tmp.rename(d)
    return d


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--status", action="store_true")
    args = ap.parse_args()
    jobs = [(s, 1) for s in SCENARIOS] + list(EXTRA)
    for s, w in jobs:
        d = sweep_dir(s, w, run=not args.status)
        print(f"{s} workers={w}: {d or 'missing'}", flush=True)


if __name__ == "__main__":
    main()
