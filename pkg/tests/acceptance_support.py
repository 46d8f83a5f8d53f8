"""Shared state for the acceptance suite: one status line per criterion."""

from __future__ import annotations

RESULTS: dict[int, tuple[bool, str]] = {}

TITLES = {
    1: "stochasticity invariants",
    2: "brute-force chain oracle",
    3: "end-to-end gradient check",
    4: "analytic loss anchors",
    5: "topology initialization",
    6: "node-dropout anchors",
    7: "learning works on synthetic oracle",
    8: "ablation direction checks",
    9: "propagation anchors",
    10: "determinism of full train runs",
}


def record(number: int, ok: bool, detail: str) -> None:
    RESULTS[number] = (bool(ok), detail)
    print(status_line(number), flush=True)


def status_line(number: int) -> str:
    if number not in RESULTS:
        return f"criterion {number:2d} [NOT RUN] {TITLES[number]}"
    ok, detail = RESULTS[number]
    return f"criterion {number:2d} [{'PASS' if ok else 'FAIL'}] {TITLES[number]}: {detail}"
