"""Collects one result line per acceptance criterion for the terminal summary."""

RESULTS: dict[int, tuple[bool, str]] = {}


def report(number: int, passed: bool, detail: str) -> bool:
    RESULTS[number] = (bool(passed), detail)
    print(f"criterion {number:2d}: {'PASS' if passed else 'FAIL'}  {detail}")
    return bool(passed)
