"""PASS/FAIL lines of the acceptance suite, printed at the end of the run."""
LINES: list[str] = []


def record(criterion: str, ok: bool, detail: str) -> bool:
    line = f"{'PASS' if ok else 'FAIL'}  {criterion}: {detail}"
    LINES.append(line)
    print(line)
    return ok
