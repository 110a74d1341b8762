"""Shared test plumbing: per-criterion result lines for the acceptance suite."""

ACCEPTANCE = {}


def record(criterion: int, part: str, ok: bool, detail: str) -> None:
    ACCEPTANCE.setdefault(criterion, []).append((part, bool(ok), detail))
    print(f"criterion {criterion} [{part}]: {'PASS' if ok else 'FAIL'} {detail}")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        parts = ACCEPTANCE[k]
        ok = all(p[1] for p in parts)
        detail = "; ".join(f"{name}: {d}" for name, _, d in parts)
        terminalreporter.write_line(f"criterion {k}: {'PASS' if ok else 'FAIL'}  {detail}")
