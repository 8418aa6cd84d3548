ACCEPTANCE = {}


def record(n, passed, detail):
    """Store a criterion result; repeated calls (parametrized tests) are combined."""
    if n in ACCEPTANCE:
        ok, prev = ACCEPTANCE[n]
        ACCEPTANCE[n] = (ok and bool(passed), f"{prev}; {detail}")
    else:
        ACCEPTANCE[n] = (bool(passed), detail)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
