RESULTS = []


def criterion(num, name, ok, detail=""):
    """Record and print one PASS/FAIL line, then assert it."""
    line = f"{'PASS' if ok else 'FAIL'} criterion {num:>2} {name}: {detail}"
    RESULTS.append(line)
    print(line)
    assert ok, line
