def pytest_terminal_summary(terminalreporter):
    """Print one line per acceptance criterion, in criterion order."""
    lines = []
    for outcome in ("passed", "failed"):
        for rep in terminalreporter.stats.get(outcome, []):
            if getattr(rep, "when", None) != "call":
                continue
            for key, value in getattr(rep, "user_properties", []):
                if key == "acceptance":
                    number, detail = value
                    lines.append((number, f"criterion {number}: {outcome.upper().replace('ED', '')} {detail}"))
    if lines:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(lines):
            terminalreporter.write_line(line)
