ACCEPTANCE = []  # (criterion, passed, detail) appended by test_acceptance


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name, passed, detail in sorted(ACCEPTANCE):
        terminalreporter.write_line(f"{name}: {'PASS' if passed else 'FAIL'} ({detail})")
