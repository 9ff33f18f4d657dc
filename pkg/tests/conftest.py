def pytest_terminal_summary(terminalreporter):
    module = _acceptance_module()
    if module is None or not module.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(module.RESULTS):
        entry = module.RESULTS[number]
        verdict = "PASS" if entry["passed"] else "FAIL"
        detail = "; ".join(entry["detail"])
        terminalreporter.write_line(f"[{verdict}] {number}. {entry['label']}"
                                    + (f": {detail}" if detail else ""))


def _acceptance_module():
    import sys

    for name in ("test_acceptance", "tests.test_acceptance"):
        if name in sys.modules:
            return sys.modules[name]
    return None
