import os
import sys

sys.path.insert(0, os.path.dirname(__file__))
os.environ.setdefault("SFCM_THREADS", "1")


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    if mod is not None and getattr(mod, "RESULTS", None):
        terminalreporter.section("acceptance criteria")
        for line in mod.RESULTS:
            terminalreporter.write_line(line)
