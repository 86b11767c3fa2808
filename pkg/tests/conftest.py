"""Shared pytest plumbing.

The acceptance tests append one line per criterion to CRITERION_LINES;
printing is deferred to the terminal-summary hook because it runs after
output capture ends, so the lines show up for passing criteria too.
"""

CRITERION_LINES = []


def pytest_terminal_summary(terminalreporter):
    if CRITERION_LINES:
        terminalreporter.section("acceptance criteria")
        for line in CRITERION_LINES:
            terminalreporter.write_line(line)
