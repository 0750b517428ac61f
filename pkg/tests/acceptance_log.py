"""Pass/fail lines of the acceptance criteria, printed in the terminal summary."""

LINES: list[str] = []
