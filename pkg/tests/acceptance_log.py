"""Shared record of acceptance verdicts, echoed in the pytest summary."""

from __future__ import annotations

import functools

RESULTS: list[str] = []


def criterion(number: int, title: str):
    def wrap(fn):
        @functools.wraps(fn)
        def run(*args, **kwargs):
            try:
                fn(*args, **kwargs)
            except BaseException as exc:
                line = f"FAIL criterion {number}: {title} ({type(exc).__name__}: {exc})".splitlines()[0]
                RESULTS.append(line)
                print(line)
                raise
            line = f"PASS criterion {number}: {title}"
            RESULTS.append(line)
            print(line)

        return run

    return wrap
