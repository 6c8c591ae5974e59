"""Shared record of acceptance outcomes, printed at the end of the session."""

RESULTS: dict[str, tuple[bool, str]] = {}


def record(key: str, passed: bool, detail: str) -> bool:
    RESULTS[key] = (bool(passed), detail)
    print(f"ACCEPTANCE {key} {'PASS' if passed else 'FAIL'}: {detail}")
    return bool(passed)
