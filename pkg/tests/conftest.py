import torch

from acceptance_log import RESULTS

# single-threaded kernels keep every numeric result reproducible run to run
torch.set_num_threads(1)


def pytest_terminal_summary(terminalreporter):
    if not RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(RESULTS, key=lambda k: int(k[1:])):
        passed, detail = RESULTS[key]
        terminalreporter.write_line(f"ACCEPTANCE {key} {'PASS' if passed else 'FAIL'}: {detail}")
