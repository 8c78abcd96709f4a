import functools
import re

import numpy as np
import pytest

from ttncme.dense import CMEOperator, multinomial_distribution, reference_solution
from ttncme.grid import TruncatedStateSpace
from ttncme.model import builtin_lambda_phage
from ttncme.psttn import PSTTNIntegrator, SolverConfig
from ttncme.ttn import eval_full, from_dense, parse_partition

P0 = "((0 1)((2 3)(4)))"
P1 = "(((0 1)(2 3))(4))"
P2 = "(((0 1)(2))(3 4))"
LAMBDA_UPPER = (15, 40, 10, 10, 10)
REFERENCE_TIMES = (3.0, 6.0, 9.0, 10.0)


class LambdaCase:
    """Lambda-phage setup shared by the acceptance criteria. The dense
    reference and every PS-TTN run are computed once per session."""

    def __init__(self):
        self.network = builtin_lambda_phage()
        self.space = TruncatedStateSpace((0,) * 5, LAMBDA_UPPER)
        self.op = CMEOperator(self.network, self.space)
        self.p0 = multinomial_distribution(self.space, 3, [0.05] * 5)

    @functools.cached_property
    def reference(self) -> dict[float, np.ndarray]:
        sols = reference_solution(self.op, self.p0, REFERENCE_TIMES)
        return dict(zip(REFERENCE_TIMES, sols))

    @functools.lru_cache(maxsize=None)
    def run(self, partition: str, ranks: tuple, dt: float, times: tuple = (10.0,),
            scheme: str = "explicit"):
        tree = parse_partition(partition, ranks, 5)
        state = from_dense(self.p0, tree, self.space)
        cfg = SolverConfig(dt, max(times), scheme, output_times=times)
        return PSTTNIntegrator(state, self.network, cfg).run(keep_states=True)

    def error(self, partition: str, ranks: tuple, dt: float, t: float = 10.0,
              times: tuple = (10.0,)) -> float:
        res = self.run(partition, ranks, dt, times)
        k = list(res.times).index(min(res.times, key=lambda s: abs(s - t)))
        return float(np.linalg.norm(eval_full(res.states[k]) - self.reference[t]))


@pytest.fixture(scope="session")
def lambda_case():
    return LambdaCase()


# one summary line per acceptance criterion
_criteria: dict[int, tuple[str, str]] = {}


def pytest_runtest_logreport(report):
    m = re.search(r"test_criterion_(\d+)", report.nodeid)
    if not m or (report.when != "call" and report.passed):
        return
    detail = dict(report.user_properties).get("detail", "")
    n = int(m.group(1))
    status = "PASS" if report.passed else ("SKIP" if report.skipped else "FAIL")
    if n not in _criteria or status == "FAIL":
        _criteria[n] = (status, detail)


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_criteria):
        status, detail = _criteria[n]
        terminalreporter.write_line(f"criterion {n:2d}: {status}  {detail}")
