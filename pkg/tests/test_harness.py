import csv
import io
import json
import math
import subprocess
import sys

import pytest

from itercomm.errors import ConfigurationError
from itercomm.harness import (CSV_COLUMNS, EXIT_NONCONVERGED, EXIT_OK, EXIT_USAGE, RunConfig,
                              RunReport, emit_report, main, parse_config, run_experiment)

SMALL = ["--p", "2", "--n", "4", "--time-steps", "2"]


class TestParseConfig:
    def test_defaults(self):
        c = parse_config([])
        assert (c.p, c.n, c.scheme, c.q, c.threshold, c.max_recv_requests) == \
            (4, 10, "overlap", 0.5, 1e-6, 2)
        assert (c.time_steps, c.dt, c.nu, c.a) == (5, 0.01, 0.5, (0.1, -0.2, 0.3))

    def test_async_flags(self):
        c = parse_config(["--scheme", "async", "--max-recv-requests", "3", "--q", "max"])
        assert c.scheme == "async" and c.max_recv_requests == 3 and c.q == 0.5

    def test_negative_threshold(self):
        with pytest.raises(ConfigurationError, match="threshold"):
            parse_config(["--threshold", "-1"])

    def test_unknown_key(self):
        with pytest.raises(ConfigurationError, match="unknown"):
            parse_config(mapping={"bogus": 1})

    def test_non_integer(self):
        with pytest.raises(ConfigurationError, match="p:"):
            parse_config(["--p", "2.5"])

    def test_too_many_processes(self):
        with pytest.raises(ConfigurationError, match="p:"):
            parse_config(["--p", "9", "--n", "2"])

    def test_config_file_and_override(self, tmp_path):
        path = tmp_path / "run.cfg"
        path.write_text("# experiment\np = 8\nscheme = async  # inline\na = 0, 0, 0.1\n")
        c = parse_config(["--config", str(path), "--p", "2"])
        assert (c.p, c.scheme, c.a) == (2, "async", (0.0, 0.0, 0.1))

    def test_malformed_file(self, tmp_path):
        path = tmp_path / "bad.cfg"
        path.write_text("p 4\n")
        with pytest.raises(ConfigurationError, match="key=value"):
            parse_config(["--config", str(path)])

    def test_slowdowns(self):
        c = RunConfig(p=4, slowdown_max=10.0, seed=5)
        f = c.slowdowns()
        assert set(f) == {0, 1, 2, 3} and all(1 <= v <= 10 for v in f.values())
        assert f == RunConfig(p=4, slowdown_max=10.0, seed=5).slowdowns()
        assert RunConfig(p=4, slow_rank=2).slowdowns() == {2: 10.0}


@pytest.fixture(scope="module")
def report():
    return run_experiment(parse_config(SMALL))


class TestReport:
    def test_rows(self, report):
        assert [r.step for r in report.rows] == [0, 1]
        assert all(r.residual < 1e-6 and r.iterations > 0 for r in report.rows)
        assert report.converged

    def test_json_roundtrip(self, report):
        back = RunReport.from_json(report.to_json())
        assert back == report
        assert json.loads(report.to_json())["config"]["p"] == 2

    def test_csv(self, report):
        rows = list(csv.reader(io.StringIO(report.to_csv())))
        assert tuple(rows[0]) == CSV_COLUMNS
        assert len(rows) == 3
        assert float(rows[1][CSV_COLUMNS.index("residual")]) == report.rows[0].residual

    def test_emit_to_file(self, report, tmp_path):
        path = tmp_path / "out.json"
        emit_report(report, str(path), "json")
        assert RunReport.from_json(path.read_text()) == report

    def test_failed_report(self):
        report = run_experiment(parse_config(SMALL + ["--max-iterations", "3"]))
        assert report.failed and not report.converged
        rows = list(csv.reader(io.StringIO(report.to_csv())))
        assert rows[0][-1] == "failed"
        assert rows[-1][-1] == "1"
        assert math.isnan(report.rows[-1].residual)


@pytest.mark.parametrize("scheme", ["overlap", "async"])
def test_deterministic_output(scheme):
    args = SMALL + ["--scheme", scheme, "--jitter", "3e-6", "--slowdown-max", "3", "--seed", "7"]
    a = run_experiment(parse_config(args)).to_json()
    b = run_experiment(parse_config(args)).to_json()
    assert a == b


def test_single_process():
    report = run_experiment(parse_config(["--p", "1", "--n", "4", "--time-steps", "1",
                                          "--scheme", "async"]))
    assert report.converged and report.rows[0].residual < 1e-6


class TestExitCodes:
    def test_converged(self, capsys):
        assert main(SMALL) == EXIT_OK
        assert capsys.readouterr().out.startswith(",".join(CSV_COLUMNS))

    def test_usage(self, capsys):
        assert main(["--threshold", "-1"]) == EXIT_USAGE
        assert "threshold" in capsys.readouterr().err

    def test_bad_flag(self, capsys):
        assert main(["--nope"]) == EXIT_USAGE

    def test_nonconverged(self, capsys):
        assert main(SMALL + ["--max-iterations", "3"]) == EXIT_NONCONVERGED
        out = capsys.readouterr()
        assert "not converged" in out.err and "failed" in out.out.splitlines()[0]

    def test_module_entry_point(self, tmp_path):
        out = tmp_path / "r.csv"
        proc = subprocess.run([sys.executable, "-m", "itercomm", *SMALL, "--output", str(out)],
                              capture_output=True, text=True, timeout=120)
        assert proc.returncode == 0, proc.stderr
        assert out.read_text().splitlines()[0] == ",".join(CSV_COLUMNS)


def test_socket_backend_matches_sim_counts():
    """Synchronous iteration counts do not depend on the transport."""
    sim = run_experiment(parse_config(SMALL))
    sock = run_experiment(parse_config(SMALL + ["--backend", "socket"]))
    assert [r.iterations for r in sock.rows] == [r.iterations for r in sim.rows]
    assert all(r.residual < 1e-6 for r in sock.rows)
