#!/usr/bin/env python
"""
test_end_to_end.py - End-to-End CLI Tests
=========================================

Runs the four subcommands through main(argv) on small meshes and checks
the files they write and the exit codes they return.
"""

import contextlib
import csv
import io
import os
import shutil
import tempfile
import unittest

import scipy.io

from argyris_qge import (
    Config,
    RunConfig,
    ValidationError,
    main,
)


def run_cli(*argv):
    """Run the CLI with captured output; return (exit code, stdout, stderr)."""
    out, err = io.StringIO(), io.StringIO()
    with contextlib.redirect_stdout(out), contextlib.redirect_stderr(err):
        code = main(list(argv))
    return code, out.getvalue(), err.getvalue()


def read_csv(path):
    with open(path, newline="") as handle:
        return list(csv.reader(handle))


class CliTestCase(unittest.TestCase):
    """Temporary directory and configuration reset"""

    def setUp(self):
        self.test_dir = tempfile.mkdtemp()

    def tearDown(self):
        shutil.rmtree(self.test_dir, ignore_errors=True)
        Config.reset_defaults()

    def path(self, name):
        return os.path.join(self.test_dir, name)


class TestStudyCommand(CliTestCase):
    """study subcommand"""

    def test_biharmonic_study(self):
        """Test: study writes one CSV row per mesh"""
        code, out, _ = run_cli("study", "--model", "biharmonic", "--solution", "biharmonic-square",
                               "--h", "1/2,1/4", "-o", self.path("study.csv"), "--no-color")
        self.assertEqual(code, 0)
        rows = read_csv(self.path("study.csv"))
        self.assertEqual(rows[0], ["h", "dofs", "e0", "rate0", "e1", "rate1", "e2", "rate2",
                                   "status"])
        self.assertEqual([r[8] for r in rows[1:]], ["ok", "ok"])
        self.assertEqual([r[1] for r in rows[1:]], ["70", "206"])
        self.assertIn("biharmonic/biharmonic-square", out)

    def test_preset_with_override(self):
        """Test: --h overrides the preset mesh list"""
        code, _, _ = run_cli("study", "--preset", "test1b", "--h", "1/2,1/4",
                             "-o", self.path("t1b.csv"), "-q")
        self.assertEqual(code, 0)
        self.assertEqual(len(read_csv(self.path("t1b.csv"))), 3)

    def test_dump_mesh_and_matrix(self):
        """Test: study can dump the finest mesh and matrix"""
        code, _, _ = run_cli("study", "--preset", "test3", "--h", "1/2", "-q",
                             "--dump-mesh", self.path("mesh"),
                             "--dump-matrix", self.path("m.mtx"))
        self.assertEqual(code, 0)
        self.assertTrue(os.path.exists(os.path.join(self.path("mesh"), "edges.csv")))
        self.assertTrue(os.path.exists(self.path("m.mtx")))

    def test_config_file(self):
        """Test: key=value config file drives the study"""
        with open(self.path("run.cfg"), "w", encoding="utf-8") as handle:
            handle.write("# biharmonic check\nmodel=biharmonic\nsolution=biharmonic-square\n"
                         "h=1/2,1/4\n")
        code, _, _ = run_cli("study", "--config", self.path("run.cfg"),
                             "-o", self.path("cfg.csv"), "-q")
        self.assertEqual(code, 0)
        self.assertEqual(len(read_csv(self.path("cfg.csv"))), 3)


class TestSolveCommand(CliTestCase):
    """solve subcommand"""

    def test_qge_solve(self):
        """Test: solve writes coefficients and the Newton log"""
        code, out, _ = run_cli("solve", "--preset", "test5", "--h", "1/2",
                               "-o", self.path("psi.csv"), "--newton-log", self.path("newton.csv"))
        self.assertEqual(code, 0)
        coefficients = read_csv(self.path("psi.csv"))
        self.assertEqual(coefficients[0], ["dof", "value"])
        self.assertEqual(len(coefficients), 1 + 170)
        log = read_csv(self.path("newton.csv"))
        self.assertEqual(log[0], ["iteration", "residual", "increment"])
        self.assertGreaterEqual(len(log), 2)
        self.assertIn("Newton:", out)

    def test_newton_failure_exit_code(self):
        """Test: a Newton run that does not converge exits with 1"""
        code, _, err = run_cli("solve", "--preset", "test5", "--h", "1/2", "-q",
                               "--max-iter", "1", "--tol-res", "1e-300", "--tol-inc", "1e-300")
        self.assertEqual(code, 1)
        self.assertIn("Newton did not converge", err)

    def test_needs_single_h(self):
        """Test: solve rejects a list of legs"""
        code, _, _ = run_cli("solve", "--preset", "test3", "--h", "1/2,1/4", "-q")
        self.assertEqual(code, 2)


class TestExportMatrixCommand(CliTestCase):
    """export-matrix subcommand"""

    def test_reduced_and_full(self):
        """Test: reduced export drops constrained DOFs, --full keeps them"""
        code, _, _ = run_cli("export-matrix", "--preset", "biharmonic", "--h", "1/4",
                             "-o", self.path("a0.mtx"), "-q")
        self.assertEqual(code, 0)
        self.assertEqual(scipy.io.mmread(self.path("a0.mtx")).shape, (106, 106))
        code, out, _ = run_cli("export-matrix", "--preset", "biharmonic", "--h", "1/4", "--full",
                               "--dump-matrix", self.path("full.mtx"), "--no-color")
        self.assertEqual(code, 0)
        self.assertEqual(scipy.io.mmread(self.path("full.mtx")).shape, (206, 206))
        self.assertIn("Block vertex:", out)

    def test_needs_output(self):
        """Test: export-matrix without a path is invalid"""
        code, _, _ = run_cli("export-matrix", "--preset", "biharmonic", "--h", "1/4", "-q")
        self.assertEqual(code, 2)


class TestSampleCommand(CliTestCase):
    """sample subcommand"""

    def test_sample(self):
        """Test: sample writes an n x n grid"""
        code, _, _ = run_cli("sample", "--preset", "test3", "--h", "1/2", "--sample-grid", "5",
                             "-o", self.path("grid.csv"), "-q")
        self.assertEqual(code, 0)
        rows = read_csv(self.path("grid.csv"))
        self.assertEqual(rows[0], ["x", "y", "psi", "u", "v"])
        self.assertEqual(len(rows), 26)

    def test_needs_grid(self):
        """Test: sample without --sample-grid is invalid"""
        code, _, _ = run_cli("sample", "--preset", "test3", "--h", "1/2", "-o", self.path("g.csv"))
        self.assertEqual(code, 2)


class TestErrorHandling(CliTestCase):
    """Exit codes for invalid input and I/O failures"""

    def test_non_dividing_leg(self):
        """Test: h=0.3 exits with 2"""
        code, _, err = run_cli("study", "--preset", "biharmonic", "--h", "0.3", "--no-color")
        self.assertEqual(code, 2)
        self.assertIn("Validation error", err)

    def test_unknown_solution(self):
        """Test: unknown solution id exits with 2"""
        code, _, _ = run_cli("study", "--solution", "nope", "--h", "1/2")
        self.assertEqual(code, 2)

    def test_missing_command(self):
        """Test: no subcommand is a usage error"""
        code, _, _ = run_cli()
        self.assertEqual(code, 2)

    def test_version(self):
        """Test: --version exits with 0"""
        code, out, _ = run_cli("--version")
        self.assertEqual(code, 0)
        self.assertIn("argyris-qge", out)

    def test_bad_workers(self):
        """Test: --workers 0 is invalid"""
        code, _, _ = run_cli("study", "--preset", "biharmonic", "--h", "1/2", "--workers", "0")
        self.assertEqual(code, 2)

    def test_bad_config_key(self):
        """Test: unknown config keys exit with 2"""
        with open(self.path("bad.cfg"), "w", encoding="utf-8") as handle:
            handle.write("colour=blue\n")
        code, _, _ = run_cli("study", "--config", self.path("bad.cfg"))
        self.assertEqual(code, 2)

    def test_unwritable_output(self):
        """Test: output into a missing directory exits with 1"""
        code, _, err = run_cli("study", "--preset", "biharmonic", "--h", "1/2", "-q",
                               "-o", os.path.join(self.test_dir, "missing", "out.csv"))
        self.assertEqual(code, 1)
        self.assertIn("File I/O error", err)


class TestRunConfig(unittest.TestCase):
    """RunConfig serialisation and problem resolution"""

    def test_round_trip(self):
        """Test: to_text and from_text round-trip"""
        config = RunConfig(command="solve", preset="test5", h=("1/8",), re=2.5, workers=3,
                           full_matrix=True)
        self.assertEqual(RunConfig.from_text(config.to_text()), config)

    def test_merge(self):
        """Test: None and empty overrides keep file values"""
        base = RunConfig(model="stommel", solution="stommel-myers", h=("1/4",))
        merged = base.merge({"h": (), "eps_s": 0.1, "model": None, "verbose": True})
        self.assertEqual(merged.h, ("1/4",))
        self.assertEqual(merged.eps_s, 0.1)
        self.assertEqual(merged.model, "stommel")

    def test_problem_from_solution_only(self):
        """Test: the model defaults to the solution's natural model"""
        problem = RunConfig(solution="cascon-exp").to_problem()
        self.assertEqual(problem.kind.value, "stommel-munk")

    def test_preset_h_values(self):
        """Test: preset mesh list is used when --h is absent"""
        self.assertEqual(len(RunConfig(preset="test2").h_values()), 5)

    def test_malformed_line(self):
        """Test: lines without '=' are rejected"""
        with self.assertRaises(ValidationError):
            RunConfig.from_text("model biharmonic\n")


if __name__ == "__main__":
    unittest.main()
