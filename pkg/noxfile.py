"""Nox sessions for testing across Python versions."""

import nox

PYTHON_VERSIONS = ["3.10", "3.11", "3.12", "3.13"]


@nox.session(python=PYTHON_VERSIONS)
def tests(session: nox.Session) -> None:
    """Run the fast test suite, one single-threaded worker per CPU."""
    session.install(".", "pytest", "pytest-cov", "pytest-xdist")
    session.env["OMP_NUM_THREADS"] = "1"
    session.env["OPENBLAS_NUM_THREADS"] = "1"
    session.run("pytest", "-n", "auto", "-m", "not slow", "--cov=vestido", *session.posargs)


@nox.session(python=PYTHON_VERSIONS[-1])
def slow(session: nox.Session) -> None:
    """Run the overfit training oracles."""
    session.install(".", "pytest")
    session.env["OMP_NUM_THREADS"] = "1"
    session.run("pytest", "-m", "slow", *session.posargs)


@nox.session(python=PYTHON_VERSIONS[-1])
def lint(session: nox.Session) -> None:
    """Run linting checks."""
    session.install("ruff")
    session.run("ruff", "check", "src/", "tests/")
    session.run("ruff", "format", "--check", "src/", "tests/")


@nox.session(python=PYTHON_VERSIONS[-1])
def typecheck(session: nox.Session) -> None:
    """Run type checking."""
    session.install(".", "ty")
    session.run("ty", "check", "src/")
