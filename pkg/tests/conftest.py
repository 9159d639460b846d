import pytest

from chainrec.corpus import filter_users
from chainrec.synthetic import load_bundled

ACCEPTANCE_RESULTS = []


@pytest.fixture(scope="session")
def raw_corpus():
    return load_bundled()


@pytest.fixture(scope="session")
def corpus(raw_corpus):
    return filter_users(raw_corpus)


@pytest.fixture
def record_criterion():
    def record(name, passed, detail="", status=None):
        ACCEPTANCE_RESULTS.append((name, status or ("PASS" if passed else "FAIL"), detail))
    return record


def write_ml(tmp_path, ratings, users=None, movies=None):
    """Tiny MovieLens-format fixture. ``ratings`` are (user, item, rating, ts)."""
    users = users if users is not None else sorted({str(r[0]) for r in ratings})
    movies = movies if movies is not None else sorted({str(r[1]) for r in ratings})
    (tmp_path / "ratings.dat").write_text("".join(f"{u}::{i}::{r}::{t}\n" for u, i, r, t in ratings))
    (tmp_path / "users.dat").write_text("".join(f"{u}::F::25::4::12345\n" for u in users))
    (tmp_path / "movies.dat").write_text("".join(f"{m}::Movie {m} (2000)::Drama|Comedy\n" for m in movies))
    return tmp_path / "ratings.dat", tmp_path / "users.dat", tmp_path / "movies.dat"


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for name, status, detail in ACCEPTANCE_RESULTS:
        terminalreporter.write_line(f"[{status}] {name}" + (f"  ({detail})" if detail else ""))
