import pytest

from rirfield.simulator import CorpusRecipe, generate_corpus

SMALL_RECIPE = CorpusRecipe(rooms=5, pairs_per_room=6, length_s=0.3, max_order=20)


@pytest.fixture(scope="session")
def small_corpus_dir(tmp_path_factory):
    """Five simulated rooms with six RIRs each, shared by the training and CLI tests."""
    d = tmp_path_factory.mktemp("corpus")
    generate_corpus(SMALL_RECIPE, 0, d)
    return d


def pytest_terminal_summary(terminalreporter):
    from _util import ACCEPTANCE

    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE, key=lambda s: int(s.split("criterion ")[1].split(":")[0])):
            terminalreporter.write_line(line)
