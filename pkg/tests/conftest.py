import numpy as np
import pytest

NAMES = ["mary", "john", "sandra", "daniel"]
PLACES = ["kitchen", "garden", "office", "hallway", "bathroom", "bedroom"]


def write_qa1_like(path, n_stories: int, seed: int = 0, moves: int = 4) -> None:
    """Small single-supporting-fact corpus in the published line format."""
    rng = np.random.default_rng(seed)
    lines = []
    for _ in range(n_stories):
        where = {}
        i = 1
        for k in range(moves):
            who, place = NAMES[rng.integers(len(NAMES))], PLACES[rng.integers(len(PLACES))]
            lines.append(f"{i} {who.capitalize()} went to the {place}.")
            where[who] = (place, i)
            i += 1
            if k % 2 == 1:
                ask = list(where)[rng.integers(len(where))]
                place, sid = where[ask]
                lines.append(f"{i} Where is {ask.capitalize()}? \t{place}\t{sid}")
                i += 1
    path.write_text("\n".join(lines) + "\n")


@pytest.fixture
def qa1_dir(tmp_path):
    d = tmp_path / "babi"
    d.mkdir()
    write_qa1_like(d / "qa1_single-supporting-fact_train.txt", 30, seed=0)
    write_qa1_like(d / "qa1_single-supporting-fact_test.txt", 10, seed=1)
    return d
