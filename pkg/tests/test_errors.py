import pickle

import pytest

from dyslim.errors import ConfigError, GenerationError, NonFiniteError, ShapeError


@pytest.mark.parametrize("error", [
    GenerationError("Lorenz warm-up blew up", 3),
    ConfigError("unknown key 'x'", "run.yaml", 4),
    ConfigError("cannot read config", "run.yaml"),
    ShapeError("bad operands", 7, "add"),
    NonFiniteError("non-finite value", 2, "mul", step=5),
])
def test_errors_survive_pickling(error):
    copy = pickle.loads(pickle.dumps(error))
    assert type(copy) is type(error)
    assert str(copy) == str(error)
    assert vars(copy) == vars(error)


def test_generation_error_names_trajectory():
    error = GenerationError("KS trajectory blew up", 12)
    assert error.trajectory_index == 12
    assert str(error) == "KS trajectory blew up (trajectory 12)"
