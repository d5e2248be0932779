from .base import (
    PROBLEMS as PROBLEMS,
    Problem as Problem,
    Split as Split,
    build_problem as build_problem,
    register as register,
)

# importing the modules registers the bundled problems
from . import custom as custom, spiral as spiral, tanks as tanks
