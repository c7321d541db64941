"""Infinite-horizon forward-backward SDEs driven by Brownian motion, fractional
Brownian motion and a regime-switching Markov chain, with a two-player
zero-sum linear-quadratic game layer.

Modules, bottom-up: :mod:`~fbsde_lab.timegrid` (grids, kernels, weighted
norms), :mod:`~fbsde_lab.drivers` (noise simulation),
:mod:`~fbsde_lab.calculus` (generator and Ito residual),
:mod:`~fbsde_lab.forward`, :mod:`~fbsde_lab.backward`,
:mod:`~fbsde_lab.coupled` (continuation solver), :mod:`~fbsde_lab.lqgame`
and the scenario/CLI layer (:mod:`~fbsde_lab.scenario`,
:mod:`~fbsde_lab.pipelines`, :mod:`~fbsde_lab.cli`).
"""

from .timegrid import *  # noqa: F401,F403
from .drivers import *  # noqa: F401,F403
from .calculus import *  # noqa: F401,F403
from .forward import *  # noqa: F401,F403
from .backward import *  # noqa: F401,F403
from .coupled import *  # noqa: F401,F403
from .lqgame import *  # noqa: F401,F403
from .expr import ExpressionError, parse_expression  # noqa: F401
from .scenario import ScenarioError, parse_problem  # noqa: F401
from .pipelines import RunReport, run_scenario  # noqa: F401
from . import timegrid, drivers, calculus, forward, backward, coupled, lqgame, cli  # noqa: F401

__version__ = "0.1.0"
