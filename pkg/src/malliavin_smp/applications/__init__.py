"""Worked problems: optimal dividend rate and optimal portfolio."""
from .dividend import (DividendModel, DividendSolution, GridSearch, dividend_foc_solve, dividend_grid_search,
                       dividend_p, dividend_performance)
from .portfolio import (FractionSearch, GirsanovDensity, MarketModel, PowerUtilitySolution, Replication,
                        clark_ocone_portfolio, fraction_grid_search, girsanov_density, martingale_M,
                        merton_control, portfolio_criticality, power_utility_solution, q_conditional, solve_M0)
from .utility import Utility
