"""Error hierarchy. Each error carries a machine-readable code and a CLI exit status."""


class GrapeError(Exception):
    code = "error"
    exit_code = 1


class ConfigError(GrapeError, ValueError):
    code = "config_error"
    exit_code = 1


class BudgetInfeasibleError(ConfigError):
    code = "budget_infeasible"


class BudgetMismatchError(ConfigError):
    code = "budget_mismatch"


class GuardError(ConfigError):
    code = "instance_too_large"


class ShapeError(GrapeError, ValueError):
    code = "shape_error"
    exit_code = 2


class DegenerateInputError(GrapeError, ValueError):
    code = "degenerate_input"
    exit_code = 2


class PlanError(GrapeError, ValueError):
    code = "plan_error"
    exit_code = 2


class DataError(GrapeError, ValueError):
    code = "data_error"
    exit_code = 2


class PlannerStallError(GrapeError, RuntimeError):
    code = "planner_stall"
    exit_code = 3
