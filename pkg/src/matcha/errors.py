"""Exception types shared across the toolkit."""


class MatchaError(Exception):
    """Base class for all toolkit errors."""


class ModelError(MatchaError):
    """Invalid model document or graph structure."""


class PlatformError(MatchaError):
    """Invalid platform document."""


class InfeasibleError(MatchaError):
    """The instance admits no feasible solution (e.g. a tensor exceeds L2)."""


class PlanError(MatchaError):
    """A plan or assignment violates its contract."""
