class ExternregError(Exception):
    """Base class for errors raised by externreg"""


class InvalidDistributionError(ExternregError, ValueError):
    """A distribution does not describe a valid finite probability measure"""


class InvalidRangeError(ExternregError, ValueError):
    """A range or grid specification is empty or inverted"""


class PopulationTooLargeError(InvalidRangeError):
    """The joint population has more atoms than the solvers accept"""


class PolicyDomainError(ExternregError, ValueError):
    """An argument lies outside the domain of a transformation or formula"""


class InfeasibleInstanceError(ExternregError):
    """
    No policy can reach the profit floor. The unregulated seller is the most
    profitable seller, so this is decided on the value distribution alone.
    """


class DegeneratePolicyError(ExternregError):
    """The policy sells with probability zero so ratios and partitions are undefined"""


class PreconditionError(ExternregError):
    """An operation was called outside the situation it is defined for"""


class ParseError(ExternregError, ValueError):
    """Input text or JSON could not be parsed"""


class UnknownCaseError(ExternregError, KeyError):
    """No casebook entry with the requested name"""
