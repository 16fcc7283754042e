"""Exception hierarchy.

Two broad families matter to callers: bad inputs (user-fixable, CLI exit
code 1) and numerical/statistical failures discovered during estimation
(CLI exit code 2).
"""

from __future__ import annotations


class ImtkitError(Exception):
    """Base class for all package errors."""


class InputError(ImtkitError):
    """Malformed user input: files, configs, column mappings, parameters."""


class ParameterError(InputError):
    """A method or engine option is out of its documented domain."""


class EstimationError(ImtkitError):
    """Base class for failures raised while fitting."""


class NoEventsError(EstimationError):
    """The dataset contains no event rows."""


class ConstantCovariateError(EstimationError):
    """A covariate has zero variance in every event risk set."""


class MonotoneLikelihoodError(EstimationError):
    """A coefficient diverges while the partial likelihood still increases."""


class NonIdentifiableError(EstimationError):
    """The treatment contrast cannot be identified (e.g. one-arm data)."""


class EmptyRiskSetError(EstimationError):
    """A requested curve or fit has an empty risk set."""


class ClusterError(EstimationError):
    """Robust variance requested with fewer than two clusters."""
