# Exception hierarchy shared by every module
class AracError(Exception):
    """Base class for all errors raised by the library modules."""


class ConfigError(AracError):
    """Configuration file or override could not be read or validated."""


# graph_world
class MalformedMap(AracError):
    """Map text does not follow the map grammar or describes an invalid graph."""


class NodeOutOfRange(AracError):
    """A node id outside 0..n-1 was requested."""


# games
class PlacementImpossible(AracError):
    """Agents cannot be placed on distinct, valid spawn nodes."""


class UnknownAgent(AracError):
    pass


class IllegalAction(AracError):
    pass


class SteppingTerminalState(AracError):
    pass


class ScenarioMismatch(AracError):
    """An operation was requested for the wrong scenario."""


# tensor_autodiff
class ShapeMismatch(AracError):
    pass


class FullyMaskedRow(AracError):
    """A softmax row has no unmasked entry."""


class OutputNotScalar(AracError):
    pass


class NonFiniteValue(AracError):
    """NaN or Inf reached a tensor."""


# policy_nets
class EmptyCandidates(AracError):
    pass


class IncompatibleCheckpoint(AracError):
    pass


# reference_policies
class NoLegalAction(AracError):
    pass


# arac_trainer
class SupportMismatch(AracError):
    pass


class EmptyBatch(AracError):
    pass


class BufferTooSmall(AracError):
    pass


# tabular_verifier
class NonConvergence(AracError):
    pass
