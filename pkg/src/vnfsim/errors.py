"""Exception types shared across the package."""


class VnfSimError(Exception):
    pass


# netmodel
class UnknownTopology(VnfSimError):
    pass


class MalformedSpec(VnfSimError):
    pass


class InsufficientResources(VnfSimError):
    pass


class UnknownNode(VnfSimError):
    pass


class OverRelease(VnfSimError):
    pass


class NoPath(VnfSimError):
    pass


# workload / config
class BadConfig(VnfSimError):
    pass


class ConfigInvalid(BadConfig):
    pass


# numkernel
class DimensionMismatch(VnfSimError):
    pass


class ArchitectureMismatch(VnfSimError):
    pass


class BufferTooSmall(VnfSimError):
    pass


# dypr
class WrongMode(VnfSimError):
    pass


class SingularSystem(VnfSimError):
    pass


# trafficclass
class TooFewPoints(VnfSimError):
    pass


class DegenerateClusters(VnfSimError):
    pass


class SingleClassInput(VnfSimError):
    pass


# adsch / placement
class InvalidOutcome(VnfSimError):
    pass


class BadInput(VnfSimError):
    pass


class BadWindow(VnfSimError):
    pass
