"""Exception hierarchy shared by every subsystem."""


class OpSearchError(Exception):
    """Base class for all library errors."""


class UnknownOpcode(OpSearchError, KeyError):
    def __init__(self, opcode):
        super().__init__(opcode)
        self.opcode = opcode

    def __str__(self):
        return f"unknown opcode {self.opcode!r}"


class ShapeMismatch(OpSearchError, ValueError):
    def __init__(self, detail, node=None):
        self.node = node
        self.detail = detail
        where = f" at node {node}" if node is not None else ""
        super().__init__(f"shape mismatch{where}: {detail}")


class BadHyperparam(OpSearchError, ValueError):
    pass


class CycleDetected(OpSearchError, ValueError):
    pass


class OutputUnreachable(OpSearchError, ValueError):
    pass


class IncompatibleElementCount(OpSearchError, ValueError):
    pass


class SizeBound(OpSearchError, ValueError):
    pass


class Unsatisfiable(OpSearchError, RuntimeError):
    pass


class NumericalError(OpSearchError, ArithmeticError):
    pass


class KernelMissing(OpSearchError, NotImplementedError):
    pass


class NonDifferentiable(OpSearchError, ValueError):
    def __init__(self, node, opcode):
        self.node = node
        self.opcode = opcode
        super().__init__(f"node {node} ({opcode}) is not differentiable")


class ModelShapeMismatch(OpSearchError, ValueError):
    pass


class AllExcluded(OpSearchError, RuntimeError):
    pass


class SeedingFailed(OpSearchError, RuntimeError):
    pass


class ParseError(OpSearchError, ValueError):
    pass


class ConfigError(OpSearchError, ValueError):
    pass
