"""Exception types shared across the toolchain."""


class DagError(Exception):
    """Base class for all toolchain errors."""


class CycleDetected(DagError):
    def __init__(self, src, dst):
        super().__init__(f"cycle through back edge {src} -> {dst}")
        self.src = src
        self.dst = dst


class BadArity(DagError):
    pass


class DanglingRef(DagError):
    pass


class DeadNode(DagError):
    pass


class MissingInput(DagError):
    def __init__(self, node):
        super().__init__(f"no value supplied for input node {node}")
        self.node = node


class ParseError(DagError):
    def __init__(self, message, line=None):
        loc = f" (line {line})" if line is not None else ""
        super().__init__(f"{message}{loc}")
        self.line = line


class UnsupportedLineKind(ParseError):
    pass


class ZeroDiagonal(DagError):
    def __init__(self, row):
        super().__init__(f"zero or missing diagonal entry at row {row}")
        self.row = row


class SchemaError(DagError):
    pass


class GeometryError(DagError):
    pass


class EncodeError(DagError):
    pass


class DecodeError(DagError):
    pass


class CapacityError(DagError):
    pass


class ShadowOverflow(DagError):
    pass


class InvalidRead(DagError):
    def __init__(self, cycle, bank, slot):
        super().__init__(f"read of invalid slot (bank {bank}, slot {slot}) at cycle {cycle}")
        self.cycle = cycle
        self.bank = bank
        self.slot = slot


class BankFull(DagError):
    def __init__(self, bank, cycle=None):
        super().__init__(f"no empty slot in bank {bank}" + (f" at cycle {cycle}" if cycle is not None else ""))
        self.bank = bank
