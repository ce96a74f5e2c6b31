"""Shadow-stack control-flow integrity toolchain for an MSP430-class MCU.

Pipeline: parse -> rewrite reserved registers -> instrument -> link with the
generated monitor -> assemble -> run on the rule-enforcing emulator.
"""

__version__ = "0.1.0"
