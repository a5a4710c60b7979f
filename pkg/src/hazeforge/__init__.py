"""Physics-prior single-image dehazing: DCP, BCCR, perceptual fusion and an ASM haze simulator."""

__version__ = "0.1.0"
