"""Shape tokenizer: point-cloud encoder, discrete bottleneck, implicit decoder,
mesh extraction, a toy token generator and scene graphs, on numpy."""

__version__ = "0.1.0"
