"""Edge-inference toolkit: bundle format, CPU inference engine,
post-training quantization, transfer-learning head trainer, evaluation,
benchmarking, and an HTTP diagnosis gateway."""

__version__ = "0.1.0"
