"""Multi-resource fair allocation over heterogeneous servers with placement
constraints: alpha-proportional fairness on virtual dominant shares, its
merit-function solver, a distributed heuristic, reference mechanisms,
fairness validators and a trace-driven simulator."""

__version__ = "0.1.0"
