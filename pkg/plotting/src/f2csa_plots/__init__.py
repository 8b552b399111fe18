"""Batch figure tool over the benchmark harness's CSV/JSON outputs.

Consumes only the documented file formats (trace CSVs, scaling.csv,
cells.csv, summary.json) — no dependency on the solver library. Each figure
comes with a plain-text caption file carrying the quantitative claims (final
losses, fitted slopes) so CI can diff numbers without comparing images.
"""

__version__ = "0.1.0"

from .figures import PlotSpec, SchemaError, plot

__all__ = ["PlotSpec", "SchemaError", "plot", "__version__"]
