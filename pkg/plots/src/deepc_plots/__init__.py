"""Figure rendering for deepc-sampling experiment reports."""

from .render import (
    BOXPLOT_COLUMNS,
    TIMING_COLUMNS,
    ReportSchemaError,
    render_all,
    render_boxplots,
    render_timing_table,
)

__version__ = "0.1.0"
