import logging
import os
from typing import Optional

import numpy as np
import plotly.graph_objects as go
from plotly.subplots import make_subplots

from src.evaluator import AdaptationReport
from src.scorer import ThresholdBand

logger = logging.getLogger(__name__)


class Visualizer:
    def __init__(self, config: dict):
        self.charts_output_dir = config.get('charts_output_dir', 'charts')
        self.show_plot = config.get('show_plot', False)
        if not os.path.exists(self.charts_output_dir):
            os.makedirs(self.charts_output_dir)

    def _add_histogram(self, fig, report: AdaptationReport, col: int, showlegend: bool):
        edges = np.asarray(report.histogram["edges"])
        centers = 0.5 * (edges[:-1] + edges[1:])
        width = float(edges[1] - edges[0])
        # known in blue, unknown in red, overlaid
        for group, color in (("known", "rgba(100, 149, 237, 0.7)"), ("unknown", "rgba(255, 50, 50, 0.6)")):
            fig.add_trace(
                go.Bar(
                    x=centers,
                    y=report.histogram[group],
                    width=width,
                    name=group.capitalize(),
                    marker_color=color,
                    legendgroup=group,
                    showlegend=showlegend,
                ),
                row=1, col=col
            )

    def create_histogram_chart(self, before: AdaptationReport, after: Optional[AdaptationReport],
                               band: ThresholdBand, name: str = "scores") -> str:
        """
        Known/unknown score histograms before and (optionally) after adaptation, with w0 and
        the slack band marked. Saved as HTML; returns the file path.
        """
        logger.info(f"Generating score histogram chart '{name}'...")
        panels = [("Before adaptation", before)] + ([("After adaptation", after)] if after is not None else [])
        fig = make_subplots(rows=1, cols=len(panels), shared_yaxes=True,
                            subplot_titles=[title for title, _ in panels])

        for col, (_, report) in enumerate(panels, start=1):
            self._add_histogram(fig, report, col, showlegend=col == 1)
            fig.add_vline(x=band.w0, line=dict(color="gold", width=2), row=1, col=col)
            if band.rho > 0:
                for edge in (band.lower, band.upper):
                    fig.add_vline(x=edge, line=dict(color="gold", width=1, dash="dash"), row=1, col=col)
            fig.update_xaxes(title_text=f"Score ({report.score_kind})", row=1, col=col)

        metric = before.score if after is None else after.score
        fig.update_layout(
            title=f"<b>{name}</b> | w0={band.w0:.4f} rho={band.rho:.4f} | score: {metric:.2f}",
            template='plotly_dark',
            barmode='overlay',
            height=500,
            showlegend=True,
        )
        fig.update_yaxes(title_text="Samples", row=1, col=1)

        file_path = os.path.join(self.charts_output_dir, f"{name}.html")
        fig.write_html(file_path)
        logger.info(f"Chart saved successfully to: {file_path}")

        if self.show_plot:
            fig.show()
        return file_path
