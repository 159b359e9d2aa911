"""Small shared test fixtures that wrap package objects."""

from types import SimpleNamespace

from ripnerf.data import AnalyticField


class AnalyticModel:
    """Adapter so the renderer can march the analytic toy field."""

    def __init__(self, primitives, radius=1.5):
        self.field = AnalyticField(primitives)
        self.cfg = SimpleNamespace(scene_radius=radius)

    def forward(self, means, covs, directions=None, need_color=True):
        dens, col = self.field(means)
        return dens, col, None
