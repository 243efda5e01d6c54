from typing import Optional, Sequence

import numpy as np

from general_tools.file_utils import write_file
from mesh_tools.mesh import Mesh, position

EDGE_SAMPLES = 16
CANVAS_SIZE = 800.0
MARGIN = 20.0


def _edge_points(mesh: Mesh, element: int) -> np.ndarray:
    """
    Closed polyline around <element>, EDGE_SAMPLES points per edge.
    """
    t = np.linspace(-1.0, 1.0, EDGE_SAMPLES, endpoint=False)
    ones = np.ones_like(t)
    sides = [np.column_stack([t, -ones]), np.column_stack([ones, t]),
             np.column_stack([-t, ones]), np.column_stack([-ones, -t])]
    return position(mesh, element, np.concatenate(sides))


def _fill_colour(value: float, scale: float) -> str:
    if not np.isfinite(value):
        return '#cccccc'
    if value <= 0.0:
        return '#d62728'
    shade = int(255 * (1.0 - min(1.0, value / scale)))
    return f'#{shade:02x}{255:02x}{shade:02x}'


def mesh_to_svg(mesh: Mesh, element_values: Optional[Sequence[float]] = None) -> str:
    """
    Renders the element edges; with <element_values> (e.g. certified lower bounds
        of det A) each element is filled: red when not positive, greener when larger.
    """
    polylines = [_edge_points(mesh, e) for e in range(mesh.num_elements)]
    every = np.concatenate(polylines)
    low, high = every.min(axis=0), every.max(axis=0)
    scale = (CANVAS_SIZE - 2 * MARGIN) / max(float(np.max(high - low)), 1.0e-300)
    width, height = (high - low) * scale + 2 * MARGIN

    values = None if element_values is None else np.asarray(element_values, dtype=float)
    positive = values[np.isfinite(values) & (values > 0)] if values is not None else np.array([])
    value_scale = float(positive.max()) if positive.size else 1.0

    lines = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width:.1f}" height="{height:.1f}">']
    for e, points in enumerate(polylines):
        # flip y so that the picture is not mirrored
        xs = (points[:, 0] - low[0]) * scale + MARGIN
        ys = height - ((points[:, 1] - low[1]) * scale + MARGIN)
        coords = ' '.join(f'{x:.2f},{y:.2f}' for x, y in zip(xs, ys))
        fill = 'none' if values is None else _fill_colour(values[e], value_scale)
        lines.append(f'  <polygon points="{coords}" fill="{fill}" stroke="black" stroke-width="0.8"/>')
    lines.append('</svg>')
    return '\n'.join(lines) + '\n'


def save_svg(mesh: Mesh, path: str, element_values: Optional[Sequence[float]] = None) -> None:
    write_file(path, mesh_to_svg(mesh, element_values))
