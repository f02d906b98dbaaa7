"""SVG maps of which image patches ended up fused together."""
import colorsys
from xml.sax.saxutils import escape

import numpy as np

GOLDEN = 0.6180339887498949


def palette(k):
    """Deterministic, well-spread hex colour for group ``k``."""
    hue = (k * GOLDEN) % 1.0
    sat = 0.65 + 0.3 * ((k * 7) % 3) / 2
    val = 0.95 - 0.25 * ((k * 5) % 2)
    r, g, b = colorsys.hsv_to_rgb(hue, sat, val)
    return "#{:02x}{:02x}{:02x}".format(round(r * 255), round(g * 255), round(b * 255))


def patch_assignment(plans, n_tokens, cls_present=True, upto=None):
    """Final token index of every image patch after applying ``plans[:upto+1]``.

    Patch ``p`` starts as token ``p + 1`` when a class token is present.
    """
    offset = 1 if cls_present else 0
    current = np.arange(offset, n_tokens, dtype=np.int64)
    stop = len(plans) if upto is None else upto + 1
    for plan in plans[:stop]:
        current = plan.assignment()[current]
    return current


def relabel(assign):
    """Renumber groups 0..k-1 in order of first appearance (raster order)."""
    labels, out = {}, np.empty_like(assign)
    for i, g in enumerate(assign.tolist()):
        out[i] = labels.setdefault(g, len(labels))
    return out


def group_svg(assign, grid, cell=24, title=None, image=None):
    """Render a ``grid`` x ``grid`` patch map; patches sharing a group share a border colour.

    ``image`` (H x W x 3 in [0, 1]) optionally fills each cell with its mean colour.
    """
    labels = relabel(np.asarray(assign))
    size = grid * cell
    parts = [
        '<?xml version="1.0" encoding="UTF-8"?>',
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" '
        f'viewBox="0 0 {size} {size}">',
    ]
    if title:
        parts.append(f"<title>{escape(title)}</title>")
    means = None
    if image is not None:
        img = np.asarray(image, dtype=np.float64)
        p = img.shape[0] // grid
        means = img[: grid * p, : grid * p].reshape(grid, p, grid, p, -1).mean(axis=(1, 3))
    for idx, lab in enumerate(labels.tolist()):
        row, col = divmod(idx, grid)
        fill = "#ffffff"
        if means is not None:
            rgb = np.clip(np.round(means[row, col, :3] * 255), 0, 255).astype(int)
            fill = "#{:02x}{:02x}{:02x}".format(*rgb)
        parts.append(
            f'<rect x="{col * cell + 1}" y="{row * cell + 1}" width="{cell - 2}" '
            f'height="{cell - 2}" fill="{fill}" stroke="{palette(lab)}" stroke-width="2" '
            f'data-group="{lab}"/>'
        )
    parts.append("</svg>")
    return "\n".join(parts) + "\n"
