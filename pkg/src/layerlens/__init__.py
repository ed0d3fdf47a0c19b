"""Train small conv nets end-to-end or cascade (layer-wise), explain them with
saliency / Grad-CAM / LIME at every tap, and score how well the explanations
and a frozen-backbone detector localise ground-truth boxes."""

__version__ = "0.1.0"
