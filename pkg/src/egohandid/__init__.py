"""Egocentric hand identification toolkit.

Subpackages cover the full pipeline: synthetic RGB-D gesture corpora
(`synthgen`), manifests and clip storage (`corpus`), ablated input variants
and preprocessing (`ablate`), the video classifier family (`net`), training
objectives (`train`), and sliding-window evaluation (`evalkit`). The `cli`
module binds them into reproducible experiments.
"""

__version__ = "0.1.0"
