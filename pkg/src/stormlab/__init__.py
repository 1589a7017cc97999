"""Semi-supervised adverse-weather restoration guided by vision-language judges.

Submodules:

- ``assessment``: visibility scores from rating logits, ensembles, VLM-Vis
- ``pseudodb``: the pseudo-label database and its update rules
- ``weatherprompt``: learnable weather prompts and the prompt loss
- ``semantics``: description pairs and the description-contrast loss
- ``objectives``: pixel and feature losses, weighted total
- ``trainer``: mean-teacher loop, rounds, checkpoints
- ``cli``: the ``stormlab`` command
"""

from .core import (ImageSample, LabeledPair, LossWeights, Source, TrainConfig, UnlabeledSet,
                   Weather, load_config, parse_config)
from .errors import StormlabError

__all__ = [
    "ImageSample", "LabeledPair", "LossWeights", "Source", "StormlabError", "TrainConfig",
    "UnlabeledSet", "Weather", "load_config", "parse_config",
]
__version__ = "0.1.0"
