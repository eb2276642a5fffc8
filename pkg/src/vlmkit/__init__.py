"""Data-pipeline and checkpoint tools for vision-language model training."""
from .geometry import TileConfig, TileMode, TilePlan, build_ratio_table, extract_tiles, plan_tiles
from .ppl import NGramScorer, filter_corpus, perplexity, score_corpus
from .soup import Checkpoint, average_soup, greedy_soup, maximum_soup, weighted_average
from .tensorio import read_container, write_container
from .tensorops import fuse_features, pixel_shuffle, pixel_unshuffle

__version__ = "0.1.0"
