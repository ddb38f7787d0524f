from .lattice import Lattice, LatticeArc, LatticeError, lattice_best_path
from .lm import NGramLM, load_arpa, lm_score, write_arpa
from .search import BeamConfig, DecodeResult, SearchError, SearchNetwork, beam_search, lookahead_table
from .tree import PrefixTree, build_prefix_tree
from .wer import WerReport, edit_counts, wer

__all__ = [
    "BeamConfig",
    "DecodeResult",
    "Lattice",
    "LatticeArc",
    "LatticeError",
    "NGramLM",
    "PrefixTree",
    "SearchError",
    "SearchNetwork",
    "WerReport",
    "beam_search",
    "build_prefix_tree",
    "edit_counts",
    "lattice_best_path",
    "lm_score",
    "load_arpa",
    "lookahead_table",
    "wer",
    "write_arpa",
]
