"""Single-stage factored hybrid HMM toolkit: full-sum training, alignment,
factored Viterbi training and prefix-tree decoding on desk-scale corpora."""

__version__ = "0.1.0"
