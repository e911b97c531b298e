"""masklab: a desk-scale lab for mask-based speech enhancement trained
against a frozen neural speech-quality judge.

Submodules:
    dsp        STFT/ISTFT, mel projection, spectrogram rendering
    autodiff   minimal reverse-mode engine on numpy
    layers     dense/conv/GRU/attention building blocks
    optim      Adam and the warmup/decay schedule
    predictor  non-intrusive quality predictor
    enhancer   dual-path masking enhancer and losses
    metrics    SI-SDR, STOI, LSD, hallucination localization
    synthdata  synthetic corpus generator
    sweep      alpha-sweep experiment driver and reports
    service    listening-test HTTP backend
"""
from ._alloc import tune_allocator

tune_allocator()

__version__ = "0.1.0"
