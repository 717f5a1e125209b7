"""
lstransducer package.

Label-synchronous neural transducer toolkit: autodiff core, AIF/CIF alignment,
CTC prefix scoring, streaming joint beam search and text-only adaptation.
"""

__version__ = "1.0.0"
