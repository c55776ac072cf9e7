"""From-scratch BERT-family encoders and SST-5 fine-grained sentiment fine-tuning."""

__version__ = "0.1.0"
