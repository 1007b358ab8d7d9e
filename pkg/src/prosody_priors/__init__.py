"""Toy fine-grained prosody VAEs with autoregressive and flow priors over phoneme latents."""

__version__ = "0.1.0"
