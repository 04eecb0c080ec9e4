"""Few-step denoising-diffusion GAN voice conversion on mel-cepstral features."""

__version__ = "0.1.0"
