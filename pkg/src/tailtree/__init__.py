"""Tree-structured Huesler-Reiss extremal dependence models with latent nodes."""
