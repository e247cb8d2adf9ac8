"""Single-view RGB-D scaffolding plus guidance-driven latent field training
for full-orbit 3D object synthesis."""

__version__ = "0.1.0"
