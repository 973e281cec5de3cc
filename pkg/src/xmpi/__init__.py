"""Desk-scale simulation and reconstruction of MHz X-ray multi-projection imaging.

Subpackages
-----------
geometry     crystal splitter and beamlet geometry, flux factors
phantom      analytic droplet-collision absorption fields
forward      projection, SASE shot statistics, detector and timing model
preprocess   flat-field, denoising, registration, harmonization, segmentation
autodiff     small reverse-mode tensor engine, layers and Adam
recon        implicit 4D field, rendering, adversarial training, extraction
io           configuration, file formats, manifests and visual export
"""

__version__ = "0.1.0"
