"""Configuration, file formats, run manifests and visual export."""

from .config import SCHEMA, SECTIONS, ConfigError, RunConfig, parse_config, parse_override, validate
from .export import export_visuals, isosurface, mesh_text, mip, read_mesh
from .formats import (FormatError, atomic_write, load_framestack, load_volume, read_frame_header, sha256_file,
                      store_framestack, store_volume)
from .manifest import DependencyError, RunManifest

__all__ = [
    "SCHEMA", "SECTIONS", "ConfigError", "DependencyError", "FormatError", "RunConfig", "RunManifest",
    "atomic_write", "export_visuals", "isosurface", "load_framestack", "load_volume", "mesh_text", "mip",
    "parse_config", "parse_override", "read_frame_header", "read_mesh", "sha256_file", "store_framestack",
    "store_volume", "validate",
]
