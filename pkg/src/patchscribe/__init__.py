"""Patch captioning pipeline: turns georeferenced image patches plus
OpenStreetMap context into refined image-caption training shards."""

__version__ = "0.1.0"
