"""Desk-scale RGB-D salient object detection around the fusion module."""
