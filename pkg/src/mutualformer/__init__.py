"""Desk-scale MutualFormer for RGB-D salient object detection."""
