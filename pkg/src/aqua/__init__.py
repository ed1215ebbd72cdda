"""Self-supervised SAR water segmentation with optical water-index teachers."""
