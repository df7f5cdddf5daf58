# Auto-context facade segmentation package
