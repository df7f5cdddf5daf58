# Data-dependent feature banks for images and point clouds
