# Psychoacoustically constrained patchwork watermark
