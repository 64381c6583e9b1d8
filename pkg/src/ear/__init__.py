# Synthetic ear acoustics and training-pair augmentation
