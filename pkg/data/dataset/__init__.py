"""CIFAR-10 ingestion, augmentation and batching."""
