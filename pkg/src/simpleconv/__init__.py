"""A plain 1D CNN and its training and evaluation pipeline for motor-imagery EEG."""
