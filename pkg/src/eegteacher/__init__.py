"""Teacher-pretrained EEG transformer: signal prep, teacher features, training, evaluation."""

__version__ = "0.1.0"
