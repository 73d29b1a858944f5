"""Domain vocabularies and run-configuration schemas."""
