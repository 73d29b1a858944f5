"""plmcast - forecasting with a frozen language-model branch fused into a patch transformer."""

__version__ = "0.1.0"
