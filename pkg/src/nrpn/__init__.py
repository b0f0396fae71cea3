"""RPN / negative-RPN co-training toolkit."""
__version__ = "0.1.0"
